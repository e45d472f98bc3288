#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "layerdiff/layerdiff.hpp"

namespace fs = std::filesystem;
using namespace layerdiff;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

/// Flag value, then $LAYERDIFF_OUTPUT_DIR, then the config value.
fs::path resolve_output_dir(const std::string& flag, const std::string& config_value) {
    if (!flag.empty()) return flag;
    if (const char* env = std::getenv(kOutputDirEnv); env && *env) return env;
    return config_value;
}

void write_json(const fs::path& path, const json& j) {
    std::ofstream os(path);
    os << j.dump(2) << '\n';
    if (!os) throw std::runtime_error(path.string() + ": write failed");
}

std::vector<double> parse_list(const std::string& s) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t used = 0;
            out.push_back(std::stod(item, &used));
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception&) {
            throw ConfigError("cannot parse '" + item + "' as a number in list '" + s + "'");
        }
    }
    if (out.empty()) throw ConfigError("empty list");
    return out;
}

std::string sci(double v, int digits = 3) {
    std::ostringstream os;
    os << std::scientific << std::setprecision(digits) << v;
    return os.str();
}

/// Lists every top-level model key whose value differs.
std::vector<std::string> config_differences(const ModelConfig& a, const ModelConfig& b) {
    const json ja = a, jb = b;
    std::vector<std::string> out;
    for (auto it = ja.begin(); it != ja.end(); ++it) {
        if (jb.at(it.key()) != it.value()) {
            out.push_back(it.key() + ": checkpoint " + jb.at(it.key()).dump() + ", config " + it.value().dump());
        }
    }
    return out;
}

// ---------------------------------------------------------------- gen-data

struct GenDataArgs {
    int n = 2048;
    int res = 32;
    std::uint64_t seed = 0;
    std::string out;
};

int cmd_gen_data(const GenDataArgs& a) {
    const fs::path dir = resolve_output_dir(a.out, "runs/default/data");
    const auto ds = generate_shapes<float>(a.n, a.res, a.seed);
    const auto hash = write_dataset(ds, dir, json{{"seed", a.seed}, {"generator", "shapes"}});
    std::cout << "wrote " << ds.size() << " examples at " << a.res << "x" << a.res << " to " << dir.string() << "\n"
              << "manifest hash " << hash << "\n";
    return kExitOk;
}

// ------------------------------------------------------------------- train

struct TrainArgs {
    std::string config;
    std::string resume;
    std::string stack_from;
    std::string out;
    std::optional<int> steps;
    std::optional<std::uint64_t> seed;
    std::optional<double> lr;
    std::optional<int> batch_size;
    std::optional<std::string> noise_mode;
    std::optional<std::string> weights;
    bool crop = false;
    bool quiet = false;
};

Dataset<float> load_training_data(const RunConfig& rc) {
    const int res = rc.model.top_resolution();
    if (rc.data.folder.empty()) return generate_shapes<float>(rc.data.count, res, rc.data.seed);
    return load_folder<float>(rc.data.folder, rc.data.captions_path(), res);
}

int cmd_train(const TrainArgs& a) {
    RunConfig rc = a.config.empty() ? RunConfig{} : load_run_config(a.config);
    if (a.steps) rc.train.total_steps = *a.steps;
    if (a.seed) rc.train.seed = *a.seed;
    if (a.lr) rc.train.lr = *a.lr;
    if (a.batch_size) rc.train.batch_size = *a.batch_size;
    if (a.crop) rc.train.crop = true;
    if (a.weights) rc.train.weight_preset = weight_preset_from_string(*a.weights);
    if (a.noise_mode) {
        try {
            rc.train.noise_mode = noise_mode_from_string(*a.noise_mode);
        } catch (const std::invalid_argument& e) {
            throw ConfigError(e.what());
        }
    }
    rc.validate();
    if (!a.resume.empty() && !a.stack_from.empty()) throw ConfigError("--resume and --stack-from are exclusive");
    const fs::path out = resolve_output_dir(a.out, rc.output_dir);

    std::optional<TrainState<float>> state;
    json stack_manifest;
    if (!a.resume.empty()) {
        auto st = state_from_checkpoint(load_checkpoint<float>(a.resume));
        const auto diffs = config_differences(rc.model, st.model.config);
        if (!diffs.empty()) {
            std::string msg = a.resume + ": checkpoint model does not match the config:";
            for (const auto& d : diffs) msg += "\n  " + d;
            throw ConfigError(msg);
        }
        state.emplace(std::move(st));
    } else if (!a.stack_from.empty()) {
        const auto donor = load_checkpoint<float>(a.stack_from);
        if (!donor.model.is_prefix_of(rc.model)) {
            auto msg = a.stack_from + ": checkpoint model is not a lower-level prefix of the config:";
            ModelConfig trimmed = rc.model;
            trimmed.hidden.resize(std::min(trimmed.hidden.size(), donor.model.hidden.size()));
            for (const auto& d : config_differences(trimmed, donor.model)) msg += "\n  " + d;
            if (donor.model.hidden.size() > rc.model.hidden.size()) msg += "\n  checkpoint has more levels than config";
            throw ConfigError(msg);
        }
        auto stacked = stack_init<float>(rc.model, donor.model, params_from_checkpoint(donor),
                                         derive_seed(rc.train.seed, "init"));
        stack_manifest = json{{"donor", a.stack_from}, {"copied", stacked.copied}, {"fresh", stacked.fresh}};
        state.emplace(TrainState<float>{std::move(stacked.model), {}, 0});
    } else {
        state.emplace(TrainState<float>{build_model<float>(rc.model, derive_seed(rc.train.seed, "init")), {}, 0});
    }

    const auto data = load_training_data(rc);
    fs::create_directories(out);
    json resolved = rc;
    resolved["output_dir"] = out.string();
    write_json(out / "config.json", resolved);
    if (!stack_manifest.is_null()) {
        write_json(out / "stack_manifest.json", stack_manifest);
        std::cout << "stacked from " << a.stack_from << ": " << stack_manifest["copied"].size() << " copied, "
                  << stack_manifest["fresh"].size() << " fresh parameters\n";
    }
    const auto flops = count_flops(rc.model).total;
    std::cout << "training " << state->model.params.total_elements() << " parameters (" << sci(double(flops))
              << " FLOPs/image), " << data.size() << " examples, steps " << state->step << ".." << rc.train.total_steps
              << " -> " << out.string() << "\n";

    FitOptions opt;
    opt.out_dir = out;
    opt.quiet = a.quiet;
    opt.on_step = [&](const StepMetrics& m) {
        if (a.quiet || (m.step % rc.train.log_every != 0 && m.step + 1 != rc.train.total_steps)) return;
        std::cout << "step " << m.step << " loss " << sci(m.loss_total, 4);
        for (std::size_t j = 0; j < m.loss_levels.size(); ++j) std::cout << " L" << j << " " << sci(m.loss_levels[j], 3);
        std::cout << " |g| " << sci(m.grad_norm, 3) << " lr " << sci(m.lr, 2) << " " << std::fixed
                  << std::setprecision(0) << m.wall_ms << "ms" << std::defaultfloat << "\n";
    };
    const auto result = fit(*state, data, rc.train, opt);
    std::cout << "finished at step " << state->step << "; " << result.checkpoints.size() << " checkpoint(s), last "
              << (out / "last.ckpt").string() << "\n";
    return kExitOk;
}

// ------------------------------------------------------------------ sample

struct SampleArgs {
    std::string ckpt;
    std::vector<std::string> captions{"red circle center"};
    int steps = 256;
    std::uint64_t seed = 0;
    std::string mode = "per-level";
    bool stochastic = false;
    int grid = 0;
    int gutter = 2;
    std::string out;
};

double mean_abs_pixel_delta(const Rgb8& a, const Rgb8& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.pixels.size(); ++i) s += std::abs(int(a.pixels[i]) - int(b.pixels[i]));
    return s / static_cast<double>(a.pixels.size());
}

int cmd_sample(const SampleArgs& a) {
    const auto ck = load_checkpoint<float>(a.ckpt);
    const LayeredModel<float> model{ck.model, params_from_checkpoint(ck)};
    for (const auto& name : build_model<float>(ck.model, 0).params.names()) {
        if (!model.params.contains(name)) throw CheckpointError(a.ckpt + ": missing parameter " + name);
    }
    SamplerConfig sc;
    sc.num_steps = a.steps;
    sc.seed = a.seed;
    sc.stochastic = a.stochastic;
    sc.caption = a.captions.front();
    if (ck.meta.contains("train")) sc.shift = ck.meta.at("train").get<TrainConfig>().shift_config(ck.model.num_levels());
    sc.validate();
    std::vector<SampleMode> modes;
    if (a.mode == "both") {
        modes = {SampleMode::per_level_latents, SampleMode::top_only};
    } else {
        modes = {sample_mode_from_string(a.mode)};
    }
    const fs::path target = a.out.empty() ? resolve_output_dir("", "runs/default") / "sample.png" : fs::path(a.out);
    if (target.has_parent_path()) fs::create_directories(target.parent_path());
    const bool grid = a.grid > 0 || a.captions.size() > 1;

    std::vector<Rgb8> images;
    for (const auto mode : modes) {
        sc.mode = mode;
        fs::path path = target;
        if (modes.size() > 1) {
            path = target.parent_path() / (target.stem().string() + "_" + to_string(mode) + target.extension().string());
        }
        if (grid) {
            images.push_back(sample_grid(model, a.captions, std::max(a.grid, 1), sc, path.string(), a.gutter));
        } else {
            images.push_back(to_rgb8(sample(model, sc)));
            write_png(path.string(), images.back());
        }
        std::cout << "wrote " << path.string() << " (" << to_string(mode) << ", " << sc.num_steps << " steps, seed "
                  << sc.seed << ")\n";
    }
    if (images.size() == 2) {
        std::cout << "mean pixel |delta| per-level vs top-only: " << std::fixed << std::setprecision(4)
                  << mean_abs_pixel_delta(images[0], images[1]) << " (0-255 scale)\n";
    }
    return kExitOk;
}

// ---------------------------------------------------------------- schedule

struct ScheduleArgs {
    int steps = 256;
    std::string shifts = "1,0.125,0.03125";
    double multiplier = 2.0;
    std::string out;
};

int cmd_schedule(const ScheduleArgs& a) {
    ShiftConfig sc;
    sc.shifts = parse_list(a.shifts);
    sc.multiplier = a.multiplier;
    try {
        sc.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    if (a.steps < 2) throw ConfigError("--steps must be >= 2");
    const auto table = schedule_table(a.steps, sc);
    const fs::path path = a.out.empty() ? resolve_output_dir("", "runs/default") / "schedule.csv" : fs::path(a.out);
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream os(path);
    write_schedule_csv(os, table);
    if (!os) throw std::runtime_error(path.string() + ": write failed");
    std::cout << "wrote " << path.string() << " (" << a.steps << " steps x " << sc.shifts.size() << " levels)\n";
    std::cout << "t";
    for (std::size_t j = 0; j < sc.shifts.size(); ++j) std::cout << "\tlambda_level" << j;
    std::cout << "\n";
    for (const int s : {0, a.steps / 4, a.steps / 2, 3 * a.steps / 4, a.steps - 1}) {
        std::cout << std::fixed << std::setprecision(4) << table[0][static_cast<std::size_t>(s)].t;
        for (const auto& lv : table) std::cout << "\t" << std::setprecision(4) << lv[static_cast<std::size_t>(s)].lambda;
        std::cout << std::defaultfloat << "\n";
    }
    return kExitOk;
}

// ------------------------------------------------------------------- flops

struct FlopsArgs {
    std::string config_a;
    std::string config_b;
    std::string csv;
};

struct CostModel {
    std::string label;
    FlopsReport report;
    std::optional<ModelConfig> model;
};

CostModel load_cost_model(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError(path + ": cannot open config file");
    json j;
    try {
        j = json::parse(is);
    } catch (const json::parse_error& e) {
        throw ConfigError(path + ": " + e.what());
    }
    try {
        if (j.contains("layers")) return {path, flops_of(layer_specs_from_json(j)), std::nullopt};
        const ModelConfig mc = j.contains("model") ? j.get<RunConfig>().model : j.get<ModelConfig>();
        return {path, count_flops(mc), mc};
    } catch (const ConfigError& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

int cmd_flops(const FlopsArgs& a) {
    std::vector<CostModel> models;
    if (a.config_a.empty()) {
        const ModelConfig mc;
        models.push_back({"default layered", count_flops(mc), mc});
    } else {
        models.push_back(load_cost_model(a.config_a));
    }
    if (!a.config_b.empty()) {
        models.push_back(load_cost_model(a.config_b));
    } else if (models[0].model && models[0].model->layered) {
        const auto single = single_resolution_of(*models[0].model);
        models.push_back({models[0].label + " (matched single-resolution)", count_flops(single), single});
    }

    std::ofstream csv;
    if (!a.csv.empty()) {
        const fs::path p(a.csv);
        if (p.has_parent_path()) fs::create_directories(p.parent_path());
        csv.open(p);
        if (!csv) throw std::runtime_error(a.csv + ": cannot open for writing");
        csv << "config,group,flops\n";
    }
    for (const auto& m : models) {
        std::cout << m.label << "\n";
        for (const auto& [group, f] : m.report.per_group) {
            std::cout << "  " << std::left << std::setw(10) << group << std::right << " " << sci(double(f)) << "\n";
            if (csv.is_open()) csv << m.label << "," << group << "," << f << "\n";
        }
        std::cout << "  total      " << sci(double(m.report.total)) << " (" << m.report.total << ")\n";
        if (csv.is_open()) csv << m.label << ",total," << m.report.total << "\n";
    }
    if (models.size() == 2 && models[1].report.total > 0) {
        const double ratio = double(models[0].report.total) / double(models[1].report.total);
        std::cout << "A/B = " << std::fixed << std::setprecision(2) << 100.0 * ratio << "% ("
                  << 100.0 * (1.0 - ratio) << "% fewer FLOPs in A)" << std::defaultfloat << "\n";
    }

    std::cout << "\nreference: published-scale configurations (estimator vs reported)\n";
    for (const auto& r : reference_flops()) {
        const double lay = double(count_flops(r.model).total);
        const double sgl = double(count_flops(single_resolution_of(r.model)).total);
        std::cout << "  " << r.name << "\n"
                  << "    estimated layered " << sci(lay) << ", single " << sci(sgl) << ", layered/single " << std::fixed
                  << std::setprecision(1) << 100.0 * lay / sgl << "%\n"
                  << "    reported  layered " << sci(r.reported_layered) << ", single " << sci(r.reported_single)
                  << ", layered/single " << 100.0 * r.reported_layered / r.reported_single << "%" << std::defaultfloat
                  << "\n";
        if (csv.is_open()) {
            csv << "reference " << r.name << ",estimated_layered," << std::llround(lay) << "\n"
                << "reference " << r.name << ",estimated_single," << std::llround(sgl) << "\n";
        }
    }
    std::cout << "  NOTE: the reported values (2.04e12 vs 2.20e12; 2.79e12 vs 3.24e12) are not reproducible here;\n"
                 "        they depend on unpublished hyperparameters (block counts, widths, attention placement).\n"
                 "        Only the direction, layered < single resolution, is checked.\n";
    return kExitOk;
}

// ------------------------------------------------------------ inspect-ckpt

int cmd_inspect(const std::string& path) {
    const auto header = read_checkpoint_header(path);
    const auto ck = load_checkpoint<double>(path);
    std::cout << "checkpoint " << path << "\n"
              << "precision " << header.value("precision", "?") << "\n"
              << "model " << json(ck.model).dump() << "\n";
    if (ck.meta.contains("step")) std::cout << "step " << ck.meta.at("step") << "\n";
    std::size_t width = 4;
    for (const auto& [name, t] : ck.tensors) width = std::max(width, name.size());
    std::cout << std::left << std::setw(static_cast<int>(width)) << "name" << "  shape" << "\n";
    std::int64_t params = 0;
    for (const auto& [name, t] : ck.tensors) {
        std::cout << std::left << std::setw(static_cast<int>(width)) << name << "  " << shape_str(t.shape()) << "\n";
        if (name.rfind("adam.", 0) != 0) params += static_cast<std::int64_t>(t.size());
    }
    std::cout << ck.tensors.size() << " tensors, " << params << " model parameters\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"layerdiff: layered multi-resolution diffusion\n"
                 "Output directory precedence: --out flag, then $" +
                 std::string(kOutputDirEnv) + ", then the config's output_dir (default runs/default).\n"
                 "Exit codes: 0 ok, 2 configuration error, 3 runtime error."};
    app.option_defaults()->always_capture_default();
    app.require_subcommand(1);

    GenDataArgs gen;
    auto* c_gen = app.add_subcommand("gen-data", "Render the synthetic shapes dataset to PNG + captions.tsv + manifest");
    c_gen->add_option("--n", gen.n, "Number of examples");
    c_gen->add_option("--res", gen.res, "Resolution (power of two >= 16)");
    c_gen->add_option("--seed", gen.seed, "Generator seed");
    c_gen->add_option("--out", gen.out, "Output directory (default $" + std::string(kOutputDirEnv) +
                                            " or runs/default/data)");

    TrainArgs tr;
    auto* c_train = app.add_subcommand("train", "Train a layered model; flags override the config file");
    c_train->add_option("--config", tr.config, "Run config JSON (built-in defaults when omitted)")->check(CLI::ExistingFile);
    c_train->add_option("--resume", tr.resume, "Continue from a checkpoint written by train")->check(CLI::ExistingFile);
    c_train->add_option("--stack-from", tr.stack_from, "Initialise shared lower levels from a smaller checkpoint")
        ->check(CLI::ExistingFile);
    c_train->add_option("--out", tr.out, "Output directory");
    c_train->add_option("--steps", tr.steps, "Override train.total_steps");
    c_train->add_option("--seed", tr.seed, "Override train.seed");
    c_train->add_option("--lr", tr.lr, "Override train.lr");
    c_train->add_option("--batch-size", tr.batch_size, "Override train.batch_size");
    c_train->add_option("--noise-mode", tr.noise_mode, "Override train.noise_mode (sinc | independent)");
    c_train->add_option("--weights", tr.weights, "Override train.weight_preset (uniform | inverse_area | area)");
    c_train->add_flag("--crop", tr.crop, "Enable random crops of the higher levels");
    c_train->add_flag("--quiet", tr.quiet, "Suppress per-step output");
    c_train->footer("Config keys and their defaults (unknown keys are rejected):\n" + json(RunConfig{}).dump(2) +
                    "\nPrecedence: command-line flags > config file > defaults.");

    SampleArgs sa;
    auto* c_sample = app.add_subcommand("sample", "Generate images from a checkpoint");
    c_sample->add_option("--ckpt", sa.ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
    c_sample->add_option("--caption", sa.captions, "Caption; repeat for a grid with one row per caption");
    c_sample->add_option("--steps", sa.steps, "Sampler steps");
    c_sample->add_option("--seed", sa.seed, "Sampler seed");
    c_sample->add_option("--mode", sa.mode, "Lower-level inputs: per-level | top-only | both")
        ->check(CLI::IsMember({"per-level", "top-only", "both"}));
    c_sample->add_flag("--stochastic", sa.stochastic, "Fresh pyramid noise each step");
    c_sample->add_option("--grid", sa.grid, "Samples per caption in a grid PNG (0: single image)");
    c_sample->add_option("--gutter", sa.gutter, "Grid gutter in pixels");
    c_sample->add_option("--out", sa.out, "Output PNG (default <output dir>/sample.png)");

    ScheduleArgs sch;
    auto* c_sched = app.add_subcommand("schedule", "Write the per-level shifted cosine schedule as CSV");
    c_sched->add_option("--steps", sch.steps, "Number of t grid points");
    c_sched->add_option("--shifts", sch.shifts, "Comma-separated per-level shifts, base level first");
    c_sched->add_option("--multiplier", sch.multiplier, "lambda += multiplier * ln(shift)");
    c_sched->add_option("--out", sch.out, "CSV path (default <output dir>/schedule.csv)");

    FlopsArgs fl;
    auto* c_flops = app.add_subcommand("flops", "Estimate per-image forward FLOPs and compare two configs");
    c_flops->add_option("--config-a", fl.config_a, "Run/model config or layer list JSON (default: built-in model)")
        ->check(CLI::ExistingFile);
    c_flops->add_option("--config-b", fl.config_b, "Second config (default: matched single-resolution of A)")
        ->check(CLI::ExistingFile);
    c_flops->add_option("--csv", fl.csv, "Also write config,group,flops rows here");

    std::string inspect_path;
    auto* c_inspect = app.add_subcommand("inspect-ckpt", "Print a checkpoint's header and name/shape table");
    c_inspect->add_option("checkpoint", inspect_path, "Checkpoint file")->required()->check(CLI::ExistingFile);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (c_gen->parsed()) return cmd_gen_data(gen);
        if (c_train->parsed()) return cmd_train(tr);
        if (c_sample->parsed()) return cmd_sample(sa);
        if (c_sched->parsed()) return cmd_schedule(sch);
        if (c_flops->parsed()) return cmd_flops(fl);
        if (c_inspect->parsed()) return cmd_inspect(inspect_path);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const ShapeError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        for (const auto& item : e.items()) std::cerr << "  " << item << "\n";
        return kExitRuntime;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitRuntime;
}
