#pragma once

// Layered denoising objective, Adam, the per-step pipeline (pyramids, noising,
// cropping, forward, loss, update) and the training loop with metrics and
// checkpoints.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "layerdiff/checkpoint.hpp"
#include "layerdiff/crop.hpp"
#include "layerdiff/data.hpp"
#include "layerdiff/model_config.hpp"
#include "layerdiff/noise.hpp"
#include "layerdiff/numerics/ops.hpp"
#include "layerdiff/schedule.hpp"
#include "layerdiff/unet.hpp"

namespace layerdiff {

class TrainingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class WeightPreset { uniform, inverse_area, area };

inline WeightPreset weight_preset_from_string(const std::string& s) {
    if (s == "uniform") return WeightPreset::uniform;
    if (s == "inverse_area") return WeightPreset::inverse_area;
    if (s == "area") return WeightPreset::area;
    throw ConfigError("unknown loss weight preset '" + s + "' (expected uniform, inverse_area or area)");
}

inline const char* to_string(WeightPreset p) {
    switch (p) {
        case WeightPreset::uniform: return "uniform";
        case WeightPreset::inverse_area: return "inverse_area";
        default: return "area";
    }
}

/// w_j = 1, 4^-j or 4^j for level j counted from the base.
inline std::vector<double> preset_weights(WeightPreset p, int num_levels) {
    std::vector<double> w;
    for (int j = 0; j < num_levels; ++j) {
        const double a = std::pow(4.0, j);
        w.push_back(p == WeightPreset::uniform ? 1.0 : p == WeightPreset::inverse_area ? 1.0 / a : a);
    }
    return w;
}

struct TrainConfig {
    int batch_size = 16;
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int warmup_steps = 100;
    double grad_clip = 1.0;  // global norm cap; 0 disables
    int total_steps = 1000;
    WeightPreset weight_preset = WeightPreset::uniform;
    std::vector<double> loss_weights;  // explicit per-level weights override the preset
    bool crop = false;
    NoiseMode noise_mode = NoiseMode::sinc;
    std::optional<ShiftConfig> shift;  // defaults to ShiftConfig::defaults(levels)
    std::uint64_t seed = 0;
    int log_every = 1;
    int checkpoint_every = 0;  // 0: only the final checkpoint

    std::vector<double> weights(int num_levels) const {
        if (loss_weights.empty()) return preset_weights(weight_preset, num_levels);
        if (static_cast<int>(loss_weights.size()) != num_levels) {
            throw ConfigError("train config: " + std::to_string(loss_weights.size()) + " loss weights for " +
                              std::to_string(num_levels) + " levels");
        }
        return loss_weights;
    }

    ShiftConfig shift_config(int num_levels) const {
        ShiftConfig s = shift ? *shift : ShiftConfig::defaults(num_levels);
        if (static_cast<int>(s.shifts.size()) != num_levels) {
            throw ConfigError("train config: " + std::to_string(s.shifts.size()) + " schedule shifts for " +
                              std::to_string(num_levels) + " levels");
        }
        return s;
    }

    void validate(int num_levels) const {
        auto fail = [](const std::string& m) { throw ConfigError("train config: " + m); };
        if (batch_size < 1) fail("batch_size must be >= 1");
        if (!(lr >= 0)) fail("lr must be >= 0");
        if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) fail("betas must lie in [0, 1)");
        if (!(eps > 0)) fail("eps must be positive");
        if (warmup_steps < 0) fail("warmup_steps must be >= 0");
        if (!(grad_clip >= 0)) fail("grad_clip must be >= 0");
        if (total_steps < 0) fail("total_steps must be >= 0");
        if (log_every < 1) fail("log_every must be >= 1");
        if (checkpoint_every < 0) fail("checkpoint_every must be >= 0");
        const auto w = weights(num_levels);
        bool any = false;
        for (double v : w) {
            if (!(v >= 0)) fail("loss weights must be >= 0");
            any = any || v > 0;
        }
        if (!any) fail("at least one loss weight must be positive");
        try {
            shift_config(num_levels).validate();
        } catch (const std::invalid_argument& e) {
            fail(e.what());
        }
    }

    /// Learning rate after linear warmup; `step` counts from 0.
    double lr_at(int step) const {
        if (warmup_steps <= 0) return lr;
        return lr * std::min(1.0, static_cast<double>(step + 1) / warmup_steps);
    }
};

inline void to_json(json& j, const TrainConfig& c) {
    j = json{{"batch_size", c.batch_size},
             {"lr", c.lr},
             {"beta1", c.beta1},
             {"beta2", c.beta2},
             {"eps", c.eps},
             {"warmup_steps", c.warmup_steps},
             {"grad_clip", c.grad_clip},
             {"total_steps", c.total_steps},
             {"weight_preset", to_string(c.weight_preset)},
             {"loss_weights", c.loss_weights},
             {"crop", c.crop},
             {"noise_mode", to_string(c.noise_mode)},
             {"seed", c.seed},
             {"log_every", c.log_every},
             {"checkpoint_every", c.checkpoint_every}};
    if (c.shift) {
        j["shifts"] = c.shift->shifts;
        j["shift_multiplier"] = c.shift->multiplier;
    }
}

inline void from_json(const json& j, TrainConfig& c) {
    const std::string where = "train";
    reject_unknown_keys(j,
                        {"batch_size", "lr", "beta1", "beta2", "eps", "warmup_steps", "grad_clip", "total_steps",
                         "weight_preset", "loss_weights", "crop", "noise_mode", "seed", "log_every",
                         "checkpoint_every", "shifts", "shift_multiplier"},
                        where);
    read_key(j, "batch_size", c.batch_size, where);
    read_key(j, "lr", c.lr, where);
    read_key(j, "beta1", c.beta1, where);
    read_key(j, "beta2", c.beta2, where);
    read_key(j, "eps", c.eps, where);
    read_key(j, "warmup_steps", c.warmup_steps, where);
    read_key(j, "grad_clip", c.grad_clip, where);
    read_key(j, "total_steps", c.total_steps, where);
    read_key(j, "loss_weights", c.loss_weights, where);
    read_key(j, "crop", c.crop, where);
    read_key(j, "seed", c.seed, where);
    read_key(j, "log_every", c.log_every, where);
    read_key(j, "checkpoint_every", c.checkpoint_every, where);
    std::string s;
    if (j.contains("weight_preset")) {
        read_key(j, "weight_preset", s, where);
        c.weight_preset = weight_preset_from_string(s);
    }
    if (j.contains("noise_mode")) {
        read_key(j, "noise_mode", s, where);
        try {
            c.noise_mode = noise_mode_from_string(s);
        } catch (const std::invalid_argument& e) {
            throw ConfigError(e.what());
        }
    }
    if (j.contains("shifts") || j.contains("shift_multiplier")) {
        ShiftConfig sc = c.shift.value_or(ShiftConfig{});
        read_key(j, "shifts", sc.shifts, where);
        read_key(j, "shift_multiplier", sc.multiplier, where);
        c.shift = sc;
    }
}

/// Per-level loss values and their weighted total.
template <typename T>
struct LayeredLoss {
    Var<T> total;
    std::vector<double> per_level;  // unweighted MSE, 0 where the level has no output
};

/// sum_j w_j * mean((pred_j - target_j)^2). Predictions and targets are
/// base-up; levels whose prediction is empty are skipped.
template <typename T>
LayeredLoss<T> layered_loss(const std::vector<Var<T>>& predictions, const std::vector<Tensor<T>>& targets,
                            const std::vector<double>& weights) {
    if (predictions.size() != targets.size() || predictions.size() != weights.size()) {
        throw ShapeError("layered_loss: " + std::to_string(predictions.size()) + " predictions, " +
                         std::to_string(targets.size()) + " targets, " + std::to_string(weights.size()) + " weights");
    }
    std::vector<Var<T>> terms;
    std::vector<double> w;
    LayeredLoss<T> out;
    out.per_level.assign(predictions.size(), 0.0);
    for (std::size_t j = 0; j < predictions.size(); ++j) {
        if (!predictions[j]) continue;
        if (predictions[j].shape() != targets[j].shape()) {
            throw ShapeError("layered_loss: level " + std::to_string(j) + " prediction " +
                             shape_str(predictions[j].shape()) + " vs target " + shape_str(targets[j].shape()));
        }
        terms.push_back(ops::mse(predictions[j], targets[j]));
        out.per_level[j] = static_cast<double>(terms.back().value()[0]);
        w.push_back(weights[j]);
    }
    if (terms.empty()) throw ShapeError("layered_loss: no predictions");
    out.total = ops::weighted_sum(terms, w);
    return out;
}

/// Overload taking a top-down ImagePyramid of batched targets ([N,C,H,W]
/// per level, highest resolution first).
template <typename T>
LayeredLoss<T> layered_loss(const std::vector<Var<T>>& predictions, const ImagePyramid<T>& targets,
                            const std::vector<double>& weights) {
    return layered_loss(predictions, std::vector<Tensor<T>>(targets.levels.rbegin(), targets.levels.rend()), weights);
}

/// Everything a step needs besides parameters; a pure function of the batch,
/// the step seed and the configs.
template <typename T>
struct StepInputs {
    std::vector<Tensor<T>> latents;  // base-up, [N,C,H,W]; empty tensor where the model takes no input
    std::vector<Tensor<T>> targets;  // base-up
    std::vector<double> t;
    std::vector<std::vector<int>> tokens;
    std::optional<CropPlan> crop;
};

inline std::uint64_t step_seed(std::uint64_t seed, std::int64_t step) {
    return derive_seed(derive_seed(seed, "train_step"), static_cast<std::uint64_t>(step));
}

template <typename T>
StepInputs<T> make_step_inputs(const ModelConfig& mc, const TrainConfig& tc, const Tensor<T>& images,
                               const std::vector<std::vector<int>>& tokens, std::uint64_t seed) {
    const int levels = mc.num_levels();
    const int top = mc.top_level();
    const std::int64_t n = images.dim(0);
    if (images.rank() != 4 || images.dim(1) != mc.image_channels || images.dim(2) != mc.top_resolution() ||
        images.dim(3) != mc.top_resolution()) {
        throw ShapeError("train step: batch " + shape_str(images.shape()) + " does not match top resolution " +
                         std::to_string(mc.top_resolution()));
    }
    if (static_cast<std::int64_t>(tokens.size()) != n) throw ShapeError("train step: one token list per image");
    const ShiftConfig shift = tc.shift_config(levels);

    StepInputs<T> in;
    in.tokens = tokens;
    Rng trng(derive_seed(seed, "t"));
    for (std::int64_t i = 0; i < n; ++i) in.t.push_back(trng.uniform(kScheduleTMin, kScheduleTMax));

    std::vector<std::vector<Tensor<T>>> z(static_cast<std::size_t>(levels)), x(static_cast<std::size_t>(levels));
    for (std::int64_t i = 0; i < n; ++i) {
        const Tensor<T> x0 = take_sample(images, i);
        const auto img = build_image_pyramid(x0, levels);
        const auto eps0 = sample_gaussian<T>(mc.image_channels, mc.top_resolution(), mc.top_resolution(),
                                             derive_seed(seed, static_cast<std::uint64_t>(i)));
        const auto noise = build_noise_pyramid(eps0, levels, tc.noise_mode);
        for (int j = 0; j < levels; ++j) {
            const auto k = static_cast<std::size_t>(top - j);
            const auto p = shifted_point(in.t[static_cast<std::size_t>(i)], j, shift);
            const Tensor<T>& xi = img.levels[k];
            const Tensor<T>& ei = noise.levels[k].data;
            Tensor<T> zi(xi.shape());
            for (std::size_t q = 0; q < zi.size(); ++q) {
                zi[q] = static_cast<T>(p.alpha * static_cast<double>(xi[q]) + p.sigma * static_cast<double>(ei[q]));
            }
            z[static_cast<std::size_t>(j)].push_back(std::move(zi));
            x[static_cast<std::size_t>(j)].push_back(xi);
        }
    }
    if (tc.crop) {
        Rng crng(derive_seed(seed, "crop"));
        in.crop = make_crop_plan(crng, mc.base_resolution, levels);
    }
    for (int j = 0; j < levels; ++j) {
        auto zl = stack<T>(z[static_cast<std::size_t>(j)]);
        auto xl = stack<T>(x[static_cast<std::size_t>(j)]);
        if (in.crop && j >= 1) {
            const Rect& r = in.crop->image_rects[static_cast<std::size_t>(j)];
            zl = crop_tensor(zl, r);
            xl = crop_tensor(xl, r);
        }
        in.latents.push_back(mc.has_input(j) ? std::move(zl) : Tensor<T>());
        in.targets.push_back(std::move(xl));
    }
    return in;
}

template <typename T>
LayeredLoss<T> step_loss(const LayeredModel<T>& model, const StepInputs<T>& in, const std::vector<double>& weights) {
    std::vector<Var<T>> latents;
    for (const auto& l : in.latents) latents.push_back(l.size() ? Var<T>::constant(l) : Var<T>());
    const auto preds = forward(model, latents, in.t, in.tokens, in.crop ? &*in.crop : nullptr);
    return layered_loss(preds, in.targets, weights);
}

/// Adam moments keyed by parameter name.
template <typename T>
struct AdamState {
    std::map<std::string, Tensor<T>> m, v;
    std::int64_t step = 0;
};

/// Global L2 norm of the gradients.
template <typename T>
double grad_norm(const ParamStore<T>& params) {
    double s = 0;
    for (const auto& [name, p] : params)
        for (T g : p.grad().values()) s += static_cast<double>(g) * static_cast<double>(g);
    return std::sqrt(s);
}

template <typename T>
void adam_update(ParamStore<T>& params, AdamState<T>& st, const TrainConfig& cfg, double lr, double clip_scale) {
    ++st.step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
    for (auto& [name, p] : params) {
        auto& value = p.mutable_value();
        auto& m = st.m.try_emplace(name, value.shape()).first->second;
        auto& v = st.v.try_emplace(name, value.shape()).first->second;
        const auto& g = p.grad();
        for (std::size_t i = 0; i < value.size(); ++i) {
            const double gi = static_cast<double>(g[i]) * clip_scale;
            const double mi = cfg.beta1 * m[i] + (1 - cfg.beta1) * gi;
            const double vi = cfg.beta2 * v[i] + (1 - cfg.beta2) * gi * gi;
            m[i] = static_cast<T>(mi);
            v[i] = static_cast<T>(vi);
            value[i] = static_cast<T>(value[i] - lr * (mi / bc1) / (std::sqrt(vi / bc2) + cfg.eps));
        }
    }
}

struct StepMetrics {
    std::int64_t step = 0;
    double wall_ms = 0;
    double loss_total = 0;
    std::vector<double> loss_levels;
    double grad_norm = 0;
    double lr = 0;

    /// Equal in everything except wall time.
    bool same_values(const StepMetrics& o) const {
        return step == o.step && loss_total == o.loss_total && loss_levels == o.loss_levels &&
               grad_norm == o.grad_norm && lr == o.lr;
    }
};

/// One optimisation step. All randomness derives from (cfg.seed, step).
template <typename T>
StepMetrics train_step(LayeredModel<T>& model, const Tensor<T>& images, const std::vector<std::vector<int>>& tokens,
                       std::int64_t step, const TrainConfig& cfg, AdamState<T>& adam) {
    const auto start = std::chrono::steady_clock::now();
    const std::uint64_t seed = step_seed(cfg.seed, step);
    const auto inputs = make_step_inputs(model.config, cfg, images, tokens, seed);
    const auto weights = cfg.weights(model.config.num_levels());
    const auto loss = step_loss(model, inputs, weights);
    const double total = static_cast<double>(loss.total.value()[0]);
    if (!std::isfinite(total)) {
        std::ostringstream os;
        os << "non-finite loss at step " << step << " (step seed " << seed << ", run seed " << cfg.seed << ")";
        throw TrainingError(os.str());
    }
    backward(loss.total, model.params);

    StepMetrics m;
    m.step = step;
    m.loss_total = total;
    m.loss_levels = loss.per_level;
    m.grad_norm = grad_norm(model.params);
    m.lr = cfg.lr_at(static_cast<int>(step));
    if (!std::isfinite(m.grad_norm)) {
        std::ostringstream os;
        os << "non-finite gradient at step " << step << " (step seed " << seed << ")";
        throw TrainingError(os.str());
    }
    const double clip = cfg.grad_clip > 0 && m.grad_norm > cfg.grad_clip ? cfg.grad_clip / m.grad_norm : 1.0;
    adam_update(model.params, adam, cfg, m.lr, clip);
    m.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    return m;
}

inline std::string metrics_header(int num_levels) {
    std::string h = "step,wall_ms,loss_total";
    for (int j = 0; j < num_levels; ++j) h += ",loss_level" + std::to_string(j);
    return h + ",grad_norm,lr";
}

inline std::string metrics_row(const StepMetrics& m) {
    std::string r = std::to_string(m.step) + "," + format_double(m.wall_ms) + "," + format_double(m.loss_total);
    for (double v : m.loss_levels) r += "," + format_double(v);
    return r + "," + format_double(m.grad_norm) + "," + format_double(m.lr);
}

inline std::vector<StepMetrics> read_metrics_csv(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error(path.string() + ": cannot open metrics file");
    std::string line;
    std::getline(is, line);
    std::vector<StepMetrics> out;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) f.push_back(cell);
        if (f.size() < 5) throw std::runtime_error(path.string() + ": malformed metrics row '" + line + "'");
        StepMetrics m;
        m.step = std::stoll(f[0]);
        m.wall_ms = std::stod(f[1]);
        m.loss_total = std::stod(f[2]);
        for (std::size_t i = 3; i + 2 < f.size(); ++i) m.loss_levels.push_back(std::stod(f[i]));
        m.grad_norm = std::stod(f[f.size() - 2]);
        m.lr = std::stod(f.back());
        out.push_back(m);
    }
    return out;
}

/// Model, optimiser state and step count, as stored in checkpoints.
template <typename T>
struct TrainState {
    LayeredModel<T> model;
    AdamState<T> adam;
    std::int64_t step = 0;
};

template <typename T>
Checkpoint<T> make_checkpoint(const TrainState<T>& st, const TrainConfig& cfg) {
    Checkpoint<T> ck;
    ck.model = st.model.config;
    ck.precision = precision_name<T>();
    ck.meta = json{{"step", st.step}, {"train", cfg}};
    for (const auto& [name, p] : st.model.params) ck.tensors.emplace(name, p.value());
    for (const auto& [name, t] : st.adam.m) ck.tensors.emplace("adam.m." + name, t);
    for (const auto& [name, t] : st.adam.v) ck.tensors.emplace("adam.v." + name, t);
    return ck;
}

template <typename T>
TrainState<T> state_from_checkpoint(const Checkpoint<T>& ck) {
    TrainState<T> st{LayeredModel<T>{ck.model, params_from_checkpoint(ck)}, {}, 0};
    const auto reference = build_model<T>(ck.model, 0);
    for (const auto& name : reference.params.names()) {
        if (!st.model.params.contains(name)) throw CheckpointError("checkpoint is missing parameter " + name);
    }
    for (const auto& [name, t] : ck.tensors) {
        if (name.rfind("adam.m.", 0) == 0) st.adam.m.emplace(name.substr(7), t);
        if (name.rfind("adam.v.", 0) == 0) st.adam.v.emplace(name.substr(7), t);
    }
    st.step = ck.meta.value("step", std::int64_t{0});
    st.adam.step = st.step;
    return st;
}

struct FitOptions {
    std::filesystem::path out_dir;  // empty: no files written
    bool quiet = true;
    std::function<void(const StepMetrics&)> on_step;
};

struct FitResult {
    std::vector<StepMetrics> metrics;
    std::vector<std::filesystem::path> checkpoints;
};

/// Runs steps state.step .. cfg.total_steps - 1. Batch order follows
/// batch_iter(seed, epoch) so a resumed run sees the same batches.
template <typename T>
FitResult fit(TrainState<T>& state, const Dataset<T>& dataset, const TrainConfig& cfg, const FitOptions& opt = {}) {
    const ModelConfig& mc = state.model.config;
    cfg.validate(mc.num_levels());
    FitResult result;
    if (state.step >= cfg.total_steps) return result;
    if (dataset.empty()) throw TrainingError("fit: dataset is empty");
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        if (dataset[i].image.dim(1) != mc.top_resolution() || dataset[i].image.dim(2) != mc.top_resolution()) {
            throw TrainingError("fit: example " + std::to_string(i) + " is " + shape_str(dataset[i].image.shape()) +
                                ", expected top resolution " + std::to_string(mc.top_resolution()));
        }
    }

    std::ofstream csv;
    const auto csv_path = opt.out_dir / "metrics.csv";
    if (!opt.out_dir.empty()) {
        std::error_code ec;
        std::filesystem::create_directories(opt.out_dir, ec);
        if (ec) throw TrainingError(opt.out_dir.string() + ": cannot create output directory: " + ec.message());
        std::vector<StepMetrics> kept;
        if (state.step > 0 && std::filesystem::exists(csv_path)) {
            for (const auto& m : read_metrics_csv(csv_path)) {
                if (m.step < state.step) kept.push_back(m);
            }
        }
        csv.open(csv_path, std::ios::trunc);
        if (!csv) throw TrainingError(csv_path.string() + ": cannot open for writing");
        csv << metrics_header(mc.num_levels()) << '\n';
        for (const auto& m : kept) csv << metrics_row(m) << '\n';
    }
    auto save = [&](const std::string& file) {
        if (opt.out_dir.empty()) return;
        const auto path = opt.out_dir / file;
        try {
            save_checkpoint(path.string(), make_checkpoint(state, cfg));
        } catch (const CheckpointError& e) {
            throw TrainingError(e.what());
        }
        result.checkpoints.push_back(path);
    };

    const auto bs = static_cast<std::size_t>(cfg.batch_size);
    const std::int64_t per_epoch = static_cast<std::int64_t>((dataset.size() + bs - 1) / bs);
    std::int64_t cached_epoch = -1;
    std::vector<std::vector<std::size_t>> batches;
    while (state.step < cfg.total_steps) {
        const std::int64_t epoch = state.step / per_epoch;
        if (epoch != cached_epoch) {
            batches = batch_iter(dataset.size(), bs, cfg.seed, static_cast<std::uint64_t>(epoch));
            cached_epoch = epoch;
        }
        const auto& idx = batches[static_cast<std::size_t>(state.step % per_epoch)];
        const auto [images, tokens] = collate(dataset, idx);
        const auto m = train_step(state.model, images, tokens, state.step, cfg, state.adam);
        ++state.step;
        result.metrics.push_back(m);
        if (opt.on_step) opt.on_step(m);
        if (csv.is_open() && (m.step % cfg.log_every == 0 || state.step == cfg.total_steps)) {
            csv << metrics_row(m) << '\n' << std::flush;
            if (!csv) throw TrainingError(csv_path.string() + ": write failed");
        }
        if (cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0) {
            save("ckpt_step" + std::to_string(state.step) + ".ckpt");
        }
    }
    save("last.ckpt");
    return result;
}

}  // namespace layerdiff
