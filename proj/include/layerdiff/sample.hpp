#pragma once

// DDIM-style sampling from a layered model, plus PNG grids of samples.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "layerdiff/data.hpp"
#include "layerdiff/image_io.hpp"
#include "layerdiff/noise.hpp"
#include "layerdiff/schedule.hpp"
#include "layerdiff/unet.hpp"

namespace layerdiff {

enum class SampleMode { per_level_latents, top_only };

inline const char* to_string(SampleMode m) { return m == SampleMode::per_level_latents ? "per-level" : "top-only"; }

inline SampleMode sample_mode_from_string(const std::string& s) {
    if (s == "per-level" || s == "per-level-latents") return SampleMode::per_level_latents;
    if (s == "top-only") return SampleMode::top_only;
    throw ConfigError("unknown sampler mode '" + s + "' (expected per-level or top-only)");
}

struct SamplerConfig {
    int num_steps = 256;
    SampleMode mode = SampleMode::per_level_latents;
    std::uint64_t seed = 0;
    std::string caption = "red circle center";
    bool stochastic = false;      // fresh pyramid noise every step (DDIM eta = 1)
    std::optional<ShiftConfig> shift;  // defaults to ShiftConfig::defaults(levels)

    void validate() const {
        if (num_steps < 2) throw ConfigError("sampler: num_steps must be >= 2");
    }
};

inline void to_json(json& j, const SamplerConfig& c) {
    j = json{{"num_steps", c.num_steps}, {"mode", to_string(c.mode)}, {"seed", c.seed},
             {"caption", c.caption},     {"stochastic", c.stochastic}};
}

inline void from_json(const json& j, SamplerConfig& c) {
    const std::string where = "sampler";
    reject_unknown_keys(j, {"num_steps", "mode", "seed", "caption", "stochastic"}, where);
    read_key(j, "num_steps", c.num_steps, where);
    read_key(j, "seed", c.seed, where);
    read_key(j, "caption", c.caption, where);
    read_key(j, "stochastic", c.stochastic, where);
    if (j.contains("mode")) {
        std::string s;
        read_key(j, "mode", s, where);
        c.mode = sample_mode_from_string(s);
    }
}

inline constexpr double kMinSigma = 1e-8;

/// Per-step diagnostics: latent standard deviation per level (base-up).
struct SampleTrace {
    std::vector<std::vector<double>> latent_std;
};

namespace detail {

template <typename T>
Tensor<T> combine(double a, const Tensor<T>& x, double b, const Tensor<T>& y) {
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = static_cast<T>(a * static_cast<double>(x[i]) + b * static_cast<double>(y[i]));
    }
    return out;
}

template <typename T>
Tensor<T> add_batch_axis(const Tensor<T>& t) {
    Shape s{1};
    s.insert(s.end(), t.shape().begin(), t.shape().end());
    return t.reshaped(s);
}

template <typename T>
double stddev(const Tensor<T>& t) {
    double mean = 0;
    for (const auto v : t.storage()) mean += static_cast<double>(v);
    mean /= static_cast<double>(t.size());
    double var = 0;
    for (const auto v : t.storage()) var += (static_cast<double>(v) - mean) * (static_cast<double>(v) - mean);
    return std::sqrt(var / static_cast<double>(t.size()));
}

/// Renormalised sinc pyramid of a [C,H,W] field, base-up.
template <typename T>
std::vector<Tensor<T>> noise_levels(const Tensor<T>& top, int levels) {
    const auto pyr = build_noise_pyramid(NoiseField<T>{top, 0, 0}, levels);
    std::vector<Tensor<T>> out;
    for (int j = 0; j < levels; ++j) out.push_back(pyr.levels[static_cast<std::size_t>(levels - 1 - j)].data);
    return out;
}

}  // namespace detail

/// Generates one image [C,H,W] in [-1, 1] at the top resolution.
template <typename T>
Tensor<T> sample(const LayeredModel<T>& model, const SamplerConfig& cfg, SampleTrace* trace = nullptr) {
    cfg.validate();
    const ModelConfig& mc = model.config;
    const int levels = mc.num_levels();
    const int top = mc.top_level();
    const ShiftConfig shift = cfg.shift ? *cfg.shift : ShiftConfig::defaults(levels);
    if (static_cast<int>(shift.shifts.size()) != levels) {
        throw ConfigError("sampler: shift config has " + std::to_string(shift.shifts.size()) + " levels, model has " +
                          std::to_string(levels));
    }
    const auto table = schedule_table(cfg.num_steps, shift);
    const std::vector<std::vector<int>> tokens{Vocabulary::tokenize(cfg.caption)};
    const bool joint = cfg.mode == SampleMode::per_level_latents && mc.layered;
    const auto res = mc.top_resolution();

    NoGradGuard no_grad;
    const auto eps0 = sample_gaussian<T>(mc.image_channels, res, res, derive_seed(cfg.seed, "eps0"));
    const auto eps_levels = detail::noise_levels(eps0.data, levels);
    const int last = cfg.num_steps - 1;

    // z[j] is [C,H,W]; levels the model does not read stay empty.
    std::vector<Tensor<T>> z(static_cast<std::size_t>(levels));
    for (int j = 0; j < levels; ++j) {
        if (!mc.has_input(j)) continue;
        if (j != top && !joint) continue;
        z[static_cast<std::size_t>(j)] =
            detail::combine(0.0, eps_levels[static_cast<std::size_t>(j)], table[static_cast<std::size_t>(j)][last].sigma,
                            eps_levels[static_cast<std::size_t>(j)]);
    }
    Tensor<T> x_top_prev(eps0.data.shape());
    Tensor<T> eps_top_prev = eps0.data;

    for (int s = last; s >= 0; --s) {
        const double t = table[0][static_cast<std::size_t>(s)].t;
        if (!joint && mc.layered) {
            // Lower inputs are rebuilt from the current top estimate.
            const auto eps_lv = detail::noise_levels(eps_top_prev, levels);
            for (int j = 0; j < top; ++j) {
                const auto& p = table[static_cast<std::size_t>(j)][static_cast<std::size_t>(s)];
                const auto xd = bilinear_downsample(x_top_prev, 1 << (top - j));
                z[static_cast<std::size_t>(j)] = detail::combine(p.alpha, xd, p.sigma, eps_lv[static_cast<std::size_t>(j)]);
            }
        }
        std::vector<Var<T>> latents(static_cast<std::size_t>(levels));
        for (int j = 0; j < levels; ++j) {
            if (mc.has_input(j)) {
                latents[static_cast<std::size_t>(j)] =
                    Var<T>::constant(detail::add_batch_axis(z[static_cast<std::size_t>(j)]));
            }
        }
        if (trace) {
            std::vector<double> sd;
            for (const auto& zj : z) sd.push_back(zj.size() ? detail::stddev(zj) : 0.0);
            trace->latent_std.push_back(std::move(sd));
        }
        const auto preds = forward(model, latents, {t}, tokens);

        std::optional<std::vector<Tensor<T>>> fresh;
        if (cfg.stochastic && s > 0) {
            const auto xi = sample_gaussian<T>(mc.image_channels, res, res,
                                               derive_seed(derive_seed(cfg.seed, "step_noise"), std::uint64_t(s)));
            fresh = detail::noise_levels(xi.data, levels);
        }
        for (int j = 0; j < levels; ++j) {
            const bool evolve = joint ? mc.has_output(j) : j == top;
            if (!evolve) continue;
            Tensor<T> xhat = preds[static_cast<std::size_t>(j)].value().reshaped(z[static_cast<std::size_t>(j)].shape());
            for (auto& v : xhat.storage()) v = std::clamp(v, T(-1), T(1));
            if (s == 0) {
                z[static_cast<std::size_t>(j)] = xhat;
                continue;
            }
            const auto& p = table[static_cast<std::size_t>(j)][static_cast<std::size_t>(s)];
            const auto& q = table[static_cast<std::size_t>(j)][static_cast<std::size_t>(s - 1)];
            const auto& zj = z[static_cast<std::size_t>(j)];
            const Tensor<T> eps_hat = detail::combine(1.0 / std::max(p.sigma, kMinSigma), zj,
                                                      -p.alpha / std::max(p.sigma, kMinSigma), xhat);
            if (j == top) {
                x_top_prev = xhat;
                eps_top_prev = eps_hat;
            }
            if (fresh) {
                const double ratio = (p.alpha * q.sigma) / (q.alpha * std::max(p.sigma, kMinSigma));
                const double c = q.sigma * std::sqrt(std::max(0.0, 1.0 - ratio * ratio));
                const double keep = std::sqrt(std::max(0.0, q.sigma * q.sigma - c * c));
                auto next = detail::combine(q.alpha, xhat, keep, eps_hat);
                const auto& xi = (*fresh)[static_cast<std::size_t>(j)];
                for (std::size_t i = 0; i < next.size(); ++i) next[i] = static_cast<T>(next[i] + c * xi[i]);
                z[static_cast<std::size_t>(j)] = std::move(next);
            } else {
                z[static_cast<std::size_t>(j)] = detail::combine(q.alpha, xhat, q.sigma, eps_hat);
            }
        }
    }
    return z[static_cast<std::size_t>(top)];
}

/// Rows of `images` laid out left to right with `gutter` white pixels
/// between cells.
template <typename T>
Rgb8 make_grid(const std::vector<std::vector<Tensor<T>>>& rows, int gutter) {
    if (rows.empty() || rows.front().empty()) throw std::invalid_argument("make_grid: nothing to lay out");
    const int h = static_cast<int>(rows.front().front().dim(1)), w = static_cast<int>(rows.front().front().dim(2));
    const int nr = static_cast<int>(rows.size());
    int nc = 0;
    for (const auto& r : rows) nc = std::max(nc, static_cast<int>(r.size()));
    Rgb8 grid{nc * w + (nc - 1) * gutter, nr * h + (nr - 1) * gutter, {}};
    grid.pixels.assign(static_cast<std::size_t>(grid.width) * grid.height * 3, 255);
    for (int r = 0; r < nr; ++r) {
        for (int c = 0; c < static_cast<int>(rows[static_cast<std::size_t>(r)].size()); ++c) {
            const auto cell = to_rgb8(rows[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)]);
            if (cell.width != w || cell.height != h) throw ShapeError("make_grid: cells differ in size");
            for (int y = 0; y < h; ++y) {
                const auto* src = cell.pixels.data() + static_cast<std::size_t>(y) * w * 3;
                auto* dst = grid.pixels.data() +
                            (static_cast<std::size_t>(r * (h + gutter) + y) * grid.width + c * (w + gutter)) * 3;
                std::copy(src, src + w * 3, dst);
            }
        }
    }
    return grid;
}

/// One row per caption, `per_caption` samples per row with seeds derived
/// from cfg.seed and the cell index. Writes the PNG and returns its pixels.
template <typename T>
Rgb8 sample_grid(const LayeredModel<T>& model, const std::vector<std::string>& captions, int per_caption,
                 const SamplerConfig& cfg, const std::string& path, int gutter = 2) {
    if (captions.empty()) throw std::invalid_argument("sample_grid: need at least one caption");
    if (per_caption < 1) throw std::invalid_argument("sample_grid: need at least one sample per caption");
    std::vector<std::vector<Tensor<T>>> rows;
    for (std::size_t r = 0; r < captions.size(); ++r) {
        rows.emplace_back();
        for (int c = 0; c < per_caption; ++c) {
            SamplerConfig sc = cfg;
            sc.caption = captions[r];
            sc.seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(r * static_cast<std::size_t>(per_caption) + c));
            rows.back().push_back(sample(model, sc));
        }
    }
    const auto grid = make_grid(rows, gutter);
    write_png(path, grid);
    return grid;
}

}  // namespace layerdiff
