#pragma once

// Layered U-Net. Every level has its own input convolution; levels above the
// base keep their features only as skips that rejoin the up path, while the
// base level runs a conventional down/mid/up trunk. Parameter names are
// "base.*" for the shared trunk and embeddings and "level{j}.*" per level,
// counted from the lowest resolution, so a taller model reuses a shorter
// model's names unchanged.

#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "layerdiff/crop.hpp"
#include "layerdiff/model_config.hpp"
#include "layerdiff/numerics/autograd.hpp"
#include "layerdiff/numerics/ops.hpp"
#include "layerdiff/rng.hpp"

namespace layerdiff {

inline constexpr int kPadToken = 0;

enum class LayerKind { conv, linear, group_norm, embedding, attention_core };

struct LayerSpec {
    std::string name;
    LayerKind kind = LayerKind::conv;
    int cin = 0;
    int cout = 0;
    int k = 0;
    int stride = 1;
    int h_out = 0;
    int w_out = 0;
    bool zero_init = false;

    /// Multiply-adds x2 for one image.
    std::uint64_t flops() const {
        const auto hw = static_cast<std::uint64_t>(h_out) * static_cast<std::uint64_t>(w_out);
        switch (kind) {
            case LayerKind::conv:
                return 2ull * hw * static_cast<std::uint64_t>(cin) * static_cast<std::uint64_t>(cout) *
                       static_cast<std::uint64_t>(k) * static_cast<std::uint64_t>(k);
            case LayerKind::linear:
                return 2ull * static_cast<std::uint64_t>(cin) * static_cast<std::uint64_t>(cout);
            case LayerKind::attention_core:
                // scores (QK) and weighted values (AV)
                return 2ull * hw * hw * static_cast<std::uint64_t>(cin) * 2ull;
            default:
                return 0;
        }
    }
};

namespace detail {

class ArchBuilder {
public:
    explicit ArchBuilder(const ModelConfig& c) : cfg_(c) {}

    void conv(const std::string& name, int cin, int cout, int k, int stride, int res_out, bool zero = false) {
        specs_.push_back(LayerSpec{name, LayerKind::conv, cin, cout, k, stride, res_out, res_out, zero});
    }
    void linear(const std::string& name, int in, int out) {
        specs_.push_back(LayerSpec{name, LayerKind::linear, in, out, 0, 1, 1, 1, false});
    }
    void norm(const std::string& name, int c, int res) {
        specs_.push_back(LayerSpec{name, LayerKind::group_norm, c, c, 0, 1, res, res, false});
    }
    void res_block(const std::string& name, int cin, int cout, int res) {
        norm(name + ".norm1", cin, res);
        conv(name + ".conv1", cin, cout, 3, 1, res);
        linear(name + ".emb", cfg_.embed_dim, cout);
        norm(name + ".norm2", cout, res);
        conv(name + ".conv2", cout, cout, 3, 1, res);
        if (cin != cout) conv(name + ".skip", cin, cout, 1, 1, res);
    }
    void attention(const std::string& name, int c, int res) {
        norm(name + ".norm", c, res);
        conv(name + ".q", c, c, 1, 1, res);
        conv(name + ".k", c, c, 1, 1, res);
        conv(name + ".v", c, c, 1, 1, res);
        specs_.push_back(LayerSpec{name + ".core", LayerKind::attention_core, c, c, 0, 1, res, res, false});
        conv(name + ".proj", c, c, 1, 1, res);
    }
    void embedding(const std::string& name, int vocab, int dim) {
        specs_.push_back(LayerSpec{name, LayerKind::embedding, vocab, dim, 0, 1, 1, 1, false});
    }

    std::vector<LayerSpec> take() { return std::move(specs_); }

private:
    const ModelConfig& cfg_;
    std::vector<LayerSpec> specs_;
};

inline std::string lvl(int j) { return "level" + std::to_string(j); }

}  // namespace detail

/// Every parameterised layer (plus attention cores) in forward order.
inline std::vector<LayerSpec> architecture(const ModelConfig& cfg) {
    cfg.validate();
    detail::ArchBuilder b(cfg);
    using detail::lvl;
    const int top = cfg.top_level();
    const int nb = cfg.blocks_per_level;
    const int img = cfg.image_channels;
    const int c0 = cfg.hidden[0];
    const int r0 = cfg.base_resolution;

    b.linear("base.time.fc1", cfg.time_features, cfg.embed_dim);
    b.linear("base.time.fc2", cfg.embed_dim, cfg.embed_dim);
    b.embedding("base.cond.embed", cfg.vocab_size, cfg.embed_dim);

    if (cfg.layered) {
        for (int j = top; j >= 1; --j) {
            const int c = cfg.hidden[static_cast<std::size_t>(j)];
            const int r = cfg.resolution(j);
            b.conv(lvl(j) + ".in_conv", img, c, 3, 1, r);
            for (int k = 0; k < nb; ++k) b.res_block(lvl(j) + ".down" + std::to_string(k), c, c, r);
        }
        b.conv(lvl(0) + ".in_conv", img, c0, 3, 1, r0);
    } else {
        const int ct = cfg.hidden[static_cast<std::size_t>(top)];
        b.conv(lvl(top) + ".in_conv", img, ct, 3, 1, cfg.resolution(top));
        for (int k = 0; k < nb; ++k) b.res_block(lvl(top) + ".down" + std::to_string(k), ct, ct, cfg.resolution(top));
        for (int j = top - 1; j >= 1; --j) {
            const int c = cfg.hidden[static_cast<std::size_t>(j)];
            const int r = cfg.resolution(j);
            b.conv(lvl(j) + ".downsample", cfg.hidden[static_cast<std::size_t>(j + 1)], c, 3, 2, r);
            for (int k = 0; k < nb; ++k) b.res_block(lvl(j) + ".down" + std::to_string(k), c, c, r);
        }
        if (top >= 1) b.conv(lvl(0) + ".downsample", cfg.hidden[1], c0, 3, 2, r0);
    }
    for (int k = 0; k < nb; ++k) b.res_block(lvl(0) + ".down" + std::to_string(k), c0, c0, r0);

    int r = r0;
    for (int d = 0; d < cfg.trunk_downsamples; ++d) {
        r /= 2;
        const std::string p = "base.down" + std::to_string(d);
        b.conv(p + ".downsample", c0, c0, 3, 2, r);
        for (int k = 0; k < nb; ++k) b.res_block(p + ".block" + std::to_string(k), c0, c0, r);
    }
    b.res_block("base.mid.block0", c0, c0, r);
    if (cfg.attention) b.attention("base.mid.attn", c0, r);
    b.res_block("base.mid.block1", c0, c0, r);
    for (int d = cfg.trunk_downsamples - 1; d >= 0; --d) {
        r *= 2;
        const std::string p = "base.up" + std::to_string(d);
        b.conv(p + ".upsample", c0, c0, 3, 1, r);
        if (d >= 1) {
            for (int k = 0; k < nb; ++k) b.res_block(p + ".block" + std::to_string(k), k == 0 ? 2 * c0 : c0, c0, r);
        }
    }
    for (int k = 0; k < nb; ++k) b.res_block(lvl(0) + ".up" + std::to_string(k), k == 0 ? 2 * c0 : c0, c0, r0);
    if (cfg.has_output(0)) {
        b.norm(lvl(0) + ".out_norm", c0, r0);
        b.conv(lvl(0) + ".out_conv", c0, img, 3, 1, r0, true);
    }
    for (int j = 1; j <= top; ++j) {
        const int c = cfg.hidden[static_cast<std::size_t>(j)];
        const int rj = cfg.resolution(j);
        b.conv(lvl(j) + ".upsample", cfg.hidden[static_cast<std::size_t>(j - 1)], c, 3, 1, rj);
        for (int k = 0; k < nb; ++k) b.res_block(lvl(j) + ".up" + std::to_string(k), k == 0 ? 2 * c : c, c, rj);
        if (cfg.has_output(j)) {
            b.norm(lvl(j) + ".out_norm", c, rj);
            b.conv(lvl(j) + ".out_conv", c, img, 3, 1, rj, true);
        }
    }
    return b.take();
}

template <typename T>
struct LayeredModel {
    ModelConfig config;
    ParamStore<T> params;
};

namespace detail {

template <typename T>
Tensor<T> init_normal(Shape shape, double stddev, std::uint64_t seed) {
    Tensor<T> t(std::move(shape));
    Rng rng(seed);
    for (auto& v : t.storage()) v = static_cast<T>(rng.normal() * stddev);
    return t;
}

/// Adds the parameters for one spec. Values depend only on (seed, name).
template <typename T>
void add_spec_params(ParamStore<T>& ps, const LayerSpec& s, std::uint64_t seed) {
    auto name_seed = [&](const std::string& n) { return derive_seed(seed, n); };
    switch (s.kind) {
        case LayerKind::conv: {
            Shape ws{s.cout, s.cin, s.k, s.k};
            const double std = 1.0 / std::sqrt(static_cast<double>(s.cin) * s.k * s.k);
            ps.add(s.name + ".weight", s.zero_init ? Tensor<T>(ws) : init_normal<T>(ws, std, name_seed(s.name + ".weight")));
            ps.add(s.name + ".bias", Tensor<T>(Shape{s.cout}));
            break;
        }
        case LayerKind::linear: {
            Shape ws{s.cout, s.cin};
            ps.add(s.name + ".weight", init_normal<T>(ws, 1.0 / std::sqrt(static_cast<double>(s.cin)),
                                                      name_seed(s.name + ".weight")));
            ps.add(s.name + ".bias", Tensor<T>(Shape{s.cout}));
            break;
        }
        case LayerKind::group_norm:
            ps.add(s.name + ".gamma", Tensor<T>(Shape{s.cin}, T(1)));
            ps.add(s.name + ".beta", Tensor<T>(Shape{s.cin}));
            break;
        case LayerKind::embedding:
            ps.add(s.name + ".weight", init_normal<T>(Shape{s.cin, s.cout}, 1.0, name_seed(s.name + ".weight")));
            break;
        case LayerKind::attention_core:
            break;
    }
}

}  // namespace detail

template <typename T>
LayeredModel<T> build_model(const ModelConfig& config, std::uint64_t seed) {
    LayeredModel<T> model{config, {}};
    for (const auto& spec : architecture(config)) detail::add_spec_params(model.params, spec, seed);
    return model;
}

/// Sinusoidal features of t (scaled by 1000), [N, features].
template <typename T>
Tensor<T> time_features(const std::vector<double>& t, int features) {
    const int half = features / 2;
    Tensor<T> out(Shape{static_cast<std::int64_t>(t.size()), features});
    for (std::size_t n = 0; n < t.size(); ++n) {
        for (int k = 0; k < half; ++k) {
            const double freq = std::exp(-std::log(10000.0) * k / half);
            const double arg = 1000.0 * t[n] * freq;
            out[n * static_cast<std::size_t>(features) + static_cast<std::size_t>(k)] = static_cast<T>(std::sin(arg));
            out[n * static_cast<std::size_t>(features) + static_cast<std::size_t>(half + k)] = static_cast<T>(std::cos(arg));
        }
    }
    return out;
}

template <typename T>
using ActivationProbe = std::map<std::string, Tensor<T>>;

namespace detail {

template <typename T>
class ForwardPass {
public:
    ForwardPass(const LayeredModel<T>& m, ActivationProbe<T>* probe) : m_(m), probe_(probe) {}

    Var<T> param(const std::string& name) const { return m_.params.get(name); }

    Var<T> conv(const std::string& name, const Var<T>& x, int stride = 1) {
        const Var<T> w = param(name + ".weight");
        const int k = static_cast<int>(w.shape()[2]);
        return record(name, ops::conv2d(x, w, param(name + ".bias"), stride, k / 2));
    }

    Var<T> norm(const std::string& name, const Var<T>& x) {
        return ops::group_norm(x, param(name + ".gamma"), param(name + ".beta"), m_.config.groups);
    }

    Var<T> res_block(const std::string& name, const Var<T>& x) {
        Var<T> h = conv(name + ".conv1", ops::silu(norm(name + ".norm1", x)));
        h = ops::add_channelwise(h, ops::linear(emb_act_, param(name + ".emb.weight"), param(name + ".emb.bias")));
        h = conv(name + ".conv2", ops::silu(norm(name + ".norm2", h)));
        const Var<T> skip = m_.params.contains(name + ".skip.weight") ? conv(name + ".skip", x) : x;
        return record(name, ops::add(h, skip));
    }

    Var<T> attention(const std::string& name, const Var<T>& x) {
        const auto s = x.shape();
        const std::int64_t n = s[0], c = s[1], p = s[2] * s[3];
        const Var<T> h = norm(name + ".norm", x);
        const Var<T> q = ops::reshape(conv(name + ".q", h), Shape{n, c, p});
        const Var<T> k = ops::reshape(conv(name + ".k", h), Shape{n, c, p});
        const Var<T> v = ops::reshape(conv(name + ".v", h), Shape{n, c, p});
        const Var<T> scores = ops::scale(ops::bmm(q, k, true, false), static_cast<T>(1.0 / std::sqrt(double(c))));
        const Var<T> attn = ops::softmax_lastdim(scores);
        const Var<T> o = ops::reshape(ops::bmm(v, attn, false, true), s);
        return record(name, ops::add(x, conv(name + ".proj", o)));
    }

    Var<T> output(int level, const Var<T>& h) {
        const std::string p = lvl(level);
        return conv(p + ".out_conv", ops::silu(norm(p + ".out_norm", h)));
    }

    void set_embedding(Var<T> emb) { emb_act_ = ops::silu(emb); }

    Var<T> record(const std::string& name, Var<T> v) {
        if (probe_) (*probe_)[name] = v.value();
        return v;
    }

private:
    const LayeredModel<T>& m_;
    ActivationProbe<T>* probe_;
    Var<T> emb_act_;
};

}  // namespace detail

/// Runs the layered U-Net. `latents` holds one [N,C,H,W] tensor per level
/// (base-up); levels without an input in a single-resolution model may be
/// empty Vars. Returns one prediction per level, empty where the model has no
/// output head. With a crop plan, inputs above the base are the plan's crops
/// and the base up-path tensor is cropped before it is upsampled.
template <typename T>
std::vector<Var<T>> forward(const LayeredModel<T>& model, const std::vector<Var<T>>& latents,
                            const std::vector<double>& t, const std::vector<std::vector<int>>& tokens,
                            const CropPlan* crop = nullptr, ActivationProbe<T>* probe = nullptr) {
    using detail::lvl;
    const ModelConfig& cfg = model.config;
    const int top = cfg.top_level();
    const int nb = cfg.blocks_per_level;
    if (static_cast<int>(latents.size()) != cfg.num_levels()) {
        throw ShapeError("forward: expected " + std::to_string(cfg.num_levels()) + " latents, got " +
                         std::to_string(latents.size()));
    }
    if (crop) {
        if (crop->num_levels() != cfg.num_levels() || crop->base_resolution != cfg.base_resolution) {
            throw ShapeError("forward: crop plan does not match model levels/resolution");
        }
        if (!cfg.layered) throw ShapeError("forward: crop plans apply to layered models only");
        crop->validate();
    }
    std::int64_t batch = -1;
    for (int j = 0; j <= top; ++j) {
        const auto& z = latents[static_cast<std::size_t>(j)];
        if (!cfg.has_input(j)) continue;
        if (!z) throw ShapeError("forward: missing latent for level " + std::to_string(j));
        const std::int64_t ext = crop ? crop->extent(j) : cfg.resolution(j);
        const Shape want{z.shape().empty() ? 0 : z.shape()[0], cfg.image_channels, ext, ext};
        if (z.shape() != want) {
            throw ShapeError("forward: level " + std::to_string(j) + " latent " + shape_str(z.shape()) +
                             " does not match expected " + shape_str(want));
        }
        if (batch < 0) batch = z.shape()[0];
        if (z.shape()[0] != batch) throw ShapeError("forward: batch size differs across levels");
    }
    if (static_cast<std::int64_t>(t.size()) != batch || static_cast<std::int64_t>(tokens.size()) != batch) {
        throw ShapeError("forward: t and tokens must have one entry per batch element");
    }
    for (double ti : t) {
        if (!(ti >= 0.0 && ti <= 1.0)) throw std::domain_error("forward: t must lie in [0, 1]");
    }

    detail::ForwardPass<T> fp(model, probe);
    const Var<T> tf = Var<T>::constant(time_features<T>(t, cfg.time_features));
    Var<T> temb = ops::linear(tf, fp.param("base.time.fc1.weight"), fp.param("base.time.fc1.bias"));
    temb = ops::linear(ops::silu(temb), fp.param("base.time.fc2.weight"), fp.param("base.time.fc2.bias"));
    const Var<T> cemb = ops::embedding_mean(fp.param("base.cond.embed.weight"), tokens, kPadToken);
    fp.set_embedding(fp.record("base.embedding", ops::add(temb, cemb)));

    std::vector<Var<T>> skips(static_cast<std::size_t>(cfg.num_levels()));
    Var<T> h;
    if (cfg.layered) {
        for (int j = top; j >= 1; --j) {
            Var<T> s = fp.conv(lvl(j) + ".in_conv", latents[static_cast<std::size_t>(j)]);
            for (int k = 0; k < nb; ++k) s = fp.res_block(lvl(j) + ".down" + std::to_string(k), s);
            skips[static_cast<std::size_t>(j)] = s;
        }
        h = fp.conv(lvl(0) + ".in_conv", latents[0]);
    } else {
        h = fp.conv(lvl(top) + ".in_conv", latents[static_cast<std::size_t>(top)]);
        for (int j = top; j >= 1; --j) {
            for (int k = 0; k < nb; ++k) h = fp.res_block(lvl(j) + ".down" + std::to_string(k), h);
            skips[static_cast<std::size_t>(j)] = h;
            h = fp.conv(lvl(j - 1) + ".downsample", h, 2);
        }
    }
    for (int k = 0; k < nb; ++k) h = fp.res_block(lvl(0) + ".down" + std::to_string(k), h);
    skips[0] = h;

    std::vector<Var<T>> trunk_skips;
    for (int d = 0; d < cfg.trunk_downsamples; ++d) {
        const std::string p = "base.down" + std::to_string(d);
        h = fp.conv(p + ".downsample", h, 2);
        for (int k = 0; k < nb; ++k) h = fp.res_block(p + ".block" + std::to_string(k), h);
        trunk_skips.push_back(h);
    }
    h = fp.res_block("base.mid.block0", h);
    if (cfg.attention) h = fp.attention("base.mid.attn", h);
    h = fp.res_block("base.mid.block1", h);
    for (int d = cfg.trunk_downsamples - 1; d >= 0; --d) {
        const std::string p = "base.up" + std::to_string(d);
        h = fp.conv(p + ".upsample", ops::upsample_nearest2x(h));
        if (d >= 1) {
            h = ops::concat_channels<T>({h, trunk_skips[static_cast<std::size_t>(d - 1)]});
            for (int k = 0; k < nb; ++k) h = fp.res_block(p + ".block" + std::to_string(k), h);
        }
    }
    h = ops::concat_channels<T>({h, skips[0]});
    for (int k = 0; k < nb; ++k) h = fp.res_block(lvl(0) + ".up" + std::to_string(k), h);

    std::vector<Var<T>> preds(static_cast<std::size_t>(cfg.num_levels()));
    if (cfg.has_output(0)) preds[0] = fp.record(lvl(0) + ".output", fp.output(0, h));
    for (int j = 1; j <= top; ++j) {
        Var<T> f = h;
        if (crop) {
            const Rect& r = crop->feature_rects[static_cast<std::size_t>(j - 1)];
            f = ops::crop_spatial(f, r.y, r.x, r.h, r.w);
        }
        f = fp.conv(lvl(j) + ".upsample", ops::upsample_nearest2x(f));
        h = ops::concat_channels<T>({f, skips[static_cast<std::size_t>(j)]});
        for (int k = 0; k < nb; ++k) h = fp.res_block(lvl(j) + ".up" + std::to_string(k), h);
        if (cfg.has_output(j)) preds[static_cast<std::size_t>(j)] = fp.record(lvl(j) + ".output", fp.output(j, h));
    }
    return preds;
}

struct FlopsReport {
    std::vector<std::pair<std::string, std::uint64_t>> layers;
    std::map<std::string, std::uint64_t> per_group;  // "base", "level0", ...
    std::uint64_t total = 0;
};

inline FlopsReport flops_of(const std::vector<LayerSpec>& specs) {
    FlopsReport r;
    for (const auto& s : specs) {
        const std::uint64_t f = s.flops();
        if (f == 0) continue;
        r.layers.emplace_back(s.name, f);
        r.per_group[s.name.substr(0, s.name.find('.'))] += f;
        r.total += f;
    }
    return r;
}

/// Explicit layer list for cost estimates, e.g.
/// {"layers": [{"name": "c", "kind": "conv", "cin": 1, "cout": 1, "k": 1, "h": 32, "w": 32}]}.
/// Layer kinds: conv, linear, attention.
inline std::vector<LayerSpec> layer_specs_from_json(const json& j) {
    reject_unknown_keys(j, {"layers"}, "layer list");
    if (!j.contains("layers") || !j.at("layers").is_array()) throw ConfigError("layer list: 'layers' must be an array");
    std::vector<LayerSpec> specs;
    for (std::size_t i = 0; i < j.at("layers").size(); ++i) {
        const auto& e = j.at("layers")[i];
        const std::string where = "layers[" + std::to_string(i) + "]";
        reject_unknown_keys(e, {"name", "kind", "cin", "cout", "k", "stride", "h", "w"}, where);
        LayerSpec s;
        s.name = "layer" + std::to_string(i);
        std::string kind = "conv";
        read_key(e, "name", s.name, where);
        read_key(e, "kind", kind, where);
        read_key(e, "cin", s.cin, where);
        read_key(e, "cout", s.cout, where);
        read_key(e, "k", s.k, where);
        read_key(e, "stride", s.stride, where);
        read_key(e, "h", s.h_out, where);
        read_key(e, "w", s.w_out, where);
        if (kind == "conv") {
            s.kind = LayerKind::conv;
        } else if (kind == "linear") {
            s.kind = LayerKind::linear;
        } else if (kind == "attention") {
            s.kind = LayerKind::attention_core;
        } else {
            throw ConfigError(where + ": unknown kind '" + kind + "' (expected conv, linear or attention)");
        }
        if (s.cin < 0 || s.cout < 0 || s.k < 0 || s.h_out < 0 || s.w_out < 0) {
            throw ConfigError(where + ": sizes must be non-negative");
        }
        specs.push_back(std::move(s));
    }
    return specs;
}

/// Analytic per-image forward cost.
inline FlopsReport count_flops(const ModelConfig& config) { return flops_of(architecture(config)); }

/// The matched baseline: same widths and target resolution, one input.
inline ModelConfig single_resolution_of(ModelConfig mc) {
    mc.layered = false;
    return mc;
}

/// Configurations sized like the published models, with their reported
/// per-image FLOPs. Those totals depend on hyperparameters that were never
/// released, so the estimator is not expected to match them.
struct ReferenceFlops {
    std::string name;
    ModelConfig model;
    double reported_layered;
    double reported_single;
};

inline std::vector<ReferenceFlops> reference_flops() {
    ModelConfig two;
    two.base_resolution = 128;
    two.hidden = {256, 128};
    two.blocks_per_level = 2;
    two.trunk_downsamples = 3;
    two.time_features = 256;
    two.embed_dim = 1024;
    two.groups = 32;
    ModelConfig three = two;
    three.hidden = {256, 128, 64};
    return {{"target 256x256 (128+256)", two, 2.04e12, 2.20e12},
            {"target 512x512 (128+256+512)", three, 2.79e12, 3.24e12}};
}

template <typename T>
struct StackResult {
    LayeredModel<T> model;
    std::vector<std::string> copied;
    std::vector<std::string> fresh;
};

/// Builds `tall_config` and copies every parameter the donor shares by name;
/// the rest come from `seed` exactly as build_model would produce them.
template <typename T>
StackResult<T> stack_init(const ModelConfig& tall_config, const ModelConfig& donor_config,
                          const ParamStore<T>& donor_params, std::uint64_t seed) {
    if (!donor_config.is_prefix_of(tall_config)) {
        throw ConfigError("stack_init: checkpoint config is not a lower-level prefix of the target config");
    }
    StackResult<T> result{build_model<T>(tall_config, seed), {}, {}};
    std::vector<std::string> mismatched;
    for (auto& [name, p] : result.model.params) {
        if (!donor_params.contains(name)) {
            result.fresh.push_back(name);
            continue;
        }
        const auto& src = donor_params.get(name).value();
        if (src.shape() != p.value().shape()) {
            mismatched.push_back(name + " " + shape_str(src.shape()) + " vs " + shape_str(p.value().shape()));
            continue;
        }
        p.mutable_value() = src;
        result.copied.push_back(name);
    }
    if (!mismatched.empty()) {
        std::string msg = "stack_init: shape mismatch on shared parameters:";
        for (const auto& m : mismatched) msg += "\n  " + m;
        throw ShapeError(msg);
    }
    return result;
}

}  // namespace layerdiff
