#pragma once

// Noise pyramids built by ideal (sinc) lowpass + decimation, and image
// pyramids built by block-averaging bilinear downsampling.

#include <fftw3.h>

#include <cmath>
#include <complex>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "layerdiff/numerics/tensor.hpp"
#include "layerdiff/rng.hpp"

namespace layerdiff {

template <typename T>
struct NoiseField {
    Tensor<T> data;  // [C,H,W]
    std::uint64_t seed = 0;
    int level = 0;  // 0 = highest resolution
};

enum class NoiseMode { sinc, independent };

inline const char* to_string(NoiseMode m) { return m == NoiseMode::sinc ? "sinc" : "independent"; }

inline NoiseMode noise_mode_from_string(const std::string& s) {
    if (s == "sinc") return NoiseMode::sinc;
    if (s == "independent") return NoiseMode::independent;
    throw std::invalid_argument("unknown noise mode '" + s + "' (expected sinc or independent)");
}

/// Per-resolution noise, highest resolution first; adjacent levels differ by
/// a factor of two in each spatial axis.
template <typename T>
struct NoisePyramid {
    std::vector<NoiseField<T>> levels;
    int factor = 2;
    NoiseMode mode = NoiseMode::sinc;
};

/// Ground truth image and its successive downsamples, highest resolution first.
template <typename T>
struct ImagePyramid {
    std::vector<Tensor<T>> levels;
};

/// Weight of the two frequency bins sitting exactly on the cut-off. 1/sqrt(2)
/// makes decimated white noise exactly white with unit in-band power;
/// 0.5 is what a periodised spatial sinc kernel produces.
inline constexpr double kWhiteNyquistWeight = 0.70710678118654752440;

inline bool is_power_of_two(std::int64_t v) { return v > 0 && (v & (v - 1)) == 0; }

template <typename T>
NoiseField<T> sample_gaussian(int channels, int height, int width, std::uint64_t seed) {
    if (channels <= 0 || height <= 0 || width <= 0) {
        throw std::invalid_argument("sample_gaussian: dimensions must be positive");
    }
    Tensor<T> data(Shape{channels, height, width});
    Rng rng(seed);
    for (auto& v : data.storage()) v = static_cast<T>(rng.normal());
    return NoiseField<T>{std::move(data), seed, 0};
}

namespace detail {

class FftPlans {
public:
    struct Plan {
        fftw_complex* buffer = nullptr;
        fftw_plan forward = nullptr;
        fftw_plan inverse = nullptr;
    };

    static FftPlans& instance() {
        static FftPlans plans;
        return plans;
    }

    // Plans are created once per size and reused for every call.
    Plan& get(int h, int w) {
        std::lock_guard<std::mutex> lock(mutex_);
        auto it = plans_.find({h, w});
        if (it != plans_.end()) return it->second;
        Plan p;
        p.buffer = static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * static_cast<std::size_t>(h) * w));
        p.forward = fftw_plan_dft_2d(h, w, p.buffer, p.buffer, FFTW_FORWARD, FFTW_ESTIMATE);
        p.inverse = fftw_plan_dft_2d(h, w, p.buffer, p.buffer, FFTW_BACKWARD, FFTW_ESTIMATE);
        return plans_.emplace(std::make_pair(h, w), p).first->second;
    }

    ~FftPlans() {
        for (auto& [k, p] : plans_) {
            fftw_destroy_plan(p.forward);
            fftw_destroy_plan(p.inverse);
            fftw_free(p.buffer);
        }
    }

private:
    std::mutex mutex_;
    std::map<std::pair<int, int>, Plan> plans_;
};

inline std::vector<double> band_weights(int n, int factor, double nyquist_weight) {
    std::vector<double> wts(static_cast<std::size_t>(n), 0.0);
    const int cutoff = n / (2 * factor);
    for (int k = 0; k < n; ++k) {
        const int signed_k = k <= n / 2 ? k : k - n;
        const int a = std::abs(signed_k);
        if (a < cutoff) wts[static_cast<std::size_t>(k)] = 1.0;
        else if (a == cutoff) wts[static_cast<std::size_t>(k)] = nyquist_weight;
    }
    return wts;
}

}  // namespace detail

/// Ideal lowpass on the periodic grid followed by keeping every `factor`-th
/// pixel. With `renormalize` the output is scaled by `factor`, which restores
/// unit marginal variance for white input.
template <typename T>
NoiseField<T> sinc_downsample(const NoiseField<T>& eps, int factor, bool renormalize,
                              double nyquist_weight = kWhiteNyquistWeight) {
    const auto& s = eps.data.shape();
    if (s.size() != 3) throw ShapeError("sinc_downsample: expected [C,H,W], got " + shape_str(s));
    const int c = static_cast<int>(s[0]), h = static_cast<int>(s[1]), w = static_cast<int>(s[2]);
    if (!is_power_of_two(factor)) {
        throw std::invalid_argument("sinc_downsample: factor " + std::to_string(factor) + " is not a power of two");
    }
    if (h % factor != 0 || w % factor != 0) {
        throw std::invalid_argument("sinc_downsample: factor " + std::to_string(factor) + " does not divide " +
                                    shape_str(s));
    }
    const int log2f = static_cast<int>(std::lround(std::log2(factor)));
    if (factor == 1) return NoiseField<T>{eps.data, eps.seed, eps.level};

    const int ho = h / factor, wo = w / factor;
    auto& plan = detail::FftPlans::instance().get(h, w);
    const auto wy = detail::band_weights(h, factor, nyquist_weight);
    const auto wx = detail::band_weights(w, factor, nyquist_weight);
    const double gain = (renormalize ? static_cast<double>(factor) : 1.0) / (static_cast<double>(h) * w);

    Tensor<T> out(Shape{c, ho, wo});
    for (int ch = 0; ch < c; ++ch) {
        for (int i = 0; i < h * w; ++i) {
            plan.buffer[i][0] = static_cast<double>(eps.data[static_cast<std::size_t>(ch * h * w + i)]);
            plan.buffer[i][1] = 0.0;
        }
        fftw_execute(plan.forward);
        for (int ky = 0; ky < h; ++ky) {
            for (int kx = 0; kx < w; ++kx) {
                const double g = wy[static_cast<std::size_t>(ky)] * wx[static_cast<std::size_t>(kx)];
                plan.buffer[ky * w + kx][0] *= g;
                plan.buffer[ky * w + kx][1] *= g;
            }
        }
        fftw_execute(plan.inverse);
        for (int y = 0; y < ho; ++y) {
            for (int x = 0; x < wo; ++x) {
                out.at3(ch, y, x) = static_cast<T>(plan.buffer[(y * factor) * w + x * factor][0] * gain);
            }
        }
    }
    return NoiseField<T>{std::move(out), eps.seed, eps.level + log2f};
}

/// Mean of each `factor`x`factor` block over the last two axes. With aligned
/// grids and power-of-two factors this is what bilinear reduction computes,
/// applied as repeated factor-2 steps.
template <typename T>
Tensor<T> bilinear_downsample(const Tensor<T>& image, int factor) {
    const auto& s = image.shape();
    if (s.size() < 2) throw ShapeError("bilinear_downsample: need at least two spatial axes");
    if (!is_power_of_two(factor)) {
        throw std::invalid_argument("bilinear_downsample: factor " + std::to_string(factor) + " is not a power of two");
    }
    const std::int64_t h = s[s.size() - 2], w = s[s.size() - 1];
    if (h % factor != 0 || w % factor != 0) {
        throw std::invalid_argument("bilinear_downsample: factor " + std::to_string(factor) + " does not divide " +
                                    shape_str(s));
    }
    Tensor<T> cur = image;
    for (int f = factor; f > 1; f /= 2) {
        const auto& cs = cur.shape();
        const std::int64_t ch = cs[cs.size() - 2], cw = cs[cs.size() - 1];
        const std::int64_t planes = static_cast<std::int64_t>(cur.size()) / (ch * cw);
        Shape ns = cs;
        ns[ns.size() - 2] = ch / 2;
        ns[ns.size() - 1] = cw / 2;
        Tensor<T> next(ns);
        for (std::int64_t p = 0; p < planes; ++p) {
            const T* src = cur.data() + p * ch * cw;
            T* dst = next.data() + p * (ch / 2) * (cw / 2);
            for (std::int64_t y = 0; y < ch / 2; ++y) {
                for (std::int64_t x = 0; x < cw / 2; ++x) {
                    const T a = src[(2 * y) * cw + 2 * x], b = src[(2 * y) * cw + 2 * x + 1];
                    const T c = src[(2 * y + 1) * cw + 2 * x], d = src[(2 * y + 1) * cw + 2 * x + 1];
                    dst[y * (cw / 2) + x] = ((a + b) + (c + d)) * T(0.25);
                }
            }
        }
        cur = std::move(next);
    }
    return cur;
}

/// Level 0 is `eps0`; level i is the renormalized sinc downsample of level 0
/// by 2^i, or a fresh draw per level in independent mode.
template <typename T>
NoisePyramid<T> build_noise_pyramid(const NoiseField<T>& eps0, int num_levels, NoiseMode mode = NoiseMode::sinc) {
    if (num_levels < 1) throw std::invalid_argument("build_noise_pyramid: num_levels must be >= 1");
    const auto& s = eps0.data.shape();
    const std::int64_t div = std::int64_t{1} << (num_levels - 1);
    if (s.size() != 3 || s[1] % div != 0 || s[2] % div != 0) {
        throw std::invalid_argument("build_noise_pyramid: " + shape_str(s) + " not divisible by 2^" +
                                    std::to_string(num_levels - 1));
    }
    NoisePyramid<T> pyr;
    pyr.mode = mode;
    pyr.levels.push_back(NoiseField<T>{eps0.data, eps0.seed, 0});
    for (int i = 1; i < num_levels; ++i) {
        const int f = 1 << i;
        if (mode == NoiseMode::sinc) {
            auto field = sinc_downsample(eps0, f, true);
            field.level = i;
            pyr.levels.push_back(std::move(field));
        } else {
            auto field = sample_gaussian<T>(static_cast<int>(s[0]), static_cast<int>(s[1] / f),
                                            static_cast<int>(s[2] / f), derive_seed(eps0.seed, std::uint64_t(i)));
            field.level = i;
            pyr.levels.push_back(std::move(field));
        }
    }
    return pyr;
}

template <typename T>
ImagePyramid<T> build_image_pyramid(const Tensor<T>& x0, int num_levels) {
    if (num_levels < 1) throw std::invalid_argument("build_image_pyramid: num_levels must be >= 1");
    ImagePyramid<T> pyr;
    pyr.levels.push_back(x0);
    for (int i = 1; i < num_levels; ++i) pyr.levels.push_back(bilinear_downsample(pyr.levels.back(), 2));
    return pyr;
}

}  // namespace layerdiff
