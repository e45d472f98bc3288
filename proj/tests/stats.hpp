#pragma once

// Statistical oracles shared by the noise unit tests and the acceptance suite.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "layerdiff/numerics/tensor.hpp"

namespace layerdiff::testing {

struct MomentSummary {
    double min_variance = 0, max_variance = 0;
    double max_abs_corr = 0, mean_abs_corr = 0, mean_abs_cov = 0;
};

/// Treats every element of the sample tensors as one random variable and
/// summarises the empirical covariance across samples.
template <typename T>
MomentSummary pixel_moments(const std::vector<Tensor<T>>& samples) {
    const std::size_t d = samples.front().size();
    const double n = static_cast<double>(samples.size());
    std::vector<double> mean(d, 0.0), cov(d * d, 0.0);
    for (const auto& s : samples)
        for (std::size_t i = 0; i < d; ++i) mean[i] += static_cast<double>(s[i]) / n;
    for (const auto& s : samples) {
        for (std::size_t i = 0; i < d; ++i) {
            const double a = static_cast<double>(s[i]) - mean[i];
            for (std::size_t j = i; j < d; ++j) cov[i * d + j] += a * (static_cast<double>(s[j]) - mean[j]);
        }
    }
    for (auto& c : cov) c /= (n - 1);
    MomentSummary m;
    m.min_variance = 1e300;
    double sum_corr = 0, sum_cov = 0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < d; ++i) {
        m.min_variance = std::min(m.min_variance, cov[i * d + i]);
        m.max_variance = std::max(m.max_variance, cov[i * d + i]);
        for (std::size_t j = i + 1; j < d; ++j) {
            const double rho = cov[i * d + j] / std::sqrt(cov[i * d + i] * cov[j * d + j]);
            m.max_abs_corr = std::max(m.max_abs_corr, std::abs(rho));
            sum_corr += std::abs(rho);
            sum_cov += std::abs(cov[i * d + j]);
            ++pairs;
        }
    }
    if (pairs) {
        m.mean_abs_corr = sum_corr / static_cast<double>(pairs);
        m.mean_abs_cov = sum_cov / static_cast<double>(pairs);
    }
    return m;
}

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

/// Anderson-Darling statistic for normality with mean and variance
/// estimated from the data, including the small-sample correction
/// A*^2 = A^2 (1 + 0.75/n + 2.25/n^2). Reject at alpha = 0.01 when > 1.035.
inline double anderson_darling_normal(std::vector<double> x) {
    const double n = static_cast<double>(x.size());
    double mean = 0;
    for (double v : x) mean += v / n;
    double var = 0;
    for (double v : x) var += (v - mean) * (v - mean) / (n - 1);
    const double sd = std::sqrt(var);
    std::sort(x.begin(), x.end());
    double s = 0;
    const std::size_t m = x.size();
    for (std::size_t i = 0; i < m; ++i) {
        double lo = normal_cdf((x[i] - mean) / sd);
        double hi = normal_cdf((x[m - 1 - i] - mean) / sd);
        lo = std::clamp(lo, 1e-300, 1.0 - 1e-16);
        hi = std::clamp(hi, 1e-300, 1.0 - 1e-16);
        s += (2.0 * static_cast<double>(i) + 1.0) * (std::log(lo) + std::log1p(-hi));
    }
    const double a2 = -n - s / n;
    return a2 * (1.0 + 0.75 / n + 2.25 / (n * n));
}

inline constexpr double kAndersonDarlingCritical01 = 1.035;

/// Approximate p-value of the corrected statistic A*^2 (D'Agostino &
/// Stephens piecewise fit, estimated mean and variance).
inline double anderson_darling_pvalue(double a) {
    if (a >= 0.6) return std::exp(1.2937 - 5.709 * a + 0.0186 * a * a);
    if (a >= 0.34) return std::exp(0.9177 - 4.279 * a - 1.38 * a * a);
    if (a >= 0.2) return 1.0 - std::exp(-8.318 + 42.796 * a - 59.938 * a * a);
    return 1.0 - std::exp(-13.436 + 101.14 * a - 223.73 * a * a);
}

/// Periodised 1-D sinc kernel (1/T) sinc(d/T) summed symmetrically over
/// 2P+1 periods of length n.
inline double periodic_sinc(double d, int n, int factor, int periods) {
    double acc = 0;
    for (int p = -periods; p <= periods; ++p) {
        const double u = (d + static_cast<double>(p) * n) / factor;
        acc += (u == 0.0 ? 1.0 : std::sin(std::numbers::pi * u) / (std::numbers::pi * u)) / factor;
    }
    return acc;
}

/// Literal spatial interpolation: each target pixel is a sinc-weighted sum
/// over every source pixel, evaluated at the source position of the target.
template <typename T>
Tensor<double> spatial_sinc_downsample(const Tensor<T>& eps, int factor, int periods = 2000) {
    const auto c = eps.dim(0), h = eps.dim(1), w = eps.dim(2);
    const auto ho = h / factor, wo = w / factor;
    std::vector<double> ky(static_cast<std::size_t>(ho * h)), kx(static_cast<std::size_t>(wo * w));
    for (std::int64_t o = 0; o < ho; ++o)
        for (std::int64_t s = 0; s < h; ++s)
            ky[static_cast<std::size_t>(o * h + s)] =
                periodic_sinc(static_cast<double>(o * factor - s), static_cast<int>(h), factor, periods);
    for (std::int64_t o = 0; o < wo; ++o)
        for (std::int64_t s = 0; s < w; ++s)
            kx[static_cast<std::size_t>(o * w + s)] =
                periodic_sinc(static_cast<double>(o * factor - s), static_cast<int>(w), factor, periods);
    Tensor<double> out(Shape{c, ho, wo});
    for (std::int64_t ch = 0; ch < c; ++ch)
        for (std::int64_t oy = 0; oy < ho; ++oy)
            for (std::int64_t ox = 0; ox < wo; ++ox) {
                double acc = 0;
                for (std::int64_t y = 0; y < h; ++y)
                    for (std::int64_t x = 0; x < w; ++x)
                        acc += static_cast<double>(eps.at3(ch, y, x)) * ky[static_cast<std::size_t>(oy * h + y)] *
                               kx[static_cast<std::size_t>(ox * w + x)];
                out.at3(ch, oy, ox) = acc;
            }
    return out;
}

}  // namespace layerdiff::testing
