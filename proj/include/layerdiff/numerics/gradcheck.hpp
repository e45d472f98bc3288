#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "layerdiff/numerics/autograd.hpp"

namespace layerdiff {

struct FiniteDiffResult {
    double max_rel_error = 0.0;
    std::size_t coordinates = 0;
    std::string worst_param;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
};

/// Compares backward() against central differences on up to `max_coords`
/// coordinates sampled uniformly across all parameters (all of them when the
/// store is smaller). Relative error is |a - n| / (|a| + |n| + 1e-12).
template <typename T>
FiniteDiffResult finite_diff_check(const std::function<Var<T>(ParamStore<T>&)>& f, ParamStore<T>& params, double h,
                                   std::size_t max_coords = 256, std::uint64_t seed = 0) {
    if (!(h > 0)) throw std::invalid_argument("finite_diff_check: step must be positive");
    const Var<T> loss = f(params);
    if (!std::isfinite(static_cast<double>(loss.value()[0]))) {
        throw std::runtime_error("finite_diff_check: function value is not finite");
    }
    backward(loss, params);

    std::vector<std::pair<std::string, std::size_t>> coords;
    for (const auto& [name, p] : params) {
        for (std::size_t i = 0; i < p.value().size(); ++i) coords.emplace_back(name, i);
    }
    if (coords.size() > max_coords) {
        std::mt19937_64 rng(seed);
        for (std::size_t i = 0; i < max_coords; ++i) {
            const std::size_t j = i + static_cast<std::size_t>(rng() % (coords.size() - i));
            std::swap(coords[i], coords[j]);
        }
        coords.resize(max_coords);
    }

    auto eval = [&]() {
        NoGradGuard guard;
        const double v = static_cast<double>(f(params).value()[0]);
        if (!std::isfinite(v)) throw std::runtime_error("finite_diff_check: function value is not finite");
        return v;
    };

    FiniteDiffResult result;
    result.coordinates = coords.size();
    for (const auto& [name, idx] : coords) {
        auto& p = params.get(name);
        const double analytic = static_cast<double>(p.grad()[idx]);
        const T original = p.value()[idx];
        p.mutable_value()[idx] = static_cast<T>(original + h);
        const double fp = eval();
        p.mutable_value()[idx] = static_cast<T>(original - h);
        const double fm = eval();
        p.mutable_value()[idx] = original;
        const double numeric = (fp - fm) / (2.0 * h);
        const double rel = std::abs(analytic - numeric) / (std::abs(analytic) + std::abs(numeric) + 1e-12);
        if (rel > result.max_rel_error) {
            result.max_rel_error = rel;
            result.worst_param = name;
            result.worst_index = idx;
            result.worst_analytic = analytic;
            result.worst_numeric = numeric;
        }
    }
    return result;
}

}  // namespace layerdiff
