#pragma once

// Small model configs and parameter helpers shared by the model-level tests.

#include <cstdint>
#include <vector>

#include "layerdiff/unet.hpp"
#include "test_support.hpp"

namespace layerdiff::testing {

/// Tiny config with channels > groups so conditioning reaches the features.
inline ModelConfig toy_config(int base, std::vector<int> hidden) {
    ModelConfig c;
    c.base_resolution = base;
    c.hidden = std::move(hidden);
    c.blocks_per_level = 1;
    c.time_features = 8;
    c.embed_dim = 16;
    c.groups = 4;
    c.vocab_size = 16;
    return c;
}

/// Adds noise to every parameter so zero-initialised heads do not block
/// gradients.
template <typename T>
void perturb(ParamStore<T>& ps, std::uint64_t seed, double scale) {
    std::uint64_t k = 0;
    for (auto& [name, p] : ps) {
        auto& v = p.mutable_value();
        const auto noise = random_tensor<T>(v.shape(), derive_seed(seed, ++k), scale);
        for (std::size_t i = 0; i < v.size(); ++i) v[i] += noise[i];
    }
}

}  // namespace layerdiff::testing
