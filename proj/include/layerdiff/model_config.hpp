#pragma once

#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

namespace layerdiff {

using json = nlohmann::json;

/// Raised for malformed or inconsistent configuration.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

inline void reject_unknown_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + ": expected an object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (!allowed.count(it.key())) throw ConfigError(where + ": unknown key '" + it.key() + "'");
    }
}

template <typename V>
void read_key(const json& j, const char* key, V& out, const std::string& where) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<V>();
    } catch (const json::exception& e) {
        throw ConfigError(where + "." + key + ": " + e.what());
    }
}

/// Layered U-Net hyperparameters. Levels are numbered from the lowest
/// resolution upward; level j has resolution base_resolution * 2^j and
/// hidden[j] channels.
struct ModelConfig {
    int image_channels = 3;
    int base_resolution = 16;
    std::vector<int> hidden{64, 32};
    int blocks_per_level = 2;
    int trunk_downsamples = 1;
    bool attention = true;
    int time_features = 32;
    int embed_dim = 64;
    int groups = 8;
    int vocab_size = 16;
    // false: conventional single-input U-Net at the top resolution (baseline).
    bool layered = true;

    int num_levels() const { return static_cast<int>(hidden.size()); }
    int top_level() const { return num_levels() - 1; }
    int resolution(int level) const { return base_resolution << level; }
    int top_resolution() const { return resolution(top_level()); }

    bool has_input(int level) const { return layered || level == top_level(); }
    bool has_output(int level) const { return layered || level == top_level(); }

    void validate() const {
        auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
        if (hidden.empty()) fail("at least one level required");
        if (image_channels < 1) fail("image_channels must be positive");
        if (base_resolution < 1) fail("base_resolution must be positive");
        if (blocks_per_level < 1) fail("blocks_per_level must be >= 1");
        if (trunk_downsamples < 0) fail("trunk_downsamples must be >= 0");
        if ((base_resolution >> trunk_downsamples) < 1 || base_resolution % (1 << trunk_downsamples) != 0) {
            fail("base_resolution must be divisible by 2^trunk_downsamples");
        }
        if (time_features < 2 || time_features % 2 != 0) fail("time_features must be a positive even number");
        if (embed_dim < 1) fail("embed_dim must be positive");
        if (groups < 1) fail("groups must be positive");
        if (vocab_size < 1) fail("vocab_size must be positive");
        for (std::size_t i = 0; i < hidden.size(); ++i) {
            if (hidden[i] < 1) fail("hidden dims must be positive");
            if (hidden[i] % groups != 0) {
                fail("hidden[" + std::to_string(i) + "]=" + std::to_string(hidden[i]) +
                     " not divisible by groups=" + std::to_string(groups));
            }
        }
    }

    /// True when `this` equals `tall` restricted to its lowest levels.
    bool is_prefix_of(const ModelConfig& tall) const {
        if (hidden.size() > tall.hidden.size()) return false;
        for (std::size_t i = 0; i < hidden.size(); ++i) {
            if (hidden[i] != tall.hidden[i]) return false;
        }
        return image_channels == tall.image_channels && base_resolution == tall.base_resolution &&
               blocks_per_level == tall.blocks_per_level && trunk_downsamples == tall.trunk_downsamples &&
               attention == tall.attention && time_features == tall.time_features && embed_dim == tall.embed_dim &&
               groups == tall.groups && vocab_size == tall.vocab_size && layered == tall.layered;
    }

    bool operator==(const ModelConfig&) const = default;
};

inline void to_json(json& j, const ModelConfig& c) {
    j = json{{"image_channels", c.image_channels}, {"base_resolution", c.base_resolution},
             {"hidden", c.hidden},                 {"blocks_per_level", c.blocks_per_level},
             {"trunk_downsamples", c.trunk_downsamples}, {"attention", c.attention},
             {"time_features", c.time_features},   {"embed_dim", c.embed_dim},
             {"groups", c.groups},                 {"vocab_size", c.vocab_size},
             {"layered", c.layered}};
}

inline void from_json(const json& j, ModelConfig& c) {
    const std::string where = "model";
    reject_unknown_keys(j,
                        {"image_channels", "base_resolution", "hidden", "blocks_per_level", "trunk_downsamples",
                         "attention", "time_features", "embed_dim", "groups", "vocab_size", "layered"},
                        where);
    read_key(j, "image_channels", c.image_channels, where);
    read_key(j, "base_resolution", c.base_resolution, where);
    read_key(j, "hidden", c.hidden, where);
    read_key(j, "blocks_per_level", c.blocks_per_level, where);
    read_key(j, "trunk_downsamples", c.trunk_downsamples, where);
    read_key(j, "attention", c.attention, where);
    read_key(j, "time_features", c.time_features, where);
    read_key(j, "embed_dim", c.embed_dim, where);
    read_key(j, "groups", c.groups, where);
    read_key(j, "vocab_size", c.vocab_size, where);
    read_key(j, "layered", c.layered, where);
}

}  // namespace layerdiff
