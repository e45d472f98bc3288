#pragma once

// Whole-run configuration file: model, training, sampling, data source and
// output directory in one JSON document.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "layerdiff/model_config.hpp"
#include "layerdiff/sample.hpp"
#include "layerdiff/train.hpp"

namespace layerdiff {

inline constexpr const char* kOutputDirEnv = "LAYERDIFF_OUTPUT_DIR";

/// Where training images come from. An empty `folder` selects the
/// synthetic shapes generator.
struct DataConfig {
    int count = 2048;
    std::uint64_t seed = 0;
    std::string folder;
    std::string captions;  // defaults to <folder>/captions.tsv

    std::filesystem::path captions_path() const {
        return captions.empty() ? std::filesystem::path(folder) / "captions.tsv" : std::filesystem::path(captions);
    }
};

inline void to_json(json& j, const DataConfig& c) {
    j = json{{"count", c.count}, {"seed", c.seed}, {"folder", c.folder}, {"captions", c.captions}};
}

inline void from_json(const json& j, DataConfig& c) {
    const std::string where = "data";
    reject_unknown_keys(j, {"count", "seed", "folder", "captions"}, where);
    read_key(j, "count", c.count, where);
    read_key(j, "seed", c.seed, where);
    read_key(j, "folder", c.folder, where);
    read_key(j, "captions", c.captions, where);
}

struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    SamplerConfig sampler;
    DataConfig data;
    std::string output_dir = "runs/default";

    void validate() const {
        model.validate();
        train.validate(model.num_levels());
        sampler.validate();
        if (data.count < 1 && data.folder.empty()) throw ConfigError("data: count must be >= 1");
        if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
    }
};

inline void to_json(json& j, const RunConfig& c) {
    j = json{{"model", c.model},
             {"train", c.train},
             {"sampler", c.sampler},
             {"data", c.data},
             {"output_dir", c.output_dir}};
}

inline void from_json(const json& j, RunConfig& c) {
    reject_unknown_keys(j, {"model", "train", "sampler", "data", "output_dir"}, "config");
    if (j.contains("model")) c.model = j.at("model").get<ModelConfig>();
    if (j.contains("train")) c.train = j.at("train").get<TrainConfig>();
    if (j.contains("sampler")) c.sampler = j.at("sampler").get<SamplerConfig>();
    if (j.contains("data")) c.data = j.at("data").get<DataConfig>();
    read_key(j, "output_dir", c.output_dir, "config");
}

inline RunConfig parse_run_config(const std::string& text, const std::string& origin = "<string>") {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(origin + ": " + e.what());
    }
    try {
        auto c = j.get<RunConfig>();
        c.validate();
        return c;
    } catch (const ConfigError& e) {
        throw ConfigError(origin + ": " + e.what());
    }
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError(path.string() + ": cannot open config file");
    std::stringstream ss;
    ss << is.rdbuf();
    return parse_run_config(ss.str(), path.string());
}

}  // namespace layerdiff
