#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "layerdiff/checkpoint.hpp"
#include "layerdiff/unet.hpp"
#include "test_support.hpp"

namespace ld = layerdiff;
using ld::Shape;
using ld::Tensor;

namespace {

template <typename T>
ld::Checkpoint<T> sample_checkpoint() {
    ld::ModelConfig cfg;
    cfg.hidden = {8, 8};
    cfg.groups = 4;
    const auto m = ld::build_model<T>(cfg, 3);
    ld::Checkpoint<T> ck{cfg, ld::precision_name<T>(), {{"step", 12}}, {}};
    for (const auto& [name, p] : m.params) ck.tensors.emplace(name, p.value());
    ck.tensors.emplace("adam.m.x", ld::testing::random_tensor<T>(Shape{2, 3}, 1));
    // values whose bit patterns are easy to mangle
    ck.tensors.emplace("edge", Tensor<T>(Shape{4}, std::vector<T>{T(-0.0), std::numeric_limits<T>::denorm_min(),
                                                                     std::numeric_limits<T>::max(), T(1) / T(3)}));
    return ck;
}

template <typename T>
std::string serialize(const ld::Checkpoint<T>& ck) {
    std::ostringstream os(std::ios::binary);
    ld::write_checkpoint(os, ck);
    return os.str();
}

template <typename T>
void expect_bit_equal(const Tensor<T>& a, const Tensor<T>& b) {
    ASSERT_EQ(a.shape(), b.shape());
    EXPECT_EQ(std::memcmp(a.data(), b.data(), a.size() * sizeof(T)), 0);
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitExactF32) {
    const auto ck = sample_checkpoint<float>();
    std::istringstream is(serialize(ck), std::ios::binary);
    const auto back = ld::read_checkpoint<float>(is);
    EXPECT_EQ(back.model, ck.model);
    EXPECT_EQ(back.precision, "f32");
    EXPECT_EQ(back.meta.at("step"), 12);
    ASSERT_EQ(back.tensors.size(), ck.tensors.size());
    for (const auto& [name, t] : ck.tensors) expect_bit_equal(back.tensors.at(name), t);
}

TEST(Checkpoint, RoundTripIsBitExactF64ThroughFile) {
    const auto ck = sample_checkpoint<double>();
    const auto path = (std::filesystem::temp_directory_path() / "layerdiff_ckpt_test.ckpt").string();
    ld::save_checkpoint(path, ck);
    const auto back = ld::load_checkpoint<double>(path);
    for (const auto& [name, t] : ck.tensors) expect_bit_equal(back.tensors.at(name), t);
    const auto header = ld::read_checkpoint_header(path);
    EXPECT_EQ(header.at("precision"), "f64");
    EXPECT_EQ(header.at("model").get<ld::ModelConfig>(), ck.model);
    std::filesystem::remove(path);
}

TEST(Checkpoint, ReadsAcrossPrecisions) {
    const auto ck = sample_checkpoint<float>();
    std::istringstream is(serialize(ck), std::ios::binary);
    const auto back = ld::read_checkpoint<double>(is);
    EXPECT_EQ(back.precision, "f32");
    const auto& a = back.tensors.at("adam.m.x");
    const auto& b = ck.tensors.at("adam.m.x");
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], static_cast<double>(b[i]));
}

TEST(Checkpoint, ParamsSkipOptimizerState) {
    const auto ck = sample_checkpoint<float>();
    const auto ps = ld::params_from_checkpoint(ck);
    EXPECT_FALSE(ps.contains("adam.m.x"));
    EXPECT_TRUE(ps.contains("level1.in_conv.weight"));
}

TEST(Checkpoint, CorruptInputsAreReported) {
    std::istringstream bad_magic(std::string("NOTACKPT") + std::string(16, '\0'));
    EXPECT_THROW(ld::read_checkpoint<float>(bad_magic), ld::CheckpointError);
    const auto bytes = serialize(sample_checkpoint<float>());
    std::istringstream truncated(bytes.substr(0, bytes.size() - 7));
    EXPECT_THROW(ld::read_checkpoint<float>(truncated), ld::CheckpointError);
    EXPECT_THROW(ld::load_checkpoint<float>("/nonexistent/dir/x.ckpt"), ld::CheckpointError);
}

TEST(ModelConfigJson, RoundTripAndUnknownKeys) {
    ld::ModelConfig c;
    c.hidden = {32, 16, 8};
    c.layered = false;
    ld::json j = c;
    EXPECT_EQ(j.get<ld::ModelConfig>(), c);
    j["bogus"] = 1;
    EXPECT_THROW(j.get<ld::ModelConfig>(), ld::ConfigError);
}
