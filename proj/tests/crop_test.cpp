#include <gtest/gtest.h>

#include <set>

#include "layerdiff/crop.hpp"
#include "layerdiff/noise.hpp"
#include "test_support.hpp"

namespace ld = layerdiff;
using ld::Rect;
using ld::Shape;

TEST(CropPlan, OriginRectDoubles) {
    const auto plan = ld::crop_plan_from_rect(128, 3, Rect{0, 0, 64, 64});
    EXPECT_EQ(plan.image_rects[0], (Rect{0, 0, 128, 128}));
    EXPECT_EQ(plan.image_rects[1], (Rect{0, 0, 128, 128}));
    EXPECT_EQ(plan.image_rects[2], (Rect{0, 0, 256, 256}));
}

TEST(CropPlan, OffsetRectDoubles) {
    const auto plan = ld::crop_plan_from_rect(128, 2, Rect{32, 16, 64, 64});
    EXPECT_EQ(plan.image_rects[1], (Rect{64, 32, 128, 128}));
    EXPECT_EQ(plan.feature_rects[0], (Rect{32, 16, 64, 64}));
    EXPECT_EQ(plan.extent(0), 128);
    EXPECT_EQ(plan.extent(1), 128);
}

TEST(CropPlan, RandomPlansStayInBoundsAndDouble) {
    ld::Rng rng(9);
    for (int i = 0; i < 10000; ++i) {
        const auto plan = ld::make_crop_plan(rng, 16, 3);
        EXPECT_EQ(plan.base_rect.w, 8);
        EXPECT_EQ(plan.base_rect.x % 2, 0);
        EXPECT_EQ(plan.base_rect.y % 2, 0);
        for (int j = 1; j < 3; ++j) {
            EXPECT_EQ(plan.image_rects[static_cast<std::size_t>(j)], plan.base_rect.scaled(1 << j));
            EXPECT_TRUE(plan.image_rects[static_cast<std::size_t>(j)].inside(16 << j, 16 << j));
        }
    }
}

TEST(CropPlan, CoversAllOffsets) {
    ld::Rng rng(10);
    std::set<std::pair<std::int64_t, std::int64_t>> seen;
    for (int i = 0; i < 2000; ++i) {
        const auto p = ld::make_crop_plan(rng, 16, 2);
        seen.insert({p.base_rect.x, p.base_rect.y});
    }
    EXPECT_EQ(seen.size(), 25u);  // offsets 0,2,...,8 on each axis
}

TEST(CropPlan, RejectsBadInputs) {
    ld::Rng rng(1);
    EXPECT_THROW(ld::make_crop_plan(rng, 6, 2), std::invalid_argument);
    EXPECT_THROW(ld::crop_plan_from_rect(16, 2, Rect{12, 0, 8, 8}), std::invalid_argument);
}

TEST(CropTensor, CommutesWithBilinearDownsample) {
    ld::Rng rng(4);
    const auto img = ld::testing::random_tensor<double>(Shape{3, 64, 64}, 5);
    const auto half = ld::bilinear_downsample(img, 2);
    for (int i = 0; i < 200; ++i) {
        const auto plan = ld::make_crop_plan(rng, 16, 3);
        const auto a = ld::bilinear_downsample(ld::crop_tensor(img, plan.image_rects[2]), 2);
        const auto b = ld::crop_tensor(half, plan.image_rects[1]);
        EXPECT_LE(ld::max_abs_diff(a, b), 1e-6);
    }
}

TEST(CropTensor, ExtractsRegion) {
    ld::Tensor<double> t(Shape{1, 4, 4});
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<double>(i);
    const auto c = ld::crop_tensor(t, Rect{1, 2, 2, 2});
    EXPECT_EQ(c.storage(), (ld::AlignedVector<double>{9, 10, 13, 14}));
    EXPECT_THROW(ld::crop_tensor(t, Rect{3, 3, 2, 2}), ld::ShapeError);
}
