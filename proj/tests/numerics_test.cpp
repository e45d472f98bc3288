#include <gtest/gtest.h>

#include <functional>

#include "layerdiff/numerics/gradcheck.hpp"
#include "layerdiff/numerics/ops.hpp"
#include "test_support.hpp"

namespace ld = layerdiff;
using ld::Shape;
using ld::Tensor;
using ld::Var;
using ld::testing::random_tensor;

namespace {

template <typename T>
Var<T> cst(Tensor<T> t) {
    return Var<T>::constant(std::move(t));
}

// Projects an arbitrary tensor onto a scalar with fixed random weights so no
// gradient is trivially constant.
template <typename T>
Var<T> probe_sum(const Var<T>& x, std::uint64_t seed) {
    return ld::ops::sum(ld::ops::mul(x, cst(random_tensor<T>(x.shape(), seed))));
}

double check(const std::function<Var<double>(ld::ParamStore<double>&)>& f, ld::ParamStore<double>& ps) {
    return ld::finite_diff_check<double>(f, ps, 1e-5, 400, 3).max_rel_error;
}

}  // namespace

TEST(Conv2d, ScalarMultiplyAdd) {
    auto x = cst(Tensor<float>(Shape{1, 1, 1, 1}, std::vector<float>{2.0f}));
    auto w = cst(Tensor<float>(Shape{1, 1, 1, 1}, std::vector<float>{3.0f}));
    auto b = cst(Tensor<float>(Shape{1}, std::vector<float>{1.0f}));
    auto y = ld::ops::conv2d(x, w, b, 1, 0);
    ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
    EXPECT_FLOAT_EQ(y.value()[0], 7.0f);
}

TEST(Conv2d, SumOfOnes) {
    auto x = cst(Tensor<float>(Shape{1, 1, 3, 3}, 1.0f));
    auto w = cst(Tensor<float>(Shape{1, 1, 3, 3}, 1.0f));
    auto b = cst(Tensor<float>(Shape{1}));
    auto y = ld::ops::conv2d(x, w, b, 1, 0);
    ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
    EXPECT_FLOAT_EQ(y.value()[0], 9.0f);
}

TEST(Conv2d, MatchesNaiveLoopOnFixedCase) {
    const auto x = random_tensor<double>(Shape{1, 2, 4, 4}, 11);
    const auto w = random_tensor<double>(Shape{3, 2, 3, 3}, 12);
    const auto b = random_tensor<double>(Shape{3}, 13);
    const auto y = ld::ops::conv2d(cst(x), cst(w), cst(b), 1, 1);
    const auto ref = ld::testing::naive_conv2d(x, w, &b, 1, 1);
    ASSERT_EQ(y.shape(), (Shape{1, 3, 4, 4}));
    EXPECT_LT(ld::testing::max_rel_diff(y.value(), ref), 1e-6);
}

template <typename T>
void conv_sweep(double tol) {
    ld::Rng rng(2024);
    for (int trial = 0; trial < 120; ++trial) {
        const int n = 1 + static_cast<int>(rng.below(3));
        const int c = 1 + static_cast<int>(rng.below(5));
        const int o = 1 + static_cast<int>(rng.below(5));
        const int k = 1 + 2 * static_cast<int>(rng.below(2));  // 1 or 3
        const int stride = 1 + static_cast<int>(rng.below(2));
        const int pad = static_cast<int>(rng.below(2));
        const int h = k + static_cast<int>(rng.below(6));
        const int w = k + static_cast<int>(rng.below(6));
        const auto x = random_tensor<T>(Shape{n, c, h, w}, 100 + trial);
        const auto wt = random_tensor<T>(Shape{o, c, k, k}, 200 + trial);
        const auto b = random_tensor<T>(Shape{o}, 300 + trial);
        const auto y = ld::ops::conv2d(cst(x), cst(wt), cst(b), stride, pad);
        const auto ref = ld::testing::naive_conv2d(x, wt, &b, stride, pad);
        ASSERT_EQ(y.shape(), ref.shape()) << "trial " << trial;
        EXPECT_LT(ld::testing::max_rel_diff(y.value(), ref), tol) << "trial " << trial;
    }
}

TEST(Conv2d, RandomSweepFloat) { conv_sweep<float>(1e-5); }
TEST(Conv2d, RandomSweepDouble) { conv_sweep<double>(1e-10); }

TEST(Conv2d, ShapeMismatchNamesDimension) {
    auto x = cst(Tensor<float>(Shape{1, 2, 4, 4}));
    auto w = cst(Tensor<float>(Shape{1, 3, 3, 3}));
    try {
        ld::ops::conv2d(x, w, Var<float>(), 1, 1);
        FAIL() << "expected ShapeError";
    } catch (const ld::ShapeError& e) {
        EXPECT_NE(std::string(e.what()).find("channels"), std::string::npos);
    }
    EXPECT_THROW(ld::ops::conv2d(cst(Tensor<float>(Shape{1, 1, 2, 2})), cst(Tensor<float>(Shape{1, 1, 5, 5})),
                                 Var<float>(), 1, 1),
                 ld::ShapeError);
}

TEST(Backward, QuadraticGradient) {
    ld::ParamStore<double> ps;
    ps.add("w", Tensor<double>(Shape{2}, std::vector<double>{1.0, 2.0}));
    auto loss = ld::ops::sum(ld::ops::mul(ps.get("w"), ps.get("w")));
    ld::backward(loss, ps);
    EXPECT_DOUBLE_EQ(ps.get("w").grad()[0], 2.0);
    EXPECT_DOUBLE_EQ(ps.get("w").grad()[1], 4.0);
}

TEST(Backward, GradientsAreOverwrittenNotAccumulated) {
    ld::ParamStore<double> ps;
    ps.add("w", Tensor<double>(Shape{2}, std::vector<double>{1.0, 2.0}));
    for (int i = 0; i < 3; ++i) {
        auto loss = ld::ops::sum(ld::ops::mul(ps.get("w"), ps.get("w")));
        ld::backward(loss, ps);
    }
    EXPECT_DOUBLE_EQ(ps.get("w").grad()[1], 4.0);
}

TEST(Backward, DisconnectedGroupGetsZeroGradient) {
    ld::ParamStore<double> ps;
    ps.add("a.w", random_tensor<double>(Shape{3}, 1));
    ps.add("b.w", random_tensor<double>(Shape{4}, 2));
    auto loss = ld::ops::sum(ld::ops::mul(ps.get("a.w"), ps.get("a.w")));
    ld::backward(loss, ps);
    for (auto v : ps.get("b.w").grad().values()) EXPECT_EQ(v, 0.0);
    EXPECT_EQ(ps.get("b.w").grad().shape(), ps.get("b.w").shape());
}

TEST(Backward, NonScalarLossIsRejected) {
    ld::ParamStore<double> ps;
    ps.add("w", Tensor<double>(Shape{2}, 1.0));
    EXPECT_THROW(ld::backward(ld::ops::scale(ps.get("w"), 2.0), ps), ld::ShapeError);
}

TEST(Backward, NoGradGuardRecordsNothing) {
    ld::ParamStore<double> ps;
    ps.add("w", Tensor<double>(Shape{2}, 1.0));
    ld::NoGradGuard guard;
    auto y = ld::ops::scale(ps.get("w"), 2.0);
    EXPECT_FALSE(y.requires_grad());
}

TEST(FiniteDiff, SquareAtThree) {
    ld::ParamStore<double> ps;
    ps.add("w", Tensor<double>(Shape{1}, 3.0));
    auto f = [](ld::ParamStore<double>& p) { return ld::ops::mul(p.get("w"), p.get("w")); };
    EXPECT_LT(ld::finite_diff_check<double>(f, ps, 1e-4).max_rel_error, 1e-6);
}

TEST(FiniteDiff, ConstantFunctionHasZeroError) {
    ld::ParamStore<double> ps;
    ps.add("w", Tensor<double>(Shape{3}, 1.0));
    auto f = [](ld::ParamStore<double>&) { return Var<double>::constant(Tensor<double>::scalar(5.0)); };
    const auto r = ld::finite_diff_check<double>(f, ps, 1e-4);
    EXPECT_EQ(r.max_rel_error, 0.0);
}

TEST(FiniteDiff, NanIsAnError) {
    ld::ParamStore<double> ps;
    ps.add("w", Tensor<double>(Shape{1}, 1.0));
    auto f = [](ld::ParamStore<double>& p) {
        return ld::ops::scale(p.get("w"), std::numeric_limits<double>::quiet_NaN());
    };
    EXPECT_THROW(ld::finite_diff_check<double>(f, ps, 1e-4), std::runtime_error);
}

TEST(FiniteDiff, InvalidStepRejected) {
    ld::ParamStore<double> ps;
    ps.add("w", Tensor<double>(Shape{1}, 1.0));
    auto f = [](ld::ParamStore<double>& p) { return ld::ops::mul(p.get("w"), p.get("w")); };
    EXPECT_THROW(ld::finite_diff_check<double>(f, ps, 0.0), std::invalid_argument);
}

TEST(PrimitiveGradients, Conv2dStridedAndPadded) {
    ld::ParamStore<double> ps;
    ps.add("x", random_tensor<double>(Shape{2, 3, 5, 5}, 1));
    ps.add("w", random_tensor<double>(Shape{4, 3, 3, 3}, 2));
    ps.add("b", random_tensor<double>(Shape{4}, 3));
    for (int stride : {1, 2}) {
        auto f = [stride](ld::ParamStore<double>& p) {
            return probe_sum(ld::ops::conv2d(p.get("x"), p.get("w"), p.get("b"), stride, 1), 9);
        };
        EXPECT_LT(check(f, ps), 1e-4) << "stride " << stride;
    }
    auto pointwise = [](ld::ParamStore<double>& p) {
        return probe_sum(ld::ops::conv2d(p.get("x"), p.get("w"), p.get("b"), 1, 1), 8);
    };
    EXPECT_LT(check(pointwise, ps), 1e-4);
}

TEST(PrimitiveGradients, PointwiseConv) {
    ld::ParamStore<double> ps;
    ps.add("x", random_tensor<double>(Shape{2, 3, 4, 4}, 1));
    ps.add("w", random_tensor<double>(Shape{5, 3, 1, 1}, 2));
    ps.add("b", random_tensor<double>(Shape{5}, 3));
    auto f = [](ld::ParamStore<double>& p) {
        return probe_sum(ld::ops::conv2d(p.get("x"), p.get("w"), p.get("b"), 1, 0), 4);
    };
    EXPECT_LT(check(f, ps), 1e-4);
}

TEST(PrimitiveGradients, LinearAndMatmul) {
    ld::ParamStore<double> ps;
    ps.add("x", random_tensor<double>(Shape{3, 4}, 1));
    ps.add("w", random_tensor<double>(Shape{5, 4}, 2));
    ps.add("b", random_tensor<double>(Shape{5}, 3));
    ps.add("p", random_tensor<double>(Shape{2, 3, 4}, 4));
    ps.add("q", random_tensor<double>(Shape{2, 3, 4}, 5));
    auto lin = [](ld::ParamStore<double>& p) {
        return probe_sum(ld::ops::linear(p.get("x"), p.get("w"), p.get("b")), 6);
    };
    EXPECT_LT(check(lin, ps), 1e-4);
    for (int mode = 0; mode < 4; ++mode) {
        const bool ta = mode & 1, tb = mode & 2;
        // p, q are [2,3,4]; choose transposes so inner dims agree.
        auto f = [ta, tb](ld::ParamStore<double>& p) {
            const Var<double>& a = p.get("p");
            const Var<double>& b = p.get("q");
            if (!ta && !tb) return probe_sum(ld::ops::bmm(a, ld::ops::reshape(b, Shape{2, 4, 3}), false, false), 7);
            if (ta && !tb) return probe_sum(ld::ops::bmm(a, b, true, false), 7);
            if (!ta && tb) return probe_sum(ld::ops::bmm(a, b, false, true), 7);
            return probe_sum(ld::ops::bmm(a, ld::ops::reshape(b, Shape{2, 4, 3}), true, true), 7);
        };
        EXPECT_LT(check(f, ps), 1e-4) << "mode " << mode;
    }
}

TEST(PrimitiveGradients, ElementwiseOps) {
    ld::ParamStore<double> ps;
    ps.add("a", random_tensor<double>(Shape{2, 3, 2, 2}, 1));
    ps.add("b", random_tensor<double>(Shape{2, 3, 2, 2}, 2));
    ps.add("v", random_tensor<double>(Shape{2, 3}, 3));
    auto f = [](ld::ParamStore<double>& p) {
        auto s = ld::ops::add(ld::ops::mul(p.get("a"), p.get("b")), ld::ops::scale(p.get("a"), 0.3));
        s = ld::ops::sub(s, ld::ops::silu(p.get("b")));
        return probe_sum(ld::ops::add_channelwise(s, p.get("v")), 5);
    };
    EXPECT_LT(check(f, ps), 1e-4);
}

TEST(PrimitiveGradients, GroupNorm) {
    ld::ParamStore<double> ps;
    ps.add("x", random_tensor<double>(Shape{2, 8, 3, 3}, 1, 2.0));
    ps.add("g", random_tensor<double>(Shape{8}, 2));
    ps.add("b", random_tensor<double>(Shape{8}, 3));
    for (int groups : {1, 4, 8}) {
        auto f = [groups](ld::ParamStore<double>& p) {
            return probe_sum(ld::ops::group_norm(p.get("x"), p.get("g"), p.get("b"), groups), 4);
        };
        EXPECT_LT(check(f, ps), 1e-4) << groups << " groups";
    }
}

TEST(PrimitiveGradients, SoftmaxAttentionShape) {
    ld::ParamStore<double> ps;
    ps.add("q", random_tensor<double>(Shape{2, 4, 6}, 1));
    ps.add("k", random_tensor<double>(Shape{2, 4, 6}, 2));
    ps.add("v", random_tensor<double>(Shape{2, 4, 6}, 3));
    auto f = [](ld::ParamStore<double>& p) {
        auto s = ld::ops::scale(ld::ops::bmm(p.get("q"), p.get("k"), true, false), 0.5);
        auto a = ld::ops::softmax_lastdim(s);
        return probe_sum(ld::ops::bmm(p.get("v"), a, false, true), 4);
    };
    EXPECT_LT(check(f, ps), 1e-4);
}

TEST(PrimitiveGradients, ResamplingConcatCropEmbedding) {
    ld::ParamStore<double> ps;
    ps.add("x", random_tensor<double>(Shape{2, 2, 3, 3}, 1));
    ps.add("y", random_tensor<double>(Shape{2, 3, 6, 6}, 2));
    ps.add("e", random_tensor<double>(Shape{5, 4}, 3));
    auto f = [](ld::ParamStore<double>& p) {
        auto up = ld::ops::upsample_nearest2x(p.get("x"));
        auto cat = ld::ops::concat_channels<double>({up, p.get("y")});
        auto cr = ld::ops::crop_spatial(cat, 1, 2, 4, 3);
        auto emb = ld::ops::embedding_mean(p.get("e"), {{1, 2, 0}, {3, 3, 4}}, 0);
        return ld::ops::add(probe_sum(cr, 4), probe_sum(emb, 5));
    };
    EXPECT_LT(check(f, ps), 1e-4);
}

TEST(PrimitiveGradients, MseAndWeightedSum) {
    ld::ParamStore<double> ps;
    ps.add("a", random_tensor<double>(Shape{2, 3}, 1));
    ps.add("b", random_tensor<double>(Shape{4}, 2));
    const auto ta = random_tensor<double>(Shape{2, 3}, 3);
    const auto tb = random_tensor<double>(Shape{4}, 4);
    auto f = [&](ld::ParamStore<double>& p) {
        return ld::ops::weighted_sum<double>({ld::ops::mse(p.get("a"), ta), ld::ops::mse(p.get("b"), tb)}, {0.7, 2.0});
    };
    EXPECT_LT(check(f, ps), 1e-4);
}

TEST(Ops, UpsampleAndCropValues) {
    auto x = cst(Tensor<double>(Shape{1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4}));
    auto up = ld::ops::upsample_nearest2x(x);
    EXPECT_EQ(up.value().storage(), (ld::AlignedVector<double>{1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4}));
    auto cr = ld::ops::crop_spatial(up, 1, 1, 2, 2);
    EXPECT_EQ(cr.value().storage(), (ld::AlignedVector<double>{1, 2, 3, 4}));
    EXPECT_THROW(ld::ops::crop_spatial(up, 3, 3, 2, 2), ld::ShapeError);
}

TEST(Ops, SoftmaxRowsSumToOne) {
    auto x = cst(random_tensor<double>(Shape{3, 7}, 5, 4.0));
    auto y = ld::ops::softmax_lastdim(x);
    for (int r = 0; r < 3; ++r) {
        double s = 0;
        for (int j = 0; j < 7; ++j) s += y.value()[static_cast<std::size_t>(r * 7 + j)];
        EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

TEST(Ops, Deterministic) {
    const auto x = random_tensor<float>(Shape{2, 4, 8, 8}, 1);
    const auto w = random_tensor<float>(Shape{6, 4, 3, 3}, 2);
    auto a = ld::ops::conv2d(cst(x), cst(w), Var<float>(), 1, 1);
    auto b = ld::ops::conv2d(cst(x), cst(w), Var<float>(), 1, 1);
    EXPECT_EQ(a.value(), b.value());
}
