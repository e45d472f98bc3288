#include <gtest/gtest.h>

#include "layerdiff/noise.hpp"
#include "stats.hpp"
#include "test_support.hpp"

namespace ld = layerdiff;
using ld::NoiseField;
using ld::Shape;
using ld::Tensor;

namespace {

double correlation(const Tensor<double>& a, const Tensor<double>& b) {
    double ma = ld::tensor_mean(a), mb = ld::tensor_mean(b);
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    return sab / std::sqrt(saa * sbb);
}

std::vector<Tensor<double>> decimated_samples(int count, int res, int factor, bool renormalize,
                                              std::uint64_t seed) {
    std::vector<Tensor<double>> out;
    out.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        const auto eps = ld::sample_gaussian<double>(1, res, res, ld::derive_seed(seed, std::uint64_t(i)));
        out.push_back(ld::sinc_downsample(eps, factor, renormalize).data);
    }
    return out;
}

}  // namespace

TEST(SampleGaussian, SameSeedIsBitIdentical) {
    const auto a = ld::sample_gaussian<float>(3, 8, 8, 7);
    const auto b = ld::sample_gaussian<float>(3, 8, 8, 7);
    EXPECT_EQ(a.data, b.data);
    EXPECT_EQ(a.seed, 7u);
    EXPECT_EQ(a.level, 0);
}

TEST(SampleGaussian, MomentsOfAMillionDraws) {
    const auto f = ld::sample_gaussian<double>(1, 1000, 1000, 11);
    EXPECT_LT(std::abs(ld::tensor_mean(f.data)), 0.01);
    const double sd = ld::tensor_stddev(f.data);
    EXPECT_GE(sd * sd, 0.99);
    EXPECT_LE(sd * sd, 1.01);
}

TEST(SampleGaussian, DifferentSeedsAreUncorrelated) {
    const auto a = ld::sample_gaussian<double>(1, 1000, 1000, 1);
    const auto b = ld::sample_gaussian<double>(1, 1000, 1000, 2);
    EXPECT_LT(std::abs(correlation(a.data, b.data)), 0.01);
}

TEST(SincDownsample, PreservesConstants) {
    NoiseField<double> f{Tensor<double>(Shape{2, 16, 16}, 0.37), 0, 0};
    for (int factor : {2, 4, 8}) {
        const auto d = ld::sinc_downsample(f, factor, false);
        ASSERT_EQ(d.data.shape(), (Shape{2, 16 / factor, 16 / factor}));
        for (double v : d.data.values()) EXPECT_NEAR(v, 0.37, 1e-12);
        EXPECT_EQ(d.level, static_cast<int>(std::log2(factor)));
    }
}

TEST(SincDownsample, RenormalizedOutputIsWhite) {
    const auto samples = decimated_samples(10000, 16, 2, true, 42);
    const auto m = ld::testing::pixel_moments(samples);
    EXPECT_GE(m.min_variance, 0.94);
    EXPECT_LE(m.max_variance, 1.06);
    EXPECT_LT(m.mean_abs_cov, 0.05);
    EXPECT_LT(m.max_abs_corr, 0.05);
}

TEST(SincDownsample, UnnormalizedVarianceIsInBandFraction) {
    const auto samples = decimated_samples(4000, 8, 2, false, 5);
    double var = 0;
    for (const auto& s : samples)
        for (double v : s.values()) var += v * v;
    var /= static_cast<double>(samples.size() * samples.front().size());
    EXPECT_NEAR(var, 0.25, 0.03);
}

TEST(SincDownsample, MarginalsPassAndersonDarling) {
    const auto samples = decimated_samples(10000, 16, 2, true, 77);
    for (std::size_t pixel : {0u, 27u, 63u}) {
        std::vector<double> x;
        for (const auto& s : samples) x.push_back(s[pixel]);
        EXPECT_LT(ld::testing::anderson_darling_normal(x), ld::testing::kAndersonDarlingCritical01) << pixel;
    }
}

TEST(SincDownsample, AndersonDarlingRejectsNonGaussianInput) {
    ld::Rng rng(3);
    std::vector<double> x;
    for (int i = 0; i < 10000; ++i) x.push_back(rng.uniform());
    EXPECT_GT(ld::testing::anderson_darling_normal(x), ld::testing::kAndersonDarlingCritical01);
}

TEST(AndersonDarling, PValueMatchesTabulatedCriticalValues) {
    EXPECT_NEAR(ld::testing::anderson_darling_pvalue(ld::testing::kAndersonDarlingCritical01), 0.01, 5e-4);
    EXPECT_NEAR(ld::testing::anderson_darling_pvalue(0.752), 0.05, 2e-3);
    EXPECT_NEAR(ld::testing::anderson_darling_pvalue(0.631), 0.10, 3e-3);
    double prev = 1.0;
    for (double a = 0.05; a < 3.0; a += 0.05) {
        const double p = ld::testing::anderson_darling_pvalue(a);
        EXPECT_LE(p, prev + 1e-3) << a;
        prev = p;
    }
}

TEST(SincDownsample, IsLinear) {
    const auto x = ld::sample_gaussian<double>(3, 16, 16, 1);
    const auto y = ld::sample_gaussian<double>(3, 16, 16, 2);
    const double a = 0.7, b = -1.9;
    Tensor<double> comb(x.data.shape());
    for (std::size_t i = 0; i < comb.size(); ++i) comb[i] = a * x.data[i] + b * y.data[i];
    const auto lhs = ld::sinc_downsample(NoiseField<double>{comb, 0, 0}, 4, true).data;
    const auto dx = ld::sinc_downsample(x, 4, true).data, dy = ld::sinc_downsample(y, 4, true).data;
    for (std::size_t i = 0; i < lhs.size(); ++i) EXPECT_NEAR(lhs[i], a * dx[i] + b * dy[i], 1e-5);
}

TEST(SincDownsample, AgreesWithSpatialSincSum) {
    // The spatial kernel's spectrum is one half on the cut-off bins.
    const auto eps = ld::sample_gaussian<double>(2, 8, 8, 9);
    for (int factor : {2, 4}) {
        const auto fft = ld::sinc_downsample(eps, factor, false, 0.5).data;
        const auto ref = ld::testing::spatial_sinc_downsample(eps.data, factor);
        EXPECT_LT(ld::max_abs_diff(fft, ref), 1e-3) << "factor " << factor;
    }
}

TEST(SincDownsample, FloatAndDoubleAgree) {
    const auto ed = ld::sample_gaussian<double>(1, 16, 16, 4);
    NoiseField<float> ef{ed.data.cast<float>(), 4, 0};
    const auto a = ld::sinc_downsample(ed, 2, true).data;
    const auto b = ld::sinc_downsample(ef, 2, true).data;
    EXPECT_LT(ld::max_abs_diff(a, b.cast<double>()), 1e-5);
}

TEST(SincDownsample, RejectsBadFactors) {
    const auto eps = ld::sample_gaussian<double>(1, 12, 12, 1);
    EXPECT_THROW(ld::sinc_downsample(eps, 3, true), std::invalid_argument);
    EXPECT_THROW(ld::sinc_downsample(eps, 8, true), std::invalid_argument);
}

TEST(BilinearDownsample, SmallExamples) {
    const Tensor<double> ones(Shape{1, 2, 2}, 1.0);
    EXPECT_EQ(ld::bilinear_downsample(ones, 2).storage(), ld::AlignedVector<double>{1.0});
    const Tensor<double> ramp(Shape{1, 2, 2}, std::vector<double>{0, 2, 4, 6});
    EXPECT_EQ(ld::bilinear_downsample(ramp, 2).storage(), ld::AlignedVector<double>{3.0});
}

TEST(BilinearDownsample, FactorFourIsBlockMean) {
    const auto x = ld::testing::random_tensor<double>(Shape{2, 8, 8}, 3);
    const auto direct = ld::bilinear_downsample(x, 4);
    const auto twice = ld::bilinear_downsample(ld::bilinear_downsample(x, 2), 2);
    ASSERT_EQ(direct.shape(), (Shape{2, 2, 2}));
    for (int c = 0; c < 2; ++c)
        for (int by = 0; by < 2; ++by)
            for (int bx = 0; bx < 2; ++bx) {
                double acc = 0;
                for (int y = 0; y < 4; ++y)
                    for (int xx = 0; xx < 4; ++xx) acc += x.at3(c, by * 4 + y, bx * 4 + xx);
                EXPECT_NEAR(direct.at3(c, by, bx), acc / 16.0, 1e-12);
            }
    EXPECT_LT(ld::max_abs_diff(direct, twice), 1e-15);
}

TEST(BilinearDownsample, ShrinksNoiseVariance) {
    const auto eps = ld::sample_gaussian<double>(1, 512, 512, 8);
    const double sd = ld::tensor_stddev(ld::bilinear_downsample(eps.data, 2));
    EXPECT_NEAR(sd * sd, 0.25, 0.03);
}

TEST(BilinearDownsample, RejectsNonDivisibleShape) {
    EXPECT_THROW(ld::bilinear_downsample(Tensor<double>(Shape{1, 6, 6}), 4), std::invalid_argument);
}

TEST(NoisePyramid, SingleLevelIsIdentity) {
    const auto eps = ld::sample_gaussian<float>(3, 16, 16, 1);
    const auto p = ld::build_noise_pyramid(eps, 1);
    ASSERT_EQ(p.levels.size(), 1u);
    EXPECT_EQ(p.levels[0].data, eps.data);
}

TEST(NoisePyramid, ThreeLevelsNestBands) {
    const auto eps = ld::sample_gaussian<double>(3, 32, 32, 2);
    const auto p = ld::build_noise_pyramid(eps, 3);
    ASSERT_EQ(p.levels.size(), 3u);
    EXPECT_EQ(p.levels[1].data.shape(), (Shape{3, 16, 16}));
    EXPECT_EQ(p.levels[2].data.shape(), (Shape{3, 8, 8}));
    const auto direct = ld::sinc_downsample(eps, 4, true).data;
    EXPECT_LT(ld::max_abs_diff(p.levels[2].data, direct), 1e-12);
    // composing two factor-2 steps reaches the same field
    const auto composed = ld::sinc_downsample(ld::sinc_downsample(eps, 2, true), 2, true).data;
    EXPECT_LT(ld::max_abs_diff(composed, direct), 1e-10);
}

TEST(NoisePyramid, IndependentModeDecorrelatesLevels) {
    double sum_rho = 0;
    const int trials = 10000;
    std::vector<double> a, b;
    for (int i = 0; i < trials; ++i) {
        const auto eps = ld::sample_gaussian<double>(1, 8, 8, ld::derive_seed(123, std::uint64_t(i)));
        const auto p = ld::build_noise_pyramid(eps, 2, ld::NoiseMode::independent);
        const auto ref = ld::sinc_downsample(eps, 2, true).data;
        a.push_back(p.levels[1].data[5]);
        b.push_back(ref[5]);
    }
    Tensor<double> ta(Shape{trials}, a), tb(Shape{trials}, b);
    sum_rho = correlation(ta, tb);
    EXPECT_LT(std::abs(sum_rho), 0.05);
    const auto eps = ld::sample_gaussian<double>(1, 8, 8, 1);
    EXPECT_EQ(ld::build_noise_pyramid(eps, 2, ld::NoiseMode::independent).levels[1].data.shape(),
              (ld::build_noise_pyramid(eps, 2).levels[1].data.shape()));
}

TEST(NoisePyramid, RejectsInsufficientDivisibility) {
    const auto eps = ld::sample_gaussian<double>(1, 8, 8, 1);
    EXPECT_THROW(ld::build_noise_pyramid(eps, 5), std::invalid_argument);
    EXPECT_THROW(ld::build_noise_pyramid(eps, 0), std::invalid_argument);
}

TEST(ImagePyramid, StaysInRange) {
    ld::Rng rng(1);
    Tensor<double> img(Shape{3, 32, 32});
    for (auto& v : img.storage()) v = rng.uniform(-1.0, 1.0);
    const auto p = ld::build_image_pyramid(img, 3);
    ASSERT_EQ(p.levels.size(), 3u);
    EXPECT_EQ(p.levels[2].shape(), (Shape{3, 8, 8}));
    for (const auto& lv : p.levels)
        for (double v : lv.values()) EXPECT_LE(std::abs(v), 1.0 + 1e-6);
}

TEST(NoiseMode, ParsesNames) {
    EXPECT_EQ(ld::noise_mode_from_string("sinc"), ld::NoiseMode::sinc);
    EXPECT_EQ(ld::noise_mode_from_string("independent"), ld::NoiseMode::independent);
    EXPECT_THROW(ld::noise_mode_from_string("bilinear"), std::invalid_argument);
}
