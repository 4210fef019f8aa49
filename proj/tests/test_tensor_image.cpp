#include <gtest/gtest.h>

#include "dspo/image.hpp"
#include "dspo/iqa.hpp"
#include "test_support.hpp"

using namespace dspo;
namespace tu = dspo::test_util;

TEST(Tensor, IndexingIsChannelMajor) {
  Tensor t(2, 3, 4);
  t(1, 2, 3) = 7.0f;
  EXPECT_EQ(t[(1 * 3 + 2) * 4 + 3], 7.0f);
  EXPECT_EQ(t.plane(), 12u);
  EXPECT_EQ(t.channel(1).size(), 12u);
}

TEST(Tensor, ShapeMismatchIsReported) {
  Tensor a(3, 4, 4), b(3, 4, 5);
  EXPECT_FALSE(a.same_shape(b));
  EXPECT_THROW(require_same_shape(a, b, "test"), InvalidArgument);
}

TEST(Mask, CountsSetBits) {
  Mask m(4, 4);
  m.set(0, 0);
  m.set(3, 3);
  EXPECT_EQ(m.count(), 2u);
  EXPECT_TRUE(m(3, 3));
  EXPECT_FALSE(m(1, 1));
}

TEST(RasterImage, RejectsOutOfRangeAndTinyImages) {
  Tensor t(3, 8, 8, 1.5f);
  EXPECT_THROW(RasterImage{t}, InvalidArgument);
  EXPECT_THROW(RasterImage(4, 4), InvalidArgument);
  EXPECT_THROW(RasterImage(Tensor(1, 8, 8)), InvalidArgument);
  const auto c = RasterImage::from_clamped(t);
  EXPECT_EQ(c(0, 0, 0), 1.0f);
}

TEST(CubicWeight, KeysKernelValues) {
  EXPECT_DOUBLE_EQ(detail::cubic_weight(0.0), 1.0);
  EXPECT_DOUBLE_EQ(detail::cubic_weight(1.0), 0.0);
  EXPECT_DOUBLE_EQ(detail::cubic_weight(2.0), 0.0);
  // a = -0.5 at t = 0.5: (1.5*0.5 - 2.5)*0.25 + 1 = 0.5625
  EXPECT_DOUBLE_EQ(detail::cubic_weight(0.5), 0.5625);
  // t = 1.5: ((-0.75 + 2.5)*1.5 - 4)*1.5 + 2 = -0.0625
  EXPECT_DOUBLE_EQ(detail::cubic_weight(1.5), -0.0625);
}

TEST(BicubicResize, PreservesConstantsAndIdentity) {
  std::mt19937_64 rng(3);
  Tensor c(3, 8, 8, 0.25f);
  const Tensor up = bicubic_resize(c, 32, 32);
  for (float v : up.values()) EXPECT_NEAR(v, 0.25f, 1e-6);
  const Tensor r = tu::random_tensor<float>(3, 9, 7, rng);
  EXPECT_LT(tu::relative_error(bicubic_resize(r, 9, 7), r), 1e-6);
}

TEST(AreaDownsample, BlockMeans) {
  Tensor t(1, 2, 4);
  for (int x = 0; x < 4; ++x) {
    t(0, 0, x) = static_cast<float>(x);
    t(0, 1, x) = static_cast<float>(10 + x);
  }
  const Tensor d = area_downsample(t, 2);
  ASSERT_EQ(d.width(), 2);
  EXPECT_FLOAT_EQ(d(0, 0, 0), (0 + 1 + 10 + 11) / 4.0f);
  EXPECT_FLOAT_EQ(d(0, 0, 1), (2 + 3 + 12 + 13) / 4.0f);
  EXPECT_THROW(area_downsample(t, 3), InvalidArgument);
}

TEST(GaussianBlur, ConservesMassOfConstantImage) {
  Tensor t(3, 16, 16, 0.6f);
  for (float v : gaussian_blur(t, 1.3).values()) EXPECT_NEAR(v, 0.6f, 1e-6);
}

TEST(Png, RoundTripIsExactAfterQuantization) {
  tu::TempDir dir;
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Tensor t(3, 12, 10);
  for (float& v : t.values()) v = u(rng);
  const RasterImage q = quantize8(RasterImage(t));
  write_png(dir / "a.png", q);
  EXPECT_EQ(read_png(dir / "a.png"), q);
  EXPECT_EQ(quantize8(q), q);
}

TEST(Png, LabelMapRoundTrip) {
  tu::TempDir dir;
  std::vector<int> labels(6 * 5);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i * 997 % 65536);
  write_label_png(dir / "l.png", 6, 5, labels);
  const auto back = read_label_png(dir / "l.png");
  EXPECT_EQ(back.height, 6);
  EXPECT_EQ(back.width, 5);
  EXPECT_EQ(back.labels, labels);
  EXPECT_THROW(write_label_png(dir / "bad.png", 1, 1, {70000}), InvalidArgument);
}

TEST(Png, MissingAndCorruptFilesThrow) {
  tu::TempDir dir;
  EXPECT_THROW(read_png(dir / "none.png"), IoError);
  std::ofstream(dir / "junk.png") << "not a png";
  EXPECT_THROW(read_png(dir / "junk.png"), IoError);
}

TEST(Psnr, KnownMse) {
  Tensor a(3, 8, 8, 0.5f), b(3, 8, 8, 0.6f);
  // MSE = 0.01 → 10 log10(1/0.01) = 20 dB
  EXPECT_NEAR(psnr(a, b), 20.0, 1e-4);
  EXPECT_DOUBLE_EQ(psnr(a, a), kPsnrCap);
}

TEST(Ssim, IdenticalIsOneAndDegradesWithNoise) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Tensor a(3, 16, 16);
  for (float& v : a.values()) v = u(rng);
  EXPECT_NEAR(ssim(a, a), 1.0, 1e-9);
  Tensor b = tu::perturbed(a, rng, 0.2);
  EXPECT_LT(ssim(a, b), 0.95);
}

TEST(MetricSuite, PerfectReconstructionWinsOnFidelity) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Tensor gt(3, 16, 16);
  for (float& v : gt.values()) v = u(rng);
  const auto suite = builtin_metric_suite();
  const auto self = suite.evaluate(gt, gt);
  const auto noisy = suite.evaluate(RasterImage::from_clamped(tu::perturbed(gt, rng, 0.1)).tensor(), gt);
  EXPECT_TRUE(self.all_finite());
  EXPECT_GT(self[Metric::psnr], noisy[Metric::psnr]);
  EXPECT_GT(self[Metric::ssim], noisy[Metric::ssim]);
  EXPECT_THROW(make_metric_suite("nope"), InvalidArgument);
}

TEST(NormalizeAggregate, MinMaxWithDirection) {
  std::vector<MetricVector> g(3);
  for (int m = 0; m < kMetricCount; ++m) {
    g[0][m] = 0.0;
    g[1][m] = 1.0;
    g[2][m] = 2.0;
  }
  const auto n = normalize_positive_trend(g);
  for (int m = 0; m < kMetricCount; ++m) {
    const double lo = kHigherIsBetter[m] ? 0.0 : 1.0;
    EXPECT_DOUBLE_EQ(n[0][m], lo);
    EXPECT_DOUBLE_EQ(n[1][m], 0.5);
    EXPECT_DOUBLE_EQ(n[2][m], 1.0 - lo);
  }
  EXPECT_THROW(normalize_aggregate({g[0]}), InvalidArgument);
}

TEST(NormalizeAggregate, ConstantMetricMapsToHalf) {
  std::vector<MetricVector> g(2);
  const auto n = normalize_positive_trend(g);
  for (int m = 0; m < kMetricCount; ++m) EXPECT_DOUBLE_EQ(n[1][m], 0.5);
}

// Adding a constant or scaling any metric column by a positive factor leaves the
// aggregate unchanged.
TEST(NormalizeAggregate, AffineInvariancePerMetric) {
  std::mt19937_64 rng(77);
  std::uniform_real_distribution<double> u(-5, 5), s(0.1, 10);
  for (int table = 0; table < 200; ++table) {
    std::vector<MetricVector> g(4);
    for (auto& v : g)
      for (int m = 0; m < kMetricCount; ++m) v[m] = u(rng);
    auto h = g;
    for (int m = 0; m < kMetricCount; ++m) {
      const double a = s(rng), b = u(rng);
      for (auto& v : h) v[m] = a * v[m] + b;
    }
    const auto x = normalize_aggregate(g), y = normalize_aggregate(h);
    for (std::size_t i = 0; i < x.size(); ++i) ASSERT_NEAR(x[i], y[i], 1e-9) << "table " << table;
  }
}
