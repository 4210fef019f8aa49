#include <gtest/gtest.h>

#include "dspo/data_synthesis.hpp"
#include "dspo/semantic_instances.hpp"
#include "test_support.hpp"

using namespace dspo;
namespace tu = dspo::test_util;

namespace {

Mask rect(int h, int w, int y0, int x0, int y1, int x1) {
  Mask m(h, w);
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) m.set(y, x);
  return m;
}

}  // namespace

TEST(InstancePartition, CountsAndMasks) {
  InstancePartition p(2, 3, {0, 0, 4, 4, 4, 7});
  EXPECT_EQ(p.ids(), (std::vector<int>{0, 4, 7}));
  EXPECT_EQ(p.area(4), 3u);
  EXPECT_EQ(p.mask(7).count(), 1u);
  EXPECT_FALSE(p.background());
  EXPECT_THROW(p.area(5), InvalidArgument);
  EXPECT_THROW(InstancePartition(2, 2, {0, 1, 2}), InvalidArgument);
  EXPECT_THROW(InstancePartition(1, 2, {0, -1}), InvalidArgument);
}

TEST(InstanceWeights, AreaFractions) {
  InstancePartition p(2, 2, {0, 1, 1, 1});
  const auto w = instance_weights(p);
  EXPECT_DOUBLE_EQ(w.of(0), 0.25);
  EXPECT_DOUBLE_EQ(w.of(1), 0.75);
}

TEST(InstanceWeights, BackgroundExclusionRenormalizes) {
  InstancePartition p(2, 2, {0, 1, 2, 2}, 2);
  const auto w = instance_weights(p, true);
  EXPECT_DOUBLE_EQ(w.of(2), 0.0);
  EXPECT_DOUBLE_EQ(w.of(0), 0.5);
  EXPECT_DOUBLE_EQ(w.sum(), 1.0);
  InstancePartition only_bg(2, 2, {3, 3, 3, 3}, 3);
  EXPECT_DOUBLE_EQ(instance_weights(only_bg, true).of(3), 1.0);
}

// Property: for any partition, weights are non-negative, sum to one, and are
// proportional to area.
TEST(InstanceWeights, SimplexOverRandomPartitions) {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int> ext(1, 24), regions(1, 12);
  for (int trial = 0; trial < 1000; ++trial) {
    const int h = ext(rng), w = ext(rng);
    const auto masks = tu::random_partition(h, w, std::min(regions(rng), h * w), rng);
    const auto p = enforce_partition(masks, h, w);
    const auto wt = instance_weights(p);
    ASSERT_NEAR(wt.sum(), 1.0, 1e-12) << "trial " << trial;
    for (std::size_t i = 0; i < p.size(); ++i) {
      ASSERT_GE(wt.values[i], 0.0);
      ASSERT_NEAR(wt.values[i], double(p.areas()[i]) / (h * w), 1e-15);
    }
  }
}

TEST(EnforcePartition, OverlapGoesToSmallerMaskAndGapsToBackground) {
  const int h = 4, w = 4;
  const Mask big = rect(h, w, 0, 0, 4, 3);    // 12 px
  const Mask small = rect(h, w, 0, 0, 2, 2);  // 4 px, inside big
  const auto p = enforce_partition({big, small}, h, w);
  EXPECT_EQ(p.label(0, 0), 1);
  EXPECT_EQ(p.label(3, 0), 0);
  EXPECT_EQ(p.label(0, 3), 2);  // uncovered column
  EXPECT_EQ(p.background(), 2);
  EXPECT_EQ(p.area(0) + p.area(1) + p.area(2), 16u);
}

TEST(EnforcePartition, EveryPixelExactlyOnceForRandomOverlaps) {
  std::mt19937_64 rng(8);
  std::uniform_int_distribution<int> c(0, 15);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<Mask> masks;
    for (int i = 0; i < 5; ++i) {
      int y0 = c(rng), y1 = c(rng), x0 = c(rng), x1 = c(rng);
      if (y0 > y1) std::swap(y0, y1);
      if (x0 > x1) std::swap(x0, x1);
      masks.push_back(rect(16, 16, y0, x0, y1 + 1, x1 + 1));
    }
    const auto p = enforce_partition(masks, 16, 16);
    std::size_t total = 0;
    for (auto a : p.areas()) total += a;
    ASSERT_EQ(total, 256u);
    // Pairwise disjoint masks.
    for (std::size_t i = 0; i < p.size(); ++i)
      for (std::size_t j = i + 1; j < p.size(); ++j) {
        const auto a = p.mask(p.ids()[i]), b = p.mask(p.ids()[j]);
        for (std::size_t k = 0; k < a.bits.size(); ++k) ASSERT_FALSE(a.bits[k] && b.bits[k]);
      }
  }
  EXPECT_THROW(enforce_partition({Mask(3, 3)}, 4, 4), InvalidArgument);
}

TEST(TopK, KeepsLargestAndMergesRest) {
  // Areas: id0=1, id1=2, id2=3, id3=10 (background).
  std::vector<int> labels = {0, 1, 1, 2, 2, 2};
  labels.resize(16, 3);
  InstancePartition p(4, 4, labels, 3);
  const auto t = top_k_largest(p, 2);
  EXPECT_EQ(t.ids(), (std::vector<int>{1, 2, 3}));
  EXPECT_EQ(t.background(), 3);
  EXPECT_EQ(t.area(3), 11u);
  EXPECT_EQ(top_k_largest(p, 5), p);
  EXPECT_THROW(top_k_largest(p, 0), InvalidArgument);
}

TEST(TopK, WithoutBackgroundCreatesOne) {
  InstancePartition p(1, 4, {0, 1, 1, 2});
  const auto t = top_k_largest(p, 1);
  EXPECT_EQ(t.ids(), (std::vector<int>{1, 3}));
  EXPECT_EQ(t.background(), 3);
}

TEST(Resample, NearestNeighbourKeepsPartition) {
  InstancePartition p(2, 2, {0, 1, 2, 3}, 3);
  const auto up = resample_partition(p, 4, 4);
  EXPECT_EQ(up.area(0), 4u);
  EXPECT_EQ(up.label(3, 3), 3);
  EXPECT_EQ(up.background(), 3);
  EXPECT_EQ(resample_partition(up, 2, 2), p);
}

TEST(PartitionIo, RoundTripWithSidecar) {
  tu::TempDir dir;
  InstancePartition p(3, 3, {0, 0, 1, 1, 1, 900, 900, 2, 2}, 900);
  save_partition(p, dir / "m.png");
  EXPECT_TRUE(std::filesystem::exists(dir / "m.json"));
  EXPECT_EQ(load_partition(dir / "m.png"), p);
  write_file_atomic(dir / "m.json", R"({"instances":{"0":5},"background":null})");
  EXPECT_THROW(load_partition(dir / "m.png"), IoError);
}

TEST(Segmenters, GridTilesWholeImage) {
  const auto img = make_toy_scene(32, 1);
  const auto masks = segment(img, GridSegmenter(4, 4));
  EXPECT_EQ(masks.size(), 16u);
  const auto p = enforce_partition(masks, 32, 32);
  EXPECT_FALSE(p.background());
  EXPECT_EQ(p.size(), 16u);
}

TEST(Segmenters, RegionGrowingSeparatesFlatRegions) {
  Tensor t(3, 32, 32, 0.1f);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 32; ++y)
      for (int x = 16; x < 32; ++x) t(c, y, x) = 0.9f;
  const auto p = enforce_partition(segment(RasterImage(t), RegionGrowingSegmenter()), 32, 32);
  EXPECT_EQ(p.size(), 2u);
  EXPECT_NE(p.label(0, 0), p.label(0, 31));
}

TEST(Segmenters, RegionGrowingIsDeterministic) {
  const auto img = make_toy_scene(64, 3);
  const RegionGrowingSegmenter s;
  EXPECT_EQ(enforce_partition(segment(img, s), 64, 64), enforce_partition(segment(img, s), 64, 64));
}

TEST(Segmenters, ExternalReadsAndResamplesLabelMaps) {
  tu::TempDir dir;
  write_label_png(dir / "img7.png", 2, 2, {5, 5, 9, 9});
  const auto seg = make_segmenter("external", dir.path());
  const auto masks = segment(RasterImage(8, 8), *seg, "img7");
  ASSERT_EQ(masks.size(), 2u);
  EXPECT_EQ(masks[0].count(), 32u);
  try {
    segment(RasterImage(8, 8), *seg, "missing");
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("external"), std::string::npos);
  }
  EXPECT_THROW(make_segmenter("sam"), InvalidArgument);
}
