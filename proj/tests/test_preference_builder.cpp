#include <gtest/gtest.h>

#include "dspo/preference_builder.hpp"
#include "test_support.hpp"

using namespace dspo;
namespace tu = dspo::test_util;

namespace {

DenoiserConfig tiny_model() {
  DenoiserConfig c;
  c.resolution = 16;
  c.base_channels = 4;
  c.mid_channels = 4;
  c.embed_dim = 4;
  c.hidden_dim = 4;
  c.timesteps = 10;
  return c;
}

// Brute force: enumerate every ordered pair and keep the lexicographically
// first pair (i, j) maximizing s_i − s_j.
std::optional<BestWorst> brute_force(const std::vector<double>& s) {
  double best = -1;
  std::optional<BestWorst> out;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j) {
      const double gap = s[i] - s[j];
      // Ties on the gap: prefer the lowest winner, then the lowest loser.
      if (gap > best) best = gap, out = BestWorst{int(i), int(j)};
    }
  if (best <= 0) return std::nullopt;
  return out;
}

PreferenceRecord sample_record() {
  PreferenceRecord r;
  r.lq_id = "img1";
  r.instance_id = 3;
  r.mask_path = "masks/img1.png";
  r.winner_path = "c/img1/a.png";
  r.loser_path = "c/img1/b.png";
  r.weight = 0.25;
  r.source = PreferenceSource::human;
  r.negative_prompt = "dark-red busy";
  r.winner_setting = "a";
  r.loser_setting = "b";
  return r;
}

}  // namespace

TEST(GenSettings, DefaultGridsAreDistinct) {
  const auto multi = multi_step_settings();
  ASSERT_EQ(multi.size(), 4u);
  EXPECT_EQ(multi[0].steps, 20);
  EXPECT_EQ(multi[1].steps, 80);
  EXPECT_DOUBLE_EQ(multi[2].cfg_scale, 4.5);
  EXPECT_DOUBLE_EQ(multi[3].cfg_scale, 10.5);
  const auto one = one_step_settings();
  for (const auto& s : one) EXPECT_EQ(s.steps, 1);
  nlohmann::json j = one[1];
  const auto back = j.get<GenSettings>();
  EXPECT_EQ(back.label, "rank64");
  EXPECT_DOUBLE_EQ(back.adapter_scale, 1.25);
}

TEST(GenerateCandidates, DeterministicDistinctAndValidated) {
  const Denoiser m(tiny_model());
  const auto sched = linear_schedule(10);
  const RasterImage lq(8, 8, 0.5f);
  std::vector<GenSettings> s = {{"a", 3, 1.0, 1.0}, {"b", 5, 3.0, 1.0}};
  const auto c1 = generate_candidates(m, sched, "x", lq, s, 7);
  const auto c2 = generate_candidates(m, sched, "x", lq, s, 7);
  ASSERT_EQ(c1.size(), 2u);
  EXPECT_EQ(c1.candidates[0].image, c2.candidates[0].image);
  EXPECT_FALSE(c1.candidates[0].image == c1.candidates[1].image);
  s[1].label = "a";
  EXPECT_THROW(generate_candidates(m, sched, "x", lq, s, 7), InvalidArgument);
  EXPECT_THROW(generate_candidates(m, sched, "x", lq, {s[0]}, 7), InvalidArgument);
}

TEST(InstanceCrop, BoundingBoxAndMeanFill) {
  // 8×8 image, instance 1 is an L shape in the top-left 2×2 box.
  std::vector<int> labels(64, 0);
  labels[0] = labels[1] = labels[8] = 1;
  const InstancePartition p(8, 8, labels);
  Tensor img(3, 8, 8, 0.0f);
  img(0, 0, 0) = 0.3f;
  img(0, 0, 1) = 0.6f;
  img(0, 1, 0) = 0.9f;
  const auto box = bounding_box(p, 1);
  EXPECT_EQ(box.height, 2);
  EXPECT_EQ(box.width, 2);
  const Tensor crop = instance_crop(img, p, 1, 1);
  ASSERT_EQ(crop.height(), 2);
  EXPECT_FLOAT_EQ(crop(0, 1, 1), 0.6f);  // out-of-mask pixel gets the in-mask mean
  const Tensor padded = instance_crop(img, p, 1);
  EXPECT_EQ(padded.height(), kSsimWindow);
  EXPECT_EQ(padded(0, 5, 5), 0.0f);
  EXPECT_THROW(bounding_box(p, 4), InvalidArgument);
}

TEST(SelectBestWorst, Examples) {
  const auto bw = select_best_worst({0.2, 0.9, 0.1, 0.5});
  ASSERT_TRUE(bw);
  EXPECT_EQ(bw->winner, 1);
  EXPECT_EQ(bw->loser, 2);
  EXPECT_FALSE(select_best_worst({0.4, 0.4, 0.4}));
  const auto tie = select_best_worst({1.0, 0.0, 1.0, 0.0});
  EXPECT_EQ(tie->winner, 0);
  EXPECT_EQ(tie->loser, 1);
  EXPECT_THROW(select_best_worst({1.0}), InvalidArgument);
}

TEST(SelectBestWorst, MatchesBruteForceOnRandomScores) {
  std::mt19937_64 rng(99);
  std::uniform_int_distribution<int> coarse(0, 4);
  std::uniform_real_distribution<double> fine(0.0, 4.0);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> s(4);
    // Half the sets use coarse values to exercise ties.
    for (auto& v : s) v = trial % 2 ? coarse(rng) : fine(rng);
    const auto got = select_best_worst(s), want = brute_force(s);
    ASSERT_EQ(bool(got), bool(want)) << "trial " << trial;
    if (got) {
      ASSERT_EQ(got->winner, want->winner) << "trial " << trial;
      ASSERT_EQ(got->loser, want->loser) << "trial " << trial;
      ASSERT_NE(got->winner, got->loser);
    }
  }
}

TEST(Hallucination, InvertedFlaggedIdenticalNot) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  const HistogramCaptioner cap;
  int inverted_flagged = 0, identical_flagged = 0;
  for (int trial = 0; trial < 100; ++trial) {
    // A saturated base colour with mild texture.
    float base[3];
    for (float& b : base) b = u(rng) < 0.5f ? 0.1f + 0.2f * u(rng) : 0.7f + 0.2f * u(rng);
    if (std::max({base[0], base[1], base[2]}) - std::min({base[0], base[1], base[2]}) < 0.2f) base[trial % 3] = 0.5f;
    Tensor gt(3, 12, 12);
    for (int c = 0; c < 3; ++c)
      for (int i = 0; i < 144; ++i) gt[c * 144 + i] = std::clamp(base[c] + 0.04f * (u(rng) - 0.5f), 0.0f, 1.0f);
    Tensor inv = gt;
    for (float& v : inv.values()) v = 1.0f - v;
    const auto flags = detect_hallucination(cap, gt, {gt, inv});
    for (const auto& f : flags) {
      if (f.candidate == 0) ++identical_flagged;
      if (f.candidate == 1) ++inverted_flagged;
    }
  }
  EXPECT_EQ(identical_flagged, 0);
  EXPECT_EQ(inverted_flagged, 100);
}

TEST(Hallucination, CaptionSimilarityBasics) {
  EXPECT_DOUBLE_EQ(caption_similarity("a b", "a b"), 1.0);
  EXPECT_DOUBLE_EQ(caption_similarity("a", "b"), 0.0);
  EXPECT_DOUBLE_EQ(caption_similarity("", ""), 1.0);
  EXPECT_DOUBLE_EQ(caption_similarity("a", ""), 0.0);
  EXPECT_NEAR(caption_similarity("a a b", "a b b"), 4.0 / 5.0, 1e-12);
}

TEST(Hallucination, CaptionerFailureIsAttributed) {
  const FunctionCaptioner bad("broken", [](const Tensor&) -> std::string { throw std::runtime_error("boom"); });
  try {
    detect_hallucination(bad, Tensor(3, 8, 8), {Tensor(3, 8, 8)});
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("broken"), std::string::npos);
  }
}

TEST(PreferenceRecord, JsonRoundTrip) {
  const auto r = sample_record();
  EXPECT_EQ(from_json_record(to_json_record(r)), r);
  auto r2 = r;
  r2.negative_prompt.reset();
  r2.source = PreferenceSource::automatic;
  EXPECT_EQ(from_json_record(to_json_record(r2)), r2);
}

TEST(PreferenceRecord, StrictSchema) {
  const auto good = to_json_record(sample_record());
  auto bad = good;
  bad["extra"] = 1;
  EXPECT_THROW(from_json_record(bad), InvalidArgument);
  bad = good;
  bad.erase("weight");
  EXPECT_THROW(from_json_record(bad), InvalidArgument);
  bad = good;
  bad["source"] = "robot";
  EXPECT_THROW(from_json_record(bad), InvalidArgument);
  bad = good;
  bad["settings"]["loser"] = "a";
  EXPECT_THROW(from_json_record(bad), InvalidArgument);
  bad = good;
  bad["weight"] = 1.5;
  EXPECT_THROW(from_json_record(bad), InvalidArgument);
  bad = good;
  bad["instance_id"] = "3";
  EXPECT_THROW(from_json_record(bad), InvalidArgument);
}

TEST(PreferenceRecord, JsonlRoundTripAndLineNumbers) {
  tu::TempDir dir;
  std::vector<PreferenceRecord> rs = {sample_record(), sample_record()};
  rs[1].instance_id = 4;
  export_jsonl(rs, dir / "r.jsonl");
  EXPECT_EQ(import_jsonl(dir / "r.jsonl"), rs);
  write_file_atomic(dir / "bad.jsonl", to_json_record(rs[0]).dump() + "\n{oops\n");
  try {
    import_jsonl(dir / "bad.jsonl");
    FAIL();
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
}

TEST(BuildRecords, OneRecordPerDecidedInstanceWithNegativePrompt) {
  InstanceWeightVector w{{0, 1, 2}, {0.5, 0.3, 0.2}};
  std::vector<InstanceJudgement> js(3);
  js[0] = {0, {0.1, 0.9, 0.5}, BestWorst{1, 0}, {}};
  js[1] = {1, {0.5, 0.5, 0.5}, std::nullopt, {}};
  js[2] = {2, {0.2, 0.1, 0.8}, BestWorst{2, 1}, {{0, "white", 0.0}, {1, "dark-blue", 0.05}}};
  const CandidateFiles files{"m.png", {"p0.png", "p1.png", "p2.png"}};
  const auto rs = build_records("lq", {"s0", "s1", "s2"}, w, js, files);
  ASSERT_EQ(rs.size(), 2u);
  EXPECT_EQ(rs[0].winner_path, "p1.png");
  EXPECT_EQ(rs[0].loser_setting, "s0");
  EXPECT_DOUBLE_EQ(rs[0].weight, 0.5);
  EXPECT_FALSE(rs[0].negative_prompt);
  // Loser (candidate 1) is flagged, so its caption is the negative prompt.
  EXPECT_EQ(rs[1].negative_prompt, "dark-blue");
  EXPECT_THROW(build_records("lq", {"s0", "s1"}, w, js, files), InvalidArgument);
}

TEST(JudgeInstances, ClosestCandidateWinsPerInstance) {
  // Two instances: left and right halves. Candidate 0 matches GT on the left,
  // candidate 1 on the right; each is bad elsewhere.
  std::vector<int> labels(16 * 16);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x) labels[y * 16 + x] = x < 8 ? 0 : 1;
  const InstancePartition p(16, 16, labels);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<float> u(0.2f, 0.8f);
  Tensor gt(3, 16, 16);
  for (float& v : gt.values()) v = u(rng);
  Tensor c0 = gt, c1 = gt;
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x) (x < 8 ? c1 : c0)(c, y, x) = std::clamp(gt(c, y, x) + 0.3f * (u(rng) - 0.5f), 0.f, 1.f);
  CandidateSet cs{"lq", {{RasterImage(c0), {"c0"}}, {RasterImage(c1), {"c1"}}}};
  const auto scores = score_instances(cs, RasterImage(gt), p, builtin_metric_suite());
  const auto js = judge_instances(cs, RasterImage(gt), p, scores, {0, 1}, HistogramCaptioner(), 0.1);
  ASSERT_EQ(js.size(), 2u);
  ASSERT_TRUE(js[0].choice && js[1].choice);
  EXPECT_EQ(js[0].choice->winner, 0);
  EXPECT_EQ(js[1].choice->winner, 1);
  EXPECT_THROW(judge_instances(cs, RasterImage(gt), p, scores, {7}, HistogramCaptioner(), 0.1), InvalidArgument);
}
