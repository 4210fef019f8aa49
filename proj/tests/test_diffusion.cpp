#include <gtest/gtest.h>

#include "dspo/checkpoint.hpp"
#include "dspo/denoiser.hpp"
#include "dspo/noise_schedule.hpp"
#include "dspo/sampler.hpp"
#include "test_support.hpp"

using namespace dspo;
namespace tu = dspo::test_util;

namespace {

DenoiserConfig small_config(int res = 8) {
  DenoiserConfig c;
  c.resolution = res;
  c.base_channels = 4;
  c.mid_channels = 6;
  c.embed_dim = 5;
  c.hidden_dim = 7;
  c.timesteps = 10;
  c.seed = 3;
  return c;
}

RasterImage flat_image(int h, int w, float v) { return RasterImage(h, w, v); }

}  // namespace

TEST(NoiseSchedule, LinearEndpointsAndMonotoneAlphaBar) {
  const auto s = linear_schedule(1000);
  EXPECT_NEAR(s.beta(1), 1e-4, 1e-15);
  EXPECT_NEAR(s.beta(1000), 0.02, 1e-15);
  for (int t = 2; t <= 1000; ++t) ASSERT_LT(s.alpha_bar(t), s.alpha_bar(t - 1));
  EXPECT_THROW(s.beta(0), InvalidArgument);
  EXPECT_THROW(s.beta(1001), InvalidArgument);
}

TEST(NoiseSchedule, ShortScheduleReachesComparableNoise) {
  // Rescaled betas keep the terminal ᾱ of the 1000-step schedule within a small factor.
  const double ref = linear_schedule(1000).alpha_bar(1000);
  const double short_ = linear_schedule(100).alpha_bar(100);
  EXPECT_LT(short_, 1e-3);
  EXPECT_LT(ref, 1e-3);
}

TEST(NoiseSchedule, AlphaBarIsCumulativeProduct) {
  const auto s = linear_schedule(50);
  double prod = 1.0;
  for (int t = 1; t <= 50; ++t) {
    prod *= 1.0 - s.beta(t);
    ASSERT_NEAR(s.alpha_bar(t), prod, 1e-14);
  }
  EXPECT_NEAR(s.snr(10), s.alpha_bar(10) / (1 - s.alpha_bar(10)), 1e-12);
  EXPECT_DOUBLE_EQ(s.gamma(10), 1.0);
}

TEST(NoiseSchedule, RejectsInvalidBetas) {
  EXPECT_THROW(NoiseSchedule({0.1}), InvalidArgument);
  EXPECT_THROW(NoiseSchedule({0.1, 1.0}), InvalidArgument);
  EXPECT_THROW(linear_schedule(1), InvalidArgument);
}

TEST(ForwardNoise, ClosedForm) {
  const auto s = linear_schedule(10);
  TensorD x0(1, 1, 2), eps(1, 1, 2);
  x0[0] = 0.5;
  x0[1] = -1.0;
  eps[0] = 2.0;
  eps[1] = 0.25;
  const auto xt = forward_noise(x0, 4, eps, s);
  const double a = std::sqrt(s.alpha_bar(4)), b = std::sqrt(1 - s.alpha_bar(4));
  EXPECT_DOUBLE_EQ(xt[0], a * 0.5 + b * 2.0);
  EXPECT_DOUBLE_EQ(xt[1], a * -1.0 + b * 0.25);
}

TEST(SpacedTimesteps, EndpointsAndCount) {
  EXPECT_EQ(spaced_timesteps(100, 1), std::vector<int>{100});
  const auto ts = spaced_timesteps(100, 5);
  EXPECT_EQ(ts, (std::vector<int>{1, 26, 51, 75, 100}));
  EXPECT_EQ(spaced_timesteps(10, 10).size(), 10u);
  EXPECT_THROW(spaced_timesteps(10, 11), InvalidArgument);
}

TEST(CfgCombine, ScaleOneIsConditionalScaleZeroIsUnconditional) {
  std::mt19937_64 rng(1);
  const auto c = tu::random_tensor<float>(3, 4, 4, rng), u = tu::random_tensor<float>(3, 4, 4, rng);
  EXPECT_LT(tu::relative_error(cfg_combine(c, u, 1.0), c), 1e-7);
  EXPECT_EQ(cfg_combine(c, u, 0.0), u);
  const auto g = cfg_combine(c, u, 3.0);
  EXPECT_NEAR(g[5], u[5] + 3.0f * (c[5] - u[5]), 1e-5);
}

TEST(PromptVocab, RoundTripAndErrors) {
  const std::string text = "dark-red light-blue white busy smooth";
  EXPECT_EQ(PromptVocab::decode(PromptVocab::encode(text)), text);
  EXPECT_EQ(PromptVocab::encode("").size(), 0u);
  EXPECT_THROW(PromptVocab::encode("purple"), InvalidArgument);
  EXPECT_THROW(PromptVocab::name(PromptVocab::kSize), InvalidArgument);
  EXPECT_EQ(PromptVocab::kSize, 18);
}

TEST(ModelSpace, RoundTrip) {
  const RasterImage img(8, 8, 0.25f);
  const Tensor m = to_model_space(img.tensor());
  EXPECT_FLOAT_EQ(m[0], -0.5f);
  EXPECT_EQ(from_model_space(m), img);
}

TEST(Denoiser, DefaultParameterCount) {
  EXPECT_EQ(Denoiser().parameter_count(), 28291u);
}

TEST(Denoiser, DeterministicInitAndShapeChecks) {
  const Denoiser a(small_config()), b(small_config());
  EXPECT_EQ(a.params(), b.params());
  auto cond = ConditioningBundle::from_lq(flat_image(8, 8, 0.5f), 8);
  EXPECT_THROW(a.forward(Tensor(3, 6, 6), 1, cond), InvalidArgument);
  EXPECT_THROW(a.forward(Tensor(3, 8, 8), 0, cond), InvalidArgument);
  EXPECT_THROW(a.forward(Tensor(3, 8, 8), 11, cond), InvalidArgument);
  cond.prompt = {PromptVocab::kSize};
  EXPECT_THROW(a.forward(Tensor(3, 8, 8), 1, cond), InvalidArgument);
  EXPECT_THROW(ConditioningBundle::from_lq(flat_image(8, 8, 0.f), 12), InvalidArgument);
}

TEST(Denoiser, FreshNegativeTableIsInert) {
  const Denoiser m(small_config());
  std::mt19937_64 rng(2);
  const auto x = tu::random_tensor<float>(3, 8, 8, rng);
  auto cond = ConditioningBundle::from_lq(flat_image(8, 8, 0.3f), 8);
  cond.prompt = PromptVocab::encode("dark-red");
  const Tensor plain = m.forward(x, 5, cond);
  cond.negative_prompt = PromptVocab::encode("white busy");
  EXPECT_EQ(m.forward(x, 5, cond), plain);
}

// Analytic parameter gradient of L = Σ c·ε̂ against central differences.
TEST(Denoiser, BackwardMatchesFiniteDifferences) {
  Denoiser m(small_config());
  std::mt19937_64 rng(4);
  // Give the negative table a value so its gradient path is exercised too.
  for (float& v : m.params()[m.params().find("negative_table")].values) v = 0.05f;
  const auto x = tu::random_tensor<float>(3, 8, 8, rng);
  const auto c = tu::random_tensor<float>(3, 8, 8, rng);
  auto cond = ConditioningBundle::from_lq(make_toy_scene(8, 1), 8);
  cond.prompt = PromptVocab::encode("dark-red busy");
  cond.negative_prompt = PromptVocab::encode("white");
  auto loss = [&] {
    const Tensor e = m.forward(x, 6, cond);
    double s = 0;
    for (std::size_t i = 0; i < e.size(); ++i) s += double(c[i]) * e[i];
    return s;
  };
  DenoiserActivations acts;
  m.forward(x, 6, cond, &acts);
  auto grads = m.params().zeros_like();
  m.backward(acts, c, grads);

  std::uniform_real_distribution<double> u(0, 1);
  for (std::size_t ti = 0; ti < m.params().count(); ++ti) {
    auto& values = m.params()[ti].values;
    for (int probe = 0; probe < 4; ++probe) {
      std::size_t k = static_cast<std::size_t>(u(rng) * values.size());
      // Embedding tables: probe rows of tokens that are actually used.
      const std::string& name = m.params()[ti].name;
      const int row = name == "negative_table" ? PromptVocab::id("white")
                                               : (probe % 2 ? PromptVocab::id("dark-red") : PromptVocab::id("busy"));
      if (name == "prompt_table" || name == "negative_table") k = row * small_config().embed_dim + probe;
      const float keep = values[k];
      const float h = 1e-2f;
      values[k] = keep + h;
      const double up = loss();
      values[k] = keep - h;
      const double down = loss();
      values[k] = keep;
      const double fd = (up - down) / (2.0 * h);
      const double an = grads[ti].values[k];
      EXPECT_NEAR(an, fd, 2e-2 * std::max(1.0, std::abs(fd))) << m.params()[ti].name << "[" << k << "]";
    }
  }
}

TEST(Sampler, DeterministicInSeedAndInRange) {
  const Denoiser m(small_config());
  const auto sched = linear_schedule(10);
  const auto lq = flat_image(8, 8, 0.4f);
  SamplerConfig sc{5, 2.0, 17};
  SampleStats stats;
  const auto a = ddpm_sample(m, sched, lq, sc, {}, &stats);
  const auto b = ddpm_sample(m, sched, lq, sc);
  EXPECT_EQ(a, b);
  EXPECT_EQ(stats.cond_evals, 5);
  EXPECT_EQ(stats.uncond_evals, 5);
  sc.seed = 18;
  EXPECT_FALSE(ddpm_sample(m, sched, lq, sc) == a);
}

TEST(Sampler, GuidanceScaleOneSkipsUnconditionalBranch) {
  const Denoiser m(small_config());
  SampleStats stats;
  ddpm_sample(m, linear_schedule(10), flat_image(8, 8, 0.4f), {3, 1.0, 1}, {}, &stats);
  EXPECT_EQ(stats.uncond_evals, 0);
  EXPECT_EQ(stats.cond_evals, 3);
}

TEST(Sampler, RejectsNonFiniteWeights) {
  Denoiser m(small_config());
  m.params()[0].values[0] = std::nanf("");
  EXPECT_THROW(ddpm_sample(m, linear_schedule(10), flat_image(8, 8, 0.4f), {2, 1.0, 1}), InvalidArgument);
}

TEST(AdamW, FirstStepMovesEachWeightByLearningRate) {
  nn::ParamSet p;
  p.add("w", {3});
  p[0].values = {1.0f, -2.0f, 0.5f};
  auto g = p.zeros_like();
  g[0].values = {0.3f, -4.0f, 0.0f};
  nn::AdamW opt(p, {0.1, 0.9, 0.999, 1e-8, 0.0});
  opt.step(p, g);
  // Bias-corrected first step is lr·sign(g).
  EXPECT_NEAR(p[0].values[0], 0.9f, 1e-6);
  EXPECT_NEAR(p[0].values[1], -1.9f, 1e-6);
  EXPECT_NEAR(p[0].values[2], 0.5f, 1e-6);
  EXPECT_EQ(opt.steps(), 1);
}

TEST(AdamW, DecoupledWeightDecay) {
  nn::ParamSet p;
  p.add("w", {1});
  p[0].values = {2.0f};
  nn::AdamW opt(p, {0.1, 0.9, 0.999, 1e-8, 0.5});
  opt.step(p, p.zeros_like());
  EXPECT_NEAR(p[0].values[0], 2.0f * (1 - 0.1 * 0.5), 1e-6);
}

TEST(ClipGlobalNorm, ScalesDownOnlyWhenAbove) {
  nn::ParamSet g;
  g.add("a", {2});
  g[0].values = {3.0f, 4.0f};
  EXPECT_DOUBLE_EQ(clip_global_norm(g, 10.0), 5.0);
  EXPECT_FLOAT_EQ(g[0].values[0], 3.0f);
  clip_global_norm(g, 1.0);
  EXPECT_NEAR(g.l2_norm(), 1.0, 1e-6);
}

TEST(Checkpoint, RoundTripPreservesEverything) {
  tu::TempDir dir;
  Denoiser m(small_config());
  nn::AdamW opt(m.params(), {});
  auto g = m.params().zeros_like();
  for (auto& t : g)
    for (float& v : t.values) v = 0.01f;
  opt.step(m.params(), g);
  std::mt19937_64 rng(5);
  rng();
  Checkpoint ck{7, m.config(), m.params(), opt.steps(), opt.first_moment(), opt.second_moment(),
                rng_to_string(rng), "abc", "dspo", {0.7, 0.6}};
  save_checkpoint(ck, dir / "c.bin");
  const auto back = load_checkpoint(dir / "c.bin");
  EXPECT_EQ(back.step, 7);
  EXPECT_EQ(back.model, m.config());
  EXPECT_EQ(back.params, m.params());
  EXPECT_EQ(back.adam_m, opt.first_moment());
  EXPECT_EQ(back.adam_v, opt.second_moment());
  EXPECT_EQ(back.loss_history, ck.loss_history);
  auto rng2 = rng_from_string(back.rng_state);
  EXPECT_EQ(rng2(), rng());
  EXPECT_EQ(load_model(dir / "c.bin").params(), m.params());
}

TEST(Checkpoint, RejectsCorruptFiles) {
  tu::TempDir dir;
  const Denoiser m(small_config());
  Checkpoint ck;
  ck.model = m.config();
  ck.params = m.params();
  save_checkpoint(ck, dir / "c.bin");
  auto bytes = read_text(dir / "c.bin");
  write_file_atomic(dir / "trunc.bin", bytes.substr(0, bytes.size() - 4));
  write_file_atomic(dir / "extra.bin", bytes + "xx");
  write_file_atomic(dir / "magic.bin", "XXXXXXXX" + bytes.substr(8));
  EXPECT_THROW(load_checkpoint(dir / "trunc.bin"), IoError);
  EXPECT_THROW(load_checkpoint(dir / "extra.bin"), IoError);
  EXPECT_THROW(load_checkpoint(dir / "magic.bin"), IoError);
  EXPECT_THROW(load_checkpoint(dir / "missing.bin"), IoError);
}
