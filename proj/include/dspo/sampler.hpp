#pragma once

#include <cmath>
#include <random>
#include <vector>

#include "dspo/data_synthesis.hpp"
#include "dspo/denoiser.hpp"
#include "dspo/noise_schedule.hpp"

namespace dspo {

struct SamplerConfig {
  int steps = 50;
  double cfg_scale = 5.5;
  std::uint64_t seed = 0;
};

/// eps_u + scale·(eps_c − eps_u). With a negative prompt, eps_u is the
/// prediction under that prompt instead of the null prompt.
template <class T>
Tensor3<T> cfg_combine(const Tensor3<T>& eps_cond, const Tensor3<T>& eps_uncond, double scale) {
  require_same_shape(eps_cond, eps_uncond, "cfg_combine");
  Tensor3<T> out(eps_cond.channels(), eps_cond.height(), eps_cond.width());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<T>(eps_uncond[i] + scale * (eps_cond[i] - eps_uncond[i]));
  return out;
}

/// `steps` timesteps evenly spread over [1, T], ascending. steps == T gives every timestep.
inline std::vector<int> spaced_timesteps(int T, int steps) {
  if (steps < 1 || steps > T) throw InvalidArgument("sampler steps must lie in [1, T]");
  if (steps == 1) return {T};
  std::vector<int> ts(steps);
  for (int i = 0; i < steps; ++i)
    ts[i] = static_cast<int>(std::lround(1.0 + static_cast<double>(i) * (T - 1) / (steps - 1)));
  return ts;
}

struct SampleStats {
  int cond_evals = 0;
  int uncond_evals = 0;
};

struct SampleRequest {
  std::vector<int> prompt;
  std::vector<int> negative_prompt;
  float adapter_scale = 1.0f;
};

/// Ancestral DDPM sampling over a respaced subset of the schedule, with
/// classifier-free guidance. When cfg_scale == 1 the guidance branch is skipped.
inline RasterImage ddpm_sample(const Denoiser& model, const NoiseSchedule& sched, const RasterImage& lq,
                               const SamplerConfig& sampler, const SampleRequest& request = {},
                               SampleStats* stats = nullptr) {
  if (!model.params().all_finite()) throw InvalidArgument("denoiser parameters contain NaN/Inf");
  if (!(sampler.cfg_scale >= 0.0)) throw InvalidArgument("cfg_scale must be >= 0");
  const int res = model.config().resolution;
  ConditioningBundle cond = ConditioningBundle::from_lq(lq, res);
  cond.prompt = request.prompt;
  cond.negative_prompt = request.negative_prompt;
  cond.adapter_scale = request.adapter_scale;
  ConditioningBundle uncond = cond;
  uncond.prompt = request.negative_prompt;  // empty → null prompt
  uncond.negative_prompt.clear();

  const auto ts = spaced_timesteps(sched.T(), sampler.steps);
  std::mt19937_64 rng(sampler.seed);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  Tensor x(3, res, res);
  for (float& v : x.values()) v = normal(rng);

  for (int i = static_cast<int>(ts.size()) - 1; i >= 0; --i) {
    const int t = ts[i];
    Tensor eps = model.forward(x, t, cond);
    if (stats) ++stats->cond_evals;
    if (sampler.cfg_scale != 1.0) {
      const Tensor eps_u = model.forward(x, t, uncond);
      if (stats) ++stats->uncond_evals;
      eps = cfg_combine(eps, eps_u, sampler.cfg_scale);
    }
    const double ab = sched.alpha_bar(t);
    const double ab_prev = i > 0 ? sched.alpha_bar(ts[i - 1]) : 1.0;
    const double beta = 1.0 - ab / ab_prev;
    Tensor x0(3, res, res);
    for (std::size_t k = 0; k < x.size(); ++k)
      x0[k] = std::clamp(static_cast<float>((x[k] - std::sqrt(1.0 - ab) * eps[k]) / std::sqrt(ab)), -1.0f, 1.0f);
    if (i == 0) {
      x = std::move(x0);
      break;
    }
    const double c0 = std::sqrt(ab_prev) * beta / (1.0 - ab);
    const double ct = std::sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab);
    const double sigma = std::sqrt(beta * (1.0 - ab_prev) / (1.0 - ab));
    for (std::size_t k = 0; k < x.size(); ++k)
      x[k] = static_cast<float>(c0 * x0[k] + ct * x[k] + sigma * normal(rng));
  }
  return from_model_space(x);
}

/// Predictor signature accepted by the pre-training loss.
template <class F>
concept NoisePredictor = requires(F f, const Tensor& x, int t, const ConditioningBundle& c) {
  { f(x, t, c) } -> std::convertible_to<Tensor>;
};

/// Mean squared ε-prediction error over a batch, with t ~ U{1..T} and ε ~ N(0, I) drawn from rng.
template <NoisePredictor F>
double diffusion_pretrain_loss(F&& predictor, const std::vector<PairedSample>& batch,
                               const NoiseSchedule& sched, std::mt19937_64& rng) {
  if (batch.empty()) throw InvalidArgument("diffusion_pretrain_loss: empty batch");
  std::uniform_int_distribution<int> tdist(1, sched.T());
  std::normal_distribution<float> normal(0.0f, 1.0f);
  double total = 0.0;
  for (const auto& sample : batch) {
    const Tensor x0 = to_model_space(sample.hq.tensor());
    const int t = tdist(rng);
    Tensor eps(3, x0.height(), x0.width());
    for (float& v : eps.values()) v = normal(rng);
    const Tensor xt = forward_noise(x0, t, eps, sched);
    const auto cond = ConditioningBundle::from_lq(sample.lq, x0.height());
    const Tensor pred = predictor(xt, t, cond);
    require_same_shape(pred, eps, "diffusion_pretrain_loss");
    double se = 0.0;
    for (std::size_t k = 0; k < eps.size(); ++k) se += static_cast<double>(pred[k] - eps[k]) * (pred[k] - eps[k]);
    total += se / eps.size();
  }
  return total / batch.size();
}

}  // namespace dspo
