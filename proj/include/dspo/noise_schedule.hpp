#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "dspo/common.hpp"
#include "dspo/tensor.hpp"

namespace dspo {

/// Loss weighting γ(λ_t) as a function of the signal-to-noise ratio.
using SnrWeighting = std::function<double(double snr)>;

inline SnrWeighting constant_weighting(double value = 1.0) {
  return [value](double) { return value; };
}

/// Discrete DDPM schedule. Timesteps are 1-based: t ∈ [1, T].
class NoiseSchedule {
 public:
  NoiseSchedule(std::vector<double> betas, SnrWeighting gamma = constant_weighting())
      : betas_(std::move(betas)), gamma_(std::move(gamma)) {
    if (betas_.size() < 2) throw InvalidArgument("schedule needs T >= 2");
    alpha_bars_.resize(betas_.size());
    double prod = 1.0;
    for (std::size_t i = 0; i < betas_.size(); ++i) {
      if (!(betas_[i] > 0.0 && betas_[i] < 1.0)) throw InvalidArgument("betas must lie in (0,1)");
      prod *= 1.0 - betas_[i];
      alpha_bars_[i] = prod;
    }
  }

  int T() const { return static_cast<int>(betas_.size()); }
  double beta(int t) const { return betas_[index(t)]; }
  double alpha(int t) const { return 1.0 - betas_[index(t)]; }
  double alpha_bar(int t) const { return alpha_bars_[index(t)]; }
  /// λ_t = ᾱ_t / (1 − ᾱ_t).
  double snr(int t) const {
    const double ab = alpha_bar(t);
    return ab / (1.0 - ab);
  }
  double gamma(int t) const { return gamma_(snr(t)); }
  void set_weighting(SnrWeighting gamma) { gamma_ = std::move(gamma); }
  const std::vector<double>& betas() const { return betas_; }

 private:
  std::size_t index(int t) const {
    if (t < 1 || t > T())
      throw InvalidArgument("timestep " + std::to_string(t) + " outside [1," + std::to_string(T()) + "]");
    return static_cast<std::size_t>(t - 1);
  }

  std::vector<double> betas_;
  std::vector<double> alpha_bars_;
  SnrWeighting gamma_;
};

/// Linear betas, rescaled so that any T spans the same total noise as the
/// 1000-step schedule from 1e-4 to 0.02.
inline NoiseSchedule linear_schedule(int T) {
  if (T < 2) throw InvalidArgument("linear_schedule needs T >= 2");
  const double scale = 1000.0 / T;
  const double lo = 1e-4 * scale, hi = std::min(0.02 * scale, 0.999);
  std::vector<double> betas(T);
  for (int i = 0; i < T; ++i) betas[i] = lo + (hi - lo) * i / (T - 1);
  return NoiseSchedule(std::move(betas));
}

/// √ᾱ_t·x0 + √(1−ᾱ_t)·eps.
template <class T>
Tensor3<T> forward_noise(const Tensor3<T>& x0, int t, const Tensor3<T>& eps, const NoiseSchedule& sched) {
  require_same_shape(x0, eps, "forward_noise");
  const double ab = sched.alpha_bar(t);
  const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  Tensor3<T> out(x0.channels(), x0.height(), x0.width());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(a * x0[i] + b * eps[i]);
  return out;
}

}  // namespace dspo
