#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "dspo/common.hpp"
#include "dspo/prompt_vocab.hpp"
#include "dspo/tensor.hpp"

namespace dspo {

/// log(1 + e^x) without overflow.
inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

inline double logistic(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// −log σ(z).
inline double neg_log_sigmoid(double z) { return softplus(-z); }

/// Scalar preference loss on log-likelihoods: −log σ(β[(θ_w − ref_w) − (θ_l − ref_l)]).
inline double dpo_preference_loss(double lr_theta_w, double lr_ref_w, double lr_theta_l, double lr_ref_l,
                                  double beta) {
  if (!(beta > 0)) throw InvalidArgument("beta must be > 0");
  for (double v : {lr_theta_w, lr_ref_w, lr_theta_l, lr_ref_l})
    if (!std::isfinite(v)) throw InvalidArgument("log-probabilities must be finite");
  return neg_log_sigmoid(beta * ((lr_theta_w - lr_ref_w) - (lr_theta_l - lr_ref_l)));
}

/// Sum of squares over the mask (the default), or the same divided by the
/// number of masked elements.
enum class ErrorReduction { sum, mean };

template <class T>
double masked_denoise_error(const Tensor3<T>& eps_true, const Tensor3<T>& eps_hat, const Mask& mask, double gamma,
                            ErrorReduction reduction = ErrorReduction::sum) {
  require_same_shape(eps_true, eps_hat, "masked_denoise_error");
  if (mask.height != eps_true.height() || mask.width != eps_true.width())
    throw InvalidArgument("mask extent does not match tensor");
  if (!(gamma > 0)) throw InvalidArgument("gamma must be > 0");
  double s = 0.0;
  const std::size_t plane = eps_true.plane();
  for (int c = 0; c < eps_true.channels(); ++c)
    for (std::size_t i = 0; i < plane; ++i)
      if (mask.bits[i]) {
        const double d = static_cast<double>(eps_true[c * plane + i]) - eps_hat[c * plane + i];
        s += d * d;
      }
  if (reduction == ErrorReduction::mean) {
    const std::size_t n = mask.count() * eps_true.channels();
    s = n ? s / n : 0.0;
  }
  return gamma * s;
}

/// ε targets and the four predictions for one preference record, plus the
/// instance masks and their weights.
template <class Scalar>
struct NoisePredictionBatch {
  Tensor3<Scalar> eps_true;
  Tensor3<Scalar> eps_theta_w, eps_ref_w, eps_theta_l, eps_ref_l;
  std::vector<Mask> masks;
  std::vector<double> weights;
  int t = 1;
  double gamma = 1.0;
  double beta = 8000.0;
  int T = 1000;
  ErrorReduction reduction = ErrorReduction::sum;
};

struct LossValue {
  double total = 0.0;
  std::vector<double> per_instance;
  std::vector<double> inner_argument;
};

/// ∂loss/∂ each input tensor.
template <class T>
struct LossGradients {
  Tensor3<T> eps_true, eps_theta_w, eps_ref_w, eps_theta_l, eps_ref_l;
};

namespace detail {

template <class T>
void check_batch_tensors(const NoisePredictionBatch<T>& b) {
  for (const auto* x : {&b.eps_theta_w, &b.eps_ref_w, &b.eps_theta_l, &b.eps_ref_l})
    require_same_shape(b.eps_true, *x, "NoisePredictionBatch");
  if (!(b.beta > 0)) throw InvalidArgument("beta must be > 0");
  if (!(b.gamma > 0)) throw InvalidArgument("gamma must be > 0");
  if (b.T < 1) throw InvalidArgument("T must be >= 1");
  if (b.masks.size() != b.weights.size()) throw InvalidArgument("one weight per mask required");
  if (b.masks.empty()) throw InvalidArgument("batch has no masks");
  for (const auto& m : b.masks)
    if (m.height != b.eps_true.height() || m.width != b.eps_true.width())
      throw InvalidArgument("mask extent does not match tensors");
  for (double w : b.weights)
    if (!(w >= 0.0 && std::isfinite(w))) throw InvalidArgument("weights must be finite and non-negative");
}

template <class T>
void check_partition(const NoisePredictionBatch<T>& b) {
  const std::size_t n = b.masks.front().bits.size();
  for (std::size_t i = 0; i < n; ++i) {
    int hits = 0;
    for (const auto& m : b.masks) hits += m.bits[i] ? 1 : 0;
    if (hits != 1) throw InvalidArgument("masks do not form a partition");
  }
  double sum = 0.0;
  for (double w : b.weights) sum += w;
  if (std::abs(sum - 1.0) > 1e-9) throw InvalidArgument("weights are not on the simplex");
}

inline void zero_like_into(const auto& like, auto& out) {
  out = std::remove_cvref_t<decltype(out)>(like.channels(), like.height(), like.width());
}

/// Weighted sum of per-mask preference terms with optional gradients.
template <class T>
LossValue masked_preference(const NoisePredictionBatch<T>& b, LossGradients<T>* grad) {
  const double scale = b.beta * b.T;
  const std::size_t plane = b.eps_true.plane();
  const int channels = b.eps_true.channels();
  if (grad) {
    for (auto* g : {&grad->eps_true, &grad->eps_theta_w, &grad->eps_ref_w, &grad->eps_theta_l, &grad->eps_ref_l})
      zero_like_into(b.eps_true, *g);
  }
  LossValue out;
  for (std::size_t m = 0; m < b.masks.size(); ++m) {
    const Mask& mask = b.masks[m];
    const double lw = masked_denoise_error(b.eps_true, b.eps_theta_w, mask, b.gamma, b.reduction);
    const double rw = masked_denoise_error(b.eps_true, b.eps_ref_w, mask, b.gamma, b.reduction);
    const double ll = masked_denoise_error(b.eps_true, b.eps_theta_l, mask, b.gamma, b.reduction);
    const double rl = masked_denoise_error(b.eps_true, b.eps_ref_l, mask, b.gamma, b.reduction);
    const double z = -scale * ((lw - rw) - (ll - rl));
    const double term = neg_log_sigmoid(z);
    out.per_instance.push_back(term);
    out.inner_argument.push_back(z);
    out.total += b.weights[m] * term;
    if (!grad) continue;

    // d(term)/dz = −σ(−z); dz/dL_θw = −scale, so d/dL_θw = scale·σ(−z).
    double per_error = b.weights[m] * scale * logistic(-z) * b.gamma;
    if (b.reduction == ErrorReduction::mean) {
      const std::size_t n = mask.count() * channels;
      per_error = n ? per_error / n : 0.0;
    }
    // dL/dε̂ = −2(ε − ε̂), dL/dε = 2(ε − ε̂); the four errors enter with signs +,−,−,+.
    for (int c = 0; c < channels; ++c)
      for (std::size_t i = 0; i < plane; ++i) {
        if (!mask.bits[i]) continue;
        const std::size_t k = c * plane + i;
        const double e = b.eps_true[k];
        const double dw = e - b.eps_theta_w[k], drw = e - b.eps_ref_w[k];
        const double dl = e - b.eps_theta_l[k], drl = e - b.eps_ref_l[k];
        grad->eps_theta_w[k] += static_cast<T>(per_error * -2.0 * dw);
        grad->eps_ref_w[k] += static_cast<T>(-per_error * -2.0 * drw);
        grad->eps_theta_l[k] += static_cast<T>(-per_error * -2.0 * dl);
        grad->eps_ref_l[k] += static_cast<T>(per_error * -2.0 * drl);
        grad->eps_true[k] += static_cast<T>(per_error * 2.0 * (dw - drw - dl + drl));
      }
  }
  if (!std::isfinite(out.total)) throw NumericError("preference loss is not finite");
  return out;
}

}  // namespace detail

/// Preference loss over whole-image errors. The batch must carry exactly one
/// full mask with weight 1.
template <class T>
LossValue diffusion_dpo_loss(const NoisePredictionBatch<T>& b, LossGradients<T>* grad = nullptr) {
  detail::check_batch_tensors(b);
  if (b.masks.size() != 1) throw InvalidArgument("diffusion_dpo_loss takes a single full mask; use dspo_instance_loss");
  if (b.masks[0].count() != b.masks[0].bits.size()) throw InvalidArgument("diffusion_dpo_loss mask must be full");
  if (b.weights[0] != 1.0) throw InvalidArgument("diffusion_dpo_loss weight must be 1");
  const Mask& full = b.masks[0];
  auto err = [&](const Tensor3<T>& hat) { return masked_denoise_error(b.eps_true, hat, full, b.gamma, b.reduction); };
  const double z = -b.beta * b.T *
                   ((err(b.eps_theta_w) - err(b.eps_ref_w)) - (err(b.eps_theta_l) - err(b.eps_ref_l)));
  LossValue out{neg_log_sigmoid(z), {neg_log_sigmoid(z)}, {z}};
  if (grad) detail::masked_preference(b, grad);  // same derivative with a full mask
  if (!std::isfinite(out.total)) throw NumericError("preference loss is not finite");
  return out;
}

/// Area-weighted sum of per-instance preference terms over a mask partition.
template <class T>
LossValue dspo_instance_loss(const NoisePredictionBatch<T>& b, LossGradients<T>* grad = nullptr) {
  detail::check_batch_tensors(b);
  detail::check_partition(b);
  return detail::masked_preference(b, grad);
}

/// One term of the instance loss: a single mask with its weight, as carried by
/// one preference record. The mask need not cover the image.
template <class T>
LossValue dspo_record_loss(const NoisePredictionBatch<T>& b, LossGradients<T>* grad = nullptr) {
  detail::check_batch_tensors(b);
  if (b.masks.size() != 1) throw InvalidArgument("dspo_record_loss takes one mask");
  if (b.masks[0].count() == 0) throw InvalidArgument("record mask is empty");
  return detail::masked_preference(b, grad);
}

/// Instance loss whose predictions were produced under a negative prompt.
/// `conditioned_negative` is the token list the predictions actually used; it
/// must match the record's negative prompt when the record carries one.
template <class T>
LossValue dspo_total_loss(const NoisePredictionBatch<T>& b, const std::optional<std::string>& record_negative,
                          const std::vector<int>& conditioned_negative, LossGradients<T>* grad = nullptr) {
  if (record_negative && !record_negative->empty()) {
    if (conditioned_negative.empty())
      throw InvalidArgument("record carries a negative prompt but predictions were not conditioned on it");
    if (PromptVocab::encode(*record_negative) != conditioned_negative)
      throw InvalidArgument("predictions were conditioned on a different negative prompt");
  } else if (!conditioned_negative.empty()) {
    throw InvalidArgument("negative conditioning supplied for a record without a negative prompt");
  }
  return dspo_instance_loss(b, grad);
}

/// Mean squared ε error on the winner branch.
template <class T>
double sft_loss(const Tensor3<T>& eps_true, const Tensor3<T>& eps_theta_w, Tensor3<T>* grad = nullptr) {
  require_same_shape(eps_true, eps_theta_w, "sft_loss");
  if (eps_true.size() == 0) throw InvalidArgument("sft_loss: empty tensors");
  double s = 0.0;
  const double n = static_cast<double>(eps_true.size());
  if (grad) *grad = Tensor3<T>(eps_true.channels(), eps_true.height(), eps_true.width());
  for (std::size_t k = 0; k < eps_true.size(); ++k) {
    const double d = static_cast<double>(eps_theta_w[k]) - eps_true[k];
    s += d * d;
    if (grad) (*grad)[k] = static_cast<T>(2.0 * d / n);
  }
  return s / n;
}

}  // namespace dspo
