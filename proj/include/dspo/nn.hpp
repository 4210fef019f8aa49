#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <numeric>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "dspo/common.hpp"
#include "dspo/tensor.hpp"

namespace dspo::nn {

using RowMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

struct ParamTensor {
  std::string name;
  std::vector<int> shape;
  AlignedVector<float> values;
};

/// Ordered collection of named float arrays. Gradients and optimizer moments
/// use the same layout as the parameters they belong to.
class ParamSet {
 public:
  std::size_t add(std::string name, std::vector<int> shape) {
    const std::size_t n = std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                                          [](std::size_t a, int b) { return a * b; });
    index_[name] = tensors_.size();
    tensors_.push_back({std::move(name), std::move(shape), AlignedVector<float>(n, 0.0f)});
    return tensors_.size() - 1;
  }

  std::size_t count() const { return tensors_.size(); }
  ParamTensor& operator[](std::size_t i) { return tensors_[i]; }
  const ParamTensor& operator[](std::size_t i) const { return tensors_[i]; }
  float* data(std::size_t i) { return tensors_[i].values.data(); }
  const float* data(std::size_t i) const { return tensors_[i].values.data(); }
  std::size_t find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw InvalidArgument("unknown parameter " + name);
    return it->second;
  }
  auto begin() { return tensors_.begin(); }
  auto end() { return tensors_.end(); }
  auto begin() const { return tensors_.begin(); }
  auto end() const { return tensors_.end(); }

  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += t.values.size();
    return n;
  }

  ParamSet zeros_like() const {
    ParamSet out = *this;
    for (auto& t : out.tensors_) std::fill(t.values.begin(), t.values.end(), 0.0f);
    return out;
  }

  void set_zero() {
    for (auto& t : tensors_) std::fill(t.values.begin(), t.values.end(), 0.0f);
  }

  void add_scaled(const ParamSet& other, float scale) {
    for (std::size_t i = 0; i < tensors_.size(); ++i)
      for (std::size_t k = 0; k < tensors_[i].values.size(); ++k)
        tensors_[i].values[k] += scale * other.tensors_[i].values[k];
  }

  double l2_norm() const {
    double s = 0.0;
    for (const auto& t : tensors_)
      for (float v : t.values) s += static_cast<double>(v) * v;
    return std::sqrt(s);
  }

  bool all_finite() const {
    for (const auto& t : tensors_)
      for (float v : t.values)
        if (!std::isfinite(v)) return false;
    return true;
  }

  std::string fingerprint() const {
    Fnv1a h;
    for (const auto& t : tensors_) {
      h.update(t.name);
      h.update(t.values.data(), t.values.size() * sizeof(float));
    }
    return h.hex();
  }

  friend bool operator==(const ParamSet& a, const ParamSet& b) {
    if (a.tensors_.size() != b.tensors_.size()) return false;
    for (std::size_t i = 0; i < a.tensors_.size(); ++i)
      if (a.tensors_[i].name != b.tensors_[i].name || a.tensors_[i].values != b.tensors_[i].values)
        return false;
    return true;
  }

 private:
  std::vector<ParamTensor> tensors_;
  std::unordered_map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// 3×3 convolution, padding 1, stride 1 or 2, via im2col + GEMM.

inline int conv_out_extent(int n, int stride) { return (n - 1) / stride + 1; }

/// cols is (Cin·9) × (Ho·Wo), row-major.
inline void im2col3x3(const Tensor& x, int stride, AlignedVector<float>& cols) {
  const int ho = conv_out_extent(x.height(), stride), wo = conv_out_extent(x.width(), stride);
  const std::size_t ncol = static_cast<std::size_t>(ho) * wo;
  cols.assign(static_cast<std::size_t>(x.channels()) * 9 * ncol, 0.0f);
  for (int c = 0; c < x.channels(); ++c)
    for (int ky = 0; ky < 3; ++ky)
      for (int kx = 0; kx < 3; ++kx) {
        float* row = cols.data() + ((static_cast<std::size_t>(c) * 9 + ky * 3 + kx) * ncol);
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride + ky - 1;
          if (iy < 0 || iy >= x.height()) continue;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride + kx - 1;
            if (ix < 0 || ix >= x.width()) continue;
            row[oy * wo + ox] = x(c, iy, ix);
          }
        }
      }
}

inline void col2im3x3(const AlignedVector<float>& cols, int stride, Tensor& dx) {
  const int ho = conv_out_extent(dx.height(), stride), wo = conv_out_extent(dx.width(), stride);
  const std::size_t ncol = static_cast<std::size_t>(ho) * wo;
  for (int c = 0; c < dx.channels(); ++c)
    for (int ky = 0; ky < 3; ++ky)
      for (int kx = 0; kx < 3; ++kx) {
        const float* row = cols.data() + ((static_cast<std::size_t>(c) * 9 + ky * 3 + kx) * ncol);
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride + ky - 1;
          if (iy < 0 || iy >= dx.height()) continue;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride + kx - 1;
            if (ix < 0 || ix >= dx.width()) continue;
            dx(c, iy, ix) += row[oy * wo + ox];
          }
        }
      }
}

struct Conv3x3 {
  std::size_t weight;  // [out, in*9]
  std::size_t bias;    // [out]
  int in = 0;
  int out = 0;
  int stride = 1;

  static Conv3x3 declare(ParamSet& p, const std::string& name, int in, int out, int stride = 1) {
    Conv3x3 c;
    c.weight = p.add(name + ".weight", {out, in * 9});
    c.bias = p.add(name + ".bias", {out});
    c.in = in;
    c.out = out;
    c.stride = stride;
    return c;
  }

  /// He-uniform initialization.
  void init(ParamSet& p, std::mt19937_64& rng, float gain = 1.0f) const {
    const float bound = gain * std::sqrt(6.0f / (in * 9));
    std::uniform_real_distribution<float> u(-bound, bound);
    for (float& v : p[weight].values) v = u(rng);
  }

  /// y = W * im2col(x) + b; the column buffer is kept for backward.
  Tensor forward(const ParamSet& p, const Tensor& x, AlignedVector<float>& cols) const {
    if (x.channels() != in) throw InvalidArgument("conv input channels mismatch");
    im2col3x3(x, stride, cols);
    const int ho = conv_out_extent(x.height(), stride), wo = conv_out_extent(x.width(), stride);
    Tensor y(out, ho, wo);
    ConstMatMap w(p.data(weight), out, in * 9);
    ConstMatMap col(cols.data(), in * 9, static_cast<Eigen::Index>(ho) * wo);
    MatMap ym(y.data(), out, static_cast<Eigen::Index>(ho) * wo);
    ym.noalias() = w * col;
    Eigen::Map<const Eigen::VectorXf> b(p.data(bias), out);
    ym.colwise() += b;
    return y;
  }

  /// Accumulates dW, db; returns dX when `want_dx`.
  Tensor backward(const ParamSet& p, const AlignedVector<float>& cols, const Tensor& dy, int in_h,
                  int in_w, ParamSet& grads, bool want_dx = true) const {
    const Eigen::Index ncol = static_cast<Eigen::Index>(dy.height()) * dy.width();
    ConstMatMap dym(dy.data(), out, ncol);
    ConstMatMap col(cols.data(), in * 9, ncol);
    MatMap dw(grads.data(weight), out, in * 9);
    dw.noalias() += dym * col.transpose();
    Eigen::Map<Eigen::VectorXf> db(grads.data(bias), out);
    db += dym.rowwise().sum();
    Tensor dx;
    if (!want_dx) return dx;
    AlignedVector<float> dcols(static_cast<std::size_t>(in) * 9 * ncol);
    MatMap dc(dcols.data(), in * 9, ncol);
    ConstMatMap w(p.data(weight), out, in * 9);
    dc.noalias() = w.transpose() * dym;
    dx = Tensor(in, in_h, in_w);
    col2im3x3(dcols, stride, dx);
    return dx;
  }
};

/// Fully connected layer on a single vector.
struct Linear {
  std::size_t weight;  // [out, in]
  std::size_t bias;
  int in = 0;
  int out = 0;

  static Linear declare(ParamSet& p, const std::string& name, int in, int out) {
    Linear l;
    l.weight = p.add(name + ".weight", {out, in});
    l.bias = p.add(name + ".bias", {out});
    l.in = in;
    l.out = out;
    return l;
  }

  void init(ParamSet& p, std::mt19937_64& rng, float gain = 1.0f) const {
    const float bound = gain * std::sqrt(6.0f / in);
    std::uniform_real_distribution<float> u(-bound, bound);
    for (float& v : p[weight].values) v = u(rng);
  }

  AlignedVector<float> forward(const ParamSet& p, const AlignedVector<float>& x) const {
    AlignedVector<float> y(out);
    ConstMatMap w(p.data(weight), out, in);
    Eigen::Map<const Eigen::VectorXf> xv(x.data(), in), b(p.data(bias), out);
    Eigen::Map<Eigen::VectorXf>(y.data(), out) = w * xv + b;
    return y;
  }

  AlignedVector<float> backward(const ParamSet& p, const AlignedVector<float>& x,
                              const AlignedVector<float>& dy, ParamSet& grads) const {
    Eigen::Map<const Eigen::VectorXf> xv(x.data(), in), dyv(dy.data(), out);
    MatMap(grads.data(weight), out, in).noalias() += dyv * xv.transpose();
    Eigen::Map<Eigen::VectorXf>(grads.data(bias), out) += dyv;
    AlignedVector<float> dx(in);
    Eigen::Map<Eigen::VectorXf>(dx.data(), in) = ConstMatMap(p.data(weight), out, in).transpose() * dyv;
    return dx;
  }
};

inline float sigmoid(float v) { return 1.0f / (1.0f + std::exp(-v)); }
inline float silu(float v) { return v * sigmoid(v); }
inline float silu_grad(float v) {
  const float s = sigmoid(v);
  return s * (1.0f + v * (1.0f - s));
}

template <class Range>
auto silu_copy(const Range& in) {
  Range out = in;
  for (auto& v : out) v = silu(v);
  return out;
}

inline Tensor silu_copy(const Tensor& in) {
  Tensor out = in;
  for (float& v : out.values()) v = silu(v);
  return out;
}

/// Multiplies an upstream gradient by silu'(pre) in place.
inline void silu_backward(const Tensor& pre, Tensor& grad) {
  for (std::size_t i = 0; i < grad.size(); ++i) grad[i] *= silu_grad(pre[i]);
}

inline Tensor upsample_nearest2(const Tensor& x) {
  Tensor y(x.channels(), x.height() * 2, x.width() * 2);
  for (int c = 0; c < x.channels(); ++c)
    for (int yy = 0; yy < y.height(); ++yy)
      for (int xx = 0; xx < y.width(); ++xx) y(c, yy, xx) = x(c, yy / 2, xx / 2);
  return y;
}

inline Tensor upsample_nearest2_backward(const Tensor& dy) {
  Tensor dx(dy.channels(), dy.height() / 2, dy.width() / 2);
  for (int c = 0; c < dy.channels(); ++c)
    for (int yy = 0; yy < dy.height(); ++yy)
      for (int xx = 0; xx < dy.width(); ++xx) dx(c, yy / 2, xx / 2) += dy(c, yy, xx);
  return dx;
}

// ---------------------------------------------------------------------------

/// Scales gradients so their global L2 norm is at most max_norm. Returns the pre-clip norm.
inline double clip_global_norm(ParamSet& grads, double max_norm) {
  const double norm = grads.l2_norm();
  if (max_norm > 0.0 && norm > max_norm) {
    const float s = static_cast<float>(max_norm / (norm + 1e-12));
    for (auto& t : grads)
      for (float& v : t.values) v *= s;
  }
  return norm;
}

struct AdamWConfig {
  double lr = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Adam with decoupled weight decay.
class AdamW {
 public:
  AdamW() = default;
  AdamW(const ParamSet& like, AdamWConfig cfg) : cfg_(cfg), m_(like.zeros_like()), v_(like.zeros_like()) {}

  void step(ParamSet& params, const ParamSet& grads) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
    const float lr = static_cast<float>(cfg_.lr);
    const float decay = static_cast<float>(1.0 - cfg_.lr * cfg_.weight_decay);
    const float b1 = static_cast<float>(cfg_.beta1), b2 = static_cast<float>(cfg_.beta2);
    for (std::size_t i = 0; i < params.count(); ++i) {
      auto& p = params[i].values;
      const auto& g = grads[i].values;
      auto& m = m_[i].values;
      auto& v = v_[i].values;
      for (std::size_t k = 0; k < p.size(); ++k) {
        m[k] = b1 * m[k] + (1 - b1) * g[k];
        v[k] = b2 * v[k] + (1 - b2) * g[k] * g[k];
        const double mh = m[k] / bc1, vh = v[k] / bc2;
        p[k] = p[k] * decay - lr * static_cast<float>(mh / (std::sqrt(vh) + cfg_.eps));
      }
    }
  }

  const AdamWConfig& config() const { return cfg_; }
  long steps() const { return t_; }
  const ParamSet& first_moment() const { return m_; }
  const ParamSet& second_moment() const { return v_; }
  void restore(long t, ParamSet m, ParamSet v) {
    t_ = t;
    m_ = std::move(m);
    v_ = std::move(v);
  }

 private:
  AdamWConfig cfg_;
  long t_ = 0;
  ParamSet m_;
  ParamSet v_;
};

}  // namespace dspo::nn
