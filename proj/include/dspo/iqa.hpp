#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <string_view>
#include <vector>

#include "dspo/common.hpp"
#include "dspo/image.hpp"

namespace dspo {

enum class Metric { psnr, ssim, lpips, dists, niqe, musiq, maniqa, clipiqa };
inline constexpr int kMetricCount = 8;
inline constexpr std::array<std::string_view, kMetricCount> kMetricNames = {
    "PSNR", "SSIM", "LPIPS", "DISTS", "NIQE", "MUSIQ", "MANIQA", "CLIPIQA"};
/// Trend direction per metric.
inline constexpr std::array<bool, kMetricCount> kHigherIsBetter = {true,  true,  false, false,
                                                                   false, true,  true,  true};

struct MetricVector {
  std::array<double, kMetricCount> values{};

  double& operator[](Metric m) { return values[static_cast<int>(m)]; }
  double operator[](Metric m) const { return values[static_cast<int>(m)]; }
  double& operator[](int i) { return values[i]; }
  double operator[](int i) const { return values[i]; }
  bool all_finite() const {
    for (double v : values)
      if (!std::isfinite(v)) return false;
    return true;
  }
  friend bool operator==(const MetricVector&, const MetricVector&) = default;
};

inline constexpr double kPsnrCap = 99.0;

/// 10·log10(1/MSE) in dB, capped at 99 dB once MSE < 1e-10.
inline double psnr(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "psnr");
  double se = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    se += d * d;
  }
  const double mse = se / a.size();
  if (mse < 1e-10) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}
inline double psnr(const RasterImage& a, const RasterImage& b) { return psnr(a.tensor(), b.tensor()); }

inline constexpr int kSsimWindow = 7;

/// Mean SSIM over all valid 7×7 windows (Gaussian σ=1.5, k1=0.01, k2=0.03, range 1),
/// averaged over channels.
inline double ssim(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "ssim");
  if (a.height() < kSsimWindow || a.width() < kSsimWindow)
    throw InvalidArgument("ssim needs at least 7x7 input, got " + a.shape_string());
  constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  constexpr int r = kSsimWindow / 2;
  const auto k1d = gaussian_kernel(1.5, r);
  double total = 0.0;
  std::size_t windows = 0;
  for (int c = 0; c < a.channels(); ++c)
    for (int y = r; y < a.height() - r; ++y)
      for (int x = r; x < a.width() - r; ++x) {
        double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
        for (int dy = -r; dy <= r; ++dy)
          for (int dx = -r; dx <= r; ++dx) {
            const double wgt = k1d[dy + r] * k1d[dx + r];
            const double va = a(c, y + dy, x + dx), vb = b(c, y + dy, x + dx);
            ma += wgt * va;
            mb += wgt * vb;
            saa += wgt * va * va;
            sbb += wgt * vb * vb;
            sab += wgt * va * vb;
          }
        const double va = saa - ma * ma, vb = sbb - mb * mb, cov = sab - ma * mb;
        total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        ++windows;
      }
  return total / windows;
}
inline double ssim(const RasterImage& a, const RasterImage& b) { return ssim(a.tensor(), b.tensor()); }

// ---------------------------------------------------------------------------
// Desk-scale stand-ins for learned metrics. Each is labelled by the metric slot
// it fills; none reproduces the learned model it stands in for.

namespace standin {

struct Plane {
  int h = 0, w = 0;
  std::vector<double> v;
  double operator()(int y, int x) const { return v[static_cast<std::size_t>(y) * w + x]; }
};

inline Plane luma_plane(const Tensor& t) { return {t.height(), t.width(), luma(t)}; }

inline Plane pool2(const Plane& p) {
  Plane out{p.h / 2, p.w / 2, {}};
  out.v.resize(static_cast<std::size_t>(out.h) * out.w);
  for (int y = 0; y < out.h; ++y)
    for (int x = 0; x < out.w; ++x)
      out.v[static_cast<std::size_t>(y) * out.w + x] =
          0.25 * (p(2 * y, 2 * x) + p(2 * y + 1, 2 * x) + p(2 * y, 2 * x + 1) + p(2 * y + 1, 2 * x + 1));
  return out;
}

struct Gradients {
  std::vector<double> gx, gy;
};

inline Gradients gradients(const Plane& p) {
  Gradients g;
  g.gx.assign(p.v.size(), 0.0);
  g.gy.assign(p.v.size(), 0.0);
  for (int y = 0; y < p.h; ++y)
    for (int x = 0; x < p.w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * p.w + x;
      g.gx[i] = x + 1 < p.w ? p(y, x + 1) - p(y, x) : 0.0;
      g.gy[i] = y + 1 < p.h ? p(y + 1, x) - p(y, x) : 0.0;
    }
  return g;
}

/// Pyramid of luma planes, stopping before a level would drop below 4 pixels.
inline std::vector<std::pair<Plane, Plane>> pyramid(const Tensor& a, const Tensor& b, int levels = 3) {
  std::vector<std::pair<Plane, Plane>> out;
  Plane pa = luma_plane(a), pb = luma_plane(b);
  for (int l = 0; l < levels; ++l) {
    out.emplace_back(pa, pb);
    if (pa.h < 8 || pa.w < 8) break;
    pa = pool2(pa);
    pb = pool2(pb);
  }
  return out;
}

inline double gradient_correlation(const Gradients& ga, const Gradients& gb) {
  constexpr double c = 1e-6;
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < ga.gx.size(); ++i) {
    ab += ga.gx[i] * gb.gx[i] + ga.gy[i] * gb.gy[i];
    aa += ga.gx[i] * ga.gx[i] + ga.gy[i] * ga.gy[i];
    bb += gb.gx[i] * gb.gx[i] + gb.gy[i] * gb.gy[i];
  }
  return (ab + c) / std::sqrt((aa + c) * (bb + c));
}

inline double mean_gradient_magnitude(const Gradients& g) {
  double s = 0.0;
  for (std::size_t i = 0; i < g.gx.size(); ++i) s += std::sqrt(g.gx[i] * g.gx[i] + g.gy[i] * g.gy[i]);
  return g.gx.empty() ? 0.0 : s / g.gx.size();
}

inline double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / v.size();
}

/// LPIPS slot: 1 − gradient-field correlation, averaged over a 3-level pyramid. 0 on identity.
inline double gradient_correlation_distance(const Tensor& cand, const Tensor& ref) {
  double d = 0.0;
  const auto levels = pyramid(cand, ref);
  for (const auto& [pa, pb] : levels) d += 1.0 - gradient_correlation(gradients(pa), gradients(pb));
  return d / levels.size();
}

/// DISTS slot: structure (gradient correlation) plus texture (gradient energy) and
/// luminance similarity, per pyramid level. 0 on identity.
inline double structure_texture_distance(const Tensor& cand, const Tensor& ref) {
  constexpr double c = 1e-6;
  double sim = 0.0;
  const auto levels = pyramid(cand, ref);
  for (const auto& [pa, pb] : levels) {
    const auto ga = gradients(pa), gb = gradients(pb);
    const double s = gradient_correlation(ga, gb);
    const double ea = mean_gradient_magnitude(ga), eb = mean_gradient_magnitude(gb);
    const double t = (2 * ea * eb + c) / (ea * ea + eb * eb + c);
    const double ma = mean(pa.v), mb = mean(pb.v);
    const double l = (2 * ma * mb + c) / (ma * ma + mb * mb + c);
    sim += 0.5 * s + 0.25 * t + 0.25 * l;
  }
  return 1.0 - sim / levels.size();
}

/// NIQE slot: deviation of mean-subtracted contrast-normalized luma from
/// standard-normal moments (|mean| + |std−1| + |skew| + |excess kurtosis|/3).
inline double local_statistics_deviation(const Tensor& img) {
  Tensor3<double> y(1, img.height(), img.width()), y2(1, img.height(), img.width());
  const auto lv = luma(img);
  for (std::size_t i = 0; i < lv.size(); ++i) {
    y[i] = lv[i];
    y2[i] = lv[i] * lv[i];
  }
  const auto mu = gaussian_blur(y, 7.0 / 6.0), mu2 = gaussian_blur(y2, 7.0 / 6.0);
  std::vector<double> mscn(lv.size());
  for (std::size_t i = 0; i < lv.size(); ++i) {
    const double sd = std::sqrt(std::max(0.0, mu2[i] - mu[i] * mu[i]));
    mscn[i] = (lv[i] - mu[i]) / (sd + 0.01);
  }
  const double m = mean(mscn);
  double m2 = 0, m3 = 0, m4 = 0;
  for (double v : mscn) {
    const double d = v - m;
    m2 += d * d;
    m3 += d * d * d;
    m4 += d * d * d * d;
  }
  m2 /= mscn.size();
  m3 /= mscn.size();
  m4 /= mscn.size();
  const double sd = std::sqrt(m2);
  const double skew = sd > 1e-12 ? m3 / (sd * sd * sd) : 0.0;
  const double kurt = sd > 1e-12 ? m4 / (m2 * m2) - 3.0 : 0.0;
  return std::abs(m) + std::abs(sd - 1.0) + std::abs(skew) + std::abs(kurt) / 3.0;
}

/// MUSIQ slot: mean luma gradient magnitude ×100.
inline double gradient_energy(const Tensor& img) {
  return 100.0 * mean_gradient_magnitude(gradients(luma_plane(img)));
}

/// MANIQA slot: variance of the 4-neighbour Laplacian of luma ×100.
inline double laplacian_variance(const Tensor& img) {
  const Plane p = luma_plane(img);
  std::vector<double> lap(p.v.size());
  for (int y = 0; y < p.h; ++y)
    for (int x = 0; x < p.w; ++x) {
      auto at = [&](int yy, int xx) { return p(reflect_index(yy, p.h), reflect_index(xx, p.w)); };
      lap[static_cast<std::size_t>(y) * p.w + x] =
          at(y - 1, x) + at(y + 1, x) + at(y, x - 1) + at(y, x + 1) - 4.0 * p(y, x);
    }
  const double m = mean(lap);
  double v = 0.0;
  for (double d : lap) v += (d - m) * (d - m);
  return 100.0 * v / lap.size();
}

/// CLIPIQA slot: share of luma variance above a σ=1 Gaussian low-pass, in [0,1].
inline double high_frequency_ratio(const Tensor& img) {
  const auto lv = luma(img);
  Tensor3<double> y(1, img.height(), img.width());
  std::copy(lv.begin(), lv.end(), y.storage().begin());
  const auto low = gaussian_blur(y, 1.0);
  const double m = mean(lv);
  double hf = 0.0, total = 0.0;
  for (std::size_t i = 0; i < lv.size(); ++i) {
    hf += (lv[i] - low[i]) * (lv[i] - low[i]);
    total += (lv[i] - m) * (lv[i] - m);
  }
  return hf / (total + 1e-6);
}

}  // namespace standin

/// The eight-metric suite. Each slot is a swappable adapter; the builtin suite
/// fills the six learned-metric slots with the stand-ins above.
struct MetricSuite {
  using FullReference = std::function<double(const Tensor& candidate, const Tensor& reference)>;
  std::string name = "builtin";
  std::array<FullReference, kMetricCount> slots;

  MetricVector evaluate(const Tensor& candidate, const Tensor& reference) const {
    require_same_shape(candidate, reference, "metric suite");
    MetricVector out;
    for (int i = 0; i < kMetricCount; ++i) out[i] = slots[i](candidate, reference);
    return out;
  }
  MetricVector evaluate(const RasterImage& candidate, const RasterImage& reference) const {
    return evaluate(candidate.tensor(), reference.tensor());
  }
};

inline MetricSuite builtin_metric_suite() {
  MetricSuite s;
  s.name = "builtin";
  s.slots[0] = [](const Tensor& a, const Tensor& b) { return psnr(a, b); };
  s.slots[1] = [](const Tensor& a, const Tensor& b) { return ssim(a, b); };
  s.slots[2] = [](const Tensor& a, const Tensor& b) { return standin::gradient_correlation_distance(a, b); };
  s.slots[3] = [](const Tensor& a, const Tensor& b) { return standin::structure_texture_distance(a, b); };
  s.slots[4] = [](const Tensor& a, const Tensor&) { return standin::local_statistics_deviation(a); };
  s.slots[5] = [](const Tensor& a, const Tensor&) { return standin::gradient_energy(a); };
  s.slots[6] = [](const Tensor& a, const Tensor&) { return standin::laplacian_variance(a); };
  s.slots[7] = [](const Tensor& a, const Tensor&) { return standin::high_frequency_ratio(a); };
  return s;
}

inline MetricSuite make_metric_suite(std::string_view name) {
  if (name == "builtin") return builtin_metric_suite();
  throw InvalidArgument("unknown metric suite '" + std::string(name) + "'");
}

/// Per-metric min–max normalization across the group with lower-is-better
/// metrics flipped, so 1 is always best. A metric constant across the group
/// (including a group of one) maps to 0.5.
inline std::vector<MetricVector> normalize_positive_trend(const std::vector<MetricVector>& group) {
  if (group.empty()) throw InvalidArgument("nothing to normalize");
  std::vector<MetricVector> out(group.size());
  for (int m = 0; m < kMetricCount; ++m) {
    double lo = group[0][m], hi = group[0][m];
    for (const auto& v : group) {
      if (!std::isfinite(v[m])) throw InvalidArgument("non-finite metric value");
      lo = std::min(lo, v[m]);
      hi = std::max(hi, v[m]);
    }
    if (hi - lo <= 0.0) {
      log::debug(std::string(kMetricNames[m]) + " constant across candidates; neutral 0.5");
      for (auto& o : out) o[m] = 0.5;
      continue;
    }
    for (std::size_t i = 0; i < group.size(); ++i) {
      const double n = (group[i][m] - lo) / (hi - lo);
      out[i][m] = kHigherIsBetter[m] ? n : 1.0 - n;
    }
  }
  return out;
}

/// Sum over metrics of the positive-trend normalized values, per candidate.
inline std::vector<double> normalize_aggregate(const std::vector<MetricVector>& group) {
  if (group.size() < 2) throw InvalidArgument("normalize_aggregate needs at least 2 candidates");
  std::vector<double> score;
  for (const auto& v : normalize_positive_trend(group)) {
    double s = 0.0;
    for (int m = 0; m < kMetricCount; ++m) s += v[m];
    score.push_back(s);
  }
  return score;
}

}  // namespace dspo
