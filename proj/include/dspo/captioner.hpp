#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "dspo/common.hpp"
#include "dspo/image.hpp"
#include "dspo/prompt_vocab.hpp"

namespace dspo {

class Captioner {
 public:
  virtual ~Captioner() = default;
  virtual std::string name() const = 0;
  virtual std::string caption(const Tensor& crop) const = 0;
};

/// Pseudo-captions from a quantized colour histogram plus one texture word.
///
/// Each pixel maps to a colour token: achromatic pixels (chroma < 0.1) become
/// black/white by lightness, the rest dark-/light- × one of six 60° hue bins.
/// Ten colour slots are shared out by largest remainder and written as repeated
/// tokens, so repetition carries the proportion. Inverting a crop maps every
/// colour token to a different one (hue +180°, lightness 1−L).
class HistogramCaptioner : public Captioner {
 public:
  static constexpr int kColourSlots = 10;

  std::string name() const override { return "histogram"; }

  std::string caption(const Tensor& crop) const override {
    if (crop.channels() != 3 || crop.plane() == 0) throw InvalidArgument("captioner needs an RGB crop");
    std::map<int, std::size_t> counts;
    for (int y = 0; y < crop.height(); ++y)
      for (int x = 0; x < crop.width(); ++x)
        ++counts[colour_token(crop(0, y, x), crop(1, y, x), crop(2, y, x))];

    // Largest-remainder apportionment of the colour slots.
    const double total = static_cast<double>(crop.plane());
    std::vector<std::pair<int, int>> slots;  // (token, slots)
    std::vector<std::tuple<double, int, std::size_t>> remainders;
    int assigned = 0;
    for (auto [token, n] : counts) {
      const double exact = kColourSlots * n / total;
      const int whole = static_cast<int>(std::floor(exact));
      slots.emplace_back(token, whole);
      assigned += whole;
      remainders.emplace_back(exact - whole, token, slots.size() - 1);
    }
    std::stable_sort(remainders.begin(), remainders.end(),
                     [](const auto& a, const auto& b) { return std::get<0>(a) > std::get<0>(b); });
    for (std::size_t i = 0; assigned < kColourSlots; ++i, ++assigned) ++slots[std::get<2>(remainders[i])].second;
    std::stable_sort(slots.begin(), slots.end(), [](const auto& a, const auto& b) { return a.second > b.second; });

    std::vector<int> ids;
    for (auto [token, n] : slots)
      for (int k = 0; k < n; ++k) ids.push_back(token);
    ids.push_back(PromptVocab::texture(texture_level(crop)));
    return PromptVocab::decode(ids);
  }

  static int colour_token(double r, double g, double b) {
    const double mx = std::max({r, g, b}), mn = std::min({r, g, b});
    const double lightness = 0.5 * (mx + mn);
    const bool light = lightness >= 0.5;
    if (mx - mn < 0.1) return light ? PromptVocab::kWhite : PromptVocab::kBlack;
    double hue;
    const double d = mx - mn;
    if (mx == r) hue = 60.0 * std::fmod((g - b) / d + 6.0, 6.0);
    else if (mx == g) hue = 60.0 * ((b - r) / d + 2.0);
    else hue = 60.0 * ((r - g) / d + 4.0);
    const int bin = static_cast<int>(std::floor(std::fmod(hue + 30.0, 360.0) / 60.0)) % PromptVocab::kHues;
    return PromptVocab::chromatic(light, bin);
  }

  static int texture_level(const Tensor& crop) {
    const auto l = luma(crop);
    double s = 0.0;
    std::size_t n = 0;
    for (int y = 0; y < crop.height(); ++y)
      for (int x = 0; x < crop.width(); ++x) {
        const std::size_t i = static_cast<std::size_t>(y) * crop.width() + x;
        const double gx = x + 1 < crop.width() ? l[i + 1] - l[i] : 0.0;
        const double gy = y + 1 < crop.height() ? l[i + crop.width()] - l[i] : 0.0;
        s += std::sqrt(gx * gx + gy * gy);
        ++n;
      }
    const double g = s / n;
    return g < 0.02 ? 0 : (g < 0.08 ? 1 : 2);
  }
};

/// Adapter slot for an external captioning model.
class FunctionCaptioner : public Captioner {
 public:
  FunctionCaptioner(std::string name, std::function<std::string(const Tensor&)> fn)
      : name_(std::move(name)), fn_(std::move(fn)) {}
  std::string name() const override { return name_; }
  std::string caption(const Tensor& crop) const override { return fn_(crop); }

 private:
  std::string name_;
  std::function<std::string(const Tensor&)> fn_;
};

/// Cosine similarity of whitespace-token count histograms.
inline double caption_similarity(std::string_view a, std::string_view b) {
  auto histogram = [](std::string_view s) {
    std::map<std::string, double> h;
    std::istringstream is{std::string(s)};
    std::string tok;
    while (is >> tok) h[tok] += 1.0;
    return h;
  };
  const auto ha = histogram(a), hb = histogram(b);
  if (ha.empty() && hb.empty()) return 1.0;
  double dot = 0, na = 0, nb = 0;
  for (const auto& [k, v] : ha) {
    na += v * v;
    auto it = hb.find(k);
    if (it != hb.end()) dot += v * it->second;
  }
  for (const auto& [k, v] : hb) nb += v * v;
  if (na == 0 || nb == 0) return 0.0;
  return dot / std::sqrt(na * nb);
}

struct HallucinationFlag {
  int candidate = 0;
  std::string caption;
  double similarity = 0.0;
};

inline constexpr double kDefaultHallucinationTau = 0.1;

/// Captions the ground-truth crop and each candidate crop; candidates whose
/// caption similarity falls below tau are returned with their captions.
inline std::vector<HallucinationFlag> detect_hallucination(const Captioner& captioner, const Tensor& gt_crop,
                                                           const std::vector<Tensor>& candidate_crops,
                                                           double tau = kDefaultHallucinationTau) {
  for (const auto& c : candidate_crops) require_same_shape(c, gt_crop, "detect_hallucination");
  auto run = [&](const Tensor& crop) {
    try {
      return captioner.caption(crop);
    } catch (const std::exception& e) {
      throw Error("captioner '" + captioner.name() + "' failed: " + e.what());
    }
  };
  const std::string reference = run(gt_crop);
  std::vector<HallucinationFlag> flags;
  for (std::size_t i = 0; i < candidate_crops.size(); ++i) {
    std::string cap = run(candidate_crops[i]);
    const double sim = caption_similarity(reference, cap);
    if (sim < tau) flags.push_back({static_cast<int>(i), std::move(cap), sim});
  }
  return flags;
}

}  // namespace dspo
