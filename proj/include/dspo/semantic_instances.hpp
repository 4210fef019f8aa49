#pragma once

#include <json.hpp>

#include <algorithm>
#include <deque>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <vector>

#include "dspo/common.hpp"
#include "dspo/image.hpp"

namespace dspo {

/// Label map in which every pixel belongs to exactly one instance. Instance ids
/// are arbitrary non-negative integers; only ids with at least one pixel exist.
class InstancePartition {
 public:
  InstancePartition() = default;
  InstancePartition(int height, int width, std::vector<int> labels,
                    std::optional<int> background = std::nullopt)
      : height_(height), width_(width), labels_(std::move(labels)) {
    if (height < 1 || width < 1) throw InvalidArgument("partition extent must be positive");
    if (labels_.size() != static_cast<std::size_t>(height) * width)
      throw InvalidArgument("label map size does not match extent");
    std::map<int, std::size_t> counts;
    for (int l : labels_) {
      if (l < 0) throw InvalidArgument("negative instance id");
      ++counts[l];
    }
    for (auto [id, n] : counts) {
      ids_.push_back(id);
      counts_.push_back(n);
    }
    if (background && counts.count(*background)) background_ = background;
  }

  int height() const { return height_; }
  int width() const { return width_; }
  std::size_t pixel_count() const { return labels_.size(); }
  const std::vector<int>& label_map() const { return labels_; }
  int label(int y, int x) const { return labels_[static_cast<std::size_t>(y) * width_ + x]; }
  /// Instance ids, ascending.
  const std::vector<int>& ids() const { return ids_; }
  std::size_t size() const { return ids_.size(); }
  std::optional<int> background() const { return background_; }
  bool contains(int id) const { return std::binary_search(ids_.begin(), ids_.end(), id); }

  std::size_t area(int id) const {
    auto it = std::lower_bound(ids_.begin(), ids_.end(), id);
    if (it == ids_.end() || *it != id) throw InvalidArgument("no instance " + std::to_string(id));
    return counts_[static_cast<std::size_t>(it - ids_.begin())];
  }
  const std::vector<std::size_t>& areas() const { return counts_; }

  Mask mask(int id) const {
    Mask m(height_, width_);
    for (std::size_t i = 0; i < labels_.size(); ++i) m.bits[i] = labels_[i] == id ? 1 : 0;
    return m;
  }

  friend bool operator==(const InstancePartition&, const InstancePartition&) = default;

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<int> labels_;
  std::vector<int> ids_;
  std::vector<std::size_t> counts_;
  std::optional<int> background_;
};

/// Area weights w_m aligned with a partition's ids().
struct InstanceWeightVector {
  std::vector<int> ids;
  std::vector<double> values;

  double of(int id) const {
    auto it = std::find(ids.begin(), ids.end(), id);
    if (it == ids.end()) throw InvalidArgument("no weight for instance " + std::to_string(id));
    return values[static_cast<std::size_t>(it - ids.begin())];
  }
  double sum() const { return std::accumulate(values.begin(), values.end(), 0.0); }
};

/// w_m = |s_m| / Σ|s_m|. With `exclude_background`, the background instance gets 0
/// and the rest renormalize (unless it is the only instance).
inline InstanceWeightVector instance_weights(const InstancePartition& p, bool exclude_background = false) {
  InstanceWeightVector w{p.ids(), std::vector<double>(p.size(), 0.0)};
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const bool skip = exclude_background && p.background() == p.ids()[i] && p.size() > 1;
    if (!skip) total += static_cast<double>(p.areas()[i]);
  }
  for (std::size_t i = 0; i < p.size(); ++i) {
    const bool skip = exclude_background && p.background() == p.ids()[i] && p.size() > 1;
    w.values[i] = skip ? 0.0 : static_cast<double>(p.areas()[i]) / total;
  }
  return w;
}

/// Turns possibly overlapping or incomplete masks into an exact partition.
/// Overlaps go to the smaller mask (lower index on equal size); uncovered pixels
/// form one background instance whose id is masks.size(). Instance ids are the
/// indices of the input masks.
inline InstancePartition enforce_partition(const std::vector<Mask>& masks, int height, int width) {
  const std::size_t n = static_cast<std::size_t>(height) * width;
  for (const auto& m : masks)
    if (m.height != height || m.width != width) throw InvalidArgument("mask does not fit partition extent");
  std::vector<std::size_t> order(masks.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<std::size_t> sizes(masks.size());
  for (std::size_t i = 0; i < masks.size(); ++i) sizes[i] = masks[i].count();
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return sizes[a] < sizes[b]; });
  std::vector<int> labels(n, -1);
  for (std::size_t idx : order)
    for (std::size_t px = 0; px < n; ++px)
      if (labels[px] < 0 && masks[idx].bits[px]) labels[px] = static_cast<int>(idx);
  const int bg = static_cast<int>(masks.size());
  bool any_uncovered = false;
  for (int& l : labels)
    if (l < 0) l = bg, any_uncovered = true;
  return InstancePartition(height, width, std::move(labels),
                           any_uncovered ? std::optional<int>(bg) : std::nullopt);
}

/// Keeps the k largest non-background instances; everything else merges into a
/// single background instance.
inline InstancePartition top_k_largest(const InstancePartition& p, int k) {
  if (k < 1) throw InvalidArgument("top_k_largest needs k >= 1");
  std::vector<std::pair<std::size_t, int>> ranked;  // (area, id)
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p.background() != p.ids()[i]) ranked.emplace_back(p.areas()[i], p.ids()[i]);
  if (static_cast<int>(ranked.size()) <= k) return p;
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<int> kept;
  for (int i = 0; i < k; ++i) kept.push_back(ranked[i].second);
  std::sort(kept.begin(), kept.end());
  const int merged = p.background().value_or(p.ids().back() + 1);
  std::vector<int> labels = p.label_map();
  for (int& l : labels)
    if (!std::binary_search(kept.begin(), kept.end(), l)) l = merged;
  return InstancePartition(p.height(), p.width(), std::move(labels), merged);
}

/// Nearest-neighbour resampling of the label map (never of individual masks).
inline InstancePartition resample_partition(const InstancePartition& p, int height, int width) {
  if (height < 1 || width < 1) throw InvalidArgument("target extent must be positive");
  if (height == p.height() && width == p.width()) return p;
  std::vector<int> labels(static_cast<std::size_t>(height) * width);
  for (int y = 0; y < height; ++y) {
    const int sy = std::min(p.height() - 1, static_cast<int>((y + 0.5) * p.height() / height));
    for (int x = 0; x < width; ++x) {
      const int sx = std::min(p.width() - 1, static_cast<int>((x + 0.5) * p.width() / width));
      labels[static_cast<std::size_t>(y) * width + x] = p.label(sy, sx);
    }
  }
  return InstancePartition(height, width, std::move(labels), p.background());
}

// ---------------------------------------------------------------------------
// Persistence: 16-bit PNG label map + JSON sidecar.

inline void save_partition(const InstancePartition& p, const fs::path& png_path, const fs::path& json_path) {
  write_label_png(png_path, p.height(), p.width(), p.label_map());
  nlohmann::json counts = nlohmann::json::object();
  for (std::size_t i = 0; i < p.size(); ++i) counts[std::to_string(p.ids()[i])] = p.areas()[i];
  nlohmann::json j = {{"instances", counts},
                      {"background", p.background() ? nlohmann::json(*p.background()) : nlohmann::json()}};
  write_file_atomic(json_path, j.dump(2));
}

inline InstancePartition load_partition(const fs::path& png_path, const fs::path& json_path) {
  auto img = read_label_png(png_path);
  const auto j = nlohmann::json::parse(read_text(json_path));
  std::optional<int> bg;
  if (!j.at("background").is_null()) bg = j.at("background").get<int>();
  InstancePartition p(img.height, img.width, std::move(img.labels), bg);
  for (const auto& [id, n] : j.at("instances").items())
    if (p.area(std::stoi(id)) != n.get<std::size_t>())
      throw IoError("partition sidecar disagrees with label map: " + json_path.string());
  return p;
}

/// Sidecar next to the label map: same stem, .json extension.
inline fs::path partition_sidecar(const fs::path& png_path) { return fs::path(png_path).replace_extension(".json"); }

inline void save_partition(const InstancePartition& p, const fs::path& png_path) {
  save_partition(p, png_path, partition_sidecar(png_path));
}

inline InstancePartition load_partition(const fs::path& png_path) {
  return load_partition(png_path, partition_sidecar(png_path));
}

// ---------------------------------------------------------------------------
// Segmenters. Raw output may overlap or leave gaps; enforce_partition fixes both.

class Segmenter {
 public:
  virtual ~Segmenter() = default;
  virtual std::string name() const = 0;
  /// `key` identifies the image for adapters backed by precomputed results.
  virtual std::vector<Mask> raw_segment(const RasterImage& image, std::string_view key) const = 0;
};

/// Runs a segmenter, attributing any failure to the adapter by name.
inline std::vector<Mask> segment(const RasterImage& image, const Segmenter& segmenter,
                                 std::string_view key = {}) {
  std::vector<Mask> masks;
  try {
    masks = segmenter.raw_segment(image, key);
  } catch (const std::exception& e) {
    throw Error("segmenter '" + segmenter.name() + "' failed: " + e.what());
  }
  if (masks.empty()) throw Error("segmenter '" + segmenter.name() + "' returned no masks");
  return masks;
}

/// Regular rows×cols tiling; the last row/column absorbs any remainder.
class GridSegmenter : public Segmenter {
 public:
  GridSegmenter(int rows = 4, int cols = 4) : rows_(rows), cols_(cols) {
    if (rows < 1 || cols < 1) throw InvalidArgument("grid needs at least one tile");
  }
  std::string name() const override { return "grid"; }
  std::vector<Mask> raw_segment(const RasterImage& image, std::string_view) const override {
    const int h = image.height(), w = image.width();
    const int th = h / rows_, tw = w / cols_;
    if (th < 1 || tw < 1) throw InvalidArgument("more tiles than pixels");
    std::vector<Mask> masks;
    for (int r = 0; r < rows_; ++r)
      for (int c = 0; c < cols_; ++c) {
        Mask m(h, w);
        const int y1 = r == rows_ - 1 ? h : (r + 1) * th;
        const int x1 = c == cols_ - 1 ? w : (c + 1) * tw;
        for (int y = r * th; y < y1; ++y)
          for (int x = c * tw; x < x1; ++x) m.set(y, x);
        masks.push_back(std::move(m));
      }
    return masks;
  }

 private:
  int rows_, cols_;
};

/// Greedy 4-connected colour region growing against the running region mean,
/// followed by merging regions smaller than `min_area` into their longest-border neighbour.
class RegionGrowingSegmenter : public Segmenter {
 public:
  explicit RegionGrowingSegmenter(double threshold = 0.15, int min_area = 24)
      : threshold_(threshold), min_area_(min_area) {}
  std::string name() const override { return "region"; }

  std::vector<Mask> raw_segment(const RasterImage& image, std::string_view) const override {
    const int h = image.height(), w = image.width();
    const std::size_t n = static_cast<std::size_t>(h) * w;
    std::vector<int> label(n, -1);
    int regions = 0;
    std::deque<int> queue;
    for (std::size_t seed = 0; seed < n; ++seed) {
      if (label[seed] >= 0) continue;
      double mean[3], sum[3] = {0, 0, 0};
      std::size_t count = 0;
      auto absorb = [&](int px) {
        label[px] = regions;
        for (int c = 0; c < 3; ++c) sum[c] += image(c, px / w, px % w);
        ++count;
        for (int c = 0; c < 3; ++c) mean[c] = sum[c] / count;
        queue.push_back(px);
      };
      absorb(static_cast<int>(seed));
      while (!queue.empty()) {
        const int px = queue.front();
        queue.pop_front();
        const int y = px / w, x = px % w;
        const int nbr[4][2] = {{y - 1, x}, {y + 1, x}, {y, x - 1}, {y, x + 1}};
        for (const auto& q : nbr) {
          if (q[0] < 0 || q[0] >= h || q[1] < 0 || q[1] >= w) continue;
          const int qi = q[0] * w + q[1];
          if (label[qi] >= 0) continue;
          double d2 = 0.0;
          for (int c = 0; c < 3; ++c) {
            const double d = image(c, q[0], q[1]) - mean[c];
            d2 += d * d;
          }
          if (d2 < threshold_ * threshold_) absorb(qi);
        }
      }
      ++regions;
    }
    merge_small(label, regions, h, w);

    std::map<int, Mask> by_label;
    for (std::size_t i = 0; i < n; ++i) {
      auto [it, _] = by_label.try_emplace(label[i], h, w);
      it->second.bits[i] = 1;
    }
    std::vector<Mask> masks;
    for (auto& [_, m] : by_label) masks.push_back(std::move(m));
    return masks;
  }

 private:
  void merge_small(std::vector<int>& label, int regions, int h, int w) const {
    bool changed = true;
    while (changed) {
      changed = false;
      std::vector<std::size_t> area(regions, 0);
      for (int l : label) ++area[l];
      int live = 0;
      for (auto a : area) live += a > 0;
      if (live <= 1) return;
      for (int r = 0; r < regions; ++r) {
        if (area[r] == 0 || area[r] >= static_cast<std::size_t>(min_area_)) continue;
        std::map<int, int> border;
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x) {
            if (label[y * w + x] != r) continue;
            const int nbr[4][2] = {{y - 1, x}, {y + 1, x}, {y, x - 1}, {y, x + 1}};
            for (const auto& q : nbr)
              if (q[0] >= 0 && q[0] < h && q[1] >= 0 && q[1] < w && label[q[0] * w + q[1]] != r)
                ++border[label[q[0] * w + q[1]]];
          }
        if (border.empty()) continue;
        const int target = std::max_element(border.begin(), border.end(), [](const auto& a, const auto& b) {
                             return a.second < b.second;
                           })->first;
        for (int& l : label)
          if (l == r) l = target;
        changed = true;
        break;
      }
    }
  }

  double threshold_;
  int min_area_;
};

/// Adapter for masks computed offline by an external model (e.g. a promptable
/// segmenter): reads `<dir>/<key>.png`, a 16-bit label map, one mask per label.
class ExternalSegmenter : public Segmenter {
 public:
  explicit ExternalSegmenter(fs::path dir) : dir_(std::move(dir)) {}
  std::string name() const override { return "external"; }
  std::vector<Mask> raw_segment(const RasterImage& image, std::string_view key) const override {
    const fs::path path = dir_ / (std::string(key) + ".png");
    if (!fs::exists(path)) throw IoError("no precomputed masks at " + path.string());
    auto labels = read_label_png(path);
    LabelImage resized = labels;
    if (labels.height != image.height() || labels.width != image.width()) {
      auto p = resample_partition(InstancePartition(labels.height, labels.width, labels.labels),
                                  image.height(), image.width());
      resized = {p.height(), p.width(), p.label_map()};
    }
    std::map<int, Mask> by_label;
    for (std::size_t i = 0; i < resized.labels.size(); ++i) {
      auto [it, _] = by_label.try_emplace(resized.labels[i], resized.height, resized.width);
      it->second.bits[i] = 1;
    }
    std::vector<Mask> masks;
    for (auto& [_, m] : by_label) masks.push_back(std::move(m));
    return masks;
  }

 private:
  fs::path dir_;
};

inline std::unique_ptr<Segmenter> make_segmenter(std::string_view kind, const fs::path& external_dir = {}) {
  if (kind == "grid") return std::make_unique<GridSegmenter>();
  if (kind == "region") return std::make_unique<RegionGrowingSegmenter>();
  if (kind == "external") return std::make_unique<ExternalSegmenter>(external_dir);
  throw InvalidArgument("unknown segmenter '" + std::string(kind) + "' (grid|region|external)");
}

}  // namespace dspo
