#pragma once

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "dspo/common.hpp"
#include "dspo/image.hpp"

namespace dspo {

/// Simplified real-world degradation: blur, area downsample, additive noise and
/// block-DCT quantization, optionally applied a second time at LQ resolution.
struct DegradationConfig {
  double blur_sigma = 1.0;
  double noise_sigma = 0.02;
  int downscale = 4;
  int compression_quality = 75;  // 100 disables compression
  bool second_order = false;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(blur_sigma >= 0.0)) throw InvalidArgument("blur_sigma must be >= 0");
    if (!(noise_sigma >= 0.0)) throw InvalidArgument("noise_sigma must be >= 0");
    if (downscale < 1) throw InvalidArgument("downscale must be >= 1");
    if (compression_quality < 1 || compression_quality > 100)
      throw InvalidArgument("compression_quality must lie in [1,100]");
  }
};

inline void to_json(nlohmann::json& j, const DegradationConfig& c) {
  j = {{"blur_sigma", c.blur_sigma},         {"noise_sigma", c.noise_sigma},
       {"downscale", c.downscale},           {"compression_quality", c.compression_quality},
       {"second_order", c.second_order},     {"seed", c.seed}};
}
inline void from_json(const nlohmann::json& j, DegradationConfig& c) {
  c.blur_sigma = j.at("blur_sigma").get<double>();
  c.noise_sigma = j.at("noise_sigma").get<double>();
  c.downscale = j.at("downscale").get<int>();
  c.compression_quality = j.at("compression_quality").get<int>();
  c.second_order = j.at("second_order").get<bool>();
  c.seed = j.at("seed").get<std::uint64_t>();
}

struct PairedSample {
  std::string id;
  RasterImage hq;
  RasterImage lq;
};

/// Uniform random size×size window; deterministic in `seed`.
inline RasterImage random_crop(const RasterImage& hq, int size, std::uint64_t seed) {
  if (size < RasterImage::kMinExtent) throw InvalidArgument("crop size below minimum extent");
  if (hq.height() < size || hq.width() < size)
    throw InvalidArgument("image " + hq.tensor().shape_string() + " smaller than crop " +
                          std::to_string(size));
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> dy(0, hq.height() - size), dx(0, hq.width() - size);
  const int top = dy(rng);
  const int left = dx(rng);
  return RasterImage(crop(hq.tensor(), top, left, size, size));
}

namespace detail {

inline const std::array<int, 64>& jpeg_luma_table() {
  static const std::array<int, 64> t = {16, 11, 10, 16, 24,  40,  51,  61,  12, 12, 14, 19, 26,
                                        58, 60, 55, 14, 13,  16,  24,  40,  57, 69, 56, 14, 17,
                                        22, 29, 51, 87, 80,  62,  18,  22,  37, 56, 68, 109, 103,
                                        77, 24, 35, 55, 64,  81,  104, 113, 92, 49, 64, 78,  87,
                                        103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99};
  return t;
}

inline std::array<double, 64> quant_steps(int quality) {
  const int scale = quality < 50 ? 5000 / quality : 200 - 2 * quality;
  std::array<double, 64> q{};
  for (int i = 0; i < 64; ++i)
    q[i] = std::clamp((jpeg_luma_table()[i] * scale + 50) / 100, 1, 255);
  return q;
}

inline const std::array<double, 64>& dct_basis() {
  static const std::array<double, 64> b = [] {
    std::array<double, 64> m{};
    for (int k = 0; k < 8; ++k)
      for (int n = 0; n < 8; ++n) {
        const double a = k == 0 ? std::sqrt(1.0 / 8.0) : std::sqrt(2.0 / 8.0);
        m[k * 8 + n] = a * std::cos(std::numbers::pi * (2 * n + 1) * k / 16.0);
      }
    return m;
  }();
  return b;
}

/// In-place 8×8 block DCT quantization of every channel (edge-replicated padding).
inline void block_dct_quantize(Tensor& img, int quality) {
  if (quality >= 100) return;
  const auto q = quant_steps(quality);
  const auto& B = dct_basis();
  const int h = img.height(), w = img.width();
  double block[64], coef[64], tmp[64];
  for (int c = 0; c < img.channels(); ++c)
    for (int by = 0; by < h; by += 8)
      for (int bx = 0; bx < w; bx += 8) {
        for (int y = 0; y < 8; ++y)
          for (int x = 0; x < 8; ++x)
            block[y * 8 + x] = (img(c, std::min(by + y, h - 1), std::min(bx + x, w - 1)) - 0.5) * 255.0;
        // coef = B * block * B^T
        for (int k = 0; k < 8; ++k)
          for (int x = 0; x < 8; ++x) {
            double s = 0.0;
            for (int n = 0; n < 8; ++n) s += B[k * 8 + n] * block[n * 8 + x];
            tmp[k * 8 + x] = s;
          }
        for (int k = 0; k < 8; ++k)
          for (int l = 0; l < 8; ++l) {
            double s = 0.0;
            for (int n = 0; n < 8; ++n) s += tmp[k * 8 + n] * B[l * 8 + n];
            coef[k * 8 + l] = std::round(s / q[k * 8 + l]) * q[k * 8 + l];
          }
        // block = B^T * coef * B
        for (int n = 0; n < 8; ++n)
          for (int l = 0; l < 8; ++l) {
            double s = 0.0;
            for (int k = 0; k < 8; ++k) s += B[k * 8 + n] * coef[k * 8 + l];
            tmp[n * 8 + l] = s;
          }
        for (int y = 0; y < 8 && by + y < h; ++y)
          for (int x = 0; x < 8 && bx + x < w; ++x) {
            double s = 0.0;
            for (int l = 0; l < 8; ++l) s += tmp[y * 8 + l] * B[l * 8 + x];
            img(c, by + y, bx + x) = static_cast<float>(std::clamp(s / 255.0 + 0.5, 0.0, 1.0));
          }
      }
}

inline void add_noise(Tensor& img, double sigma, std::mt19937_64& rng) {
  if (sigma <= 0.0) return;
  std::normal_distribution<double> n(0.0, sigma);
  for (float& v : img.values()) v = static_cast<float>(std::clamp(v + n(rng), 0.0, 1.0));
}

inline void clamp01(Tensor& img) {
  for (float& v : img.values()) v = std::clamp(v, 0.0f, 1.0f);
}

}  // namespace detail

/// Blur → downsample → noise → compression (→ second pass at LQ scale).
/// Pure function of (hq, cfg).
inline RasterImage degrade(const RasterImage& hq, const DegradationConfig& cfg) {
  cfg.validate();
  if (hq.height() % cfg.downscale || hq.width() % cfg.downscale)
    throw InvalidArgument("downscale " + std::to_string(cfg.downscale) + " must divide " +
                          hq.tensor().shape_string());
  std::mt19937_64 rng(cfg.seed);
  Tensor x = gaussian_blur(hq.tensor(), cfg.blur_sigma);
  x = area_downsample(x, cfg.downscale);
  detail::add_noise(x, cfg.noise_sigma, rng);
  detail::block_dct_quantize(x, cfg.compression_quality);
  if (cfg.second_order) {
    x = gaussian_blur(x, 0.5 * cfg.blur_sigma);
    detail::add_noise(x, 0.5 * cfg.noise_sigma, rng);
    detail::block_dct_quantize(x, std::min(100, cfg.compression_quality + 10));
  }
  detail::clamp01(x);
  return RasterImage(std::move(x));
}

// ---------------------------------------------------------------------------
// Pair datasets on disk.

struct PairRecord {
  std::string id;
  fs::path hq_path;  // absolute after loading
  fs::path lq_path;
  DegradationConfig config;
};

inline nlohmann::json pair_record_json(const PairRecord& r, const fs::path& base) {
  return {{"id", r.id},
          {"hq_path", fs::relative(r.hq_path, base).generic_string()},
          {"lq_path", fs::relative(r.lq_path, base).generic_string()},
          {"config", r.config}};
}

inline void write_pair_manifest(const fs::path& path, const std::vector<PairRecord>& records) {
  std::string out;
  const fs::path base = fs::absolute(path).parent_path();
  for (const auto& r : records) out += pair_record_json(r, base).dump() + "\n";
  write_file_atomic(path, out);
}

inline std::vector<PairRecord> read_pair_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open pair manifest " + path.string());
  const fs::path base = fs::absolute(path).parent_path();
  std::vector<PairRecord> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      out.push_back({j.at("id").get<std::string>(), base / j.at("hq_path").get<std::string>(),
                     base / j.at("lq_path").get<std::string>(),
                     j.at("config").get<DegradationConfig>()});
    } catch (const nlohmann::json::exception& e) {
      throw IoError(path.string() + ": line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline PairedSample load_pair(const PairRecord& r) {
  return {r.id, read_png(r.hq_path), read_png(r.lq_path)};
}

inline bool is_image_file(const fs::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png";
}

/// Per-image seed derived from the dataset seed and the source file stem.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag) {
  return Fnv1a().update(&seed, sizeof(seed)).update(tag).value();
}

/// Crops and degrades every PNG in `source_dir`, writing hq/ and lq/ PNGs and
/// `pairs.jsonl` under `out_dir`. Unreadable images are skipped with a warning.
inline std::vector<PairRecord> build_pair_dataset(const fs::path& source_dir,
                                                  const DegradationConfig& cfg, int crop_size,
                                                  const fs::path& out_dir) {
  cfg.validate();
  if (crop_size % cfg.downscale)
    throw InvalidArgument("downscale must divide crop size");
  if (!fs::is_directory(source_dir)) throw IoError("not a directory: " + source_dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(source_dir))
    if (e.is_regular_file() && is_image_file(e.path())) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw IoError("no images in " + source_dir.string());

  std::vector<PairRecord> records;
  for (const auto& file : files) {
    const std::string id = file.stem().string();
    RasterImage src;
    try {
      src = read_png(file);
    } catch (const Error& e) {
      log::warn("skipping unreadable image " + file.string() + ": " + e.what());
      continue;
    }
    if (src.height() < crop_size || src.width() < crop_size) {
      log::warn("skipping " + file.string() + ": smaller than crop " + std::to_string(crop_size));
      continue;
    }
    // PNG persistence quantizes; keep the in-memory pair identical to what is reloaded.
    const RasterImage hq = quantize8(random_crop(src, crop_size, derive_seed(cfg.seed, id + "/crop")));
    DegradationConfig per_image = cfg;
    per_image.seed = derive_seed(cfg.seed, id + "/degrade");
    const RasterImage lq = degrade(hq, per_image);
    PairRecord rec{id, fs::absolute(out_dir / "hq" / (id + ".png")),
                   fs::absolute(out_dir / "lq" / (id + ".png")), per_image};
    write_png(rec.hq_path, hq);
    write_png(rec.lq_path, lq);
    records.push_back(std::move(rec));
  }
  if (records.empty()) throw IoError("no readable images in " + source_dir.string());
  write_pair_manifest(out_dir / "pairs.jsonl", records);
  return records;
}

// ---------------------------------------------------------------------------
// Procedural source corpus.

/// Synthetic scene: gradient background plus textured shapes in saturated colours.
inline RasterImage make_toy_scene(int size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto colour = [&] {
    std::array<double, 3> c{};
    for (auto& v : c) v = u(rng) < 0.5 ? 0.1 + 0.25 * u(rng) : 0.65 + 0.3 * u(rng);
    return c;
  };
  Tensor img(3, size, size);
  const auto c0 = colour(), c1 = colour();
  const double angle = u(rng) * 2.0 * std::numbers::pi;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const double t = 0.5 + 0.5 * (std::cos(angle) * (x - size / 2.0) + std::sin(angle) * (y - size / 2.0)) / size;
      for (int c = 0; c < 3; ++c) img(c, y, x) = static_cast<float>(c0[c] * (1 - t) + c1[c] * t);
    }
  const int shapes = 3 + static_cast<int>(u(rng) * 4);
  for (int s = 0; s < shapes; ++s) {
    const auto fg = colour(), bg = colour();
    const int kind = static_cast<int>(u(rng) * 2);     // 0 disc, 1 rectangle
    const int texture = static_cast<int>(u(rng) * 4);  // solid, stripes, checker, dots
    const double cx = u(rng) * size, cy = u(rng) * size;
    const double r = size * (0.12 + 0.2 * u(rng));
    const double hw = size * (0.1 + 0.25 * u(rng)), hh = size * (0.1 + 0.25 * u(rng));
    const double period = 3.0 + u(rng) * 6.0;
    const double theta = u(rng) * std::numbers::pi;
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        const double dx = x - cx, dy = y - cy;
        const bool inside = kind == 0 ? dx * dx + dy * dy <= r * r : std::abs(dx) <= hw && std::abs(dy) <= hh;
        if (!inside) continue;
        double mix = 1.0;
        const double along = std::cos(theta) * dx + std::sin(theta) * dy;
        switch (texture) {
          case 1: mix = 0.5 + 0.5 * std::sin(2.0 * std::numbers::pi * along / period); break;
          case 2: mix = ((static_cast<int>(std::floor(x / period)) + static_cast<int>(std::floor(y / period))) & 1) ? 1.0 : 0.0; break;
          case 3: mix = (std::fmod(std::abs(dx), period) < 1.5 && std::fmod(std::abs(dy), period) < 1.5) ? 0.0 : 1.0; break;
          default: break;
        }
        for (int c = 0; c < 3; ++c) img(c, y, x) = static_cast<float>(fg[c] * mix + bg[c] * (1 - mix));
      }
  }
  return RasterImage::from_clamped(std::move(img));
}

inline std::vector<fs::path> make_toy_corpus(const fs::path& dir, int count, int size,
                                             std::uint64_t seed) {
  std::vector<fs::path> paths;
  for (int i = 0; i < count; ++i) {
    std::ostringstream name;
    name << "scene_" << std::setw(4) << std::setfill('0') << i << ".png";
    paths.push_back(dir / name.str());
    write_png(paths.back(), make_toy_scene(size, derive_seed(seed, name.str())));
  }
  return paths;
}

}  // namespace dspo
