#pragma once

#include <png.h>

#include <array>
#include <cmath>
#include <cstdio>
#include <memory>
#include <vector>

#include "dspo/common.hpp"
#include "dspo/tensor.hpp"

namespace dspo {

/// RGB image with values in [0,1], at least 8×8.
class RasterImage {
 public:
  static constexpr int kMinExtent = 8;

  RasterImage() = default;
  RasterImage(int height, int width, float fill = 0.0f) : pixels_(3, height, width, fill) {
    validate();
  }
  explicit RasterImage(Tensor pixels) : pixels_(std::move(pixels)) { validate(); }

  /// Clamps into [0,1] instead of rejecting out-of-range values.
  static RasterImage from_clamped(Tensor pixels) {
    for (float& v : pixels.values()) v = std::isfinite(v) ? std::clamp(v, 0.0f, 1.0f) : 0.0f;
    return RasterImage(std::move(pixels));
  }

  int height() const { return pixels_.height(); }
  int width() const { return pixels_.width(); }
  const Tensor& tensor() const { return pixels_; }
  float operator()(int c, int y, int x) const { return pixels_(c, y, x); }

  friend bool operator==(const RasterImage& a, const RasterImage& b) { return a.pixels_ == b.pixels_; }

 private:
  void validate() const {
    if (pixels_.channels() != 3) throw InvalidArgument("RasterImage needs 3 channels");
    if (pixels_.height() < kMinExtent || pixels_.width() < kMinExtent)
      throw InvalidArgument("RasterImage must be at least 8x8, got " + pixels_.shape_string());
    for (float v : pixels_.values())
      if (!std::isfinite(v) || v < 0.0f || v > 1.0f)
        throw InvalidArgument("RasterImage values must lie in [0,1]");
  }

  Tensor pixels_;
};

// ---------------------------------------------------------------------------
// Resampling and filtering on raw tensors.

/// Mean over factor×factor blocks. Extents must be divisible by factor.
template <class T>
Tensor3<T> area_downsample(const Tensor3<T>& in, int factor) {
  if (factor < 1) throw InvalidArgument("downsample factor must be >= 1");
  if (in.height() % factor || in.width() % factor)
    throw InvalidArgument("downsample factor must divide " + in.shape_string());
  if (factor == 1) return in;
  const int h = in.height() / factor, w = in.width() / factor;
  Tensor3<T> out(in.channels(), h, w);
  const double norm = 1.0 / (factor * factor);
  for (int c = 0; c < in.channels(); ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double acc = 0.0;
        for (int dy = 0; dy < factor; ++dy)
          for (int dx = 0; dx < factor; ++dx) acc += in(c, y * factor + dy, x * factor + dx);
        out(c, y, x) = static_cast<T>(acc * norm);
      }
  return out;
}

namespace detail {
inline double cubic_weight(double t) {
  constexpr double a = -0.5;
  t = std::abs(t);
  if (t <= 1.0) return ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0;
  if (t < 2.0) return ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a;
  return 0.0;
}
}  // namespace detail

/// Bicubic (Keys, a=-0.5) resize to an arbitrary size with clamped borders.
template <class T>
Tensor3<T> bicubic_resize(const Tensor3<T>& in, int out_h, int out_w) {
  Tensor3<T> out(in.channels(), out_h, out_w);
  const double sy = static_cast<double>(in.height()) / out_h;
  const double sx = static_cast<double>(in.width()) / out_w;
  for (int y = 0; y < out_h; ++y) {
    const double fy = (y + 0.5) * sy - 0.5;
    const int iy = static_cast<int>(std::floor(fy));
    std::array<double, 4> wy{};
    for (int k = 0; k < 4; ++k) wy[k] = detail::cubic_weight(fy - (iy - 1 + k));
    for (int x = 0; x < out_w; ++x) {
      const double fx = (x + 0.5) * sx - 0.5;
      const int ix = static_cast<int>(std::floor(fx));
      std::array<double, 4> wx{};
      for (int k = 0; k < 4; ++k) wx[k] = detail::cubic_weight(fx - (ix - 1 + k));
      for (int c = 0; c < in.channels(); ++c) {
        double acc = 0.0;
        for (int ky = 0; ky < 4; ++ky) {
          const int yy = std::clamp(iy - 1 + ky, 0, in.height() - 1);
          for (int kx = 0; kx < 4; ++kx) {
            const int xx = std::clamp(ix - 1 + kx, 0, in.width() - 1);
            acc += wy[ky] * wx[kx] * in(c, yy, xx);
          }
        }
        out(c, y, x) = static_cast<T>(acc);
      }
    }
  }
  return out;
}

/// Bicubic upsampling of an image by an integer factor, clamped to [0,1].
inline RasterImage bicubic_upsample(const RasterImage& img, int factor) {
  return RasterImage::from_clamped(
      bicubic_resize(img.tensor(), img.height() * factor, img.width() * factor));
}

inline std::vector<double> gaussian_kernel(double sigma, int radius) {
  std::vector<double> k(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-(i * i) / (2.0 * sigma * sigma));
    sum += k[i + radius];
  }
  for (double& v : k) v /= sum;
  return k;
}

inline int reflect_index(int i, int n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) i = i < 0 ? -i : 2 * n - 2 - i;
  return i;
}

/// Separable Gaussian blur with reflected borders. sigma <= 0 is the identity.
template <class T>
Tensor3<T> gaussian_blur(const Tensor3<T>& in, double sigma) {
  if (sigma <= 0.0) return in;
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  const auto k = gaussian_kernel(sigma, radius);
  Tensor3<T> tmp(in.channels(), in.height(), in.width());
  Tensor3<T> out(in.channels(), in.height(), in.width());
  for (int c = 0; c < in.channels(); ++c) {
    for (int y = 0; y < in.height(); ++y)
      for (int x = 0; x < in.width(); ++x) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i)
          acc += k[i + radius] * in(c, y, reflect_index(x + i, in.width()));
        tmp(c, y, x) = static_cast<T>(acc);
      }
    for (int y = 0; y < in.height(); ++y)
      for (int x = 0; x < in.width(); ++x) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i)
          acc += k[i + radius] * tmp(c, reflect_index(y + i, in.height()), x);
        out(c, y, x) = static_cast<T>(acc);
      }
  }
  return out;
}

template <class T>
Tensor3<T> crop(const Tensor3<T>& in, int top, int left, int h, int w) {
  if (top < 0 || left < 0 || top + h > in.height() || left + w > in.width())
    throw InvalidArgument("crop window outside " + in.shape_string());
  Tensor3<T> out(in.channels(), h, w);
  for (int c = 0; c < in.channels(); ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) out(c, y, x) = in(c, top + y, left + x);
  return out;
}

/// Rec. 601 luma of a 3-channel tensor.
template <class T>
std::vector<double> luma(const Tensor3<T>& in) {
  std::vector<double> out(in.plane());
  const auto r = in.channel(0), g = in.channel(1), b = in.channel(2);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i];
  return out;
}

// ---------------------------------------------------------------------------
// PNG I/O (libpng).

namespace detail {

struct PngReadHandle {
  png_structp png = nullptr;
  png_infop info = nullptr;
  FILE* file = nullptr;
  ~PngReadHandle() {
    if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
    if (file) std::fclose(file);
  }
};

struct PngWriteHandle {
  png_structp png = nullptr;
  png_infop info = nullptr;
  FILE* file = nullptr;
  ~PngWriteHandle() {
    if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
    if (file) std::fclose(file);
  }
};

[[noreturn]] inline void png_error_fn(png_structp, png_const_charp msg) { throw IoError(msg); }
inline void png_warning_fn(png_structp, png_const_charp) {}

struct DecodedPng {
  int width = 0;
  int height = 0;
  int channels = 0;
  int bit_depth = 0;
  std::vector<std::uint16_t> samples;  // interleaved
};

inline DecodedPng decode_png(const fs::path& path) {
  PngReadHandle h;
  h.file = std::fopen(path.c_str(), "rb");
  if (!h.file) throw IoError("cannot open " + path.string());
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, h.file) != 8 || png_sig_cmp(sig, 0, 8))
    throw IoError("not a PNG file: " + path.string());
  h.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_fn, png_warning_fn);
  if (!h.png) throw IoError("png_create_read_struct failed");
  h.info = png_create_info_struct(h.png);
  if (!h.info) throw IoError("png_create_info_struct failed");
  try {
    png_init_io(h.png, h.file);
    png_set_sig_bytes(h.png, 8);
    png_read_info(h.png, h.info);
    const int color = png_get_color_type(h.png, h.info);
    int depth = png_get_bit_depth(h.png, h.info);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(h.png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(h.png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(h.png);
    if (png_get_valid(h.png, h.info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(h.png), png_set_strip_alpha(h.png);
    if (depth == 16) png_set_swap(h.png);
    png_read_update_info(h.png, h.info);

    DecodedPng out;
    out.width = static_cast<int>(png_get_image_width(h.png, h.info));
    out.height = static_cast<int>(png_get_image_height(h.png, h.info));
    out.channels = png_get_channels(h.png, h.info);
    out.bit_depth = png_get_bit_depth(h.png, h.info);
    const std::size_t rowbytes = png_get_rowbytes(h.png, h.info);
    std::vector<unsigned char> raw(rowbytes * out.height);
    std::vector<png_bytep> rows(out.height);
    for (int y = 0; y < out.height; ++y) rows[y] = raw.data() + y * rowbytes;
    png_read_image(h.png, rows.data());
    png_read_end(h.png, nullptr);

    const std::size_t n = static_cast<std::size_t>(out.width) * out.height * out.channels;
    out.samples.resize(n);
    if (out.bit_depth == 16) {
      for (std::size_t i = 0; i < n; ++i)
        out.samples[i] = static_cast<std::uint16_t>(raw[2 * i] | (raw[2 * i + 1] << 8));
    } else {
      for (std::size_t i = 0; i < n; ++i) out.samples[i] = raw[i];
    }
    return out;
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

inline void encode_png(const fs::path& path, int width, int height, int channels, int bit_depth,
                       const std::vector<unsigned char>& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    PngWriteHandle h;
    h.file = std::fopen(tmp.c_str(), "wb");
    if (!h.file) throw IoError("cannot write " + tmp.string());
    h.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_fn, png_warning_fn);
    h.info = png_create_info_struct(h.png);
    png_init_io(h.png, h.file);
    const int color = channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB;
    png_set_IHDR(h.png, h.info, width, height, bit_depth, color, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(h.png, h.info);
    const std::size_t rowbytes = static_cast<std::size_t>(width) * channels * (bit_depth / 8);
    for (int y = 0; y < height; ++y)
      png_write_row(h.png, const_cast<png_bytep>(bytes.data() + y * rowbytes));
    png_write_end(h.png, nullptr);
  }
  fs::rename(tmp, path);
}

}  // namespace detail

inline std::uint8_t to_byte(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

/// Quantizes to 8 bits, as a PNG round trip would.
inline RasterImage quantize8(const RasterImage& img) {
  Tensor t = img.tensor();
  for (float& v : t.values()) v = to_byte(v) / 255.0f;
  return RasterImage(std::move(t));
}

inline RasterImage read_png(const fs::path& path) {
  const auto png = detail::decode_png(path);
  const double scale = png.bit_depth == 16 ? 65535.0 : 255.0;
  Tensor t(3, png.height, png.width);
  for (int y = 0; y < png.height; ++y)
    for (int x = 0; x < png.width; ++x)
      for (int c = 0; c < 3; ++c) {
        const int src = png.channels >= 3 ? c : 0;
        const auto s = png.samples[(static_cast<std::size_t>(y) * png.width + x) * png.channels + src];
        t(c, y, x) = static_cast<float>(s / scale);
      }
  return RasterImage(std::move(t));
}

/// 8-bit RGB PNG, written atomically.
inline void write_png(const fs::path& path, const RasterImage& img) {
  std::vector<unsigned char> bytes(static_cast<std::size_t>(img.height()) * img.width() * 3);
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x)
      for (int c = 0; c < 3; ++c)
        bytes[(static_cast<std::size_t>(y) * img.width() + x) * 3 + c] = to_byte(img(c, y, x));
  detail::encode_png(path, img.width(), img.height(), 3, 8, bytes);
}

/// 16-bit grayscale PNG holding integer labels.
inline void write_label_png(const fs::path& path, int height, int width,
                            const std::vector<int>& labels) {
  std::vector<unsigned char> bytes(labels.size() * 2);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] > 65535) throw InvalidArgument("label out of 16-bit range");
    bytes[2 * i] = static_cast<unsigned char>(labels[i] >> 8);  // PNG is big-endian
    bytes[2 * i + 1] = static_cast<unsigned char>(labels[i] & 0xff);
  }
  detail::encode_png(path, width, height, 1, 16, bytes);
}

struct LabelImage {
  int height = 0;
  int width = 0;
  std::vector<int> labels;
};

inline LabelImage read_label_png(const fs::path& path) {
  const auto png = detail::decode_png(path);
  if (png.channels != 1) throw IoError(path.string() + ": label map must be single-channel");
  LabelImage out{png.height, png.width, std::vector<int>(png.samples.begin(), png.samples.end())};
  return out;
}

}  // namespace dspo
