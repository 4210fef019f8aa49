#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <new>
#include <span>
#include <string>
#include <vector>

#include "dspo/common.hpp"

namespace dspo {

/// 64-byte aligned storage, so vectorized kernels take the same code path (and
/// summation order) no matter where a buffer was allocated.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

template <class T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

/// Dense channel-major (C×H×W) tensor. Value type, no views.
template <class T>
class Tensor3 {
 public:
  using value_type = T;

  Tensor3() = default;
  Tensor3(int channels, int height, int width, T fill = T{})
      : c_(channels), h_(height), w_(width) {
    if (channels < 0 || height < 0 || width < 0) throw InvalidArgument("negative tensor extent");
    data_.assign(static_cast<std::size_t>(c_) * h_ * w_, fill);
  }

  int channels() const { return c_; }
  int height() const { return h_; }
  int width() const { return w_; }
  std::size_t size() const { return data_.size(); }
  std::size_t plane() const { return static_cast<std::size_t>(h_) * w_; }
  bool empty() const { return data_.empty(); }

  T& operator()(int c, int y, int x) { return data_[(static_cast<std::size_t>(c) * h_ + y) * w_ + x]; }
  const T& operator()(int c, int y, int x) const {
    return data_[(static_cast<std::size_t>(c) * h_ + y) * w_ + x];
  }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  std::span<T> channel(int c) { return std::span<T>(data_).subspan(c * plane(), plane()); }
  std::span<const T> channel(int c) const {
    return std::span<const T>(data_).subspan(c * plane(), plane());
  }
  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  AlignedVector<T>& storage() { return data_; }
  const AlignedVector<T>& storage() const { return data_; }

  template <class U>
  bool same_shape(const Tensor3<U>& o) const {
    return c_ == o.channels() && h_ == o.height() && w_ == o.width();
  }

  std::string shape_string() const {
    return std::to_string(c_) + "x" + std::to_string(h_) + "x" + std::to_string(w_);
  }

  template <class U>
  Tensor3<U> cast() const {
    Tensor3<U> out(c_, h_, w_);
    std::transform(data_.begin(), data_.end(), out.storage().begin(),
                   [](T v) { return static_cast<U>(v); });
    return out;
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor3& a, const Tensor3& b) {
    return a.same_shape(b) && a.data_ == b.data_;
  }

 private:
  int c_ = 0;
  int h_ = 0;
  int w_ = 0;
  AlignedVector<T> data_;
};

using Tensor = Tensor3<float>;
using TensorD = Tensor3<double>;

template <class T, class U>
void require_same_shape(const Tensor3<T>& a, const Tensor3<U>& b, std::string_view what) {
  if (!a.same_shape(b)) {
    throw InvalidArgument(std::string(what) + ": shape mismatch " + a.shape_string() + " vs " +
                          b.shape_string());
  }
}

/// Binary H×W mask.
struct Mask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> bits;

  Mask() = default;
  Mask(int h, int w, bool fill = false)
      : height(h), width(w), bits(static_cast<std::size_t>(h) * w, fill ? 1 : 0) {}

  bool operator()(int y, int x) const { return bits[static_cast<std::size_t>(y) * width + x] != 0; }
  void set(int y, int x, bool v = true) { bits[static_cast<std::size_t>(y) * width + x] = v ? 1 : 0; }
  std::size_t count() const {
    return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
  }
  friend bool operator==(const Mask&, const Mask&) = default;
};

}  // namespace dspo
