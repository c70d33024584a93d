#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "glandseg/error.hpp"

namespace glandseg {

/// Interleaved H x W x C raster (row-major, channels fastest).
template <typename T>
class Image {
 public:
  Image() = default;
  Image(int height, int width, int channels = 1, T fill = T{})
      : height_(height), width_(width), channels_(channels),
        data_(static_cast<std::size_t>(height) * width * channels, fill) {
    if (height < 0 || width < 0 || channels < 1) {
      throw ShapeError("invalid image dimensions " + std::to_string(height) + "x" +
                       std::to_string(width) + "x" + std::to_string(channels));
    }
  }

  int height() const { return height_; }
  int width() const { return width_; }
  int channels() const { return channels_; }
  std::size_t pixel_count() const { return static_cast<std::size_t>(height_) * width_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& at(int y, int x, int c = 0) { return data_[index(y, x, c)]; }
  const T& at(int y, int x, int c = 0) const { return data_[index(y, x, c)]; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  bool same_shape(int h, int w, int c) const {
    return height_ == h && width_ == w && channels_ == c;
  }
  template <typename U>
  bool same_extent(const Image<U>& other) const {
    return height_ == other.height() && width_ == other.width();
  }

  bool operator==(const Image& other) const = default;

 private:
  std::size_t index(int y, int x, int c) const {
    return (static_cast<std::size_t>(y) * width_ + x) * channels_ + c;
  }

  int height_ = 0;
  int width_ = 0;
  int channels_ = 1;
  std::vector<T> data_;
};

using RgbImage = Image<std::uint8_t>;      // 3 channels
using LabelMap = Image<std::int32_t>;      // 0 = background, k >= 1 = instance k
using BinaryMask = Image<std::uint8_t>;    // values in {0, 1}
using ProbabilityMap = Image<float>;       // values in [0, 1]

template <typename A, typename B>
void require_same_extent(const Image<A>& a, const Image<B>& b, const char* what) {
  if (!a.same_extent(b)) {
    throw ShapeError(std::string(what) + ": shape mismatch " + std::to_string(a.height()) + "x" +
                     std::to_string(a.width()) + " vs " + std::to_string(b.height()) + "x" +
                     std::to_string(b.width()));
  }
}

}  // namespace glandseg
