#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "slicegs/errors.hpp"

namespace slicegs {

/// Row-major, channel-interleaved image shape.
struct ImageShape {
  int height = 0;
  int width = 0;
  int channels = 1;

  std::size_t size() const { return static_cast<std::size_t>(height) * width * channels; }
  std::size_t pixels() const { return static_cast<std::size_t>(height) * width; }
  friend bool operator==(const ImageShape&, const ImageShape&) = default;
};

template <class T> struct Image {
  ImageShape shape;
  std::vector<T> data;

  Image() = default;
  Image(int height, int width, int channels, T fill = T(0))
      : shape{height, width, channels}, data(shape.size(), fill) {}
  Image(ImageShape s, std::vector<T> values) : shape(s), data(std::move(values)) {
    if (data.size() != shape.size()) throw ValidationError("image data does not match its shape");
  }

  T& at(int row, int col, int ch = 0) {
    return data[(static_cast<std::size_t>(row) * shape.width + col) * shape.channels + ch];
  }
  T at(int row, int col, int ch = 0) const {
    return data[(static_cast<std::size_t>(row) * shape.width + col) * shape.channels + ch];
  }
  std::span<const T> view() const { return data; }
};

inline void require_same_shape(const ImageShape& a, const ImageShape& b, const char* what) {
  if (!(a == b)) throw ValidationError(std::string(what) + ": image shapes differ");
}

}  // namespace slicegs
