#pragma once

#include <cstdint>
#include <vector>

#include "r3seg/errors.hpp"

namespace r3seg {

// Coordinate convention used across the toolkit: row = y, col = x, origin at
// the top-left pixel. Serialized boxes are inclusive [x_min..x_max] x
// [y_min..y_max].

template <typename T>
struct Plane {
  int h = 0;
  int w = 0;
  std::vector<T> d;

  Plane() = default;
  Plane(int h_, int w_, T fill = T{}) : h(h_), w(w_), d(size_t(h_) * w_, fill) {}

  T& at(int y, int x) { return d[size_t(y) * w + x]; }
  const T& at(int y, int x) const { return d[size_t(y) * w + x]; }
  size_t size() const { return d.size(); }
  bool in_bounds(int y, int x) const { return y >= 0 && y < h && x >= 0 && x < w; }

  bool operator==(const Plane&) const = default;
};

using MaskPlane = Plane<uint8_t>;
using ProbPlane = Plane<double>;

inline size_t count_nonzero(const MaskPlane& m) {
  size_t n = 0;
  for (uint8_t v : m.d) n += (v != 0);
  return n;
}

// 8-bit RGB raster, row-major, interleaved channels.
struct Image {
  int h = 0;
  int w = 0;
  std::vector<uint8_t> d;  // h*w*3

  Image() = default;
  Image(int h_, int w_) : h(h_), w(w_), d(size_t(h_) * w_ * 3, 0) {}

  uint8_t& at(int y, int x, int c) { return d[(size_t(y) * w + x) * 3 + c]; }
  const uint8_t& at(int y, int x, int c) const { return d[(size_t(y) * w + x) * 3 + c]; }

  bool operator==(const Image&) const = default;
};

}  // namespace r3seg
