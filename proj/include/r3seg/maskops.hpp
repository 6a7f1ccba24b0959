#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "r3seg/errors.hpp"
#include "r3seg/grid.hpp"

// Refine stage: entropy maps, confidence gating, overlap suppression, box
// extraction and leakage measurement. Everything here is a pure function of
// its inputs.

namespace r3seg::maskops {

struct BoundingBox {
  int x_min = 0;
  int y_min = 0;
  int x_max = 0;
  int y_max = 0;

  int width() const { return x_max - x_min + 1; }
  int height() const { return y_max - y_min + 1; }
  bool contains(int y, int x) const {
    return x >= x_min && x <= x_max && y >= y_min && y <= y_max;
  }
  bool operator==(const BoundingBox&) const = default;
};

// K per-instance probability planes over one image.
struct ProbMaskStack {
  int k = 0;
  int h = 0;
  int w = 0;
  std::vector<double> data;  // k*h*w
  std::string image_id;
  std::vector<int64_t> instance_ids;

  ProbMaskStack() = default;
  ProbMaskStack(int k_, int h_, int w_)
      : k(k_), h(h_), w(w_), data(size_t(k_) * h_ * w_, 0.0), instance_ids(k_, 0) {}

  double& at(int ki, int y, int x) { return data[(size_t(ki) * h + y) * w + x]; }
  double at(int ki, int y, int x) const { return data[(size_t(ki) * h + y) * w + x]; }

  void validate() const {
    if (k < 1) throw StructureError("ProbMaskStack: K must be >= 1");
    if (h < 1 || w < 1) throw StructureError("ProbMaskStack: empty spatial grid");
    if (data.size() != size_t(k) * h * w)
      throw StructureError("ProbMaskStack: data size does not match K*H*W");
    if (instance_ids.size() != size_t(k))
      throw StructureError("ProbMaskStack: instance_ids size does not match K");
    for (double v : data) {
      if (!std::isfinite(v) || v < 0.0 || v > 1.0)
        throw InputError("ProbMaskStack: probability outside [0,1]");
    }
  }
};

struct EntropyStack {
  int k = 0;
  int h = 0;
  int w = 0;
  std::vector<double> data;

  EntropyStack() = default;
  EntropyStack(int k_, int h_, int w_)
      : k(k_), h(h_), w(w_), data(size_t(k_) * h_ * w_, 0.0) {}

  double& at(int ki, int y, int x) { return data[(size_t(ki) * h + y) * w + x]; }
  double at(int ki, int y, int x) const { return data[(size_t(ki) * h + y) * w + x]; }
};

struct BinaryMaskSet {
  int k = 0;
  int h = 0;
  int w = 0;
  std::vector<uint8_t> data;
  std::vector<int64_t> instance_ids;

  BinaryMaskSet() = default;
  BinaryMaskSet(int k_, int h_, int w_)
      : k(k_), h(h_), w(w_), data(size_t(k_) * h_ * w_, 0), instance_ids(k_, 0) {}

  uint8_t& at(int ki, int y, int x) { return data[(size_t(ki) * h + y) * w + x]; }
  uint8_t at(int ki, int y, int x) const { return data[(size_t(ki) * h + y) * w + x]; }

  MaskPlane plane(int ki) const {
    MaskPlane p(h, w);
    std::copy_n(data.begin() + size_t(ki) * h * w, size_t(h) * w, p.d.begin());
    return p;
  }
};

struct OverlapMap {
  int h = 0;
  int w = 0;
  std::vector<uint8_t> data;

  OverlapMap() = default;
  OverlapMap(int h_, int w_) : h(h_), w(w_), data(size_t(h_) * w_, 0) {}

  uint8_t& at(int y, int x) { return data[size_t(y) * w + x]; }
  uint8_t at(int y, int x) const { return data[size_t(y) * w + x]; }
};

// Mutually disjoint instance masks plus their enclosing boxes. A box is
// absent exactly when its mask came out empty.
struct RefinedMaskSet {
  BinaryMaskSet masks;
  std::vector<std::optional<BoundingBox>> boxes;
};

// Normalized binary entropy, log base 2 so the maximum is exactly 1.
// 0*log(0) is taken as 0.
inline double binary_entropy(double p) {
  if (p <= 0.0 || p >= 1.0) return 0.0;
  return -(p * std::log2(p) + (1.0 - p) * std::log2(1.0 - p));
}

inline EntropyStack entropy_map(const ProbMaskStack& stack) {
  stack.validate();
  EntropyStack out(stack.k, stack.h, stack.w);
  for (size_t i = 0; i < stack.data.size(); ++i) {
    double e = binary_entropy(stack.data[i]);
    out.data[i] = std::clamp(e, 0.0, 1.0);
  }
  return out;
}

// Keeps a pixel iff p * (1 - H) > epsilon, strictly.
inline BinaryMaskSet confidence_filter(const ProbMaskStack& stack,
                                       const EntropyStack& entropy, double epsilon) {
  if (!(epsilon >= 0.0 && epsilon < 1.0))
    throw InputError("confidence_filter: epsilon must satisfy 0 <= eps < 1");
  if (stack.k != entropy.k || stack.h != entropy.h || stack.w != entropy.w)
    throw StructureError("confidence_filter: stack/entropy shape mismatch");
  BinaryMaskSet out(stack.k, stack.h, stack.w);
  out.instance_ids = stack.instance_ids;
  for (size_t i = 0; i < stack.data.size(); ++i)
    out.data[i] = stack.data[i] * (1.0 - entropy.data[i]) > epsilon ? 1 : 0;
  return out;
}

// O = 1 where two or more instances claim the pixel.
inline OverlapMap overlap_map(const BinaryMaskSet& masks) {
  OverlapMap out(masks.h, masks.w);
  const size_t plane = size_t(masks.h) * masks.w;
  for (size_t p = 0; p < plane; ++p) {
    int claims = 0;
    for (int ki = 0; ki < masks.k; ++ki) claims += masks.data[size_t(ki) * plane + p] != 0;
    out.data[p] = claims > 1 ? 1 : 0;
  }
  return out;
}

inline std::optional<BoundingBox> enclosing_box(const MaskPlane& mask) {
  int x_min = mask.w, y_min = mask.h, x_max = -1, y_max = -1;
  for (int y = 0; y < mask.h; ++y)
    for (int x = 0; x < mask.w; ++x)
      if (mask.at(y, x)) {
        x_min = std::min(x_min, x);
        x_max = std::max(x_max, x);
        y_min = std::min(y_min, y);
        y_max = std::max(y_max, y);
      }
  if (x_max < 0) return std::nullopt;
  return BoundingBox{x_min, y_min, x_max, y_max};
}

// M_ref = C * (1 - O); boxes recomputed from the surviving pixels.
inline RefinedMaskSet refine(const BinaryMaskSet& masks, const OverlapMap& overlap) {
  if (masks.h != overlap.h || masks.w != overlap.w)
    throw StructureError("refine: mask/overlap shape mismatch");
  RefinedMaskSet out;
  out.masks = BinaryMaskSet(masks.k, masks.h, masks.w);
  out.masks.instance_ids = masks.instance_ids;
  const size_t plane = size_t(masks.h) * masks.w;
  for (int ki = 0; ki < masks.k; ++ki)
    for (size_t p = 0; p < plane; ++p)
      out.masks.data[size_t(ki) * plane + p] =
          masks.data[size_t(ki) * plane + p] && !overlap.data[p] ? 1 : 0;
  out.boxes.reserve(masks.k);
  for (int ki = 0; ki < masks.k; ++ki) out.boxes.push_back(enclosing_box(out.masks.plane(ki)));
  return out;
}

// Leaked fraction: pixels claimed by >1 instance over pixels claimed by >=1.
// 0 when nothing is claimed at all.
inline double leakage_rate(const BinaryMaskSet& masks) {
  const size_t plane = size_t(masks.h) * masks.w;
  size_t claimed = 0, leaked = 0;
  for (size_t p = 0; p < plane; ++p) {
    int claims = 0;
    for (int ki = 0; ki < masks.k; ++ki) claims += masks.data[size_t(ki) * plane + p] != 0;
    claimed += claims >= 1;
    leaked += claims > 1;
  }
  if (claimed == 0) return 0.0;
  return double(leaked) / double(claimed);
}

}  // namespace r3seg::maskops
