#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "r3seg/errors.hpp"
#include "r3seg/grid.hpp"
#include "r3seg/maskops.hpp"
#include "r3seg/rng.hpp"

// Point-prompt sampling from ground-truth masks, weak/strong dual views, and
// geometric transfer of prompts between the original image and a view.

namespace r3seg::prompts {

enum class Polarity { positive, negative };

struct PointPrompt {
  int x = 0;
  int y = 0;
  Polarity polarity = Polarity::positive;
  int64_t instance_id = -1;

  bool operator==(const PointPrompt&) const = default;
};

struct BoxPrompt {
  maskops::BoundingBox box;
  int64_t instance_id = -1;

  bool operator==(const BoxPrompt&) const = default;
};

struct PhotometricParams {
  double brightness = 1.0;
  double contrast = 1.0;
  double saturation = 1.0;
  // Shadow region is a parallelogram (always convex): center +- u +- v.
  std::array<double, 2> shadow_center{0.0, 0.0};
  std::array<double, 2> shadow_u{0.0, 0.0};
  std::array<double, 2> shadow_v{0.0, 0.0};
  double shadow_factor = 1.0;
};

struct ViewPair {
  Image weak;
  Image strong;
  bool flip_applied = false;
  PhotometricParams photometric;
  uint64_t rng_seed = 0;
};

// Sampling magnitudes for the strong view. All draws are uniform in range.
struct AugmentRanges {
  double brightness_lo = 0.6, brightness_hi = 1.4;
  double contrast_lo = 0.6, contrast_hi = 1.4;
  double saturation_lo = 0.6, saturation_hi = 1.4;
  double shadow_lo = 0.4, shadow_hi = 0.8;

  void validate() const {
    auto ok = [](double lo, double hi) { return lo > 0.0 && lo <= hi; };
    if (!ok(brightness_lo, brightness_hi) || !ok(contrast_lo, contrast_hi) ||
        !ok(saturation_lo, saturation_hi) || !ok(shadow_lo, shadow_hi))
      throw ConfigError("augment: each range needs 0 < lo <= hi");
  }
};

struct PointSample {
  std::vector<PointPrompt> positives;
  std::vector<PointPrompt> negatives;
  std::vector<std::string> warnings;
};

namespace detail {

// Uniform draw of n items without replacement; falls back to replacement
// (with a warning) when the pool is too small.
inline std::vector<size_t> draw(size_t pool, int n, Rng& rng, bool& with_replacement) {
  std::vector<size_t> out;
  with_replacement = pool < size_t(n);
  if (with_replacement) {
    for (int i = 0; i < n; ++i) out.push_back(size_t(rng.uniform_int(0, int(pool) - 1)));
    return out;
  }
  std::vector<size_t> idx(pool);
  for (size_t i = 0; i < pool; ++i) idx[i] = i;
  for (int i = 0; i < n; ++i) {
    const size_t j = size_t(rng.uniform_int(i, int(pool) - 1));
    std::swap(idx[i], idx[j]);
    out.push_back(idx[i]);
  }
  return out;
}

inline bool in_parallelogram(double px, double py, const PhotometricParams& p) {
  // Solve c + a*u + b*v = (px,py); inside iff |a|<=1 and |b|<=1.
  const double dx = px - p.shadow_center[0], dy = py - p.shadow_center[1];
  const double det = p.shadow_u[0] * p.shadow_v[1] - p.shadow_u[1] * p.shadow_v[0];
  if (std::abs(det) < 1e-9) return false;
  const double a = (dx * p.shadow_v[1] - dy * p.shadow_v[0]) / det;
  const double b = (p.shadow_u[0] * dy - p.shadow_u[1] * dx) / det;
  return std::abs(a) <= 1.0 && std::abs(b) <= 1.0;
}

}  // namespace detail

// n positive points uniformly from mask pixels, n negatives from the band
// outside the mask but inside its box dilated by 25% per side. Pure function
// of (mask, n, seed).
inline PointSample sample_points(const MaskPlane& gt_mask, int n_points, uint64_t seed,
                                 int64_t instance_id = -1) {
  if (n_points < 1 || n_points > 3)
    throw InputError("sample_points: n_points must be in {1,2,3}");
  std::vector<size_t> fg;
  for (size_t i = 0; i < gt_mask.d.size(); ++i)
    if (gt_mask.d[i]) fg.push_back(i);
  if (fg.empty()) throw InputError("sample_points: empty ground-truth mask");

  PointSample out;
  Rng rng(mix_seed(seed, 0x9051));

  bool with_repl = false;
  for (size_t pick : detail::draw(fg.size(), n_points, rng, with_repl)) {
    const size_t p = fg[pick];
    out.positives.push_back(PointPrompt{int(p % gt_mask.w), int(p / gt_mask.w),
                                        Polarity::positive, instance_id});
  }
  if (with_repl)
    out.warnings.push_back("mask smaller than n_points; positives drawn with replacement");

  // Negative band: dilated box minus the mask. Near-object negatives are the
  // ones that disambiguate merged instances.
  const auto box = maskops::enclosing_box(gt_mask);
  const int dx = std::max(1, int(std::lround(box->width() * 0.25)));
  const int dy = std::max(1, int(std::lround(box->height() * 0.25)));
  const int x0 = std::max(0, box->x_min - dx), x1 = std::min(gt_mask.w - 1, box->x_max + dx);
  const int y0 = std::max(0, box->y_min - dy), y1 = std::min(gt_mask.h - 1, box->y_max + dy);
  std::vector<size_t> band;
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x)
      if (!gt_mask.at(y, x)) band.push_back(size_t(y) * gt_mask.w + x);
  if (band.empty()) {
    for (size_t i = 0; i < gt_mask.d.size(); ++i)
      if (!gt_mask.d[i]) band.push_back(i);
    if (!band.empty())
      out.warnings.push_back("dilated-box band empty; negatives drawn from full complement");
  }
  if (band.empty()) {
    out.warnings.push_back("mask covers the whole image; no negatives sampled");
    return out;
  }
  for (size_t pick : detail::draw(band.size(), n_points, rng, with_repl)) {
    const size_t p = band[pick];
    out.negatives.push_back(PointPrompt{int(p % gt_mask.w), int(p / gt_mask.w),
                                        Polarity::negative, instance_id});
  }
  if (with_repl)
    out.warnings.push_back("negative band smaller than n_points; drawn with replacement");
  return out;
}

inline Image hflip(const Image& img) {
  Image out(img.h, img.w);
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x)
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = img.at(y, img.w - 1 - x, c);
  return out;
}

inline MaskPlane hflip(const MaskPlane& m) {
  MaskPlane out(m.h, m.w);
  for (int y = 0; y < m.h; ++y)
    for (int x = 0; x < m.w; ++x) out.at(y, x) = m.at(y, m.w - 1 - x);
  return out;
}

// Weak view: optional horizontal flip. Strong view: photometric jitter plus a
// shadow parallelogram, applied on top of the weak view's geometry so both
// views stay pixel-aligned.
inline ViewPair make_views(const Image& image, uint64_t seed,
                           const AugmentRanges& ranges = AugmentRanges{}) {
  if (image.h < 1 || image.w < 1) throw InputError("make_views: empty image");
  ranges.validate();
  ViewPair vp;
  vp.rng_seed = seed;
  Rng rng(mix_seed(seed, 0xA7C4));
  vp.flip_applied = rng.bernoulli(0.5);
  vp.weak = vp.flip_applied ? hflip(image) : image;

  PhotometricParams& ph = vp.photometric;
  ph.brightness = rng.uniform(ranges.brightness_lo, ranges.brightness_hi);
  ph.contrast = rng.uniform(ranges.contrast_lo, ranges.contrast_hi);
  ph.saturation = rng.uniform(ranges.saturation_lo, ranges.saturation_hi);
  ph.shadow_center = {rng.uniform(0.15, 0.85) * image.w, rng.uniform(0.15, 0.85) * image.h};
  const double scale = 0.5 * std::min(image.h, image.w);
  const double r1 = rng.uniform(0.25, 0.8) * scale;
  const double r2 = rng.uniform(0.25, 0.8) * scale;
  const double t1 = rng.uniform(0.0, 3.141592653589793);
  const double t2 = t1 + rng.uniform(1.0471975511965976, 2.0943951023931953);  // 60..120 deg
  ph.shadow_u = {r1 * std::cos(t1), r1 * std::sin(t1)};
  ph.shadow_v = {r2 * std::cos(t2), r2 * std::sin(t2)};
  ph.shadow_factor = rng.uniform(ranges.shadow_lo, ranges.shadow_hi);

  vp.strong = Image(image.h, image.w);
  // Mean luminance for the contrast pivot, from the weak view.
  double mean_lum = 0.0;
  for (int y = 0; y < image.h; ++y)
    for (int x = 0; x < image.w; ++x)
      mean_lum += 0.299 * vp.weak.at(y, x, 0) + 0.587 * vp.weak.at(y, x, 1) +
                  0.114 * vp.weak.at(y, x, 2);
  mean_lum /= 255.0 * image.h * image.w;

  for (int y = 0; y < image.h; ++y)
    for (int x = 0; x < image.w; ++x) {
      double rgb[3];
      for (int c = 0; c < 3; ++c) rgb[c] = vp.weak.at(y, x, c) / 255.0;
      for (double& v : rgb) v *= ph.brightness;
      for (double& v : rgb) v = (v - mean_lum) * ph.contrast + mean_lum;
      const double lum = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2];
      for (double& v : rgb) v = lum + (v - lum) * ph.saturation;
      if (detail::in_parallelogram(x + 0.5, y + 0.5, ph))
        for (double& v : rgb) v *= ph.shadow_factor;
      for (int c = 0; c < 3; ++c) {
        const double q = std::lround(std::clamp(rgb[c], 0.0, 1.0) * 255.0);
        vp.strong.at(y, x, c) = uint8_t(q);
      }
    }
  return vp;
}

// x -> W-1-x under flip; identity otherwise. Out-of-bounds results are
// structural errors (cannot happen for pure flips; guards future transforms).
inline std::vector<PointPrompt> transfer_prompts(const std::vector<PointPrompt>& pts,
                                                 const ViewPair& view) {
  std::vector<PointPrompt> out = pts;
  if (!view.flip_applied) return out;
  const int w = view.weak.w;
  for (auto& p : out) {
    p.x = w - 1 - p.x;
    if (p.x < 0 || p.x >= w || p.y < 0 || p.y >= view.weak.h)
      throw StructureError("transfer_prompts: point left the image");
  }
  return out;
}

inline std::vector<BoxPrompt> transfer_prompts(const std::vector<BoxPrompt>& boxes,
                                               const ViewPair& view) {
  std::vector<BoxPrompt> out = boxes;
  if (!view.flip_applied) return out;
  const int w = view.weak.w;
  for (auto& b : out) {
    const int nx0 = w - 1 - b.box.x_max;
    const int nx1 = w - 1 - b.box.x_min;
    b.box.x_min = std::min(nx0, nx1);
    b.box.x_max = std::max(nx0, nx1);
    if (b.box.x_min < 0 || b.box.x_max >= w)
      throw StructureError("transfer_prompts: box left the image");
  }
  return out;
}

}  // namespace r3seg::prompts
