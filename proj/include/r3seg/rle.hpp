#pragma once

#include <cstdint>
#include <vector>

#include "r3seg/errors.hpp"
#include "r3seg/grid.hpp"

namespace r3seg {

// Row-major run-length encoding of a binary mask. The first count is the
// number of leading zeros (possibly 0), runs then alternate 0/1. This is the
// common instance-annotation convention, so COCO-style data converts with a
// thin shim.

inline std::vector<uint32_t> rle_encode(const MaskPlane& mask) {
  std::vector<uint32_t> counts;
  uint8_t current = 0;
  uint32_t run = 0;
  for (uint8_t v : mask.d) {
    const uint8_t bit = v ? 1 : 0;
    if (bit == current) {
      ++run;
    } else {
      counts.push_back(run);
      current = bit;
      run = 1;
    }
  }
  counts.push_back(run);
  return counts;
}

inline MaskPlane rle_decode(const std::vector<uint32_t>& counts, int h, int w) {
  if (h < 1 || w < 1) throw StructureError("rle_decode: empty target shape");
  MaskPlane mask(h, w);
  size_t pos = 0;
  uint8_t current = 0;
  for (uint32_t run : counts) {
    if (pos + run > mask.d.size())
      throw CorruptionError("rle_decode: run-length total exceeds H*W");
    for (uint32_t i = 0; i < run; ++i) mask.d[pos++] = current;
    current = current ? 0 : 1;
  }
  if (pos != mask.d.size())
    throw CorruptionError("rle_decode: run-length total does not cover H*W");
  return mask;
}

}  // namespace r3seg
