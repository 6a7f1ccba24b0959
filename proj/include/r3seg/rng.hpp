#pragma once

#include <cmath>
#include <cstdint>

namespace r3seg {

// splitmix64, the usual seed mixer. All randomness in the toolkit flows
// through this so that runs are a pure function of their seeds.
inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Combines seed components (run seed, epoch, sample index, ...) into a
// stream seed. Order-sensitive by construction.
inline uint64_t mix_seed(uint64_t a, uint64_t b) {
  uint64_t s = a;
  uint64_t h = splitmix64(s);
  s = h ^ (b + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2));
  return splitmix64(s);
}

inline uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c) {
  return mix_seed(mix_seed(a, b), c);
}

inline uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c, uint64_t d) {
  return mix_seed(mix_seed(a, b, c), d);
}

class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {
    // Warm up so that small seeds do not produce correlated first draws.
    splitmix64(state_);
  }

  uint64_t next_u64() { return splitmix64(state_); }

  // Uniform in [0, 1) with 53 bits of mantissa.
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Inclusive on both ends. Unbiased via rejection.
  int uniform_int(int lo, int hi) {
    const uint64_t span = uint64_t(hi - lo) + 1;
    const uint64_t limit = UINT64_MAX - UINT64_MAX % span;
    uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return lo + int(x % span);
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Box-Muller; caches the second deviate.
  double normal() {
    if (has_cached_) {
      has_cached_ = false;
      return cached_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double t = 6.283185307179586476925286766559 * u2;
    cached_ = r * std::sin(t);
    has_cached_ = true;
    return r * std::cos(t);
  }

 private:
  uint64_t state_;
  bool has_cached_ = false;
  double cached_ = 0.0;
};

}  // namespace r3seg
