#include <catch2/catch_amalgamated.hpp>

#include "r3seg/rle.hpp"
#include "r3seg/rng.hpp"

using namespace r3seg;

TEST_CASE("crafted RLE decodes row-major with leading zero count") {
  // 3 zeros, 2 ones, 3 zeros on a 2x4 grid -> set pixels (0,3) and (1,0).
  auto m = rle_decode({3, 2, 3}, 2, 4);
  for (int y = 0; y < 2; ++y)
    for (int x = 0; x < 4; ++x) {
      const bool expect = (y == 0 && x == 3) || (y == 1 && x == 0);
      CHECK(m.at(y, x) == (expect ? 1 : 0));
    }
}

TEST_CASE("all-ones mask starts with a zero-length zero run") {
  MaskPlane m(2, 2);
  for (auto& v : m.d) v = 1;
  auto counts = rle_encode(m);
  REQUIRE(counts.size() == 2);
  CHECK(counts[0] == 0);
  CHECK(counts[1] == 4);
}

TEST_CASE("encode/decode round trip is identity on random masks") {
  Rng rng(101);
  for (int t = 0; t < 300; ++t) {
    const int h = rng.uniform_int(1, 40);
    const int w = rng.uniform_int(1, 40);
    MaskPlane m(h, w);
    const double density = rng.uniform();
    for (auto& v : m.d) v = rng.bernoulli(density) ? 1 : 0;
    CHECK(rle_decode(rle_encode(m), h, w) == m);
  }
}

TEST_CASE("round trip holds up to 1024x1024") {
  Rng rng(77);
  MaskPlane m(1024, 1024);
  for (auto& v : m.d) v = rng.bernoulli(0.35) ? 1 : 0;
  CHECK(rle_decode(rle_encode(m), 1024, 1024) == m);
}

TEST_CASE("corrupt run lengths are rejected") {
  CHECK_THROWS_AS(rle_decode({3, 2}, 2, 4), CorruptionError);    // short
  CHECK_THROWS_AS(rle_decode({3, 2, 9}, 2, 4), CorruptionError);  // long
}
