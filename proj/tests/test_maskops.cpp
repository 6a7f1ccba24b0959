#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "r3seg/maskops.hpp"
#include "r3seg/rng.hpp"

using namespace r3seg;
using namespace r3seg::maskops;

namespace {

// Independent oracle: binary entropy evaluated in extended precision.
long double entropy_oracle(long double p) {
  if (p <= 0.0L || p >= 1.0L) return 0.0L;
  const long double ln2 = 0.69314718055994530941723212145818L;
  return -(p * std::log(p) + (1.0L - p) * std::log(1.0L - p)) / ln2;
}

ProbMaskStack uniform_stack(int k, int h, int w, double p) {
  ProbMaskStack s(k, h, w);
  std::fill(s.data.begin(), s.data.end(), p);
  for (int i = 0; i < k; ++i) s.instance_ids[i] = i + 1;
  return s;
}

ProbMaskStack random_stack(int k, int h, int w, Rng& rng) {
  ProbMaskStack s(k, h, w);
  for (double& v : s.data) v = rng.uniform();
  for (int i = 0; i < k; ++i) s.instance_ids[i] = i + 1;
  return s;
}

// The A/B pair on a 2x2 grid: A={(0,0),(0,1)}, B={(0,1),(1,1)} as (row,col).
BinaryMaskSet ab_masks() {
  BinaryMaskSet m(2, 2, 2);
  m.instance_ids = {1, 2};
  m.at(0, 0, 0) = 1;
  m.at(0, 0, 1) = 1;
  m.at(1, 0, 1) = 1;
  m.at(1, 1, 1) = 1;
  return m;
}

}  // namespace

TEST_CASE("entropy endpoint and midpoint values") {
  auto s = uniform_stack(1, 1, 3, 0.5);
  s.at(0, 0, 1) = 0.0;
  s.at(0, 0, 2) = 1.0;
  auto e = entropy_map(s);
  CHECK(e.at(0, 0, 0) == 1.0);
  CHECK(e.at(0, 0, 1) == 0.0);
  CHECK(e.at(0, 0, 2) == 0.0);
}

TEST_CASE("entropy of 0.95 matches the extended-precision oracle") {
  const double expected = double(entropy_oracle(0.95L));
  CHECK(std::abs(expected - 0.28640) < 1e-5);  // frozen from the oracle
  auto e = entropy_map(uniform_stack(1, 1, 1, 0.95));
  CHECK(std::abs(e.at(0, 0, 0) - expected) < 1e-12);
}

TEST_CASE("entropy symmetry H(p) == H(1-p)") {
  Rng rng(7);
  for (int t = 0; t < 200; ++t) {
    const double p = rng.uniform();
    auto a = entropy_map(uniform_stack(1, 1, 1, p));
    auto b = entropy_map(uniform_stack(1, 1, 1, 1.0 - p));
    CHECK(std::abs(a.at(0, 0, 0) - b.at(0, 0, 0)) < 1e-12);
  }
}

TEST_CASE("entropy rejects out-of-range probabilities") {
  auto s = uniform_stack(1, 2, 2, 0.5);
  s.at(0, 0, 0) = 1.5;
  CHECK_THROWS_AS(entropy_map(s), InputError);
  s.at(0, 0, 0) = std::nan("");
  CHECK_THROWS_AS(entropy_map(s), InputError);
}

TEST_CASE("confidence gate keeps p=0.95 and rejects p=0.8 at eps=0.5") {
  auto s = uniform_stack(1, 1, 2, 0.95);
  s.at(0, 0, 1) = 0.8;
  auto e = entropy_map(s);
  // Oracle arithmetic for the gate products.
  CHECK(0.95 * (1.0 - double(entropy_oracle(0.95L))) > 0.5);
  CHECK(0.8 * (1.0 - double(entropy_oracle(0.8L))) < 0.5);
  auto c = confidence_filter(s, e, 0.5);
  CHECK(c.at(0, 0, 0) == 1);
  CHECK(c.at(0, 0, 1) == 0);
}

TEST_CASE("confidence gate: fully confident pixel passes, threshold is strict") {
  auto s = uniform_stack(1, 1, 1, 1.0);
  auto e = entropy_map(s);
  CHECK(confidence_filter(s, e, 0.5).at(0, 0, 0) == 1);

  // p*(1-H) == eps exactly must be rejected: feed the gate its own product.
  auto s2 = uniform_stack(1, 1, 1, 0.95);
  auto e2 = entropy_map(s2);
  const double product = 0.95 * (1.0 - e2.at(0, 0, 0));
  CHECK(confidence_filter(s2, e2, product).at(0, 0, 0) == 0);
  CHECK(confidence_filter(s2, e2, std::nextafter(product, 0.0)).at(0, 0, 0) == 1);
}

TEST_CASE("gate is monotone in epsilon") {
  Rng rng(11);
  auto s = random_stack(3, 8, 8, rng);
  auto e = entropy_map(s);
  auto loose = confidence_filter(s, e, 0.3);
  auto tight = confidence_filter(s, e, 0.6);
  for (size_t i = 0; i < loose.data.size(); ++i)
    if (tight.data[i]) CHECK(loose.data[i]);
}

TEST_CASE("confidence gate shape mismatch is structural") {
  auto s = uniform_stack(1, 2, 2, 0.9);
  auto e = entropy_map(uniform_stack(1, 2, 3, 0.9));
  CHECK_THROWS_AS(confidence_filter(s, e, 0.5), StructureError);
}

TEST_CASE("overlap map of the A/B pair flags only the shared pixel") {
  auto o = overlap_map(ab_masks());
  CHECK(o.at(0, 0) == 0);
  CHECK(o.at(0, 1) == 1);
  CHECK(o.at(1, 0) == 0);
  CHECK(o.at(1, 1) == 0);
}

TEST_CASE("single instance never overlaps; identical masks overlap everywhere") {
  BinaryMaskSet one(1, 4, 4);
  for (auto& v : one.data) v = 1;
  auto o1 = overlap_map(one);
  for (auto v : o1.data) CHECK(v == 0);

  BinaryMaskSet two(2, 4, 4);
  for (auto& v : two.data) v = 1;
  auto o2 = overlap_map(two);
  for (auto v : o2.data) CHECK(v == 1);
}

TEST_CASE("refine removes contested pixels and keeps the rest") {
  auto m = ab_masks();
  auto r = refine(m, overlap_map(m));
  CHECK(r.masks.at(0, 0, 0) == 1);
  CHECK(r.masks.at(0, 0, 1) == 0);
  CHECK(r.masks.at(1, 0, 1) == 0);
  CHECK(r.masks.at(1, 1, 1) == 1);
  REQUIRE(r.boxes[0].has_value());
  CHECK(*r.boxes[0] == BoundingBox{0, 0, 0, 0});
  REQUIRE(r.boxes[1].has_value());
  CHECK(*r.boxes[1] == BoundingBox{1, 1, 1, 1});
}

TEST_CASE("refine is identity on disjoint masks and empties identical masks") {
  BinaryMaskSet disjoint(2, 2, 2);
  disjoint.at(0, 0, 0) = 1;
  disjoint.at(1, 1, 1) = 1;
  auto r = refine(disjoint, overlap_map(disjoint));
  CHECK(r.masks.data == disjoint.data);

  BinaryMaskSet same(2, 3, 3);
  for (auto& v : same.data) v = 1;
  auto r2 = refine(same, overlap_map(same));
  for (auto v : r2.masks.data) CHECK(v == 0);
  CHECK_FALSE(r2.boxes[0].has_value());
  CHECK_FALSE(r2.boxes[1].has_value());
}

TEST_CASE("refine is idempotent and nullifies leakage on random stacks") {
  Rng rng(23);
  for (int t = 0; t < 50; ++t) {
    auto s = random_stack(rng.uniform_int(1, 6), 16, 16, rng);
    auto bin = confidence_filter(s, entropy_map(s), 0.5);
    auto r = refine(bin, overlap_map(bin));
    CHECK(leakage_rate(r.masks) == 0.0);
    auto again = refine(r.masks, overlap_map(r.masks));
    CHECK(again.masks.data == r.masks.data);
    for (int k = 0; k < r.masks.k; ++k) CHECK(again.boxes[k] == r.boxes[k]);
  }
}

TEST_CASE("enclosing box basics") {
  MaskPlane m(8, 10);
  m.at(2, 3) = 1;
  m.at(5, 7) = 1;
  auto b = enclosing_box(m);
  REQUIRE(b.has_value());
  CHECK(*b == BoundingBox{3, 2, 7, 5});

  MaskPlane single(8, 10);
  single.at(4, 7) = 1;
  CHECK(*enclosing_box(single) == BoundingBox{7, 4, 7, 4});

  CHECK_FALSE(enclosing_box(MaskPlane(8, 10)).has_value());
}

TEST_CASE("boxes are tight: shrinking any side drops a mask pixel") {
  Rng rng(5);
  for (int t = 0; t < 30; ++t) {
    MaskPlane m(12, 12);
    for (int i = 0; i < 10; ++i) m.at(rng.uniform_int(0, 11), rng.uniform_int(0, 11)) = 1;
    auto b = enclosing_box(m);
    REQUIRE(b.has_value());
    bool on_left = false, on_right = false, on_top = false, on_bottom = false;
    for (int y = 0; y < m.h; ++y)
      for (int x = 0; x < m.w; ++x)
        if (m.at(y, x)) {
          on_left |= x == b->x_min;
          on_right |= x == b->x_max;
          on_top |= y == b->y_min;
          on_bottom |= y == b->y_max;
        }
    CHECK(on_left);
    CHECK(on_right);
    CHECK(on_top);
    CHECK(on_bottom);
  }
}

TEST_CASE("leakage rate of the A/B pair is 1/3; disjoint masks leak nothing") {
  CHECK(std::abs(leakage_rate(ab_masks()) - 1.0 / 3.0) < 1e-12);

  BinaryMaskSet disjoint(2, 2, 2);
  disjoint.at(0, 0, 0) = 1;
  disjoint.at(1, 1, 1) = 1;
  CHECK(leakage_rate(disjoint) == 0.0);

  // Empty prediction set: denominator 0 is defined as rate 0.
  CHECK(leakage_rate(BinaryMaskSet(2, 4, 4)) == 0.0);
}
