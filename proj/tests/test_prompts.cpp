#include <catch2/catch_amalgamated.hpp>

#include "r3seg/prompts.hpp"
#include "r3seg/rng.hpp"

using namespace r3seg;
using namespace r3seg::prompts;

namespace {

MaskPlane disc_mask(int h, int w, int cy, int cx, int r) {
  MaskPlane m(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if ((y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r) m.at(y, x) = 1;
  return m;
}

Image gradient_image(int h, int w) {
  Image img(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      img.at(y, x, 0) = uint8_t((x * 255) / std::max(1, w - 1));
      img.at(y, x, 1) = uint8_t((y * 255) / std::max(1, h - 1));
      img.at(y, x, 2) = uint8_t(((x + y) * 255) / std::max(1, h + w - 2));
    }
  return img;
}

}  // namespace

TEST_CASE("single-pixel mask yields that pixel as the positive point") {
  MaskPlane m(8, 8);
  m.at(3, 5) = 1;
  auto s = sample_points(m, 1, 42);
  REQUIRE(s.positives.size() == 1);
  CHECK(s.positives[0].x == 5);
  CHECK(s.positives[0].y == 3);
  CHECK(s.positives[0].polarity == Polarity::positive);
  // Too few pixels for 3 distinct choices: replacement plus a warning.
  auto s3 = sample_points(m, 3, 42);
  CHECK(s3.positives.size() == 3);
  CHECK_FALSE(s3.warnings.empty());
}

TEST_CASE("sampling is deterministic in the seed") {
  auto m = disc_mask(32, 32, 16, 16, 6);
  auto a = sample_points(m, 3, 1234);
  auto b = sample_points(m, 3, 1234);
  CHECK(a.positives == b.positives);
  CHECK(a.negatives == b.negatives);
  auto c = sample_points(m, 3, 1235);
  CHECK((a.positives != c.positives || a.negatives != c.negatives));
}

TEST_CASE("positives lie inside the mask, negatives outside, across random masks") {
  Rng rng(9);
  for (int t = 0; t < 100; ++t) {
    auto m = disc_mask(48, 48, rng.uniform_int(8, 40), rng.uniform_int(8, 40),
                       rng.uniform_int(2, 7));
    const int n = rng.uniform_int(1, 3);
    auto s = sample_points(m, n, rng.next_u64());
    REQUIRE(s.positives.size() == size_t(n));
    REQUIRE(s.negatives.size() == size_t(n));
    for (const auto& p : s.positives) CHECK(m.at(p.y, p.x) == 1);
    for (const auto& p : s.negatives) CHECK(m.at(p.y, p.x) == 0);
  }
}

TEST_CASE("negatives come from the dilated-box band when it is nonempty") {
  auto m = disc_mask(64, 64, 32, 32, 8);
  const auto box = maskops::enclosing_box(m);
  auto s = sample_points(m, 3, 7);
  for (const auto& p : s.negatives) {
    CHECK(p.x >= box->x_min - 5);
    CHECK(p.x <= box->x_max + 5);
    CHECK(p.y >= box->y_min - 5);
    CHECK(p.y <= box->y_max + 5);
  }
}

TEST_CASE("sample_points rejects empty masks and bad counts") {
  MaskPlane empty(8, 8);
  CHECK_THROWS_AS(sample_points(empty, 1, 0), InputError);
  auto m = disc_mask(16, 16, 8, 8, 3);
  CHECK_THROWS_AS(sample_points(m, 0, 0), InputError);
  CHECK_THROWS_AS(sample_points(m, 4, 0), InputError);
}

TEST_CASE("views share geometry; strong differs only photometrically") {
  auto img = gradient_image(32, 32);
  Rng seeds(10);
  for (int t = 0; t < 10; ++t) {
    auto vp = make_views(img, seeds.next_u64());
    CHECK(vp.weak.h == vp.strong.h);
    CHECK(vp.weak.w == vp.strong.w);
    // Same geometry: the weak view is exactly the (maybe flipped) input.
    CHECK(vp.weak == (vp.flip_applied ? hflip(img) : img));
  }
}

TEST_CASE("identity photometric ranges reproduce the weak view exactly") {
  AugmentRanges identity;
  identity.brightness_lo = identity.brightness_hi = 1.0;
  identity.contrast_lo = identity.contrast_hi = 1.0;
  identity.saturation_lo = identity.saturation_hi = 1.0;
  identity.shadow_lo = identity.shadow_hi = 1.0;
  auto img = gradient_image(24, 24);
  // Find a seed whose flip lands false: then weak == strong == input.
  for (uint64_t seed = 0; seed < 64; ++seed) {
    auto vp = make_views(img, seed, identity);
    CHECK(vp.strong == vp.weak);
    if (!vp.flip_applied) {
      CHECK(vp.weak == img);
      return;
    }
  }
  FAIL("no unflipped seed found in 64 draws");
}

TEST_CASE("make_views is deterministic in the seed") {
  auto img = gradient_image(32, 32);
  auto a = make_views(img, 77);
  auto b = make_views(img, 77);
  CHECK(a.flip_applied == b.flip_applied);
  CHECK(a.strong == b.strong);
  CHECK(a.weak == b.weak);
}

TEST_CASE("prompt transfer: identity without flip, mirror with flip") {
  auto img = gradient_image(16, 64);
  ViewPair no_flip = make_views(img, 3);
  ViewPair flipped = no_flip;
  no_flip.flip_applied = false;
  flipped.flip_applied = true;

  std::vector<PointPrompt> pts = {{0, 4, Polarity::positive, 1},
                                  {10, 7, Polarity::negative, 1}};
  CHECK(transfer_prompts(pts, no_flip) == pts);
  auto moved = transfer_prompts(pts, flipped);
  CHECK(moved[0].x == 63);
  CHECK(moved[1].x == 53);
  CHECK(moved[0].y == 4);

  // Round trip restores the original exactly.
  CHECK(transfer_prompts(moved, flipped) == pts);

  std::vector<BoxPrompt> boxes = {{maskops::BoundingBox{3, 2, 7, 9}, 1}};
  auto mb = transfer_prompts(boxes, flipped);
  CHECK(mb[0].box.x_min == 56);
  CHECK(mb[0].box.x_max == 60);
  CHECK(mb[0].box.y_min == 2);
  CHECK(mb[0].box.y_max == 9);
  CHECK(transfer_prompts(mb, flipped) == boxes);
}

TEST_CASE("flipped prompts land on the mirrored object pixel") {
  auto m = disc_mask(32, 32, 10, 20, 4);
  Image img(32, 32);
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x)
      img.at(y, x, 0) = m.at(y, x) ? 200 : 20;
  for (uint64_t seed = 0; seed < 64; ++seed) {
    auto vp = make_views(img, seed);
    if (!vp.flip_applied) continue;
    auto s = sample_points(m, 2, 99);
    auto moved = transfer_prompts(s.positives, vp);
    auto flipped_mask = hflip(m);
    for (const auto& p : moved) CHECK(flipped_mask.at(p.y, p.x) == 1);
    return;
  }
  FAIL("no flipped seed found in 64 draws");
}
