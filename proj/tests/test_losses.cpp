#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "r3seg/losses.hpp"
#include "r3seg/rng.hpp"
#include "testutil.hpp"

using namespace r3seg;
using namespace r3seg::losses;
using testutil::max_grad_rel_error;

namespace {

MaskPlane random_mask(int h, int w, Rng& rng, double density = 0.5) {
  MaskPlane m(h, w);
  for (auto& v : m.d) v = rng.bernoulli(density) ? 1 : 0;
  return m;
}

Tensor mask_as_prob(const MaskPlane& m) {
  Tensor t(m.h, m.w);
  for (size_t i = 0; i < m.d.size(); ++i) t.d[i] = m.d[i] ? 1.0 : 0.0;
  return t;
}

}  // namespace

TEST_CASE("focal loss: saturated-correct prediction drives loss to zero") {
  Rng rng(1);
  auto target = random_mask(6, 6, rng);
  CHECK(focal_loss(mask_as_prob(target), target) < 1e-12);
}

TEST_CASE("focal loss reduces to BCE at gamma=0: uniform 0.5 gives ln 2") {
  MaskPlane target(4, 4);
  target.at(0, 0) = 1;
  Tensor pred(4, 4, 0.5);
  const double l = focal_loss(pred, target, /*gamma=*/0.0, /*alpha_balance=*/1.0);
  CHECK(std::abs(l - std::log(2.0)) < 1e-12);
}

TEST_CASE("focal loss stays finite on fully wrong saturated predictions") {
  MaskPlane target(2, 2);
  target.at(0, 0) = target.at(0, 1) = 1;
  Tensor pred(2, 2);
  pred.at(0, 0) = pred.at(0, 1) = 0.0;  // wrong with certainty
  pred.at(1, 0) = pred.at(1, 1) = 1.0;  // wrong with certainty
  const double l = focal_loss(pred, target);
  CHECK(std::isfinite(l));
  CHECK(l > 0.0);
}

TEST_CASE("dice loss hand arithmetic") {
  Rng rng(2);
  auto target = random_mask(5, 5, rng);
  CHECK(dice_loss(mask_as_prob(target), target) == 0.0);

  // All-zero prediction and target: smoothing yields exactly 0.
  CHECK(dice_loss(Tensor(3, 3), MaskPlane(3, 3)) == 0.0);

  // pred all ones, target half ones on 2x2: 1 - (2*2+1)/(4+2+1) = 1 - 5/7.
  MaskPlane half(2, 2);
  half.at(0, 0) = half.at(0, 1) = 1;
  CHECK(std::abs(dice_loss(Tensor(2, 2, 1.0), half) - (1.0 - 5.0 / 7.0)) < 1e-12);
}

TEST_CASE("iou loss hand arithmetic") {
  Rng rng(3);
  auto target = random_mask(5, 5, rng);
  CHECK(iou_loss(mask_as_prob(target), target) == 0.0);

  // Disjoint 4-pixel masks on a large grid: 1 - 1/9.
  MaskPlane t(8, 8);
  Tensor p(8, 8);
  for (int i = 0; i < 4; ++i) {
    t.at(0, i) = 1;
    p.at(7, i) = 1.0;
  }
  CHECK(std::abs(iou_loss(p, t) - (1.0 - 1.0 / 9.0)) < 1e-12);

  // Empty prediction: 1 - s/(sum(t)+s).
  MaskPlane t2(4, 4);
  t2.at(0, 0) = t2.at(1, 1) = 1;
  CHECK(std::abs(iou_loss(Tensor(4, 4), t2) - (1.0 - 1.0 / 3.0)) < 1e-12);
}

TEST_CASE("all mask losses are nonnegative and finite on random inputs") {
  Rng rng(4);
  for (int t = 0; t < 50; ++t) {
    auto target = random_mask(8, 8, rng, rng.uniform());
    Tensor pred(8, 8);
    for (auto& v : pred.d) v = rng.uniform();
    for (double l : {focal_loss(pred, target), dice_loss(pred, target), iou_loss(pred, target)}) {
      CHECK(std::isfinite(l));
      CHECK(l >= 0.0);
    }
  }
}

TEST_CASE("mask loss gradients match central finite differences") {
  Rng rng(5);
  for (int trial = 0; trial < 5; ++trial) {
    auto target = random_mask(8, 8, rng);
    Tensor pred(8, 8);
    for (auto& v : pred.d) v = rng.uniform(0.05, 0.95);

    auto focal_build = [&](Graph& g, VarId x) {
      return losses::focal_loss_node(g, x, target, 2.0, 0.25);
    };
    auto dice_build = [&](Graph& g, VarId x) {
      return losses::dice_loss_node(g, x, target, 1.0);
    };
    auto iou_build = [&](Graph& g, VarId x) { return losses::iou_loss_node(g, x, target, 1.0); };

    CHECK(max_grad_rel_error(pred, focal_build, 1e-5) < 1e-4);
    CHECK(max_grad_rel_error(pred, dice_build, 1e-5) < 1e-4);
    CHECK(max_grad_rel_error(pred, iou_build, 1e-5) < 1e-4);
  }
}

TEST_CASE("perfect binary prediction drives all three terms below 1e-6") {
  Rng rng(6);
  auto target = random_mask(10, 10, rng);
  auto pred = mask_as_prob(target);
  CHECK(focal_loss(pred, target) < 1e-6);
  CHECK(dice_loss(pred, target) < 1e-6);
  CHECK(iou_loss(pred, target) < 1e-6);
}

TEST_CASE("total loss combines exactly as alpha*focal + dice + iou + beta*ssal") {
  LossWeights w;  // defaults alpha=20, beta=0.1
  std::vector<InstanceTerms> terms = {{0.1, 0.2, 0.3}};
  auto total = total_loss(terms, 0.4, w);
  REQUIRE(total.has_value());
  CHECK(std::abs(*total - 2.54) < 1e-12);

  // Random inputs vs an independently coded combination.
  Rng rng(7);
  for (int t = 0; t < 100; ++t) {
    std::vector<InstanceTerms> ts(rng.uniform_int(1, 5));
    for (auto& it : ts) {
      it.focal = rng.uniform();
      it.dice = rng.uniform();
      it.iou = rng.uniform();
    }
    const double ssal = rng.uniform();
    double f = 0, d = 0, i = 0;
    for (auto& it : ts) {
      f += it.focal / ts.size();
      d += it.dice / ts.size();
      i += it.iou / ts.size();
    }
    const double expected = w.alpha * f + d + i + w.beta * ssal;
    CHECK(std::abs(*total_loss(ts, ssal, w) - expected) < 1e-12);
  }
}

TEST_CASE("total loss with beta=0 ignores the ssal term; empty terms signal a skip") {
  LossWeights w;
  w.beta = 0.0;
  std::vector<InstanceTerms> terms = {{0.5, 0.5, 0.5}};
  CHECK(*total_loss(terms, 123.0, w) == *total_loss(terms, -7.0, w));
  CHECK_FALSE(total_loss({}, 0.0, w).has_value());
}

TEST_CASE("loss weight validation") {
  LossWeights w;
  w.alpha = -1;
  CHECK_THROWS_AS(w.validate(), InputError);
  w = LossWeights{};
  w.dice_smooth = 0.0;
  CHECK_THROWS_AS(w.validate(), InputError);
}
