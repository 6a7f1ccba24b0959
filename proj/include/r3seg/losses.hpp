#pragma once

#include <cmath>
#include <optional>
#include <span>

#include "r3seg/errors.hpp"
#include "r3seg/graph.hpp"
#include "r3seg/grid.hpp"

// Pixel-wise supervision terms and the composite objective
//   alpha * focal + dice + iou + beta * ssal.

namespace r3seg::losses {

struct LossWeights {
  double alpha = 20.0;              // focal weight
  double beta = 0.1;                // queue-alignment weight
  double focal_gamma = 2.0;
  double focal_alpha_balance = 0.25;
  double dice_smooth = 1.0;

  void validate() const {
    if (alpha < 0 || beta < 0) throw InputError("LossWeights: alpha/beta must be >= 0");
    if (focal_gamma < 0) throw InputError("LossWeights: focal_gamma must be >= 0");
    if (dice_smooth <= 0) throw InputError("LossWeights: dice_smooth must be > 0");
  }
};

namespace detail {

inline void check_pred_target(const Tensor& pred, const MaskPlane& target) {
  if (pred.rows != target.h || pred.cols != target.w)
    throw StructureError("loss: pred/target shape mismatch");
}

constexpr double kLogFloor = 1e-12;

}  // namespace detail

// Mean over pixels of -alpha_b * (1 - p_t)^gamma * log(p_t), p_t being the
// predicted probability of the true class. log is clamped at 1e-12 so
// saturated wrong predictions stay finite.
inline VarId focal_loss_node(Graph& g, VarId pred, const MaskPlane& target, double gamma,
                             double alpha_balance) {
  detail::check_pred_target(g.value(pred), target);
  const Tensor& p = g.value(pred);
  const size_t n = p.size();
  double acc = 0.0;
  for (size_t i = 0; i < n; ++i) {
    const double pt = target.d[i] ? p.d[i] : 1.0 - p.d[i];
    acc += -alpha_balance * std::pow(1.0 - pt, gamma) *
           std::log(std::max(pt, detail::kLogFloor));
  }
  Tensor out = Tensor::scalar(acc / double(n));

  // Assembled as a single node: the per-pixel derivative is cheap in closed
  // form and this is the hottest loss in training.
  struct Capture {
    MaskPlane target;
    double gamma, ab;
  };
  auto cap = std::make_shared<Capture>(Capture{target, gamma, alpha_balance});
  VarId id = g.make_unary(std::move(out), pred, [cap](const Tensor& pv, const Tensor& gout,
                                                      Tensor& gin) {
    const double gscale = gout.d[0] / double(pv.size());
    for (size_t i = 0; i < pv.size(); ++i) {
      const bool pos = cap->target.d[i] != 0;
      const double pt = pos ? pv.d[i] : 1.0 - pv.d[i];
      const double one_m = 1.0 - pt;
      double dl_dpt = 0.0;
      if (cap->gamma > 0.0)
        dl_dpt += cap->gamma * std::pow(std::max(one_m, 0.0), cap->gamma - 1.0) *
                  std::log(std::max(pt, detail::kLogFloor));
      if (pt > detail::kLogFloor) dl_dpt -= std::pow(one_m, cap->gamma) / pt;
      dl_dpt *= cap->ab;
      gin.d[i] += gscale * (pos ? dl_dpt : -dl_dpt);
    }
  });
  return id;
}

// 1 - (2*sum(p*t) + s) / (sum(p) + sum(t) + s)
inline VarId dice_loss_node(Graph& g, VarId pred, const MaskPlane& target, double smooth) {
  detail::check_pred_target(g.value(pred), target);
  const Tensor& p = g.value(pred);
  double sp = 0.0, st = 0.0, spt = 0.0;
  for (size_t i = 0; i < p.size(); ++i) {
    sp += p.d[i];
    st += target.d[i];
    spt += p.d[i] * target.d[i];
  }
  const double denom = sp + st + smooth;
  Tensor out = Tensor::scalar(1.0 - (2.0 * spt + smooth) / denom);
  struct Capture {
    MaskPlane target;
    double num, denom;
  };
  auto cap = std::make_shared<Capture>(Capture{target, 2.0 * spt + smooth, denom});
  return g.make_unary(std::move(out), pred,
                      [cap](const Tensor& pv, const Tensor& gout, Tensor& gin) {
                        const double gs = gout.d[0];
                        const double d2 = cap->denom * cap->denom;
                        for (size_t i = 0; i < pv.size(); ++i) {
                          const double t = cap->target.d[i] ? 1.0 : 0.0;
                          gin.d[i] += gs * (cap->num - 2.0 * t * cap->denom) / d2;
                        }
                      });
}

// Soft-Jaccard: 1 - (sum(p*t) + s) / (sum(p) + sum(t) - sum(p*t) + s)
inline VarId iou_loss_node(Graph& g, VarId pred, const MaskPlane& target, double smooth) {
  detail::check_pred_target(g.value(pred), target);
  const Tensor& p = g.value(pred);
  double sp = 0.0, st = 0.0, spt = 0.0;
  for (size_t i = 0; i < p.size(); ++i) {
    sp += p.d[i];
    st += target.d[i];
    spt += p.d[i] * target.d[i];
  }
  const double inter = spt + smooth;
  const double uni = sp + st - spt + smooth;
  Tensor out = Tensor::scalar(1.0 - inter / uni);
  struct Capture {
    MaskPlane target;
    double inter, uni;
  };
  auto cap = std::make_shared<Capture>(Capture{target, inter, uni});
  return g.make_unary(std::move(out), pred,
                      [cap](const Tensor& pv, const Tensor& gout, Tensor& gin) {
                        const double gs = gout.d[0];
                        const double u2 = cap->uni * cap->uni;
                        for (size_t i = 0; i < pv.size(); ++i) {
                          const double t = cap->target.d[i] ? 1.0 : 0.0;
                          // d inter/dp = t, d uni/dp = 1 - t
                          gin.d[i] += gs * (cap->inter * (1.0 - t) - t * cap->uni) / u2;
                        }
                      });
}

// Scalar conveniences for callers that only need values.
inline double focal_loss(const Tensor& pred, const MaskPlane& target, double gamma = 2.0,
                         double alpha_balance = 0.25) {
  Graph g;
  return g.value(focal_loss_node(g, g.constant(pred), target, gamma, alpha_balance)).item();
}

inline double dice_loss(const Tensor& pred, const MaskPlane& target, double smooth = 1.0) {
  Graph g;
  return g.value(dice_loss_node(g, g.constant(pred), target, smooth)).item();
}

inline double iou_loss(const Tensor& pred, const MaskPlane& target, double smooth = 1.0) {
  Graph g;
  return g.value(iou_loss_node(g, g.constant(pred), target, smooth)).item();
}

struct InstanceTerms {
  double focal = 0.0;
  double dice = 0.0;
  double iou = 0.0;
};

// Instance terms are averaged first, then combined. Empty instance list means
// the caller must skip the training step.
inline std::optional<double> total_loss(std::span<const InstanceTerms> terms, double ssal,
                                        const LossWeights& w) {
  w.validate();
  if (terms.empty()) return std::nullopt;
  double f = 0.0, d = 0.0, i = 0.0;
  for (const auto& t : terms) {
    f += t.focal;
    d += t.dice;
    i += t.iou;
  }
  const double n = double(terms.size());
  return w.alpha * (f / n) + d / n + i / n + w.beta * ssal;
}

}  // namespace r3seg::losses
