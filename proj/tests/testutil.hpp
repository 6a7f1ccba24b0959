#pragma once

#include <cmath>
#include <functional>

#include "r3seg/graph.hpp"
#include "r3seg/rng.hpp"
#include "r3seg/tensor.hpp"

namespace testutil {

using r3seg::Graph;
using r3seg::Tensor;
using r3seg::VarId;

// Builds the scalar under test from a single input var.
using ScalarBuilder = std::function<VarId(Graph&, VarId)>;

inline double eval_scalar(const Tensor& x, const ScalarBuilder& build) {
  Graph g;
  return g.value(build(g, g.constant(x))).item();
}

// Central finite differences vs the tape, elementwise relative error.
inline double max_grad_rel_error(const Tensor& x0, const ScalarBuilder& build,
                                 double step = 1e-6) {
  Tensor sink(x0.rows, x0.cols);
  Graph g;
  VarId x = g.leaf(x0, &sink);
  g.backward(build(g, x));

  double worst = 0.0;
  for (size_t i = 0; i < x0.d.size(); ++i) {
    Tensor plus = x0, minus = x0;
    plus.d[i] += step;
    minus.d[i] -= step;
    const double numeric = (eval_scalar(plus, build) - eval_scalar(minus, build)) / (2 * step);
    const double denom = std::max({1.0, std::abs(numeric), std::abs(sink.d[i])});
    worst = std::max(worst, std::abs(numeric - sink.d[i]) / denom);
  }
  return worst;
}

inline Tensor random_tensor(int rows, int cols, r3seg::Rng& rng, double lo = -1.0,
                            double hi = 1.0) {
  Tensor t(rows, cols);
  for (double& v : t.d) v = rng.uniform(lo, hi);
  return t;
}

}  // namespace testutil
