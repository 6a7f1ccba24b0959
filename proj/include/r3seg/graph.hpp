#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "r3seg/errors.hpp"
#include "r3seg/tensor.hpp"

namespace r3seg {

// Reverse-mode tape over Tensor ops. One Graph per forward pass; nodes are
// created in topological order, backward() walks them in reverse. Inference
// uses the same ops with needs_grad=false leaves, so the teacher and student
// paths share one forward implementation.
class Graph {
 public:
  using VarId = int;

  VarId constant(Tensor v) { return push(std::move(v), false, {}); }

  // Trainable leaf; gradients accumulate into *grad_sink (same shape as v).
  VarId leaf(const Tensor& v, Tensor* grad_sink) {
    VarId id = push(v, grad_sink != nullptr, {});
    if (grad_sink) {
      if (!grad_sink->same_shape(v)) throw StructureError("leaf: grad sink shape mismatch");
      nodes_[id].back = [this, id, grad_sink] { axpy(1.0, nodes_[id].grad, *grad_sink); };
    }
    return id;
  }

  const Tensor& value(VarId id) const { return nodes_[id].val; }
  const Tensor& grad(VarId id) const { return nodes_[id].grad; }

  VarId matmul(VarId a, VarId b) {
    Tensor out = r3seg::matmul(val(a), val(b));
    VarId id = push(std::move(out), needs(a) || needs(b), {a, b});
    nodes_[id].back = [this, id, a, b] {
      const Tensor& g = nodes_[id].grad;
      if (needs(a)) accumulate(a, r3seg::matmul_nt(g, val(b)));
      if (needs(b)) accumulate(b, r3seg::matmul_tn(val(a), g));
    };
    return id;
  }

  // a * b^T
  VarId matmul_nt(VarId a, VarId b) {
    Tensor out = r3seg::matmul_nt(val(a), val(b));
    VarId id = push(std::move(out), needs(a) || needs(b), {a, b});
    nodes_[id].back = [this, id, a, b] {
      const Tensor& g = nodes_[id].grad;
      if (needs(a)) accumulate(a, r3seg::matmul(g, val(b)));
      if (needs(b)) accumulate(b, r3seg::matmul_tn(g, val(a)));
    };
    return id;
  }

  VarId add(VarId a, VarId b) {
    if (!val(a).same_shape(val(b))) throw StructureError("add: shape mismatch");
    Tensor out = val(a);
    axpy(1.0, val(b), out);
    VarId id = push(std::move(out), needs(a) || needs(b), {a, b});
    nodes_[id].back = [this, id, a, b] {
      if (needs(a)) accumulate(a, nodes_[id].grad);
      if (needs(b)) accumulate(b, nodes_[id].grad);
    };
    return id;
  }

  VarId sub(VarId a, VarId b) { return add(a, scale(b, -1.0)); }

  VarId mul(VarId a, VarId b) {
    if (!val(a).same_shape(val(b))) throw StructureError("mul: shape mismatch");
    Tensor out = val(a);
    for (size_t i = 0; i < out.d.size(); ++i) out.d[i] *= val(b).d[i];
    VarId id = push(std::move(out), needs(a) || needs(b), {a, b});
    nodes_[id].back = [this, id, a, b] {
      const Tensor& g = nodes_[id].grad;
      if (needs(a)) {
        Tensor ga = g;
        for (size_t i = 0; i < ga.d.size(); ++i) ga.d[i] *= val(b).d[i];
        accumulate(a, ga);
      }
      if (needs(b)) {
        Tensor gb = g;
        for (size_t i = 0; i < gb.d.size(); ++i) gb.d[i] *= val(a).d[i];
        accumulate(b, gb);
      }
    };
    return id;
  }

  VarId scale(VarId a, double s) {
    Tensor out = val(a);
    for (double& v : out.d) v *= s;
    VarId id = push(std::move(out), needs(a), {a});
    nodes_[id].back = [this, id, a, s] {
      if (!needs(a)) return;
      Tensor g = nodes_[id].grad;
      for (double& v : g.d) v *= s;
      accumulate(a, g);
    };
    return id;
  }

  VarId add_scalar(VarId a, double c) {
    Tensor out = val(a);
    for (double& v : out.d) v += c;
    VarId id = push(std::move(out), needs(a), {a});
    nodes_[id].back = [this, id, a] {
      if (needs(a)) accumulate(a, nodes_[id].grad);
    };
    return id;
  }

  // c - a
  VarId rsub(double c, VarId a) { return add_scalar(scale(a, -1.0), c); }

  // Broadcast-add a 1xC row to every row of a.
  VarId add_row(VarId a, VarId row) {
    if (val(row).rows != 1 || val(row).cols != val(a).cols)
      throw StructureError("add_row: row shape mismatch");
    Tensor out = val(a);
    for (int i = 0; i < out.rows; ++i)
      for (int j = 0; j < out.cols; ++j) out.at(i, j) += val(row).at(0, j);
    VarId id = push(std::move(out), needs(a) || needs(row), {a, row});
    nodes_[id].back = [this, id, a, row] {
      const Tensor& g = nodes_[id].grad;
      if (needs(a)) accumulate(a, g);
      if (needs(row)) {
        Tensor gr(1, g.cols);
        for (int i = 0; i < g.rows; ++i)
          for (int j = 0; j < g.cols; ++j) gr.at(0, j) += g.at(i, j);
        accumulate(row, gr);
      }
    };
    return id;
  }

  VarId repeat_row(VarId row, int n) {
    if (val(row).rows != 1) throw StructureError("repeat_row: expects a 1xC row");
    Tensor out(n, val(row).cols);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < out.cols; ++j) out.at(i, j) = val(row).at(0, j);
    VarId id = push(std::move(out), needs(row), {row});
    nodes_[id].back = [this, id, row] {
      if (!needs(row)) return;
      const Tensor& g = nodes_[id].grad;
      Tensor gr(1, g.cols);
      for (int i = 0; i < g.rows; ++i)
        for (int j = 0; j < g.cols; ++j) gr.at(0, j) += g.at(i, j);
      accumulate(row, gr);
    };
    return id;
  }

  VarId concat_cols(VarId a, VarId b) {
    if (val(a).rows != val(b).rows) throw StructureError("concat_cols: row count mismatch");
    const int ca = val(a).cols, cb = val(b).cols;
    Tensor out(val(a).rows, ca + cb);
    for (int i = 0; i < out.rows; ++i) {
      for (int j = 0; j < ca; ++j) out.at(i, j) = val(a).at(i, j);
      for (int j = 0; j < cb; ++j) out.at(i, ca + j) = val(b).at(i, j);
    }
    VarId id = push(std::move(out), needs(a) || needs(b), {a, b});
    nodes_[id].back = [this, id, a, b, ca, cb] {
      const Tensor& g = nodes_[id].grad;
      if (needs(a)) {
        Tensor ga(g.rows, ca);
        for (int i = 0; i < g.rows; ++i)
          for (int j = 0; j < ca; ++j) ga.at(i, j) = g.at(i, j);
        accumulate(a, ga);
      }
      if (needs(b)) {
        Tensor gb(g.rows, cb);
        for (int i = 0; i < g.rows; ++i)
          for (int j = 0; j < cb; ++j) gb.at(i, j) = g.at(i, ca + j);
        accumulate(b, gb);
      }
    };
    return id;
  }

  // Row-major reinterpretation; element order is unchanged.
  VarId reshape(VarId a, int rows, int cols) {
    if (size_t(rows) * cols != val(a).size()) throw StructureError("reshape: size mismatch");
    Tensor out(rows, cols);
    out.d = val(a).d;
    VarId id = push(std::move(out), needs(a), {a});
    nodes_[id].back = [this, id, a] {
      if (!needs(a)) return;
      Tensor ga(val(a).rows, val(a).cols);
      ga.d = nodes_[id].grad.d;
      accumulate(a, ga);
    };
    return id;
  }

  // Stacks 1xC rows into an NxC matrix.
  VarId stack_rows(const std::vector<VarId>& rows) {
    if (rows.empty()) throw StructureError("stack_rows: no rows");
    const int c = val(rows[0]).cols;
    Tensor out(int(rows.size()), c);
    bool any = false;
    for (size_t i = 0; i < rows.size(); ++i) {
      if (val(rows[i]).rows != 1 || val(rows[i]).cols != c)
        throw StructureError("stack_rows: inconsistent row shapes");
      for (int j = 0; j < c; ++j) out.at(int(i), j) = val(rows[i]).at(0, j);
      any = any || needs(rows[i]);
    }
    VarId id = push(std::move(out), any, rows);
    nodes_[id].back = [this, id, rows] {
      const Tensor& g = nodes_[id].grad;
      for (size_t i = 0; i < rows.size(); ++i) {
        if (!needs(rows[i])) continue;
        Tensor gr(1, g.cols);
        for (int j = 0; j < g.cols; ++j) gr.at(0, j) = g.at(int(i), j);
        accumulate(rows[i], gr);
      }
    };
    return id;
  }

  VarId gather_rows(VarId a, std::vector<int> idx) {
    Tensor out(int(idx.size()), val(a).cols);
    for (size_t i = 0; i < idx.size(); ++i)
      for (int j = 0; j < out.cols; ++j) out.at(int(i), j) = val(a).at(idx[i], j);
    VarId id = push(std::move(out), needs(a), {a});
    nodes_[id].back = [this, id, a, idx = std::move(idx)] {
      if (!needs(a)) return;
      const Tensor& g = nodes_[id].grad;
      Tensor ga(val(a).rows, val(a).cols);
      for (size_t i = 0; i < idx.size(); ++i)
        for (int j = 0; j < g.cols; ++j) ga.at(idx[i], j) += g.at(int(i), j);
      accumulate(a, ga);
    };
    return id;
  }

  // Row-wise softmax of (a * inv_temp); optionally forces the diagonal out of
  // the distribution (used by the queue affinity).
  VarId row_softmax(VarId a, double inv_temp, bool exclude_diag = false) {
    const Tensor& x = val(a);
    Tensor out(x.rows, x.cols);
    for (int i = 0; i < x.rows; ++i) {
      double mx = -1e300;
      for (int j = 0; j < x.cols; ++j) {
        if (exclude_diag && i == j) continue;
        mx = std::max(mx, x.at(i, j) * inv_temp);
      }
      double z = 0.0;
      for (int j = 0; j < x.cols; ++j) {
        if (exclude_diag && i == j) continue;
        z += std::exp(x.at(i, j) * inv_temp - mx);
      }
      for (int j = 0; j < x.cols; ++j) {
        if (exclude_diag && i == j) {
          out.at(i, j) = 0.0;
          continue;
        }
        out.at(i, j) = std::exp(x.at(i, j) * inv_temp - mx) / z;
      }
    }
    VarId id = push(std::move(out), needs(a), {a});
    nodes_[id].back = [this, id, a, inv_temp, exclude_diag] {
      if (!needs(a)) return;
      const Tensor& p = nodes_[id].val;
      const Tensor& g = nodes_[id].grad;
      Tensor ga(p.rows, p.cols);
      for (int i = 0; i < p.rows; ++i) {
        double gp = 0.0;
        for (int j = 0; j < p.cols; ++j) gp += g.at(i, j) * p.at(i, j);
        for (int j = 0; j < p.cols; ++j) {
          if (exclude_diag && i == j) continue;
          ga.at(i, j) = inv_temp * p.at(i, j) * (g.at(i, j) - gp);
        }
      }
      accumulate(a, ga);
    };
    return id;
  }

  VarId sigmoid(VarId a) {
    Tensor out = val(a);
    for (double& v : out.d) v = 1.0 / (1.0 + std::exp(-v));
    VarId id = push(std::move(out), needs(a), {a});
    nodes_[id].back = [this, id, a] {
      if (!needs(a)) return;
      const Tensor& y = nodes_[id].val;
      Tensor g = nodes_[id].grad;
      for (size_t i = 0; i < g.d.size(); ++i) g.d[i] *= y.d[i] * (1.0 - y.d[i]);
      accumulate(a, g);
    };
    return id;
  }

  VarId gelu(VarId a) {
    Tensor out = val(a);
    for (double& v : out.d) v = gelu_fwd(v);
    VarId id = push(std::move(out), needs(a), {a});
    nodes_[id].back = [this, id, a] {
      if (!needs(a)) return;
      Tensor g = nodes_[id].grad;
      for (size_t i = 0; i < g.d.size(); ++i) g.d[i] *= gelu_bwd(val(a).d[i]);
      accumulate(a, g);
    };
    return id;
  }

  VarId clamp(VarId a, double lo, double hi) {
    Tensor out = val(a);
    for (double& v : out.d) v = v < lo ? lo : (v > hi ? hi : v);
    VarId id = push(std::move(out), needs(a), {a});
    nodes_[id].back = [this, id, a, lo, hi] {
      if (!needs(a)) return;
      Tensor g = nodes_[id].grad;
      for (size_t i = 0; i < g.d.size(); ++i) {
        const double v = val(a).d[i];
        if (v < lo || v > hi) g.d[i] = 0.0;
      }
      accumulate(a, g);
    };
    return id;
  }

  VarId set_diag(VarId a, double v) {
    Tensor out = val(a);
    const int n = std::min(out.rows, out.cols);
    for (int i = 0; i < n; ++i) out.at(i, i) = v;
    VarId id = push(std::move(out), needs(a), {a});
    nodes_[id].back = [this, id, a, n] {
      if (!needs(a)) return;
      Tensor g = nodes_[id].grad;
      for (int i = 0; i < n; ++i) g.at(i, i) = 0.0;
      accumulate(a, g);
    };
    return id;
  }

  VarId sum(VarId a) {
    double s = 0.0;
    for (double v : val(a).d) s += v;
    VarId id = push(Tensor::scalar(s), needs(a), {a});
    nodes_[id].back = [this, id, a] {
      if (!needs(a)) return;
      Tensor g(val(a).rows, val(a).cols, nodes_[id].grad.d[0]);
      accumulate(a, g);
    };
    return id;
  }

  VarId mean(VarId a) { return scale(sum(a), 1.0 / double(val(a).size())); }

  // Row-space LayerNorm with constant gain/bias.
  VarId layernorm_rows(VarId a, const Tensor& gain, const Tensor& bias) {
    const Tensor& x = val(a);
    if (gain.cols != x.cols || bias.cols != x.cols)
      throw StructureError("layernorm_rows: gain/bias width mismatch");
    const double eps = 1e-5;
    Tensor out(x.rows, x.cols);
    std::vector<double> inv_sigma(x.rows), mu(x.rows);
    for (int i = 0; i < x.rows; ++i) {
      double m = 0.0;
      for (int j = 0; j < x.cols; ++j) m += x.at(i, j);
      m /= x.cols;
      double var = 0.0;
      for (int j = 0; j < x.cols; ++j) {
        const double c = x.at(i, j) - m;
        var += c * c;
      }
      var /= x.cols;
      const double is = 1.0 / std::sqrt(var + eps);
      mu[i] = m;
      inv_sigma[i] = is;
      for (int j = 0; j < x.cols; ++j)
        out.at(i, j) = (x.at(i, j) - m) * is * gain.at(0, j) + bias.at(0, j);
    }
    VarId id = push(std::move(out), needs(a), {a});
    nodes_[id].back = [this, id, a, gain, mu = std::move(mu),
                       inv_sigma = std::move(inv_sigma)] {
      if (!needs(a)) return;
      const Tensor& x = val(a);
      const Tensor& g = nodes_[id].grad;
      Tensor ga(x.rows, x.cols);
      const int n = x.cols;
      for (int i = 0; i < x.rows; ++i) {
        // d/dx of (x-mu)/sigma * gain, standard layernorm backward.
        double sum_gy = 0.0, sum_gy_xhat = 0.0;
        for (int j = 0; j < n; ++j) {
          const double xhat = (x.at(i, j) - mu[i]) * inv_sigma[i];
          const double gy = g.at(i, j) * gain.at(0, j);
          sum_gy += gy;
          sum_gy_xhat += gy * xhat;
        }
        for (int j = 0; j < n; ++j) {
          const double xhat = (x.at(i, j) - mu[i]) * inv_sigma[i];
          const double gy = g.at(i, j) * gain.at(0, j);
          ga.at(i, j) = inv_sigma[i] * (gy - sum_gy / n - xhat * sum_gy_xhat / n);
        }
      }
      accumulate(a, ga);
    };
    return id;
  }

  // Weighted mean over rows -> 1xC. Weights are data, not differentiated.
  VarId weighted_row_mean(VarId a, std::vector<double> w) {
    const Tensor& x = val(a);
    if (int(w.size()) != x.rows) throw StructureError("weighted_row_mean: weight count mismatch");
    double total = 0.0;
    for (double v : w) total += v;
    if (total <= 0.0) throw InputError("weighted_row_mean: weights sum to zero");
    Tensor out(1, x.cols);
    for (int i = 0; i < x.rows; ++i) {
      if (w[i] == 0.0) continue;
      for (int j = 0; j < x.cols; ++j) out.at(0, j) += w[i] * x.at(i, j);
    }
    for (double& v : out.d) v /= total;
    VarId id = push(std::move(out), needs(a), {a});
    nodes_[id].back = [this, id, a, w = std::move(w), total] {
      if (!needs(a)) return;
      const Tensor& g = nodes_[id].grad;
      Tensor ga(val(a).rows, val(a).cols);
      for (int i = 0; i < ga.rows; ++i) {
        if (w[i] == 0.0) continue;
        const double f = w[i] / total;
        for (int j = 0; j < ga.cols; ++j) ga.at(i, j) = f * g.at(0, j);
      }
      accumulate(a, ga);
    };
    return id;
  }

  // Normalizes a 1xC row to unit L2 norm.
  VarId l2_normalize_row(VarId a) {
    const Tensor& x = val(a);
    if (x.rows != 1) throw StructureError("l2_normalize_row: expects a 1xC row");
    double n2 = 0.0;
    for (double v : x.d) n2 += v * v;
    const double n = std::sqrt(n2);
    if (!(n > 0.0)) throw InputError("l2_normalize_row: zero vector");
    Tensor out = x;
    for (double& v : out.d) v /= n;
    VarId id = push(std::move(out), needs(a), {a});
    nodes_[id].back = [this, id, a, n] {
      if (!needs(a)) return;
      const Tensor& y = nodes_[id].val;
      const Tensor& g = nodes_[id].grad;
      double gy = 0.0;
      for (size_t i = 0; i < g.d.size(); ++i) gy += g.d[i] * y.d[i];
      Tensor ga = g;
      for (size_t i = 0; i < ga.d.size(); ++i) ga.d[i] = (g.d[i] - gy * y.d[i]) / n;
      accumulate(a, ga);
    };
    return id;
  }

  // Upsamples an (h x w) field to (H x W) by bilinear interpolation, treating
  // entries as samples at cell centers of an HxW image tiled by stride-sized
  // cells (H = h*stride, W = w*stride).
  VarId bilinear_upsample(VarId a, int stride) {
    const Tensor& x = val(a);
    const int H = x.rows * stride, W = x.cols * stride;
    Tensor out(H, W);
    auto weights = [stride](int p, int n, int& i0, int& i1, double& w1) {
      // Source coordinate of output pixel center in cell units.
      const double src = (p + 0.5) / stride - 0.5;
      const double f = std::floor(src);
      i0 = std::clamp(int(f), 0, n - 1);
      i1 = std::clamp(i0 + 1, 0, n - 1);
      w1 = std::clamp(src - f, 0.0, 1.0);
      if (i0 == i1) w1 = 0.0;
    };
    for (int y = 0; y < H; ++y) {
      int y0, y1;
      double wy;
      weights(y, x.rows, y0, y1, wy);
      for (int xx = 0; xx < W; ++xx) {
        int x0, x1;
        double wx;
        weights(xx, x.cols, x0, x1, wx);
        out.at(y, xx) = (1 - wy) * ((1 - wx) * x.at(y0, x0) + wx * x.at(y0, x1)) +
                        wy * ((1 - wx) * x.at(y1, x0) + wx * x.at(y1, x1));
      }
    }
    VarId id = push(std::move(out), needs(a), {a});
    nodes_[id].back = [this, id, a, stride, weights] {
      if (!needs(a)) return;
      const Tensor& src = val(a);
      const Tensor& g = nodes_[id].grad;
      Tensor ga(src.rows, src.cols);
      for (int y = 0; y < g.rows; ++y) {
        int y0, y1;
        double wy;
        weights(y, src.rows, y0, y1, wy);
        for (int xx = 0; xx < g.cols; ++xx) {
          int x0, x1;
          double wx;
          weights(xx, src.cols, x0, x1, wx);
          const double gv = g.at(y, xx);
          ga.at(y0, x0) += (1 - wy) * (1 - wx) * gv;
          ga.at(y0, x1) += (1 - wy) * wx * gv;
          ga.at(y1, x0) += wy * (1 - wx) * gv;
          ga.at(y1, x1) += wy * wx * gv;
        }
      }
      accumulate(a, ga);
    };
    return id;
  }

  // Rearranges (gh*gw) x (P*P) per-cell blocks into a (gh*P) x (gw*P) field.
  VarId scatter_patches(VarId a, int gh, int gw, int patch) {
    const Tensor& x = val(a);
    if (x.rows != gh * gw || x.cols != patch * patch)
      throw StructureError("scatter_patches: shape mismatch");
    Tensor out(gh * patch, gw * patch);
    for (int c = 0; c < x.rows; ++c) {
      const int cy = c / gw, cx = c % gw;
      for (int py = 0; py < patch; ++py)
        for (int px = 0; px < patch; ++px)
          out.at(cy * patch + py, cx * patch + px) = x.at(c, py * patch + px);
    }
    VarId id = push(std::move(out), needs(a), {a});
    nodes_[id].back = [this, id, a, gh, gw, patch] {
      if (!needs(a)) return;
      const Tensor& g = nodes_[id].grad;
      Tensor ga(gh * gw, patch * patch);
      for (int c = 0; c < ga.rows; ++c) {
        const int cy = c / gw, cx = c % gw;
        for (int py = 0; py < patch; ++py)
          for (int px = 0; px < patch; ++px)
            ga.at(c, py * patch + px) = g.at(cy * patch + py, cx * patch + px);
      }
      accumulate(a, ga);
    };
    return id;
  }

  // Generic single-input node with a custom backward:
  //   fn(input_value, output_grad, input_grad_accumulator)
  VarId make_unary(Tensor out, VarId a,
                   std::function<void(const Tensor&, const Tensor&, Tensor&)> back_fn) {
    VarId id = push(std::move(out), needs(a), {a});
    nodes_[id].back = [this, id, a, back_fn = std::move(back_fn)] {
      if (!needs(a)) return;
      Tensor ga(val(a).rows, val(a).cols);
      back_fn(val(a), nodes_[id].grad, ga);
      accumulate(a, ga);
    };
    return id;
  }

  void backward(VarId loss) {
    if (val(loss).rows != 1 || val(loss).cols != 1)
      throw StructureError("backward: loss must be scalar");
    for (auto& n : nodes_)
      if (n.needs) std::fill(n.grad.d.begin(), n.grad.d.end(), 0.0);
    if (!nodes_[loss].needs) return;  // nothing trainable upstream
    nodes_[loss].grad.d[0] = 1.0;
    for (int id = loss; id >= 0; --id) {
      Node& n = nodes_[id];
      if (n.needs && n.back) n.back();
    }
  }

  size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor val;
    Tensor grad;
    bool needs = false;
    std::function<void()> back;
  };

  const Tensor& val(VarId id) const { return nodes_[id].val; }
  bool needs(VarId id) const { return nodes_[id].needs; }

  void accumulate(VarId id, const Tensor& g) { axpy(1.0, g, nodes_[id].grad); }

  VarId push(Tensor v, bool needs_grad, std::vector<VarId> parents) {
    bool needs = needs_grad;
    for (VarId p : parents) needs = needs || nodes_[p].needs;
    Node n;
    if (needs) n.grad = Tensor(v.rows, v.cols);
    n.val = std::move(v);
    n.needs = needs;
    nodes_.push_back(std::move(n));
    return int(nodes_.size()) - 1;
  }

  static double gelu_fwd(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }
  static double gelu_bwd(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
    const double pdf = std::exp(-0.5 * x * x) * 0.3989422804014326779399461;
    return cdf + x * pdf;
  }

  std::vector<Node> nodes_;
};

using VarId = Graph::VarId;

}  // namespace r3seg
