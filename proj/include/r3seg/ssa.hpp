#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <vector>

#include "r3seg/errors.hpp"
#include "r3seg/graph.hpp"
#include "r3seg/tensor.hpp"

// Reinforce stage: a bounded FIFO queue of unit-norm instance embeddings and
// the temperature-scaled soft alignment loss over it. Entries pushed during
// the current iteration are gradient-live; older entries act as constants.

namespace r3seg::ssa {

struct QueueEntry {
  std::vector<double> embedding;
  bool grad_live = false;
  int64_t image_id = -1;
  int64_t instance_id = -1;
};

class EmbeddingQueue {
 public:
  explicit EmbeddingQueue(size_t capacity = 32) : capacity_(capacity) {
    if (capacity_ < 1) throw InputError("EmbeddingQueue: capacity must be >= 1");
  }

  size_t capacity() const { return capacity_; }
  size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const QueueEntry& entry(size_t i) const { return entries_[i]; }

  // Call at the start of each training iteration: history loses gradients.
  void begin_iteration() {
    for (auto& e : entries_) e.grad_live = false;
  }

  void push(const std::vector<double>& embedding, int64_t image_id = -1,
            int64_t instance_id = -1) {
    const double n = l2_norm(embedding);
    if (embedding.empty() || std::abs(n - 1.0) > 1e-6)
      throw InputError("EmbeddingQueue::push: embedding is not unit-norm");
    entries_.push_back(QueueEntry{embedding, true, image_id, instance_id});
    while (entries_.size() > capacity_) entries_.pop_front();
  }

  void clear() { entries_.clear(); }

 private:
  size_t capacity_;
  std::deque<QueueEntry> entries_;
};

// Pairwise cosine matrix with a forced zero diagonal. Entries are unit-norm,
// so this is a clamped dot product.
inline Tensor similarity_matrix(const EmbeddingQueue& q) {
  const int n = int(q.size());
  if (n < 2) throw InputError("similarity_matrix: needs at least 2 entries");
  Tensor s(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      double v = dot(q.entry(i).embedding, q.entry(j).embedding);
      const double ni = l2_norm(q.entry(i).embedding);
      const double nj = l2_norm(q.entry(j).embedding);
      v /= ni * nj;  // renormalization guard; entries are already unit
      v = std::clamp(v, -1.0, 1.0);
      s.at(i, j) = v;
      s.at(j, i) = v;
    }
  return s;
}

// Row-stochastic affinity p_ij = exp(S_ij/tau) / sum_{k!=i} exp(S_ik/tau),
// diagonal forced to zero. Max-subtraction keeps exp(20) in range at the
// default tau.
inline Tensor affinity(const Tensor& s, double tau) {
  if (tau <= 0.0) throw InputError("affinity: tau must be > 0");
  if (s.rows != s.cols || s.rows < 2) throw StructureError("affinity: square N>=2 expected");
  Tensor p(s.rows, s.cols);
  for (int i = 0; i < s.rows; ++i) {
    double mx = -1e300;
    for (int j = 0; j < s.cols; ++j)
      if (j != i) mx = std::max(mx, s.at(i, j) / tau);
    double z = 0.0;
    for (int j = 0; j < s.cols; ++j)
      if (j != i) z += std::exp(s.at(i, j) / tau - mx);
    for (int j = 0; j < s.cols; ++j)
      if (j != i) p.at(i, j) = std::exp(s.at(i, j) / tau - mx) / z;
  }
  return p;
}

// L = (1/N) * sum_i sum_{j!=i} (1 - S_ij) p_ij over stacked embedding rows.
inline VarId loss_from_rows(Graph& g, const std::vector<VarId>& rows, double tau) {
  if (tau <= 0.0) throw InputError("ssa loss: tau must be > 0");
  const int n = int(rows.size());
  if (n < 2) throw InputError("ssa loss: needs at least 2 embeddings");
  VarId e = g.stack_rows(rows);
  VarId s = g.set_diag(g.clamp(g.matmul_nt(e, e), -1.0, 1.0), 0.0);
  VarId p = g.row_softmax(s, 1.0 / tau, /*exclude_diag=*/true);
  VarId weighted = g.mul(g.rsub(1.0, s), p);
  return g.scale(g.sum(weighted), 1.0 / double(n));
}

// Training-path entry: live rows are caller-supplied 1xD vars (pooled from
// the student encoder); frozen history enters as constants.
inline VarId loss_node(Graph& g, const std::vector<VarId>& live_rows,
                       const std::vector<std::vector<double>>& frozen_rows, double tau) {
  std::vector<VarId> rows;
  rows.reserve(live_rows.size() + frozen_rows.size());
  for (const auto& fr : frozen_rows) {
    Tensor t(1, int(fr.size()));
    t.d = fr;
    rows.push_back(g.constant(std::move(t)));
  }
  for (VarId v : live_rows) rows.push_back(v);
  return loss_from_rows(g, rows, tau);
}

struct SsaResult {
  double loss = 0.0;
  bool skipped = false;  // queue too small, loss undefined
  // One gradient per grad-live entry, in queue order.
  std::vector<std::vector<double>> live_grads;
};

// Standalone evaluation over the queue contents. Shares the exact forward
// construction with the training path via loss_node.
inline SsaResult ssa_loss(const EmbeddingQueue& q, double tau) {
  if (tau <= 0.0) throw InputError("ssa loss: tau must be > 0");
  SsaResult r;
  if (q.size() < 2) {
    r.skipped = true;
    return r;
  }
  Graph g;
  std::vector<VarId> rows;
  std::vector<Tensor> sinks;
  std::vector<size_t> live_idx;
  sinks.reserve(q.size());
  for (size_t i = 0; i < q.size(); ++i) {
    Tensor t(1, int(q.entry(i).embedding.size()));
    t.d = q.entry(i).embedding;
    if (q.entry(i).grad_live) {
      sinks.emplace_back(1, t.cols);
      live_idx.push_back(i);
      rows.push_back(g.leaf(t, &sinks.back()));
    } else {
      rows.push_back(g.constant(std::move(t)));
    }
  }
  VarId loss = loss_from_rows(g, rows, tau);
  r.loss = g.value(loss).item();
  if (!sinks.empty()) g.backward(loss);
  for (auto& t : sinks) r.live_grads.push_back(std::move(t.d));
  return r;
}

inline double mean_offdiag_similarity(const EmbeddingQueue& q) {
  if (q.size() < 2) return 0.0;
  const Tensor s = similarity_matrix(q);
  double acc = 0.0;
  for (int i = 0; i < s.rows; ++i)
    for (int j = 0; j < s.cols; ++j)
      if (i != j) acc += s.at(i, j);
  return acc / double(s.rows * (s.rows - 1));
}

}  // namespace r3seg::ssa
