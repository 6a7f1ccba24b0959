#pragma once

#include <cmath>
#include <cstdint>
#include <string>

#include "r3seg/errors.hpp"
#include "r3seg/rng.hpp"
#include "r3seg/tensor.hpp"

// Low-rank adaptation of a frozen weight matrix: effective weight is
// theta + A*B with A (d_out x r) and B (r x d_in). Only A and B train; the
// product is never materialized.

namespace r3seg::lora {

struct LoraAdapter {
  Tensor A;  // d_out x r, zero at init so adaptation starts as the identity
  Tensor B;  // r x d_in, Gaussian scaled by 1/sqrt(d_in)
  Tensor grad_A;
  Tensor grad_B;
  int rank = 0;
  std::string target;  // which projection this wraps, e.g. "enc0.q"

  static LoraAdapter init(int d_out, int d_in, int rank, uint64_t seed, std::string target) {
    if (rank < 1 || rank > std::min(d_out, d_in))
      throw InputError("LoraAdapter: rank must satisfy 1 <= r <= min(d_out, d_in)");
    LoraAdapter a;
    a.A = Tensor(d_out, rank);
    a.B = Tensor(rank, d_in);
    a.grad_A = Tensor(d_out, rank);
    a.grad_B = Tensor(rank, d_in);
    a.rank = rank;
    a.target = std::move(target);
    Rng rng(mix_seed(seed, 0x10A4));
    const double scale = 1.0 / std::sqrt(double(d_in));
    for (double& v : a.B.d) v = rng.normal() * scale;
    return a;
  }

  void zero_grads() {
    std::fill(grad_A.d.begin(), grad_A.d.end(), 0.0);
    std::fill(grad_B.d.begin(), grad_B.d.end(), 0.0);
  }
};

// (theta + A*B) * x computed as theta*x + A*(B*x). x may be a single column
// vector or a d_in x m batch.
inline Tensor lora_forward(const LoraAdapter& adapter, const Tensor& theta, const Tensor& x) {
  if (theta.cols != x.rows) throw StructureError("lora_forward: theta/x dimension mismatch");
  if (adapter.A.rows != theta.rows || adapter.B.cols != theta.cols)
    throw StructureError("lora_forward: adapter does not match theta");
  Tensor out = matmul(theta, x);
  axpy(1.0, matmul(adapter.A, matmul(adapter.B, x)), out);
  return out;
}

}  // namespace r3seg::lora
