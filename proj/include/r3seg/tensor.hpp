#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "r3seg/errors.hpp"

namespace r3seg {

// Dense row-major 2-D tensor of doubles. Scalars are 1x1. Everything the toy
// model needs is expressible with matrices, so there is no ndim machinery.
struct Tensor {
  int rows = 0;
  int cols = 0;
  std::vector<double> d;

  Tensor() = default;
  Tensor(int r, int c, double fill = 0.0) : rows(r), cols(c), d(size_t(r) * c, fill) {}

  static Tensor scalar(double v) {
    Tensor t(1, 1);
    t.d[0] = v;
    return t;
  }

  double& at(int i, int j) { return d[size_t(i) * cols + j]; }
  double at(int i, int j) const { return d[size_t(i) * cols + j]; }
  size_t size() const { return d.size(); }
  bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }
  double item() const {
    if (rows != 1 || cols != 1) throw StructureError("Tensor::item on non-scalar");
    return d[0];
  }

  bool operator==(const Tensor&) const = default;
};

// C = A * B
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols != b.rows) throw StructureError("matmul: inner dimensions disagree");
  Tensor c(a.rows, b.cols);
  for (int i = 0; i < a.rows; ++i) {
    const double* arow = &a.d[size_t(i) * a.cols];
    double* crow = &c.d[size_t(i) * c.cols];
    for (int k = 0; k < a.cols; ++k) {
      const double av = arow[k];
      if (av == 0.0) continue;
      const double* brow = &b.d[size_t(k) * b.cols];
      for (int j = 0; j < b.cols; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

// C = A * B^T
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.cols != b.cols) throw StructureError("matmul_nt: inner dimensions disagree");
  Tensor c(a.rows, b.rows);
  for (int i = 0; i < a.rows; ++i) {
    const double* arow = &a.d[size_t(i) * a.cols];
    for (int j = 0; j < b.rows; ++j) {
      const double* brow = &b.d[size_t(j) * b.cols];
      double s = 0.0;
      for (int k = 0; k < a.cols; ++k) s += arow[k] * brow[k];
      c.at(i, j) = s;
    }
  }
  return c;
}

// C = A^T * B
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  if (a.rows != b.rows) throw StructureError("matmul_tn: inner dimensions disagree");
  Tensor c(a.cols, b.cols);
  for (int k = 0; k < a.rows; ++k) {
    const double* arow = &a.d[size_t(k) * a.cols];
    const double* brow = &b.d[size_t(k) * b.cols];
    for (int i = 0; i < a.cols; ++i) {
      const double av = arow[i];
      if (av == 0.0) continue;
      double* crow = &c.d[size_t(i) * c.cols];
      for (int j = 0; j < b.cols; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

inline void axpy(double alpha, const Tensor& x, Tensor& y) {
  if (!x.same_shape(y)) throw StructureError("axpy: shape mismatch");
  for (size_t i = 0; i < x.d.size(); ++i) y.d[i] += alpha * x.d[i];
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double l2_norm(const std::vector<double>& a) { return std::sqrt(dot(a, a)); }

}  // namespace r3seg
