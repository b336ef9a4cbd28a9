// SPDX-License-Identifier: Apache-2.0

#include "ldke/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <cstring>

#include "ldke/errors.hpp"

namespace ldke::kernels {

namespace {

// Below this many multiply-adds a parallel region costs more than it saves.
constexpr long kParallelWork = 1L << 16;

void check_inner(int lhs, int rhs, const char* op) {
  if (lhs != rhs) {
    throw ShapeMismatch(std::string(op) + ": inner dimensions " + std::to_string(lhs) + " vs " + std::to_string(rhs));
  }
}

void resize(Matrix& out, int rows, int cols) {
  if (out.rows != rows || out.cols != cols) out = Matrix(rows, cols);
}

// Register tiles of kRows x kCols outputs. Every output still sums its
// terms in ascending inner index, starting from 0 (matmul) or from the
// existing value (matmul_tn_acc).
constexpr int kRows = 4;
constexpr int kCols = 8;

// out[i0.., j0..] (+)= sum_p A(i, p) * b[p, j], with A(i, p) = a[i * as + p * ps].
using v4 = double __attribute__((vector_size(32)));

inline v4 load4(const double* p) {
  v4 v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

inline void store4(double* p, v4 v) { std::memcpy(p, &v, sizeof v); }

// out[i0.., j0..j0+8) (+)= sum_p A(i, p) * b[p, j], with A(i, p) = a[i * as + p * ps].
template <int R>
void tile8(const double* a, long as, long ps, const double* b, int n, int k, double* out, int ldo, int i0, int j0,
           bool accumulate) {
  v4 lo[R], hi[R];
  for (int r = 0; r < R; ++r) {
    double* o = out + static_cast<long>(i0 + r) * ldo + j0;
    lo[r] = accumulate ? load4(o) : v4{};
    hi[r] = accumulate ? load4(o + 4) : v4{};
  }
  for (int p = 0; p < k; ++p) {
    const double* brow = b + static_cast<long>(p) * n + j0;
    const v4 b0 = load4(brow), b1 = load4(brow + 4);
    for (int r = 0; r < R; ++r) {
      const double av = a[(i0 + r) * as + p * ps];
      lo[r] += av * b0;
      hi[r] += av * b1;
    }
  }
  for (int r = 0; r < R; ++r) {
    double* o = out + static_cast<long>(i0 + r) * ldo + j0;
    store4(o, lo[r]);
    store4(o + 4, hi[r]);
  }
}

template <int R>
void tile1(const double* a, long as, long ps, const double* b, int n, int k, double* out, int ldo, int i0, int j,
           bool accumulate) {
  for (int r = 0; r < R; ++r) {
    double s = accumulate ? out[static_cast<long>(i0 + r) * ldo + j] : 0.0;
    for (int p = 0; p < k; ++p) s += a[(i0 + r) * as + p * ps] * b[static_cast<long>(p) * n + j];
    out[static_cast<long>(i0 + r) * ldo + j] = s;
  }
}

template <int R>
void row_block(const double* a, long as, long ps, const double* b, int n, int k, double* out, int i0, bool acc) {
  int j = 0;
  for (; j + kCols <= n; j += kCols) tile8<R>(a, as, ps, b, n, k, out, n, i0, j, acc);
  for (; j < n; ++j) tile1<R>(a, as, ps, b, n, k, out, n, i0, j, acc);
}

// Rows of the output in blocks of kRows; the remainder rows go one at a time.
void tiled(const double* a, long as, long ps, const double* b, int m, int n, int k, double* out, bool acc) {
  const int blocks = m / kRows;
  const long work = static_cast<long>(m) * k * n;
#pragma omp parallel for schedule(static) if (work > kParallelWork)
  for (int blk = 0; blk < blocks + (m - blocks * kRows); ++blk) {
    if (blk < blocks) {
      row_block<kRows>(a, as, ps, b, n, k, out, blk * kRows, acc);
    } else {
      row_block<1>(a, as, ps, b, n, k, out, blocks * kRows + (blk - blocks), acc);
    }
  }
}

}  // namespace

void matmul(const Matrix& a, const Matrix& b, Matrix& out) {
  check_inner(a.cols, b.rows, "matmul");
  resize(out, a.rows, b.cols);
  tiled(a.data.data(), a.cols, 1, b.data.data(), a.rows, b.cols, a.cols, out.data.data(), false);
}

void matmul_tn_acc(const Matrix& a, const Matrix& b, Matrix& out) {
  check_inner(a.rows, b.rows, "matmul_tn_acc");
  if (out.rows != a.cols || out.cols != b.cols) throw ShapeMismatch("matmul_tn_acc: output shape");
  tiled(a.data.data(), 1, a.cols, b.data.data(), a.cols, b.cols, a.rows, out.data.data(), true);
}

void matmul_nt(const Matrix& a, const Matrix& b, Matrix& out) {
  check_inner(a.cols, b.cols, "matmul_nt");
  matmul(a, transpose(b), out);
}

void add_outer(double alpha, std::span<const double> x, std::span<const double> y, Matrix& out) {
  if (out.rows != static_cast<int>(x.size()) || out.cols != static_cast<int>(y.size())) {
    throw ShapeMismatch("add_outer: output shape");
  }
  const int m = out.rows, n = out.cols;
#pragma omp parallel for schedule(static) if (static_cast<long>(m) * n > kParallelWork)
  for (int i = 0; i < m; ++i) {
    const double s = alpha * x[i];
    double* orow = out.data.data() + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) orow[j] += s * y[j];
  }
}

void add(const Matrix& a, const Matrix& b, Matrix& out) {
  require_same_shape(a, b, "add");
  resize(out, a.rows, a.cols);
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) out.data[i] = a.data[i] + b.data[i];
}

Matrix transpose(const Matrix& a) {
  constexpr int kBlock = 16;
  Matrix t(a.cols, a.rows);
  for (int i0 = 0; i0 < a.rows; i0 += kBlock)
    for (int j0 = 0; j0 < a.cols; j0 += kBlock) {
      const int i1 = std::min(a.rows, i0 + kBlock), j1 = std::min(a.cols, j0 + kBlock);
      for (int i = i0; i < i1; ++i)
        for (int j = j0; j < j1; ++j) t.data[static_cast<std::size_t>(j) * a.rows + i] = a.data[static_cast<std::size_t>(i) * a.cols + j];
    }
  return t;
}

namespace reference {

void matmul(const Matrix& a, const Matrix& b, Matrix& out) {
  check_inner(a.cols, b.rows, "reference::matmul");
  out = Matrix(a.rows, b.cols);
  for (int i = 0; i < a.rows; ++i)
    for (int j = 0; j < b.cols; ++j) {
      double s = 0.0;
      for (int p = 0; p < a.cols; ++p) {
        s += a(i, p) * b(p, j);
      }
      out(i, j) = s;
    }
}

void matmul_tn_acc(const Matrix& a, const Matrix& b, Matrix& out) {
  check_inner(a.rows, b.rows, "reference::matmul_tn_acc");
  for (int i = 0; i < a.cols; ++i)
    for (int j = 0; j < b.cols; ++j) {
      double s = out(i, j);
      for (int r = 0; r < a.rows; ++r) {
        s += a(r, i) * b(r, j);
      }
      out(i, j) = s;
    }
}

void matmul_nt(const Matrix& a, const Matrix& b, Matrix& out) {
  check_inner(a.cols, b.cols, "reference::matmul_nt");
  out = Matrix(a.rows, b.rows);
  for (int i = 0; i < a.rows; ++i)
    for (int j = 0; j < b.rows; ++j) {
      double s = 0.0;
      for (int p = 0; p < a.cols; ++p) s += a(i, p) * b(j, p);
      out(i, j) = s;
    }
}

void add_outer(double alpha, std::span<const double> x, std::span<const double> y, Matrix& out) {
  for (int i = 0; i < out.rows; ++i)
    for (int j = 0; j < out.cols; ++j) out(i, j) += (alpha * x[i]) * y[j];
}

}  // namespace reference

}  // namespace ldke::kernels
