// SPDX-License-Identifier: Apache-2.0
//
// Dense matrix kernels used by the host model, editor and router.
//
// The top-level functions are OpenMP-parallel over output rows. Each output
// element is accumulated by one thread in ascending index order, so results
// are bit-identical to the serial versions in `reference` regardless of the
// thread count. The reference kernels are naive loops kept for tests and
// the benchmark.

#pragma once

#include <span>

#include "ldke/tensor.hpp"

namespace ldke::kernels {

// out = a * b. out is resized.
void matmul(const Matrix& a, const Matrix& b, Matrix& out);
// out += a^T * b (a: m x k, b: m x n, out: k x n).
void matmul_tn_acc(const Matrix& a, const Matrix& b, Matrix& out);
// out = a * b^T (a: m x k, b: n x k). out is resized.
void matmul_nt(const Matrix& a, const Matrix& b, Matrix& out);
// out += alpha * x y^T
void add_outer(double alpha, std::span<const double> x, std::span<const double> y, Matrix& out);
// out = a + b
void add(const Matrix& a, const Matrix& b, Matrix& out);

Matrix transpose(const Matrix& a);

namespace reference {
void matmul(const Matrix& a, const Matrix& b, Matrix& out);
void matmul_tn_acc(const Matrix& a, const Matrix& b, Matrix& out);
void matmul_nt(const Matrix& a, const Matrix& b, Matrix& out);
void add_outer(double alpha, std::span<const double> x, std::span<const double> y, Matrix& out);
}  // namespace reference

}  // namespace ldke::kernels
