// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major matrices in double precision. Parameters are held in
// double but rounded to float32 after every update (see round_to_float),
// so a checkpoint of raw float32 values reproduces them exactly.

#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace ldke {

struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(int r, int c, double fill = 0.0) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, fill) {}

  double& operator()(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
  double operator()(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }

  std::span<double> row(int r) { return {data.data() + static_cast<std::size_t>(r) * cols, static_cast<std::size_t>(cols)}; }
  std::span<const double> row(int r) const {
    return {data.data() + static_cast<std::size_t>(r) * cols, static_cast<std::size_t>(cols)};
  }

  std::size_t size() const { return data.size(); }
  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
  void fill(double v);

  bool operator==(const Matrix&) const = default;
};

using Vector = std::vector<double>;

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> a);
// y += alpha * x
void axpy(double alpha, std::span<const double> x, std::span<double> y);

bool all_finite(const Matrix& m);
bool all_finite(std::span<const double> v);

// Rounds every entry to the nearest float32 value.
void round_to_float(Matrix& m);
void round_to_float(std::span<double> v);

// Throws ShapeMismatch with `what` in the message when shapes differ.
void require_same_shape(const Matrix& a, const Matrix& b, const std::string& what);

// Numerically stable softmax of one row, written into out (same length).
void softmax(std::span<const double> logits, std::span<double> out);
double log_sum_exp(std::span<const double> logits);

// Gaussian error linear unit (erf form) and its derivative.
double gelu(double x);
double gelu_grad(double x);

}  // namespace ldke
