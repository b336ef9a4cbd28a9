// SPDX-License-Identifier: Apache-2.0

#include "ldke/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "ldke/errors.hpp"

namespace ldke {

void Matrix::fill(double v) { std::fill(data.begin(), data.end(), v); }

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

bool all_finite(const Matrix& m) { return all_finite(std::span<const double>(m.data)); }

void round_to_float(std::span<double> v) {
  for (double& x : v) x = static_cast<double>(static_cast<float>(x));
}

void round_to_float(Matrix& m) { round_to_float(std::span<double>(m.data)); }

void require_same_shape(const Matrix& a, const Matrix& b, const std::string& what) {
  if (!a.same_shape(b)) {
    throw ShapeMismatch(what + ": " + std::to_string(a.rows) + "x" + std::to_string(a.cols) + " vs " +
                        std::to_string(b.rows) + "x" + std::to_string(b.cols));
  }
}

double log_sum_exp(std::span<const double> logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double s = 0.0;
  for (double v : logits) s += std::exp(v - mx);
  return mx + std::log(s);
}

void softmax(std::span<const double> logits, std::span<double> out) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double s = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - mx);
    s += out[i];
  }
  const double inv = 1.0 / s;
  for (double& v : out) v *= inv;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

}  // namespace ldke
