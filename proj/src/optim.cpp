// SPDX-License-Identifier: Apache-2.0

#include "ldke/optim.hpp"

#include <cmath>

#include "ldke/errors.hpp"

namespace ldke {

void Adam::step(const std::vector<Matrix*>& params, const std::vector<const Matrix*>& grads, double lr_scale) {
  if (params.size() != grads.size()) throw ShapeMismatch("Adam: params/grads count mismatch");
  if (m_.empty()) {
    for (const Matrix* p : params) {
      m_.emplace_back(p->rows, p->cols);
      v_.emplace_back(p->rows, p->cols);
    }
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, t_);
  const double bc2 = 1.0 - std::pow(beta2_, t_);
  const double lr = lr_ * lr_scale;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Matrix& p = *params[i];
    const Matrix& g = *grads[i];
    require_same_shape(p, g, "Adam");
    Matrix& m = m_[i];
    Matrix& v = v_[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      m.data[j] = beta1_ * m.data[j] + (1.0 - beta1_) * g.data[j];
      v.data[j] = beta2_ * v.data[j] + (1.0 - beta2_) * g.data[j] * g.data[j];
      const double mhat = m.data[j] / bc1;
      const double vhat = v.data[j] / bc2;
      p.data[j] -= lr * mhat / (std::sqrt(vhat) + eps_);
    }
    round_to_float(p);
  }
}

}  // namespace ldke
