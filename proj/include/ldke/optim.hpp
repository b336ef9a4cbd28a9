// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <vector>

#include "ldke/tensor.hpp"

namespace ldke {

// Adam over a fixed list of parameter matrices. After every step the
// parameters are rounded to float32.
class Adam {
 public:
  Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(const std::vector<Matrix*>& params, const std::vector<const Matrix*>& grads, double lr_scale = 1.0);
  int steps_taken() const { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  int t_ = 0;
  std::vector<Matrix> m_, v_;
};

}  // namespace ldke
