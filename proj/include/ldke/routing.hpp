// SPDX-License-Identifier: Apache-2.0
//
// Gated application of edit packages at inference time. The router state
// for every package is read from one base forward of the prompt (the
// hidden state at each package's l_min precedes every edited layer). If
// several gates open, the package with the largest similarity wins; if none
// opens, the base forward's logits are returned unchanged.

#pragma once

#include <vector>

#include "ldke/editor.hpp"
#include "ldke/router.hpp"

namespace ldke {

struct RoutedForward {
  Matrix logits;
  std::vector<GateDecision> decisions;  // one per package
  int applied = -1;                     // index of the applied package, -1 if none
};

RoutedForward routed_forward(const ToyModelWeights& w, const std::vector<EditPackage>& packages,
                             const RouterParams& router, const Matrix& image, const TokenIds& prompt);

struct RoutedAnswer {
  TokenIds answer;
  std::vector<GateDecision> decisions;
  int applied = -1;
};

// Gate decided once on the prompt, then greedy decoding under the chosen
// weights.
RoutedAnswer routed_predict(const ToyModelWeights& w, const std::vector<EditPackage>& packages,
                            const RouterParams& router, const Matrix& image, const TokenIds& prompt);

}  // namespace ldke
