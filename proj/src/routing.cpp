// SPDX-License-Identifier: Apache-2.0

#include "ldke/routing.hpp"

namespace ldke {

namespace {

struct Decision {
  std::vector<GateDecision> decisions;
  int applied = -1;
};

Decision decide(const TapRecord& taps, const std::vector<EditPackage>& packages, const RouterParams& router) {
  Decision d;
  for (std::size_t i = 0; i < packages.size(); ++i) {
    const int layer = packages[i].selection.l_min;
    const RouterEmbedding e = router_embed(taps.h_pre.at(layer), router, layer).embedding;
    d.decisions.push_back(gate(e, packages[i].anchor));
    const auto& g = d.decisions.back();
    if (g.g && (d.applied < 0 || g.s > d.decisions[d.applied].s)) d.applied = static_cast<int>(i);
  }
  return d;
}

struct Composed {
  std::vector<Matrix> storage;
  FfnOverrides ffn;
};

void compose(const ToyModelWeights& w, const EditPackage& p, Composed& c) {
  c.storage.assign(2 * p.deltas.size(), Matrix());
  c.ffn.up.assign(w.config.num_layers, nullptr);
  c.ffn.down.assign(w.config.num_layers, nullptr);
  for (std::size_t i = 0; i < p.deltas.size(); ++i) {
    const WeightDelta& d = p.deltas[i];
    const LayerWeights& lw = w.layers.at(d.layer);
    c.ffn.up[d.layer] = &compose_weights(lw.w_up, d.delta_up, true, c.storage[2 * i]);
    c.ffn.down[d.layer] = &compose_weights(lw.w_down, d.delta_down, true, c.storage[2 * i + 1]);
  }
}

}  // namespace

RoutedForward routed_forward(const ToyModelWeights& w, const std::vector<EditPackage>& packages,
                             const RouterParams& router, const Matrix& image, const TokenIds& prompt) {
  RoutedForward out;
  if (packages.empty()) {
    out.logits = forward(w, image, prompt, false).logits;
    return out;
  }
  ForwardResult base = forward(w, image, prompt, true);
  Decision d = decide(*base.taps, packages, router);
  out.decisions = std::move(d.decisions);
  out.applied = d.applied;
  if (d.applied < 0) {
    out.logits = std::move(base.logits);
    return out;
  }
  Composed c;
  compose(w, packages[d.applied], c);
  out.logits = forward(w, image, prompt, false, &c.ffn).logits;
  return out;
}

RoutedAnswer routed_predict(const ToyModelWeights& w, const std::vector<EditPackage>& packages,
                            const RouterParams& router, const Matrix& image, const TokenIds& prompt) {
  RoutedAnswer out;
  if (packages.empty()) {
    out.answer = predict_answer(w, image, prompt);
    return out;
  }
  const ForwardResult base = forward(w, image, prompt, true);
  Decision d = decide(*base.taps, packages, router);
  out.decisions = std::move(d.decisions);
  out.applied = d.applied;
  if (d.applied < 0) {
    out.answer = predict_answer(w, image, prompt);
    return out;
  }
  Composed c;
  compose(w, packages[d.applied], c);
  out.answer = predict_answer(w, image, prompt, &c.ffn);
  return out;
}

}  // namespace ldke
