// SPDX-License-Identifier: Apache-2.0

#include "ldke/localization.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ldke/errors.hpp"
#include "ldke/kernels.hpp"

namespace ldke {

double layer_target_probability(std::span<const double> h, const ToyModelWeights& w, int target_token) {
  const int d = w.config.hidden_dim;
  if (static_cast<int>(h.size()) != d) throw ShapeMismatch("layer_target_probability: hidden size");
  if (target_token < 0 || target_token >= w.config.vocab_size) {
    throw ShapeMismatch("layer_target_probability: target token out of range");
  }
  double mu = 0.0;
  for (double v : h) mu += v;
  mu /= d;
  double var = 0.0;
  for (double v : h) var += (v - mu) * (v - mu);
  var /= d;
  const double rs = 1.0 / std::sqrt(var + 1e-5);
  Matrix y(1, d);
  for (int j = 0; j < d; ++j) y(0, j) = (h[j] - mu) * rs * w.final_ln_scale.data[j] + w.final_ln_shift.data[j];
  Matrix logits;
  kernels::matmul(y, w.unembedding, logits);
  return std::exp(logits(0, target_token) - log_sum_exp(logits.row(0)));
}

ContributionProfile contribution_profile(const TapRecord& taps, const ToyModelWeights& w, int target_token) {
  const int n = w.config.num_layers;
  if (static_cast<int>(taps.h_pre.size()) != n || static_cast<int>(taps.h_post.size()) != n) {
    throw MissingTaps("tap record holds " + std::to_string(taps.h_pre.size()) + "/" +
                      std::to_string(taps.h_post.size()) + " layer pairs, model has " + std::to_string(n));
  }
  ContributionProfile p;
  p.target_token = target_token;
  p.forward_calls_used = 1;
  for (int l = 0; l < n; ++l) {
    const double pre = layer_target_probability(taps.h_pre[l], w, target_token);
    const double post = layer_target_probability(taps.h_post[l], w, target_token);
    p.p_pre.push_back(pre);
    p.p_post.push_back(post);
    p.c.push_back(std::log(std::max(post, kProbabilityFloor)) - std::log(std::max(pre, kProbabilityFloor)));
  }
  return p;
}

std::vector<int> candidate_layers(int num_layers) {
  if (num_layers < 2) throw InvalidDepth("candidate_layers: need at least 2 layers, got " + std::to_string(num_layers));
  std::vector<int> c;
  for (int l = num_layers / 2; l < num_layers; ++l) c.push_back(l);
  return c;
}

LayerSelection select_edit_layers(const ContributionProfile& profile, int k) {
  LayerSelection s;
  s.candidate_set = candidate_layers(static_cast<int>(profile.c.size()));
  if (k < 1 || k > static_cast<int>(s.candidate_set.size())) {
    throw KTooLarge("k=" + std::to_string(k) + " but the candidate set has " +
                    std::to_string(s.candidate_set.size()) + " layers");
  }
  s.k = k;
  std::vector<int> order = s.candidate_set;
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return profile.c[a] > profile.c[b]; });
  s.edit_layers.assign(order.begin(), order.begin() + k);
  std::sort(s.edit_layers.begin(), s.edit_layers.end());
  s.l_min = s.edit_layers.front();
  return s;
}

LayerSelection last_k_layers(int num_layers, int k) {
  LayerSelection s;
  s.candidate_set = candidate_layers(num_layers);
  if (k < 1 || k > static_cast<int>(s.candidate_set.size())) {
    throw KTooLarge("k=" + std::to_string(k) + " exceeds the candidate set");
  }
  s.k = k;
  for (int l = num_layers - k; l < num_layers; ++l) s.edit_layers.push_back(l);
  s.l_min = s.edit_layers.front();
  return s;
}

Localization localize(const ToyModelWeights& w, const Matrix& image, const TokenIds& prompt, int target_token, int k) {
  const std::uint64_t before = forward_calls_this_thread();
  ForwardResult r = forward(w, image, prompt, true);
  Localization out;
  out.taps = std::move(*r.taps);
  out.profile = contribution_profile(out.taps, w, target_token);
  out.selection = select_edit_layers(out.profile, k);
  out.profile.forward_calls_used = forward_calls_this_thread() - before;
  return out;
}

}  // namespace ldke
