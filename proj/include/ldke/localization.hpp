// SPDX-License-Identifier: Apache-2.0
//
// Single-pass FFN contribution scoring and Top-K edit-layer selection.
//
// For each layer the last-prompt-token states before and after the FFN are
// projected through the final layer norm and the unembedding; the layer's
// score is the shift in log-probability of the first target token. Only
// the latter half of the network is eligible for editing.

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ldke/model.hpp"

namespace ldke {

// Probabilities are clamped here before taking logs.
inline constexpr double kProbabilityFloor = 1e-12;

struct ContributionProfile {
  Vector p_pre;
  Vector p_post;
  Vector c;  // log p_post - log p_pre (after clamping)
  int target_token = 0;
  std::uint64_t forward_calls_used = 0;
};

struct LayerSelection {
  std::vector<int> candidate_set;
  int k = 0;
  std::vector<int> edit_layers;  // ascending
  int l_min = 0;
  bool operator==(const LayerSelection&) const = default;
};

// softmax(LN_final(h) W_vocab)[target_token].
double layer_target_probability(std::span<const double> h, const ToyModelWeights& w, int target_token);

// Scores from a single forward's taps. Throws MissingTaps when the record
// does not hold one (h_pre, h_post) pair per layer.
ContributionProfile contribution_profile(const TapRecord& taps, const ToyModelWeights& w, int target_token);

// {floor(N/2), ..., N-1}; throws InvalidDepth for N < 2.
std::vector<int> candidate_layers(int num_layers);

// The k candidates with the largest c, ties to the lower index. Throws
// KTooLarge when k exceeds the candidate set (or k < 1).
LayerSelection select_edit_layers(const ContributionProfile& profile, int k);

// The last k layers (fixed-layer baseline for the layer-strategy ablation).
LayerSelection last_k_layers(int num_layers, int k);

struct Localization {
  ContributionProfile profile;
  LayerSelection selection;
  TapRecord taps;
};

// Runs the original model once on the edit prompt and selects layers.
// profile.forward_calls_used is measured from the thread's forward counter.
Localization localize(const ToyModelWeights& w, const Matrix& image, const TokenIds& prompt, int target_token, int k);

}  // namespace ldke
