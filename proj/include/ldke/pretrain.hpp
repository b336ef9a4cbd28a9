// SPDX-License-Identifier: Apache-2.0
//
// Host-model pretraining on the synthetic pool (plumbing: the editing
// pipeline assumes an already-trained host).

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ldke/model.hpp"
#include "ldke/synth_data.hpp"

namespace ldke {

struct LabeledQuery {
  int image = 0;  // index into PretrainData::images
  TokenIds prompt;
  TokenIds target;  // answer + <eoa>
};

struct PretrainData {
  std::vector<Matrix> images;  // one per bundle scene, then the null image
  std::vector<LabeledQuery> examples;
};

PretrainData build_pretrain_data(const std::vector<synth::EditBundle>& bundles, const Vocabulary& vocab,
                                 std::uint64_t seed);

struct PretrainConfig {
  int steps = 12000;
  int batch_size = 16;
  double lr = 1e-3;
  int warmup_steps = 100;
  double target_accuracy = 0.99;
  int eval_every = 500;
  int monitor_size = 2000;
  std::uint64_t seed = 1;
  // When false, a shortfall is reported in the result instead of thrown.
  bool require_target = true;
};

struct PretrainResult {
  ToyModelWeights weights;
  double final_loss = 0.0;  // mean loss over the last logged window
  double accuracy = 0.0;    // exact-match over the full pool
  int steps_run = 0;
};

using PretrainLog = std::function<void(int step, double loss, double monitor_accuracy)>;

// Throws NonConvergence when the pool accuracy stays below
// target_accuracy after the step budget.
PretrainResult pretrain(const ToyModelConfig& model_config, const PretrainData& data, const PretrainConfig& config,
                        const PretrainLog& log = nullptr);

// Exact-match accuracy of greedy decoding. Greedy decoding reproduces the
// target exactly iff every teacher-forced argmax matches, which needs only
// one forward per query.
double pool_accuracy(const ToyModelWeights& w, const PretrainData& data, const std::vector<int>* subset = nullptr);
bool teacher_forced_exact(const ToyModelWeights& w, const Matrix& image, const TokenIds& prompt,
                          const TokenIds& target, const FfnOverrides* ffn = nullptr);

}  // namespace ldke
