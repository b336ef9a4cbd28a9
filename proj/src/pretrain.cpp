// SPDX-License-Identifier: Apache-2.0

#include "ldke/pretrain.hpp"

#include <cmath>
#include <numeric>
#include <utility>

#include "ldke/errors.hpp"
#include "ldke/optim.hpp"
#include "ldke/rng.hpp"

namespace ldke {

PretrainData build_pretrain_data(const std::vector<synth::EditBundle>& bundles, const Vocabulary& vocab,
                                 std::uint64_t seed) {
  PretrainData data;
  for (const auto& b : bundles) data.images.push_back(synth::render_scene(b.scene));
  data.images.push_back(synth::null_image());
  const int null_index = static_cast<int>(bundles.size());
  for (const auto& q : synth::pretraining_pool(bundles, seed)) {
    LabeledQuery ex;
    ex.image = q.scene_index < 0 ? null_index : q.scene_index;
    ex.prompt = vocab.tokenize(q.prompt);
    ex.target = vocab.tokenize(q.answer);
    ex.target.push_back(Vocabulary::kEndOfAnswer);
    data.examples.push_back(std::move(ex));
  }
  return data;
}

bool teacher_forced_exact(const ToyModelWeights& w, const Matrix& image, const TokenIds& prompt,
                          const TokenIds& target, const FfnOverrides* ffn) {
  const TokenIds seq = teacher_forced_input(prompt, target);
  const ForwardResult r = forward(w, image, seq, false, ffn);
  const int offset = target_offset(w.config, prompt);
  for (std::size_t t = 0; t < target.size(); ++t) {
    if (argmax_lowest(r.logits.row(offset + static_cast<int>(t) - 1)) != target[t]) return false;
  }
  return true;
}

double pool_accuracy(const ToyModelWeights& w, const PretrainData& data, const std::vector<int>* subset) {
  const int n = subset ? static_cast<int>(subset->size()) : static_cast<int>(data.examples.size());
  if (n == 0) return 0.0;
  long correct = 0;
#pragma omp parallel for schedule(dynamic, 16) reduction(+ : correct)
  for (int i = 0; i < n; ++i) {
    const LabeledQuery& ex = data.examples[subset ? (*subset)[i] : i];
    if (teacher_forced_exact(w, data.images[ex.image], ex.prompt, ex.target)) ++correct;
  }
  return static_cast<double>(correct) / n;
}

PretrainResult pretrain(const ToyModelConfig& model_config, const PretrainData& data, const PretrainConfig& config,
                        const PretrainLog& log) {
  PretrainResult result;
  result.weights = ToyModelWeights::initialize(model_config);
  ToyModelWeights& w = result.weights;
  if (data.examples.empty()) throw DataError("pretrain: empty dataset");

  Rng rng(derive_seed(config.seed, "pretrain"));
  std::vector<int> order(data.examples.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<int> monitor = order;
  rng.shuffle(monitor.begin(), monitor.end());
  if (static_cast<int>(monitor.size()) > config.monitor_size) monitor.resize(config.monitor_size);
  rng.shuffle(order.begin(), order.end());
  std::size_t cursor = 0;

  Adam adam(config.lr);
  std::vector<Matrix*> params;
  for (auto& [name, m] : named_params(w)) params.push_back(m);

  const int B = config.batch_size;
  std::vector<ToyModelWeights> slot_grads(B, ToyModelWeights::zeros(model_config));
  std::vector<double> slot_loss(B);
  ToyModelWeights total = ToyModelWeights::zeros(model_config);
  std::vector<const Matrix*> grads;
  for (auto& [name, m] : named_params(total)) grads.push_back(m);

  double window_loss = 0.0;
  int window_n = 0;
  for (int step = 0; step < config.steps; ++step) {
    std::vector<int> batch(B);
    for (int b = 0; b < B; ++b) {
      if (cursor == order.size()) {
        rng.shuffle(order.begin(), order.end());
        cursor = 0;
      }
      batch[b] = order[cursor++];
    }
#pragma omp parallel for schedule(static)
    for (int b = 0; b < B; ++b) {
      for (auto& [name, m] : named_params(slot_grads[b])) m->fill(0.0);
      const LabeledQuery& ex = data.examples[batch[b]];
      const TokenIds seq = teacher_forced_input(ex.prompt, ex.target);
      const ForwardCache cache = forward_cached(w, data.images[ex.image], seq);
      const int offset = target_offset(model_config, ex.prompt);
      slot_loss[b] = autoregressive_loss(cache.logits, ex.target, offset);
      const Matrix dl = autoregressive_loss_grad(cache.logits, ex.target, offset, 1.0 / B);
      BackwardOptions opts;
      opts.param_grads = &slot_grads[b];
      backward(w, cache, dl, opts);
    }
    // Ordered reduction keeps the result independent of the thread count.
    auto total_params = named_params(total);
    for (auto& [name, m] : total_params) m->fill(0.0);
    for (int b = 0; b < B; ++b) {
      const auto src = named_params(std::as_const(slot_grads[b]));
      for (std::size_t p = 0; p < total_params.size(); ++p) {
        Matrix& dst = *total_params[p].second;
        const Matrix& g = *src[p].second;
        for (std::size_t j = 0; j < dst.size(); ++j) dst.data[j] += g.data[j];
      }
    }
    double batch_loss = 0.0;
    for (double l : slot_loss) batch_loss += l;
    batch_loss /= B;
    if (!std::isfinite(batch_loss)) throw NonFiniteLoss("pretrain: non-finite loss at step " + std::to_string(step));
    window_loss += batch_loss;
    ++window_n;

    double lr_scale = 1.0;
    if (step < config.warmup_steps) {
      lr_scale = static_cast<double>(step + 1) / config.warmup_steps;
    } else {
      const double progress = static_cast<double>(step - config.warmup_steps) /
                              std::max(1, config.steps - config.warmup_steps);
      lr_scale = 0.1 + 0.9 * 0.5 * (1.0 + std::cos(progress * 3.141592653589793));
    }
    adam.step(params, grads, lr_scale);
    result.steps_run = step + 1;

    if ((step + 1) % config.eval_every == 0 || step + 1 == config.steps) {
      const double mon = pool_accuracy(w, data, &monitor);
      result.final_loss = window_loss / window_n;
      if (log) log(step + 1, result.final_loss, mon);
      window_loss = 0.0;
      window_n = 0;
      if (mon >= config.target_accuracy) {
        result.accuracy = pool_accuracy(w, data);
        if (result.accuracy >= config.target_accuracy) break;
      }
    }
  }
  if (window_n > 0) result.final_loss = window_loss / window_n;
  if (!weights_finite(w)) throw NonFiniteLoss("pretrain: non-finite weights");
  if (config.steps > 0) {
    result.accuracy = pool_accuracy(w, data);
    if (config.require_target && result.accuracy < config.target_accuracy) {
      throw NonConvergence("pretrain: accuracy " + std::to_string(result.accuracy) + " below target " +
                           std::to_string(config.target_accuracy) + " after " + std::to_string(result.steps_run) +
                           " steps");
    }
  }
  return result;
}

}  // namespace ldke
