// SPDX-License-Identifier: Apache-2.0
//
// Small multimodal causal transformer (pre-LN, GELU FFN) with exact
// hand-written reverse-mode gradients.
//
// Sequence layout: num_visual_tokens projected image rows followed by text
// tokens; learned positional embeddings cover both. Logit row t predicts
// the token at position t + 1.
//
// Per layer:  a  = h + Attn(LN1(h))
//             h' = a + FFN(a),   FFN(a) = GELU(LN2(a) W_up) W_down
// Taps record a (h_pre) and h' (h_post) at the last position, so
// h_post = h_pre + FFN(h_pre) with FFN including its own layer norm.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ldke/container.hpp"
#include "ldke/tensor.hpp"
#include "ldke/vocab.hpp"

namespace ldke {

struct ToyModelConfig {
  int num_layers = 8;
  int hidden_dim = 64;
  int ffn_dim = 256;
  int vocab_size = 256;
  int num_heads = 4;
  int max_seq_len = 16;
  int num_visual_tokens = 4;
  int visual_feature_dim = 31;
  std::uint64_t rng_seed = 1;

  // Throws InvalidDepth for num_layers < 2 and ShapeMismatch for other
  // inconsistent dimensions.
  void validate() const;
  bool operator==(const ToyModelConfig&) const = default;
};

struct LayerWeights {
  Matrix ln1_scale, ln1_shift;  // 1 x d
  Matrix wq, wk, wv, wo;        // d x d
  Matrix ln2_scale, ln2_shift;  // 1 x d
  Matrix w_up;                  // d x d_ff
  Matrix w_down;                // d_ff x d
  bool operator==(const LayerWeights&) const = default;
};

struct ToyModelWeights {
  ToyModelConfig config;
  Matrix token_embedding;     // V x d
  Matrix position_embedding;  // max_seq_len x d
  Matrix visual_projection;   // visual_feature_dim x d
  std::vector<LayerWeights> layers;
  Matrix final_ln_scale, final_ln_shift;  // 1 x d
  Matrix unembedding;                     // d x V

  // Gaussian(0, 0.02) init; attention output and FFN down projections are
  // further scaled by 1/sqrt(2N). Layer-norm scales start at 1. Values are
  // rounded to float32.
  static ToyModelWeights initialize(const ToyModelConfig& config);
  // Same shapes, all zeros (used as a gradient buffer).
  static ToyModelWeights zeros(const ToyModelConfig& config);

  bool operator==(const ToyModelWeights&) const = default;
};

// Parameters in canonical order with stable names.
std::vector<std::pair<std::string, Matrix*>> named_params(ToyModelWeights& w);
std::vector<std::pair<std::string, const Matrix*>> named_params(const ToyModelWeights& w);
bool weights_finite(const ToyModelWeights& w);

Container model_to_container(const ToyModelWeights& w);
ToyModelWeights model_from_container(const Container& c);
void save_model(const std::filesystem::path& path, const ToyModelWeights& w,
                const std::vector<std::pair<std::string, std::string>>& run_config = {});
ToyModelWeights load_model(const std::filesystem::path& path);

// ----------------------------------------------------------------------------
// Forward pass

struct TapRecord {
  std::vector<Vector> h_pre;   // per layer, d
  std::vector<Vector> h_post;  // per layer, d
  int prompt_length = 0;
  std::uint64_t forward_call_id = 0;
};

// FFN matrices to use in place of the stored ones. Empty vectors or null
// entries fall back to the stored weights, which are then used directly.
struct FfnOverrides {
  std::vector<const Matrix*> up;
  std::vector<const Matrix*> down;
};

struct ForwardResult {
  Matrix logits;  // (num_visual_tokens + tokens) x V
  std::optional<TapRecord> taps;
};

ForwardResult forward(const ToyModelWeights& w, const Matrix& image, std::span<const int> tokens, bool record_taps,
                      const FfnOverrides* ffn = nullptr);

// Every forward (cached or not) increments both counters by one. The
// thread-local count lets callers measure their own forward usage while
// other threads run concurrently.
std::uint64_t forward_calls_total();
std::uint64_t forward_calls_this_thread();

// Activations retained for backward.
struct LayerCache {
  Matrix h_in;
  Matrix x1;
  Vector mean1, rstd1;
  Matrix q, k, v;
  std::vector<Matrix> probs;  // per head, T x T (lower triangular)
  Matrix attn;
  Matrix a;
  Vector mean2, rstd2;
  Matrix x2, u, g;
};

struct ForwardCache {
  int seq_len = 0;
  int num_visual = 0;
  std::vector<int> tokens;
  Matrix image;
  std::vector<LayerCache> layers;
  Matrix h_final;
  Vector meanf, rstdf;
  Matrix y;
  Matrix logits;
  FfnOverrides ffn;
};

ForwardCache forward_cached(const ToyModelWeights& w, const Matrix& image, std::span<const int> tokens,
                            const FfnOverrides* ffn = nullptr);

// ----------------------------------------------------------------------------
// Loss and backward

// Mean negative log-likelihood; logit row (target_offset + t - 1) predicts
// target[t]. Throws AlignmentError if the target runs past the sequence.
double autoregressive_loss(const Matrix& logits, std::span<const int> target, int target_offset);
// Gradient of autoregressive_loss w.r.t. the logits (scaled by `scale`).
Matrix autoregressive_loss_grad(const Matrix& logits, std::span<const int> target, int target_offset,
                                double scale = 1.0);
// Rows that receive loss gradient.
std::vector<int> target_rows(std::span<const int> target, int target_offset);

// Per-position rank-1 factors of one layer's FFN gradients, all positions:
//   dL/dW_up   = x_up^T   delta_up     (x_up: T x d,    delta_up: T x d_ff)
//   dL/dW_down = x_down^T delta_down   (x_down: T x d_ff, delta_down: T x d)
struct FfnFactors {
  int layer = 0;
  Matrix x_up, delta_up;
  Matrix x_down, delta_down;
  std::vector<int> target_rows;  // positions that predict target tokens
};

Matrix reconstruct_up_grad(const FfnFactors& f);
Matrix reconstruct_down_grad(const FfnFactors& f);

struct BackwardOptions {
  // Accumulates gradients of every parameter when non-null.
  ToyModelWeights* param_grads = nullptr;
  // Layers whose FFN factors are captured. Without param_grads, backward
  // stops once the lowest of these layers is done.
  std::vector<int> factor_layers;
};

std::vector<FfnFactors> backward(const ToyModelWeights& w, const ForwardCache& cache, const Matrix& dlogits,
                                 const BackwardOptions& opts);

// ----------------------------------------------------------------------------
// Edit instances, gradient factors and decoding

struct EditInstance {
  Matrix image;
  TokenIds prompt;
  TokenIds target;  // answer tokens followed by <eoa>
};

// prompt followed by all but the last target token.
TokenIds teacher_forced_input(const TokenIds& prompt, const TokenIds& target);
// Position of the first target token in the teacher-forced sequence.
int target_offset(const ToyModelConfig& c, const TokenIds& prompt);

struct GradFactors {
  double loss = 0.0;
  std::vector<FfnFactors> layers;
  // Throws UnknownLayer when not captured.
  const FfnFactors& for_layer(int layer) const;
};

// Gradient factors of the autoregressive loss on `instance` for each layer
// in `layers` (loss scaled by loss_scale).
GradFactors ffn_grad_factors(const ToyModelWeights& w, const EditInstance& instance, const std::vector<int>& layers,
                             double loss_scale = 1.0);

inline constexpr int kMaxAnswerTokens = 3;

// Greedy decoding: argmax with ties to the lowest id, stopping after <eoa>
// or kMaxAnswerTokens tokens. The returned sequence includes <eoa> if
// emitted.
TokenIds predict_answer(const ToyModelWeights& w, const Matrix& image, const TokenIds& prompt,
                        const FfnOverrides* ffn = nullptr);
int argmax_lowest(std::span<const double> row);

}  // namespace ldke
