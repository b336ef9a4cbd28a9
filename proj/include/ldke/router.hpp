// SPDX-License-Identifier: Apache-2.0
//
// Disentanglement router: residual projection of the last-prompt-token
// state at the earliest edited layer, an L2-normalized embedding head used
// for cosine gating, and a logistic head trained as auxiliary supervision.
//
//   r = h + GELU(LN(h) W_up) W_down
//   h~ = r W_emb / |r W_emb|
//   logit = w_cls . h~ + b_cls

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "ldke/container.hpp"
#include "ldke/model.hpp"

namespace ldke {

inline constexpr double kGateThreshold = 0.5;

struct RouterParams {
  int d = 0, d_r = 0, d_e = 0;
  Matrix ln_scale, ln_shift;  // 1 x d
  Matrix w_up;                // d x d_r
  Matrix w_down;              // d_r x d
  Matrix w_emb;               // d x d_e
  Matrix w_cls;               // 1 x d_e
  Matrix b_cls;               // 1 x 1

  // W_down starts at zero so r = h until trained.
  static RouterParams initialize(int d, int d_r, int d_e, std::uint64_t seed);
  static RouterParams zeros_like(const RouterParams& p);
  bool operator==(const RouterParams&) const = default;
};

std::vector<std::pair<std::string, Matrix*>> named_params(RouterParams& p);
std::vector<std::pair<std::string, const Matrix*>> named_params(const RouterParams& p);

struct RouterEmbedding {
  Vector v;
  int source_layer = 0;
  bool operator==(const RouterEmbedding&) const = default;
};

struct GateDecision {
  double s = 0.0;
  bool g = false;
  double threshold = kGateThreshold;
};

// Intermediate values kept for the backward pass.
struct RouterTrace {
  Vector h, x, u, r, e;
  double mean = 0.0, rstd = 0.0, e_norm = 0.0;
  RouterEmbedding embedding;
};

// Throws ZeroNorm when |r W_emb| < 1e-12.
RouterTrace router_embed(std::span<const double> h, const RouterParams& p, int source_layer = 0);
double router_logit(const RouterEmbedding& e, const RouterParams& p);
// Accumulates parameter gradients given dL/dh~ (d_e entries).
void router_backward(const RouterTrace& t, std::span<const double> d_emb, const RouterParams& p, RouterParams& grads);

GateDecision gate(const RouterEmbedding& test, const RouterEmbedding& anchor, double threshold = kGateThreshold);

// g = 0 returns `w` itself (no arithmetic); g = 1 writes w + delta into
// `storage` and returns it. Throws ShapeMismatch.
const Matrix& compose_weights(const Matrix& w, const Matrix& delta, bool g, Matrix& storage);

// Last-prompt-token state entering the FFN of `layer` (after attention),
// computed under the base weights.
Vector router_input(const ToyModelWeights& w, const Matrix& image, const TokenIds& prompt, int layer);

// -----------------------------------------------------------------------------
// Losses

struct RouterTrainConfig {
  double margin = 0.2;
  double lambda1 = 1.0, lambda2 = 1.0, lambda3 = 1.0;
  double lr = 1e-3;
  int steps = 2000;
  int batch_size = 8;
  int d_r = 0;  // 0: hidden_dim
  int d_e = 0;  // 0: hidden_dim / 2
  std::uint64_t seed = 1;
  // Throws UsageError for a margin outside (0, 2) or negative weights.
  void validate() const;
};

struct DisentanglementLoss {
  double total = 0.0, trip1 = 0.0, trip2 = 0.0, abs = 0.0, bce = 0.0;
};

double bce_with_logit(double logit, int label);

// Triplet terms for one (e, g, l) triplet and the BCE of the classification
// head over P (label 1) and N (label 0). Throws EmptySet when both are
// empty.
DisentanglementLoss disentanglement_losses(const RouterEmbedding& e, const RouterEmbedding& g,
                                           const RouterEmbedding& l, std::span<const RouterEmbedding> positives,
                                           std::span<const RouterEmbedding> negatives, const RouterParams& p,
                                           const RouterTrainConfig& config);

// -----------------------------------------------------------------------------
// Training

// Router inputs for one bundle, all taken at the bundle's l_min.
struct RouterSample {
  int layer = 0;
  Vector edit;
  std::vector<Vector> rephrases, fg_gen, fg_loc, t_loc;
};

// Loss of one sample: triplets averaged over every (fg_gen, fg_loc) pair,
// P = {edit, rephrases, fg_gen}, N = {fg_loc, t_loc}. Adds the parameter
// gradient (scaled by `scale`) when `grads` is non-null.
DisentanglementLoss router_sample_loss(const RouterSample& sample, const RouterParams& p,
                                       const RouterTrainConfig& config, RouterParams* grads = nullptr,
                                       double scale = 1.0);

using RouterLog = std::function<void(int step, const DisentanglementLoss& loss)>;

RouterParams train_router(const std::vector<RouterSample>& samples, int hidden_dim, const RouterTrainConfig& config,
                          const RouterLog& log = nullptr);

// Routing accuracy at the threshold: positives should open the gate against
// the anchor (the edit embedding), negatives should not.
double routing_accuracy(const std::vector<RouterSample>& samples, const RouterParams& p);

Container router_to_container(const RouterParams& p);
RouterParams router_from_container(const Container& c);
void save_router(const std::filesystem::path& path, const RouterParams& p,
                 const std::vector<std::pair<std::string, std::string>>& run_config = {});
RouterParams load_router(const std::filesystem::path& path);

}  // namespace ldke
