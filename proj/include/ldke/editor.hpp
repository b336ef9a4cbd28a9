// SPDX-License-Identifier: Apache-2.0
//
// Layer-specific weight editor. For each FFN weight class (up, down) one
// shared low-rank network transforms the concatenated activation/gradient
// factor z = [x; delta] of every target token:
//
//   m   = z + GELU(gamma1_l * (A1 B1 z + b) + beta1_l)
//   out = m + GELU(gamma2_l * (A2 B2 m) + beta2_l)
//
// The output splits into a pseudo-activation x~ and pseudo-gradient d~ and
// the update is  dW_l = -eta_l sum_t x~_t d~_t^T  (row convention, matching
// dL/dW = x^T delta). eta_l = exp(log_eta_l).
//
// Inputs are divided by fixed per-class scales (RMS of x and delta over the
// training edits) before entering the network.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <vector>

#include "ldke/localization.hpp"
#include "ldke/model.hpp"
#include "ldke/router.hpp"
#include "ldke/synth_data.hpp"

namespace ldke {

enum class WeightClass { up, down };

struct LayerScale {
  Matrix gamma1, beta1, gamma2, beta2;  // 1 x D
  Matrix log_eta;                       // 1 x 1
  bool operator==(const LayerScale&) const = default;
};

struct EditorNet {
  int x_dim = 0, delta_dim = 0;
  double x_scale = 1.0, delta_scale = 1.0;
  Matrix a1, b1, bias, a2, b2;  // a: D x r, b: r x D, bias: 1 x D
  std::map<int, LayerScale> layers;

  int dim() const { return x_dim + delta_dim; }
  // Throws UnknownLayer.
  const LayerScale& layer(int l) const;
  bool operator==(const EditorNet&) const = default;
};

struct EditorParams {
  int rank = 0;
  EditorNet up, down;

  const EditorNet& net(WeightClass c) const { return c == WeightClass::up ? up : down; }
  EditorNet& net(WeightClass c) { return c == WeightClass::up ? up : down; }

  // A = 0 so the network starts as the identity; B ~ N(0, 1/D);
  // gamma = 1, beta = 0, eta = initial_eta for every candidate layer.
  static EditorParams initialize(const ToyModelConfig& model, int rank, double initial_eta, std::uint64_t seed);
  static EditorParams zeros_like(const EditorParams& p);
  bool operator==(const EditorParams&) const = default;
};

// ceil(min(d, d + d_ff) / 8)
int default_editor_rank(const ToyModelConfig& model);

std::vector<std::pair<std::string, Matrix*>> named_params(EditorParams& p);
std::vector<std::pair<std::string, const Matrix*>> named_params(const EditorParams& p);

struct EditorTrace {
  Vector z, v1, u1, p1, m, v2, u2, p2, out;
};

// Throws UnknownLayer / ShapeMismatch.
EditorTrace editor_forward(std::span<const double> z, int layer, const EditorParams& params, WeightClass c);
// Accumulates parameter gradients given dL/d(out).
void editor_backward(const EditorTrace& t, std::span<const double> d_out, int layer, const EditorParams& params,
                     WeightClass c, EditorParams& grads);

struct WeightDelta {
  int layer = 0;
  Matrix delta_up;    // d x d_ff
  Matrix delta_down;  // d_ff x d
  int source_rank = 0;
  bool operator==(const WeightDelta&) const = default;
};

// dW = -eta sum_t x~_t d~_t^T per class from the transformed vectors.
// Throws PartitionMismatch when a vector's length is not x_dim + delta_dim.
WeightDelta build_delta(const std::vector<Vector>& up_outputs, const std::vector<Vector>& down_outputs, int layer,
                        const EditorParams& params);

struct EditPackage {
  int edit_id = 0;
  LayerSelection selection;
  std::vector<WeightDelta> deltas;  // one per edited layer, ascending
  RouterEmbedding anchor;
  TokenIds target;
  bool operator==(const EditPackage&) const = default;
};

// Editor inputs derived from the frozen base model for one edit: editable
// layers and standardized per-target-token factors z for each class.
struct EditInputs {
  LayerSelection selection;
  std::vector<Vector> h_pre;  // last-prompt-token taps (for the anchor)
  // [layer index in selection][token] -> z
  std::vector<std::vector<Vector>> z_up, z_down;
};

EditInputs edit_inputs(const ToyModelWeights& w, const EditInstance& instance, const LayerSelection& selection,
                       const EditorParams& params);

// Produces deltas for the given selection (no rounding).
std::vector<WeightDelta> editor_deltas(const EditInputs& inputs, const EditorParams& params);

// Localizes, builds deltas for the selected layers and the router anchor at
// l_min. Deltas are rounded to float32. The host weights are not touched.
EditPackage make_edit(const ToyModelWeights& w, const EditInstance& instance, int k, const EditorParams& editor,
                      const RouterParams& router, int edit_id = 0);
// Same, with a caller-supplied layer selection (layer-strategy ablation).
EditPackage make_edit_with_selection(const ToyModelWeights& w, const EditInstance& instance,
                                     const LayerSelection& selection, const EditorParams& editor,
                                     const RouterParams& router, int edit_id = 0);

// Ungated effective weights for a package: overrides point into `storage`.
FfnOverrides apply_deltas(const ToyModelWeights& w, const std::vector<WeightDelta>& deltas,
                          std::vector<Matrix>& storage);

// -----------------------------------------------------------------------------
// Meta-training

struct EditorTrainConfig {
  double lambda_gen = 1.0, lambda_loc = 1.0, lambda_m_gen = 1.0, lambda_m_loc = 1.0;
  int rank = 0;  // 0: default_editor_rank
  double lr = 1e-3;
  int steps = 3000;
  int batch_size = 4;
  int k = 3;
  double initial_eta = 1e-2;
  std::uint64_t seed = 1;
  // Throws UsageError when every lambda is zero or a value is out of range.
  void validate() const;
};

struct LabeledInstance {
  Matrix image;
  TokenIds prompt, target;
};

// Everything the editor loss needs for one bundle. The base model is
// frozen, so localization, factors and reference distributions are
// computed once.
struct EditorExample {
  EditInstance edit;
  LayerSelection selection;
  std::vector<Vector> h_pre;
  std::vector<int> layers;
  std::vector<std::vector<Vector>> x_up, d_up, x_down, d_down;  // raw factors per layer, per target token
  std::vector<LabeledInstance> gen, m_gen;    // edit + rephrases, FG-Gen
  std::vector<LabeledInstance> loc, m_loc;    // T-Loc, FG-Loc
  std::vector<Matrix> loc_ref, m_loc_ref;     // base log-probabilities at target rows
};

EditorExample make_editor_example(const ToyModelWeights& w, const synth::EditBundle& bundle, const Vocabulary& vocab,
                                  int k);
EditorExample make_editor_example(const ToyModelWeights& w, const synth::EditBundle& bundle, const Vocabulary& vocab,
                                  const LayerSelection& selection);

struct EditorLoss {
  double total = 0.0, gen = 0.0, loc = 0.0, m_gen = 0.0, m_loc = 0.0;
};

// Eq-14 loss with deltas applied without gating. L_gen: NLL on the edit
// prompt and rephrases; L_m_gen: NLL on FG-Gen; L_loc / L_m_loc: KL from the
// base distribution on T-Loc / FG-Loc at the answer positions. When `grads`
// is non-null the gradient (times `scale`) is accumulated into it. Throws
// EmptyCategory when a weighted category is empty.
EditorLoss editor_loss(const ToyModelWeights& w, const EditorExample& example, const EditorParams& params,
                       const EditorTrainConfig& config, EditorParams* grads = nullptr, double scale = 1.0);

// Independent per-query pieces, used by tests.
double nll_of(const ToyModelWeights& w, const LabeledInstance& q, const FfnOverrides* ffn);
Matrix answer_log_distribution(const ToyModelWeights& w, const LabeledInstance& q, const FfnOverrides* ffn);
// KL(reference || softmax(logits_rows)), reference given as log-probabilities.
double kl_from(const Matrix& reference, const Matrix& logits_rows);

// Sets x_scale / delta_scale of each net to the RMS of the raw factors.
void fit_input_scales(EditorParams& params, const std::vector<EditorExample>& examples);

using EditorLog = std::function<void(int step, const EditorLoss& loss)>;

EditorParams train_editor(const ToyModelWeights& w, const std::vector<EditorExample>& examples,
                          const EditorTrainConfig& config, const EditorLog& log = nullptr);

Container editor_to_container(const EditorParams& p);
EditorParams editor_from_container(const Container& c);
void save_editor(const std::filesystem::path& path, const EditorParams& p,
                 const std::vector<std::pair<std::string, std::string>>& run_config = {});
EditorParams load_editor(const std::filesystem::path& path);

Container package_to_container(const EditPackage& p);
EditPackage package_from_container(const Container& c);

// Instance helpers shared by the editor, the router and the evaluation code.
EditInstance edit_instance(const synth::EditBundle& bundle, const Vocabulary& vocab);
LabeledInstance labeled(const synth::EditBundle& bundle, const synth::QueryItem& q, bool text_only,
                        const Vocabulary& vocab);
TokenIds answer_tokens(const std::string& answer, const Vocabulary& vocab);

}  // namespace ldke
