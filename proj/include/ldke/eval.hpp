// SPDX-License-Identifier: Apache-2.0
//
// Edit metrics, ablations and sequential editing.
//
// Rel / Gen / FG-Gen / Port: exact match of the routed greedy answer with
// the query's post-edit answer. Loc / FG-Loc: the routed answer equals the
// base model's answer. Each metric is the mean over its query set; an empty
// set is reported as absent.

#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ldke/editor.hpp"
#include "ldke/router.hpp"
#include "ldke/routing.hpp"
#include "ldke/synth_data.hpp"

namespace ldke {

struct BundleMetrics {
  int bundle_id = 0;
  std::optional<double> reliability, generality, locality, fg_gen, fg_loc, portability;
  // Locality queries whose gates all stayed closed, and how many of those
  // kept the base answer.
  int loc_closed = 0, loc_closed_kept = 0;
  // In-scope queries (edit, rephrases, FG-Gen) that opened a gate, and
  // out-of-scope queries (FG-Loc, T-Loc) that kept every gate closed.
  int in_scope = 0, in_scope_open = 0, out_scope = 0, out_scope_closed = 0;
};

using ConfigSnapshot = std::vector<std::pair<std::string, std::string>>;

struct EvalReport {
  std::string label;
  std::vector<BundleMetrics> rows;
  BundleMetrics aggregate;  // means over bundles with the metric present
  double routing_accuracy = 0.0;
  ConfigSnapshot config;
};

// Evaluates one bundle under the given packages (nearest-anchor
// arbitration).
BundleMetrics evaluate_bundle(const ToyModelWeights& w, const std::vector<EditPackage>& packages,
                              const RouterParams& router, const synth::EditBundle& bundle, const Vocabulary& vocab);

BundleMetrics aggregate(const std::vector<BundleMetrics>& rows);

enum class LayerStrategy { fast_localization, last_k };
std::string to_string(LayerStrategy s);
// Throws UsageError for an unknown name.
LayerStrategy parse_layer_strategy(const std::string& s);

// Builds one package per bundle with the strategy and evaluates it alone.
EvalReport evaluate_edits(const ToyModelWeights& w, const EditorParams& editor, const RouterParams& router,
                          const std::vector<synth::EditBundle>& bundles, const Vocabulary& vocab, int k,
                          LayerStrategy strategy = LayerStrategy::fast_localization);

// CSV: header, one row per bundle, then an "aggregate" row. Absent values
// are written as "absent". The resolved config precedes the table as
// "# key=value" lines.
std::string report_csv(const EvalReport& r);
// Fixed-width table with the Rel./Gen./Loc./FG-Gen/FG-Loc/Port. columns.
std::string report_table(const std::vector<const EvalReport*>& reports);

// Mean s(anchor, query) per category.
struct SimilarityTable {
  double edit = 0.0, rephrases = 0.0, t_loc = 0.0, fg_gen = 0.0, fg_loc = 0.0;
  int bundles = 0;
};
SimilarityTable ablation_similarity_table(const ToyModelWeights& w, const RouterParams& router,
                                          const std::vector<synth::EditBundle>& bundles, const Vocabulary& vocab,
                                          int k);
std::string similarity_csv(const SimilarityTable& t, const ConfigSnapshot& config);

struct LayerAblation {
  EvalReport fast_localization, last_k;
};
LayerAblation ablation_layer_strategy(const ToyModelWeights& w, const EditorParams& editor,
                                      const RouterParams& router, const std::vector<synth::EditBundle>& bundles,
                                      const Vocabulary& vocab, int k);

struct SequentialStep {
  int step = 0;  // number of packages applied
  BundleMetrics aggregate;  // over the bundles edited so far
  long pass_through_checked = 0;  // queries with every gate closed
  long pass_through_violations = 0;  // of those, logits not bit-identical to base
};

// Applies edits one after another; after each edit every bundle edited so
// far is re-evaluated against all packages. Throws UsageError when fewer
// bundles than n_edits are given.
std::vector<SequentialStep> sequential_edit(const ToyModelWeights& w, const EditorParams& editor,
                                            const RouterParams& router,
                                            const std::vector<synth::EditBundle>& bundles, const Vocabulary& vocab,
                                            int k, int n_edits);
std::string sequential_csv(const std::vector<SequentialStep>& steps, const ConfigSnapshot& config);

struct ForwardCostReport {
  int localizations = 0;
  int single_pass = 0;  // localizations that used exactly one forward
  std::uint64_t max_forward_calls = 0;
  double mean_ms = 0.0;  // wall clock per localization (not part of the CSV)
  int tracing_lower_bound = 0;  // forwards an intervention-based tracer needs at least
};
ForwardCostReport forward_count_report(const ToyModelWeights& w, const std::vector<synth::EditBundle>& bundles,
                                       const Vocabulary& vocab, int k);
std::string forward_cost_csv(const ForwardCostReport& r, const ConfigSnapshot& config);

// Router training/eval inputs for one bundle at its localized l_min.
RouterSample router_sample(const ToyModelWeights& w, const synth::EditBundle& bundle, const Vocabulary& vocab,
                           int k);

}  // namespace ldke
