// SPDX-License-Identifier: Apache-2.0

#include "ldke/eval.hpp"

#include <chrono>
#include <cstdio>

#include "ldke/errors.hpp"
#include "ldke/localization.hpp"

namespace ldke {

namespace {

struct Tally {
  int n = 0, hit = 0;
  void add(bool ok) {
    ++n;
    hit += ok;
  }
  std::optional<double> value() const {
    if (!n) return std::nullopt;
    return static_cast<double>(hit) / n;
  }
};

std::string fmt(const std::optional<double>& v) {
  if (!v) return "absent";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", *v);
  return buf;
}

std::string fmt(double v) { return fmt(std::optional<double>(v)); }

std::string config_lines(const ConfigSnapshot& c) {
  std::string s;
  for (const auto& [k, v] : c) s += "# " + k + "=" + v + "\n";
  return s;
}

}  // namespace

BundleMetrics evaluate_bundle(const ToyModelWeights& w, const std::vector<EditPackage>& packages,
                              const RouterParams& router, const synth::EditBundle& b, const Vocabulary& vocab) {
  BundleMetrics m;
  m.bundle_id = b.id;
  const Matrix image = synth::render_scene(b.scene);
  const Matrix null = synth::null_image();

  auto exact = [&](const Matrix& img, const std::string& prompt, const std::string& answer, Tally& t) {
    const RoutedAnswer r = routed_predict(w, packages, router, img, vocab.tokenize(prompt));
    t.add(r.answer == answer_tokens(answer, vocab));
    ++m.in_scope;
    m.in_scope_open += r.applied >= 0;
  };
  auto kept = [&](const Matrix& img, const std::string& prompt, Tally& t, bool count_closed) {
    const TokenIds p = vocab.tokenize(prompt);
    const RoutedAnswer r = routed_predict(w, packages, router, img, p);
    const bool same = r.answer == predict_answer(w, img, p);
    t.add(same);
    ++m.out_scope;
    m.out_scope_closed += r.applied < 0;
    if (count_closed && r.applied < 0) {
      ++m.loc_closed;
      m.loc_closed_kept += same;
    }
  };

  Tally rel, gen, fg_gen, port, loc, fg_loc;
  exact(image, b.edit_prompt, b.new_answer, rel);
  for (const auto& q : b.rephrases) exact(image, q.prompt, q.answer, gen);
  for (const auto& q : b.fg_gen) exact(image, q.prompt, q.answer, fg_gen);
  for (const auto& q : b.t_loc) kept(null, q.prompt, loc, true);
  for (const auto& q : b.fg_loc) kept(image, q.prompt, fg_loc, false);
  // Portability is not routed scope: it does not enter the routing counts.
  const int in_scope = m.in_scope, in_open = m.in_scope_open;
  for (const auto& q : b.port) exact(image, q.prompt, q.answer, port);
  m.in_scope = in_scope;
  m.in_scope_open = in_open;

  m.reliability = rel.value();
  m.generality = gen.value();
  m.fg_gen = fg_gen.value();
  m.portability = port.value();
  m.locality = loc.value();
  m.fg_loc = fg_loc.value();
  return m;
}

BundleMetrics aggregate(const std::vector<BundleMetrics>& rows) {
  BundleMetrics a;
  a.bundle_id = -1;
  auto mean = [&](std::optional<double> BundleMetrics::*f) -> std::optional<double> {
    double s = 0.0;
    int n = 0;
    for (const auto& r : rows) {
      if (r.*f) {
        s += *(r.*f);
        ++n;
      }
    }
    if (!n) return std::nullopt;
    return s / n;
  };
  a.reliability = mean(&BundleMetrics::reliability);
  a.generality = mean(&BundleMetrics::generality);
  a.locality = mean(&BundleMetrics::locality);
  a.fg_gen = mean(&BundleMetrics::fg_gen);
  a.fg_loc = mean(&BundleMetrics::fg_loc);
  a.portability = mean(&BundleMetrics::portability);
  for (const auto& r : rows) {
    a.loc_closed += r.loc_closed;
    a.loc_closed_kept += r.loc_closed_kept;
    a.in_scope += r.in_scope;
    a.in_scope_open += r.in_scope_open;
    a.out_scope += r.out_scope;
    a.out_scope_closed += r.out_scope_closed;
  }
  return a;
}

std::string to_string(LayerStrategy s) { return s == LayerStrategy::last_k ? "last_k" : "fast_localization"; }

LayerStrategy parse_layer_strategy(const std::string& s) {
  if (s == "last_k") return LayerStrategy::last_k;
  if (s == "fast_localization") return LayerStrategy::fast_localization;
  throw UsageError("unknown layer strategy '" + s + "' (expected last_k or fast_localization)");
}

EvalReport evaluate_edits(const ToyModelWeights& w, const EditorParams& editor, const RouterParams& router,
                          const std::vector<synth::EditBundle>& bundles, const Vocabulary& vocab, int k,
                          LayerStrategy strategy) {
  EvalReport r;
  r.label = to_string(strategy);
  r.rows.resize(bundles.size());
  const int n = static_cast<int>(bundles.size());
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < n; ++i) {
    const EditInstance inst = edit_instance(bundles[i], vocab);
    const EditPackage p =
        strategy == LayerStrategy::last_k
            ? make_edit_with_selection(w, inst, last_k_layers(w.config.num_layers, k), editor, router, bundles[i].id)
            : make_edit(w, inst, k, editor, router, bundles[i].id);
    r.rows[i] = evaluate_bundle(w, {p}, router, bundles[i], vocab);
  }
  r.aggregate = aggregate(r.rows);
  const int total = r.aggregate.in_scope + r.aggregate.out_scope;
  r.routing_accuracy =
      total ? static_cast<double>(r.aggregate.in_scope_open + r.aggregate.out_scope_closed) / total : 0.0;
  return r;
}

std::string report_csv(const EvalReport& r) {
  std::string s = config_lines(r.config);
  s += "# label=" + r.label + "\n";
  s += "bundle,reliability,generality,locality,fg_gen,fg_loc,portability,in_scope_open,in_scope,out_scope_closed,"
       "out_scope\n";
  auto row = [&](const std::string& id, const BundleMetrics& m) {
    s += id + "," + fmt(m.reliability) + "," + fmt(m.generality) + "," + fmt(m.locality) + "," + fmt(m.fg_gen) +
         "," + fmt(m.fg_loc) + "," + fmt(m.portability) + "," + std::to_string(m.in_scope_open) + "," +
         std::to_string(m.in_scope) + "," + std::to_string(m.out_scope_closed) + "," +
         std::to_string(m.out_scope) + "\n";
  };
  for (const auto& m : r.rows) row(std::to_string(m.bundle_id), m);
  row("aggregate", r.aggregate);
  s += "# routing_accuracy=" + fmt(r.routing_accuracy) + "\n";
  return s;
}

std::string report_table(const std::vector<const EvalReport*>& reports) {
  std::string s;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-20s %7s %7s %7s %7s %7s %7s\n", "Method", "Rel.", "Gen.", "Loc.", "FG-Gen",
                "FG-Loc", "Port.");
  s += buf;
  auto pct = [](const std::optional<double>& v) {
    char b[16];
    if (!v) return std::string("absent");
    std::snprintf(b, sizeof b, "%.2f", 100.0 * *v);
    return std::string(b);
  };
  for (const auto* r : reports) {
    const auto& a = r->aggregate;
    std::snprintf(buf, sizeof buf, "%-20s %7s %7s %7s %7s %7s %7s\n", r->label.c_str(), pct(a.reliability).c_str(),
                  pct(a.generality).c_str(), pct(a.locality).c_str(), pct(a.fg_gen).c_str(), pct(a.fg_loc).c_str(),
                  pct(a.portability).c_str());
    s += buf;
  }
  return s;
}

RouterSample router_sample(const ToyModelWeights& w, const synth::EditBundle& b, const Vocabulary& vocab, int k) {
  const EditInstance inst = edit_instance(b, vocab);
  const Localization loc = localize(w, inst.image, inst.prompt, inst.target.front(), k);
  RouterSample s;
  s.layer = loc.selection.l_min;
  s.edit = loc.taps.h_pre[s.layer];
  const Matrix null = synth::null_image();
  auto h = [&](const synth::QueryItem& q, bool text_only) {
    return router_input(w, text_only ? null : inst.image, vocab.tokenize(q.prompt), s.layer);
  };
  for (const auto& q : b.rephrases) s.rephrases.push_back(h(q, false));
  for (const auto& q : b.fg_gen) s.fg_gen.push_back(h(q, false));
  for (const auto& q : b.fg_loc) s.fg_loc.push_back(h(q, false));
  for (const auto& q : b.t_loc) s.t_loc.push_back(h(q, true));
  return s;
}

SimilarityTable ablation_similarity_table(const ToyModelWeights& w, const RouterParams& router,
                                          const std::vector<synth::EditBundle>& bundles, const Vocabulary& vocab,
                                          int k) {
  SimilarityTable t;
  double se = 0, sr = 0, st = 0, sg = 0, sl = 0;
  long ne = 0, nr = 0, nt = 0, ng = 0, nl = 0;
  for (const auto& b : bundles) {
    const RouterSample s = router_sample(w, b, vocab, k);
    const RouterEmbedding anchor = router_embed(s.edit, router, s.layer).embedding;
    auto acc = [&](const std::vector<Vector>& hs, double& sum, long& n) {
      for (const auto& h : hs) {
        sum += gate(router_embed(h, router, s.layer).embedding, anchor).s;
        ++n;
      }
    };
    acc({s.edit}, se, ne);
    acc(s.rephrases, sr, nr);
    acc(s.t_loc, st, nt);
    acc(s.fg_gen, sg, ng);
    acc(s.fg_loc, sl, nl);
    ++t.bundles;
  }
  auto mean = [](double s, long n) { return n ? s / n : 0.0; };
  t.edit = mean(se, ne);
  t.rephrases = mean(sr, nr);
  t.t_loc = mean(st, nt);
  t.fg_gen = mean(sg, ng);
  t.fg_loc = mean(sl, nl);
  return t;
}

std::string similarity_csv(const SimilarityTable& t, const ConfigSnapshot& config) {
  std::string s = config_lines(config);
  s += "category,mean_similarity\n";
  s += "edit," + fmt(t.edit) + "\n";
  s += "rephrases," + fmt(t.rephrases) + "\n";
  s += "t_loc," + fmt(t.t_loc) + "\n";
  s += "fg_gen," + fmt(t.fg_gen) + "\n";
  s += "fg_loc," + fmt(t.fg_loc) + "\n";
  return s;
}

LayerAblation ablation_layer_strategy(const ToyModelWeights& w, const EditorParams& editor,
                                      const RouterParams& router, const std::vector<synth::EditBundle>& bundles,
                                      const Vocabulary& vocab, int k) {
  LayerAblation a;
  a.fast_localization = evaluate_edits(w, editor, router, bundles, vocab, k, LayerStrategy::fast_localization);
  a.last_k = evaluate_edits(w, editor, router, bundles, vocab, k, LayerStrategy::last_k);
  return a;
}

std::vector<SequentialStep> sequential_edit(const ToyModelWeights& w, const EditorParams& editor,
                                            const RouterParams& router,
                                            const std::vector<synth::EditBundle>& bundles, const Vocabulary& vocab,
                                            int k, int n_edits) {
  if (n_edits < 1 || n_edits > static_cast<int>(bundles.size())) {
    throw UsageError("sequential_edit: need " + std::to_string(n_edits) + " bundles, have " +
                     std::to_string(bundles.size()));
  }
  std::vector<EditPackage> packages;
  std::vector<SequentialStep> steps;
  for (int i = 0; i < n_edits; ++i) {
    packages.push_back(make_edit(w, edit_instance(bundles[i], vocab), k, editor, router, bundles[i].id));
    SequentialStep st;
    st.step = i + 1;
    std::vector<BundleMetrics> rows(i + 1);
    std::vector<long> checked(i + 1, 0), violations(i + 1, 0);
#pragma omp parallel for schedule(dynamic)
    for (int j = 0; j <= i; ++j) {
      const auto& b = bundles[j];
      rows[j] = evaluate_bundle(w, packages, router, b, vocab);
      const Matrix image = synth::render_scene(b.scene);
      auto check = [&](const Matrix& img, const std::string& prompt) {
        const TokenIds p = vocab.tokenize(prompt);
        const RoutedForward r = routed_forward(w, packages, router, img, p);
        if (r.applied >= 0) return;
        ++checked[j];
        violations[j] += !(r.logits == forward(w, img, p, false).logits);
      };
      check(image, b.edit_prompt);
      for (const auto& q : b.rephrases) check(image, q.prompt);
      for (const auto& q : b.fg_gen) check(image, q.prompt);
      for (const auto& q : b.fg_loc) check(image, q.prompt);
      for (const auto& q : b.t_loc) check(synth::null_image(), q.prompt);
      for (const auto& q : b.port) check(image, q.prompt);
    }
    st.aggregate = aggregate(rows);
    for (int j = 0; j <= i; ++j) {
      st.pass_through_checked += checked[j];
      st.pass_through_violations += violations[j];
    }
    steps.push_back(st);
  }
  return steps;
}

std::string sequential_csv(const std::vector<SequentialStep>& steps, const ConfigSnapshot& config) {
  std::string s = config_lines(config);
  s += "step,reliability,generality,locality,fg_gen,fg_loc,portability,pass_through_checked,"
       "pass_through_violations\n";
  for (const auto& st : steps) {
    const auto& a = st.aggregate;
    s += std::to_string(st.step) + "," + fmt(a.reliability) + "," + fmt(a.generality) + "," + fmt(a.locality) +
         "," + fmt(a.fg_gen) + "," + fmt(a.fg_loc) + "," + fmt(a.portability) + "," +
         std::to_string(st.pass_through_checked) + "," + std::to_string(st.pass_through_violations) + "\n";
  }
  return s;
}

ForwardCostReport forward_count_report(const ToyModelWeights& w, const std::vector<synth::EditBundle>& bundles,
                                       const Vocabulary& vocab, int k) {
  ForwardCostReport r;
  r.tracing_lower_bound = w.config.num_layers;
  double total_ms = 0.0;
  for (const auto& b : bundles) {
    const EditInstance inst = edit_instance(b, vocab);
    const auto t0 = std::chrono::steady_clock::now();
    const Localization loc = localize(w, inst.image, inst.prompt, inst.target.front(), k);
    total_ms += std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    ++r.localizations;
    r.single_pass += loc.profile.forward_calls_used == 1;
    r.max_forward_calls = std::max(r.max_forward_calls, loc.profile.forward_calls_used);
  }
  r.mean_ms = r.localizations ? total_ms / r.localizations : 0.0;
  return r;
}

std::string forward_cost_csv(const ForwardCostReport& r, const ConfigSnapshot& config) {
  std::string s = config_lines(config);
  s += "localizations,single_pass,max_forward_calls,tracing_lower_bound\n";
  s += std::to_string(r.localizations) + "," + std::to_string(r.single_pass) + "," +
       std::to_string(r.max_forward_calls) + "," + std::to_string(r.tracing_lower_bound) + "\n";
  return s;
}

}  // namespace ldke
