// SPDX-License-Identifier: Apache-2.0

#include "ldke/pipeline.hpp"

#include <chrono>
#include <cstdio>
#include <sstream>

#include "ldke/editor.hpp"
#include "ldke/errors.hpp"
#include "ldke/eval.hpp"
#include "ldke/localization.hpp"
#include "ldke/pretrain.hpp"
#include "ldke/rng.hpp"
#include "ldke/router.hpp"
#include "ldke/routing.hpp"
#include "ldke/synth_data.hpp"

namespace ldke {

namespace {

using Snapshot = std::vector<std::pair<std::string, std::string>>;

std::string comment_block(const Snapshot& s) {
  std::string out;
  for (const auto& [k, v] : s) out += "# " + k + "=" + v + "\n";
  return out;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::uint64_t seed_for(const RunConfig& c, const char* tag) { return derive_seed(c.get_u64("seed"), tag); }

std::vector<synth::EditBundle> load_bundles(const RunConfig& c) { return synth::read_dataset(c.get("data")); }

std::vector<synth::EditBundle> slice(const std::vector<synth::EditBundle>& all, int from, int count) {
  if (from < 0 || from > static_cast<int>(all.size())) {
    throw UsageError("bundle range starts at " + std::to_string(from) + " but the dataset has " +
                     std::to_string(all.size()) + " bundles");
  }
  const int end = count < 0 ? static_cast<int>(all.size()) : from + count;
  if (end > static_cast<int>(all.size())) {
    throw UsageError("bundle range [" + std::to_string(from) + ", " + std::to_string(end) + ") exceeds the dataset (" +
                     std::to_string(all.size()) + " bundles)");
  }
  return {all.begin() + from, all.begin() + end};
}

std::vector<synth::EditBundle> held_out(const RunConfig& c, const std::vector<synth::EditBundle>& all) {
  return slice(all, c.get_int("eval_from"), c.get_int("eval_count"));
}

const synth::EditBundle& find_record(const std::vector<synth::EditBundle>& all, int id) {
  for (const auto& b : all)
    if (b.id == id) return b;
  throw DataError("dataset has no record with id " + std::to_string(id));
}

ToyModelWeights load_host(const RunConfig& c, const Vocabulary& vocab) {
  ToyModelWeights w = load_model(c.get("model"));
  if (w.config.vocab_size < vocab.size()) {
    throw DataError("model vocabulary (" + std::to_string(w.config.vocab_size) + ") is smaller than the dataset's (" +
                    std::to_string(vocab.size()) + ")");
  }
  return w;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// -----------------------------------------------------------------------------

void gen_data(const RunConfig& c, std::ostream& out) {
  const synth::Benchmark b = synth::generate_benchmark(seed_for(c, "synth-data"), c.get_int("n_scenes"));
  write_dataset(c.get("out"), b.bundles, c.snapshot());
  write_file_atomic(c.get("vocab_out"), b.vocab.to_table() + comment_block(c.snapshot()));
  out << "wrote " << b.bundles.size() << " bundles to " << c.get("out") << " and " << b.vocab.size()
      << " tokens to " << c.get("vocab_out") << "\n";
}

void pretrain_cmd(const RunConfig& c, std::ostream& out) {
  const auto bundles = load_bundles(c);
  const Vocabulary vocab = synth::make_vocabulary();
  ToyModelConfig mc;
  mc.num_layers = c.get_int("num_layers");
  mc.hidden_dim = c.get_int("hidden_dim");
  mc.ffn_dim = c.get_int("ffn_dim");
  mc.vocab_size = c.get_int("vocab_size");
  mc.num_heads = c.get_int("num_heads");
  mc.max_seq_len = c.get_int("max_seq_len");
  mc.visual_feature_dim = synth::visual_feature_dim();
  mc.num_visual_tokens = synth::kSlots;
  mc.rng_seed = seed_for(c, "model-init");
  mc.validate();
  if (mc.vocab_size < vocab.size()) throw UsageError("vocab_size is smaller than the synthetic vocabulary");
  PretrainConfig pc;
  pc.steps = c.get_int("steps");
  pc.batch_size = c.get_int("batch_size");
  pc.lr = c.get_double("lr");
  pc.warmup_steps = c.get_int("warmup_steps");
  pc.target_accuracy = c.get_double("target_accuracy");
  pc.eval_every = c.get_int("eval_every");
  pc.require_target = c.get_int("require_target") != 0;
  pc.seed = seed_for(c, "pretrain");
  const PretrainData data = build_pretrain_data(bundles, vocab, seed_for(c, "pretrain-pool"));
  std::string log = comment_block(c.snapshot()) + "step,loss,monitor_accuracy\n";
  const auto t0 = std::chrono::steady_clock::now();
  const PretrainResult r = pretrain(mc, data, pc, [&](int step, double loss, double acc) {
    log += std::to_string(step) + "," + num(loss) + "," + num(acc) + "\n";
    out << "step " << step << " loss " << num(loss) << " monitor accuracy " << num(acc) << "\n" << std::flush;
  });
  save_model(c.get("out"), r.weights, c.snapshot());
  write_file_atomic(c.get("log"), log);
  out << "pool accuracy " << num(r.accuracy) << " after " << r.steps_run << " steps (" << data.examples.size()
      << " queries, " << num(seconds_since(t0)) << " s)\n";
}

EditorTrainConfig editor_config(const RunConfig& c) {
  EditorTrainConfig e;
  e.lambda_gen = c.get_double("lambda_gen");
  e.lambda_loc = c.get_double("lambda_loc");
  e.lambda_m_gen = c.get_double("lambda_m_gen");
  e.lambda_m_loc = c.get_double("lambda_m_loc");
  e.rank = c.get_int("rank");
  e.lr = c.get_double("lr");
  e.steps = c.get_int("steps");
  e.batch_size = c.get_int("batch_size");
  e.k = c.get_int("k");
  e.initial_eta = c.get_double("initial_eta");
  e.seed = seed_for(c, "editor");
  e.validate();
  return e;
}

void train_editor_cmd(const RunConfig& c, std::ostream& out) {
  const auto all = load_bundles(c);
  const Vocabulary vocab = synth::make_vocabulary();
  const ToyModelWeights w = load_host(c, vocab);
  const EditorTrainConfig ec = editor_config(c);
  const auto train = slice(all, 0, c.get_int("train_bundles"));
  std::vector<EditorExample> examples(train.size());
  const int n = static_cast<int>(train.size());
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < n; ++i) examples[i] = make_editor_example(w, train[i], vocab, ec.k);
  std::string log = comment_block(c.snapshot()) + "step,total,gen,loc,m_gen,m_loc\n";
  const auto t0 = std::chrono::steady_clock::now();
  const EditorParams p = train_editor(w, examples, ec, [&](int step, const EditorLoss& l) {
    log += std::to_string(step) + "," + num(l.total) + "," + num(l.gen) + "," + num(l.loc) + "," + num(l.m_gen) +
           "," + num(l.m_loc) + "\n";
  });
  save_editor(c.get("out"), p, c.snapshot());
  write_file_atomic(c.get("log"), log);
  out << "trained editor on " << examples.size() << " bundles for " << ec.steps << " steps (" << num(seconds_since(t0))
      << " s)\n";
}

RouterTrainConfig router_config(const RunConfig& c, int hidden_dim) {
  RouterTrainConfig r;
  r.margin = c.get_double("margin");
  r.lambda1 = c.get_double("lambda1");
  r.lambda2 = c.get_double("lambda2");
  r.lambda3 = c.get_double("lambda3");
  r.lr = c.get_double("lr");
  r.steps = c.get_int("steps");
  r.batch_size = c.get_int("batch_size");
  r.d_r = c.get_int("d_r") > 0 ? c.get_int("d_r") : hidden_dim;
  r.d_e = c.get_int("d_e") > 0 ? c.get_int("d_e") : hidden_dim / 2;
  r.seed = seed_for(c, "router");
  r.validate();
  return r;
}

void train_router_cmd(const RunConfig& c, std::ostream& out) {
  const auto all = load_bundles(c);
  const Vocabulary vocab = synth::make_vocabulary();
  const ToyModelWeights w = load_host(c, vocab);
  const RouterTrainConfig rc = router_config(c, w.config.hidden_dim);
  const auto train = slice(all, 0, c.get_int("train_bundles"));
  const int k = c.get_int("k");
  std::vector<RouterSample> samples(train.size());
  const int n = static_cast<int>(train.size());
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < n; ++i) samples[i] = router_sample(w, train[i], vocab, k);
  std::string log = comment_block(c.snapshot()) + "step,total,trip1,trip2,abs,bce\n";
  const auto t0 = std::chrono::steady_clock::now();
  const RouterParams p = train_router(samples, w.config.hidden_dim, rc, [&](int step, const DisentanglementLoss& l) {
    log += std::to_string(step) + "," + num(l.total) + "," + num(l.trip1) + "," + num(l.trip2) + "," + num(l.abs) +
           "," + num(l.bce) + "\n";
  });
  save_router(c.get("out"), p, c.snapshot());
  write_file_atomic(c.get("log"), log);
  out << "trained router on " << samples.size() << " bundles; training routing accuracy "
      << num(routing_accuracy(samples, p)) << " (" << num(seconds_since(t0)) << " s)\n";
}

void localize_cmd(const RunConfig& c, std::ostream& out) {
  const auto all = load_bundles(c);
  const Vocabulary vocab = synth::make_vocabulary();
  const ToyModelWeights w = load_host(c, vocab);
  const auto& b = find_record(all, c.get_int("record"));
  const EditInstance inst = edit_instance(b, vocab);
  const Localization loc = localize(w, inst.image, inst.prompt, inst.target.front(), c.get_int("k"));
  std::ostringstream r;
  r << comment_block(c.snapshot());
  r << "record " << b.id << ": \"" << b.edit_prompt << "\" -> " << b.new_answer << " (was " << b.old_answer
    << ")\n";
  r << "candidate set C = {";
  for (std::size_t i = 0; i < loc.selection.candidate_set.size(); ++i) r << (i ? "," : "") << loc.selection.candidate_set[i];
  r << "}\nlayer,p_pre,p_post,c\n";
  char buf[128];
  for (std::size_t l = 0; l < loc.profile.c.size(); ++l) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g\n", l, loc.profile.p_pre[l], loc.profile.p_post[l],
                  loc.profile.c[l]);
    r << buf;
  }
  r << "edit layers = {";
  for (std::size_t i = 0; i < loc.selection.edit_layers.size(); ++i) r << (i ? "," : "") << loc.selection.edit_layers[i];
  r << "}, l_min = " << loc.selection.l_min << "\nforward_calls_used = " << loc.profile.forward_calls_used << "\n";
  if (c.get("out").empty()) {
    out << r.str();
  } else {
    write_file_atomic(c.get("out"), r.str());
    out << "wrote localization report to " << c.get("out") << "\n";
  }
}

void edit_cmd(const RunConfig& c, std::ostream& out) {
  const auto all = load_bundles(c);
  const Vocabulary vocab = synth::make_vocabulary();
  const ToyModelWeights w = load_host(c, vocab);
  const EditorParams editor = load_editor(c.get("editor"));
  const RouterParams router = load_router(c.get("router"));
  const auto& b = find_record(all, c.get_int("record"));
  const EditPackage p = make_edit(w, edit_instance(b, vocab), c.get_int("k"), editor, router, b.id);
  Container ct = package_to_container(p);
  for (const auto& [k, v] : c.snapshot()) ct.set("run." + k, v);
  write_container(c.get("out"), ct);
  out << "edit package for record " << b.id << " (layers";
  for (int l : p.selection.edit_layers) out << " " << l;
  out << ") written to " << c.get("out") << "\n";
}

void route_cmd(const RunConfig& c, std::ostream& out) {
  const auto all = load_bundles(c);
  const Vocabulary vocab = synth::make_vocabulary();
  const ToyModelWeights w = load_host(c, vocab);
  const RouterParams router = load_router(c.get("router"));
  const EditPackage p = package_from_container(read_container(c.get("package")));
  const auto& b = find_record(all, c.get_int("record"));
  const std::string q = c.get("query");
  std::string prompt;
  bool text_only = false;
  if (q == "edit") {
    prompt = b.edit_prompt;
  } else {
    const auto colon = q.find(':');
    if (colon == std::string::npos) throw UsageError("query must be 'edit' or <category>:<index>, got '" + q + "'");
    const std::string cat = q.substr(0, colon);
    int idx = -1;
    try {
      idx = std::stoi(q.substr(colon + 1));
    } catch (const std::exception&) {
      throw UsageError("bad query index in '" + q + "'");
    }
    const std::vector<synth::QueryItem>* items = nullptr;
    if (cat == "rephrases") items = &b.rephrases;
    else if (cat == "fg_gen") items = &b.fg_gen;
    else if (cat == "fg_loc") items = &b.fg_loc;
    else if (cat == "t_loc") items = &b.t_loc, text_only = true;
    else if (cat == "port") items = &b.port;
    else throw UsageError("unknown query category '" + cat + "'");
    if (idx < 0 || idx >= static_cast<int>(items->size())) throw UsageError("query index out of range in '" + q + "'");
    prompt = (*items)[idx].prompt;
  }
  const Matrix image = text_only ? synth::null_image() : synth::render_scene(b.scene);
  const RoutedAnswer r = routed_predict(w, {p}, router, image, vocab.tokenize(prompt));
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9f", r.decisions.front().s);
  out << "query \"" << prompt << "\"\ns=" << buf << " g=" << (r.decisions.front().g ? 1 : 0)
      << " threshold=" << kGateThreshold << "\nanswer: " << vocab.detokenize(r.answer) << "\n";
}

void eval_cmd(const RunConfig& c, std::ostream& out) {
  const auto all = load_bundles(c);
  const Vocabulary vocab = synth::make_vocabulary();
  const ToyModelWeights w = load_host(c, vocab);
  const EditorParams editor = load_editor(c.get("editor"));
  const RouterParams router = load_router(c.get("router"));
  const auto bundles = held_out(c, all);
  const auto t0 = std::chrono::steady_clock::now();
  EvalReport r = evaluate_edits(w, editor, router, bundles, vocab, c.get_int("k"));
  r.config = c.snapshot();
  r.label = "LDKE (desk scale)";
  const std::string table = report_table({&r});
  write_file_atomic(c.get("out"), report_csv(r));
  write_file_atomic(c.get("table_out"), comment_block(r.config) + table);
  out << table << "routing accuracy " << num(r.routing_accuracy) << "; " << bundles.size() << " bundles in "
      << num(seconds_since(t0)) << " s\n";
}

void ablate_sim_cmd(const RunConfig& c, std::ostream& out) {
  const auto all = load_bundles(c);
  const Vocabulary vocab = synth::make_vocabulary();
  const ToyModelWeights w = load_host(c, vocab);
  const RouterParams router = load_router(c.get("router"));
  const SimilarityTable t = ablation_similarity_table(w, router, held_out(c, all), vocab, c.get_int("k"));
  const std::string csv = similarity_csv(t, c.snapshot());
  write_file_atomic(c.get("out"), csv);
  out << csv.substr(comment_block(c.snapshot()).size());
}

void ablate_layers_cmd(const RunConfig& c, std::ostream& out) {
  const auto all = load_bundles(c);
  const Vocabulary vocab = synth::make_vocabulary();
  const ToyModelWeights w = load_host(c, vocab);
  const EditorParams editor = load_editor(c.get("editor"));
  const RouterParams router = load_router(c.get("router"));
  LayerAblation a = ablation_layer_strategy(w, editor, router, held_out(c, all), vocab, c.get_int("k"));
  a.fast_localization.config = c.snapshot();
  a.last_k.config = c.snapshot();
  const std::string table = report_table({&a.last_k, &a.fast_localization});
  write_file_atomic(c.get("out"), report_csv(a.last_k) + report_csv(a.fast_localization));
  write_file_atomic(c.get("table_out"), comment_block(c.snapshot()) + table);
  out << table;
}

void seq_edit_cmd(const RunConfig& c, std::ostream& out) {
  const auto all = load_bundles(c);
  const Vocabulary vocab = synth::make_vocabulary();
  const ToyModelWeights w = load_host(c, vocab);
  const EditorParams editor = load_editor(c.get("editor"));
  const RouterParams router = load_router(c.get("router"));
  const int n = c.get_int("n_edits");
  const auto bundles = slice(all, c.get_int("eval_from"), n);
  const auto steps = sequential_edit(w, editor, router, bundles, vocab, c.get_int("k"), n);
  const std::string csv = sequential_csv(steps, c.snapshot());
  write_file_atomic(c.get("out"), csv);
  out << csv.substr(comment_block(c.snapshot()).size());
}

void forward_cost_cmd(const RunConfig& c, std::ostream& out) {
  const auto all = load_bundles(c);
  const Vocabulary vocab = synth::make_vocabulary();
  const ToyModelWeights w = load_host(c, vocab);
  const ForwardCostReport r = forward_count_report(w, held_out(c, all), vocab, c.get_int("k"));
  write_file_atomic(c.get("out"), forward_cost_csv(r, c.snapshot()));
  out << "localizations " << r.localizations << ", single-pass " << r.single_pass << ", max forwards "
      << r.max_forward_calls << ", tracing needs >= " << r.tracing_lower_bound << " forwards; mean "
      << num(r.mean_ms) << " ms per localization\n";
}

}  // namespace

void run_subcommand(const RunConfig& c, std::ostream& out) {
  const std::string& s = c.subcommand();
  if (s == "gen-data") return gen_data(c, out);
  if (s == "pretrain") return pretrain_cmd(c, out);
  if (s == "train-editor") return train_editor_cmd(c, out);
  if (s == "train-router") return train_router_cmd(c, out);
  if (s == "localize") return localize_cmd(c, out);
  if (s == "edit") return edit_cmd(c, out);
  if (s == "route") return route_cmd(c, out);
  if (s == "eval") return eval_cmd(c, out);
  if (s == "ablate-sim") return ablate_sim_cmd(c, out);
  if (s == "ablate-layers") return ablate_layers_cmd(c, out);
  if (s == "seq-edit") return seq_edit_cmd(c, out);
  if (s == "forward-cost") return forward_cost_cmd(c, out);
  throw UsageError("unknown subcommand '" + s + "'");
}

}  // namespace ldke
