// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "ldke/editor.hpp"
#include "ldke/errors.hpp"
#include "ldke/optim.hpp"
#include "test_util.hpp"

using namespace ldke;
using namespace ldke::testing;

namespace {

double oracle_gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

// Editor net forward written out with explicit loops.
Vector straight_line(const Vector& z, const EditorNet& n, const LayerScale& s) {
  const int D = n.dim(), r = n.a1.cols;
  auto low_rank = [&](const Matrix& a, const Matrix& b, const Vector& x) {
    Vector v(r, 0.0), u(D, 0.0);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < D; ++j) v[i] += b(i, j) * x[j];
    for (int i = 0; i < D; ++i)
      for (int j = 0; j < r; ++j) u[i] += a(i, j) * v[j];
    return u;
  };
  const Vector u1 = low_rank(n.a1, n.b1, z);
  Vector m(D);
  for (int i = 0; i < D; ++i) m[i] = z[i] + oracle_gelu(s.gamma1(0, i) * (u1[i] + n.bias(0, i)) + s.beta1(0, i));
  const Vector u2 = low_rank(n.a2, n.b2, m);
  Vector out(D);
  for (int i = 0; i < D; ++i) out[i] = m[i] + oracle_gelu(s.gamma2(0, i) * u2[i] + s.beta2(0, i));
  return out;
}

void randomize(EditorParams& p, Rng& rng, double scale = 0.3) {
  for (auto& [name, m] : named_params(p)) {
    const bool is_gamma = name.find("gamma") != std::string::npos;
    const bool is_eta = name.find("log_eta") != std::string::npos;
    for (double& v : m->data) {
      if (is_eta) v = std::log(0.05) + 0.2 * rng.normal();
      else v = (is_gamma ? 1.0 : 0.0) + scale * rng.normal();
    }
  }
}

void set_eta(EditorParams& p, double eta) {
  for (auto* n : {&p.up, &p.down})
    for (auto& [l, s] : n->layers) s.log_eta(0, 0) = std::log(eta);
}

struct Fixture {
  ToyModelConfig config = synth_config();
  ToyModelWeights w = lively_weights(config, 11);
  synth::Benchmark bench = synth::generate_benchmark(5, 12);
  RouterParams router = RouterParams::initialize(config.hidden_dim, config.hidden_dim, config.hidden_dim / 2, 3);
  EditorParams editor = EditorParams::initialize(config, 2, 0.1, 4);

  EditInstance instance(int i) const { return edit_instance(bench.bundles.at(i), bench.vocab); }
};

}  // namespace

TEST(EditorForward, ZeroInputAtInitIsZero) {
  const auto c = tiny_config();
  const EditorParams p = EditorParams::initialize(c, 2, 0.1, 1);
  for (WeightClass cl : {WeightClass::up, WeightClass::down}) {
    const int D = p.net(cl).dim();
    EXPECT_EQ(D, c.hidden_dim + c.ffn_dim);
    const EditorTrace t = editor_forward(Vector(D, 0.0), 1, p, cl);
    ASSERT_EQ(static_cast<int>(t.out.size()), D);
    for (double v : t.out) EXPECT_EQ(v, 0.0);
  }
}

TEST(EditorForward, InitIsIdentity) {
  const auto c = tiny_config();
  const EditorParams p = EditorParams::initialize(c, 2, 0.1, 1);
  Rng rng(2);
  const Vector z = random_vector(rng, p.up.dim());
  EXPECT_EQ(editor_forward(z, 1, p, WeightClass::up).out, z);
}

TEST(EditorForward, MatchesStraightLineOracle) {
  const auto c = synth_config();
  EditorParams p = EditorParams::initialize(c, 3, 0.1, 1);
  Rng rng(3);
  randomize(p, rng);
  for (int trial = 0; trial < 10; ++trial) {
    for (WeightClass cl : {WeightClass::up, WeightClass::down}) {
      const int layer = 2 + trial % 2;
      const Vector z = random_vector(rng, p.net(cl).dim(), 1.5);
      const Vector out = editor_forward(z, layer, p, cl).out;
      const Vector oracle = straight_line(z, p.net(cl), p.net(cl).layer(layer));
      ASSERT_EQ(out.size(), z.size());
      EXPECT_LT(max_abs_diff(out, oracle), 1e-6);
    }
  }
}

TEST(EditorForward, Errors) {
  const auto c = synth_config();
  const EditorParams p = EditorParams::initialize(c, 2, 0.1, 1);
  EXPECT_THROW(editor_forward(Vector(p.up.dim()), 0, p, WeightClass::up), UnknownLayer);
  EXPECT_THROW(editor_forward(Vector(p.up.dim() + 1), 2, p, WeightClass::up), ShapeMismatch);
  EXPECT_THROW(EditorParams::initialize(c, 0, 0.1, 1), UsageError);
  EXPECT_THROW(EditorParams::initialize(c, 2, 0.0, 1), UsageError);
}

TEST(EditorParams, SharedShapesAndDefaultRank) {
  const ToyModelConfig c;
  EXPECT_EQ(default_editor_rank(c), 8);
  const EditorParams p = EditorParams::initialize(c, default_editor_rank(c), 0.1, 1);
  EXPECT_EQ(p.up.a1.rows, c.hidden_dim + c.ffn_dim);
  EXPECT_EQ(p.up.a1.cols, 8);
  EXPECT_EQ(p.down.b2.rows, 8);
  EXPECT_EQ(p.up.x_dim, c.hidden_dim);
  EXPECT_EQ(p.down.x_dim, c.ffn_dim);
  EXPECT_EQ(p.up.layers.size(), 4u);
  for (const auto& [l, s] : p.up.layers) {
    EXPECT_GE(l, 4);
    EXPECT_GT(std::exp(s.log_eta(0, 0)), 0.0);
  }
}

TEST(BuildDelta, ZeroEtaGivesZero) {
  const auto c = tiny_config();
  EditorParams p = EditorParams::initialize(c, 2, 0.1, 1);
  set_eta(p, 0.0);
  Rng rng(4);
  const std::vector<Vector> up = {random_vector(rng, p.up.dim()), random_vector(rng, p.up.dim())};
  const std::vector<Vector> down = {random_vector(rng, p.down.dim()), random_vector(rng, p.down.dim())};
  const WeightDelta d = build_delta(up, down, 1, p);
  EXPECT_EQ(d.delta_up.rows, c.hidden_dim);
  EXPECT_EQ(d.delta_up.cols, c.ffn_dim);
  EXPECT_EQ(d.delta_down.rows, c.ffn_dim);
  EXPECT_EQ(d.delta_down.cols, c.hidden_dim);
  for (double v : d.delta_up.data) EXPECT_EQ(v, 0.0);
  for (double v : d.delta_down.data) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(d.source_rank, 2);
}

TEST(BuildDelta, SingleTokenIsRankOne) {
  const auto c = tiny_config();
  const EditorParams p = EditorParams::initialize(c, 2, 0.1, 1);
  Rng rng(5);
  const WeightDelta d =
      build_delta({random_vector(rng, p.up.dim())}, {random_vector(rng, p.down.dim())}, 1, p);
  for (const Matrix* m : {&d.delta_up, &d.delta_down}) {
    const auto sv = singular_values(*m);
    ASSERT_GT(sv[0], 0.0);
    for (std::size_t i = 1; i < sv.size(); ++i) EXPECT_LT(sv[i], 1e-6 * sv[0]);
  }
  EXPECT_EQ(d.source_rank, 1);
}

TEST(BuildDelta, MatchesStackedProduct) {
  const auto c = tiny_config();
  EditorParams p = EditorParams::initialize(c, 2, 0.1, 1);
  Rng rng(6);
  randomize(p, rng);
  const int T = 3;
  std::vector<Vector> up, down;
  for (int t = 0; t < T; ++t) {
    up.push_back(random_vector(rng, p.up.dim()));
    down.push_back(random_vector(rng, p.down.dim()));
  }
  const WeightDelta d = build_delta(up, down, 1, p);
  auto oracle = [&](const std::vector<Vector>& outs, const EditorNet& n) {
    // X~ is T x x_dim, D~ is T x delta_dim; dW = -eta X~^T D~.
    Matrix X(T, n.x_dim), G(T, n.delta_dim), out(n.x_dim, n.delta_dim);
    for (int t = 0; t < T; ++t) {
      for (int i = 0; i < n.x_dim; ++i) X(t, i) = outs[t][i];
      for (int j = 0; j < n.delta_dim; ++j) G(t, j) = outs[t][n.x_dim + j];
    }
    const double eta = std::exp(n.layer(1).log_eta(0, 0));
    for (int i = 0; i < n.x_dim; ++i)
      for (int j = 0; j < n.delta_dim; ++j) {
        double s = 0.0;
        for (int t = 0; t < T; ++t) s += X(t, i) * G(t, j);
        out(i, j) = -eta * s;
      }
    return out;
  };
  const Matrix ou = oracle(up, p.up), od = oracle(down, p.down);
  EXPECT_LT(max_abs_diff(d.delta_up.data, ou.data), 1e-6);
  EXPECT_LT(max_abs_diff(d.delta_down.data, od.data), 1e-6);
  EXPECT_LE(numerical_rank(d.delta_up), T);
}

TEST(BuildDelta, PartitionMismatch) {
  const auto c = tiny_config();
  const EditorParams p = EditorParams::initialize(c, 2, 0.1, 1);
  EXPECT_THROW(build_delta({Vector(p.up.dim() - 1)}, {Vector(p.down.dim())}, 1, p), PartitionMismatch);
  EXPECT_THROW(build_delta({Vector(p.up.dim())}, {Vector(3)}, 1, p), PartitionMismatch);
}

TEST(BuildDelta, LinearInEta) {
  const auto c = tiny_config();
  EditorParams p = EditorParams::initialize(c, 2, 0.1, 1);
  Rng rng(7);
  const std::vector<Vector> up = {random_vector(rng, p.up.dim()), random_vector(rng, p.up.dim())};
  const std::vector<Vector> down = {random_vector(rng, p.down.dim())};
  set_eta(p, 0.25);
  const WeightDelta a = build_delta(up, down, 1, p);
  set_eta(p, 0.75);
  const WeightDelta b = build_delta(up, down, 1, p);
  for (std::size_t i = 0; i < a.delta_up.size(); ++i) EXPECT_NEAR(b.delta_up.data[i], 3.0 * a.delta_up.data[i], 1e-12);
  for (std::size_t i = 0; i < a.delta_down.size(); ++i)
    EXPECT_NEAR(b.delta_down.data[i], 3.0 * a.delta_down.data[i], 1e-12);
}

TEST(BuildDelta, SharedProjectionsAcrossLayers) {
  const auto c = synth_config();
  EditorParams p = EditorParams::initialize(c, 3, 0.1, 1);
  Rng rng(8);
  randomize(p, rng);
  p.up.layers.at(3) = p.up.layers.at(2);
  p.down.layers.at(3) = p.down.layers.at(2);
  const Vector zu = random_vector(rng, p.up.dim()), zd = random_vector(rng, p.down.dim());
  const WeightDelta a = build_delta({editor_forward(zu, 2, p, WeightClass::up).out},
                                    {editor_forward(zd, 2, p, WeightClass::down).out}, 2, p);
  const WeightDelta b = build_delta({editor_forward(zu, 3, p, WeightClass::up).out},
                                    {editor_forward(zd, 3, p, WeightClass::down).out}, 3, p);
  EXPECT_EQ(a.delta_up, b.delta_up);
  EXPECT_EQ(a.delta_down, b.delta_down);
  // A different layer scale changes the output through the same shared matrices.
  p.up.layers.at(3).gamma1(0, 0) += 1.0;
  EXPECT_NE(editor_forward(zu, 3, p, WeightClass::up).out, editor_forward(zu, 2, p, WeightClass::up).out);
}

TEST(MakeEdit, DeterministicAndLeavesBaseUntouched) {
  Fixture f;
  const ToyModelWeights before = f.w;
  const EditInstance inst = f.instance(0);
  const EditPackage a = make_edit(f.w, inst, 2, f.editor, f.router, 7);
  const EditPackage b = make_edit(f.w, inst, 2, f.editor, f.router, 7);
  EXPECT_EQ(a, b);
  EXPECT_EQ(f.w, before);
  EXPECT_EQ(a.edit_id, 7);
  EXPECT_EQ(a.target, inst.target);
  const Localization loc = localize(f.w, inst.image, inst.prompt, inst.target.front(), 2);
  EXPECT_EQ(a.selection, loc.selection);
  ASSERT_EQ(a.deltas.size(), 2u);
  for (std::size_t j = 0; j < a.deltas.size(); ++j) EXPECT_EQ(a.deltas[j].layer, a.selection.edit_layers[j]);
  EXPECT_EQ(a.anchor.source_layer, a.selection.l_min);
  EXPECT_NEAR(norm2(a.anchor.v), 1.0, 1e-6);
}

TEST(MakeEdit, SingleLayerAndRankBound) {
  Fixture f;
  Rng rng(9);
  randomize(f.editor, rng, 0.1);
  for (int i = 0; i < 6; ++i) {
    const EditInstance inst = f.instance(i);
    const EditPackage p = make_edit(f.w, inst, 1, f.editor, f.router);
    ASSERT_EQ(p.deltas.size(), 1u);
    const WeightDelta& d = p.deltas[0];
    EXPECT_EQ(d.source_rank, static_cast<int>(inst.target.size()));
    EXPECT_LE(numerical_rank(d.delta_up), d.source_rank);
    EXPECT_LE(numerical_rank(d.delta_down), d.source_rank);
    for (double v : d.delta_up.data) EXPECT_EQ(v, static_cast<double>(static_cast<float>(v)));
  }
}

TEST(MakeEdit, ExplicitSelection) {
  Fixture f;
  const EditInstance inst = f.instance(1);
  const EditPackage p = make_edit_with_selection(f.w, inst, last_k_layers(4, 2), f.editor, f.router);
  ASSERT_EQ(p.deltas.size(), 2u);
  EXPECT_EQ(p.deltas[0].layer, 2);
  EXPECT_EQ(p.deltas[1].layer, 3);
  EXPECT_EQ(p.anchor.source_layer, 2);
}

TEST(EditorLoss, AllLambdasZeroGiveZero) {
  Fixture f;
  const EditorExample ex = make_editor_example(f.w, f.bench.bundles[0], f.bench.vocab, 2);
  EditorTrainConfig cfg;
  cfg.lambda_gen = cfg.lambda_loc = cfg.lambda_m_gen = cfg.lambda_m_loc = 0.0;
  EXPECT_THROW(cfg.validate(), UsageError);
  EditorParams grads = EditorParams::zeros_like(f.editor);
  const EditorLoss l = editor_loss(f.w, ex, f.editor, cfg, &grads);
  EXPECT_EQ(l.total, 0.0);
  for (const auto& [name, m] : named_params(std::as_const(grads)))
    for (double v : m->data) EXPECT_EQ(v, 0.0) << name;
}

TEST(EditorLoss, ZeroDeltaGivesZeroKl) {
  Fixture f;
  set_eta(f.editor, 0.0);
  const EditorExample ex = make_editor_example(f.w, f.bench.bundles[1], f.bench.vocab, 2);
  const EditorLoss l = editor_loss(f.w, ex, f.editor, EditorTrainConfig{});
  EXPECT_EQ(l.loc, 0.0);
  EXPECT_EQ(l.m_loc, 0.0);
  EXPECT_GT(l.gen, 0.0);
}

TEST(EditorLoss, MatchesIndependentNllAndKl) {
  Fixture f;
  Rng rng(10);
  randomize(f.editor, rng, 0.2);
  set_eta(f.editor, 0.5);
  const auto& bundle = f.bench.bundles[2];
  const EditorExample ex = make_editor_example(f.w, bundle, f.bench.vocab, 2);
  EditorTrainConfig cfg;
  cfg.lambda_gen = 0.5;
  cfg.lambda_loc = 2.0;
  cfg.lambda_m_gen = 1.5;
  cfg.lambda_m_loc = 0.25;
  const EditorLoss l = editor_loss(f.w, ex, f.editor, cfg);

  // Independent path: package deltas (unrounded), applied by hand.
  const EditInputs in = edit_inputs(f.w, ex.edit, ex.selection, f.editor);
  const auto deltas = editor_deltas(in, f.editor);
  ToyModelWeights edited = f.w;
  for (const auto& d : deltas) {
    auto& lw = edited.layers[d.layer];
    for (std::size_t i = 0; i < lw.w_up.size(); ++i) lw.w_up.data[i] += d.delta_up.data[i];
    for (std::size_t i = 0; i < lw.w_down.size(); ++i) lw.w_down.data[i] += d.delta_down.data[i];
  }
  auto logp = [](const ToyModelWeights& w, const LabeledInstance& q) {
    TokenIds seq = q.prompt;
    seq.insert(seq.end(), q.target.begin(), q.target.end() - 1);
    const Matrix logits = forward(w, q.image, seq, false).logits;
    const int first = w.config.num_visual_tokens + static_cast<int>(q.prompt.size()) - 1;
    std::vector<Vector> rows;
    for (std::size_t t = 0; t < q.target.size(); ++t) {
      const auto z = logits.row(first + static_cast<int>(t));
      double mx = -1e300;
      for (double v : z) mx = std::max(mx, v);
      double s = 0.0;
      for (double v : z) s += std::exp(v - mx);
      Vector r(z.size());
      for (std::size_t j = 0; j < z.size(); ++j) r[j] = z[j] - mx - std::log(s);
      rows.push_back(r);
    }
    return rows;
  };
  auto nll = [&](const std::vector<LabeledInstance>& qs) {
    double total = 0.0;
    for (const auto& q : qs) {
      const auto rows = logp(edited, q);
      double s = 0.0;
      for (std::size_t t = 0; t < q.target.size(); ++t) s -= rows[t][q.target[t]];
      total += s / q.target.size();
    }
    return total / qs.size();
  };
  auto kl = [&](const std::vector<LabeledInstance>& qs) {
    double total = 0.0;
    for (const auto& q : qs) {
      const auto base = logp(f.w, q), mod = logp(edited, q);
      double s = 0.0;
      for (std::size_t t = 0; t < base.size(); ++t)
        for (std::size_t j = 0; j < base[t].size(); ++j) s += std::exp(base[t][j]) * (base[t][j] - mod[t][j]);
      total += s / base.size();
    }
    return total / qs.size();
  };
  EXPECT_EQ(ex.gen.size(), 1 + bundle.rephrases.size());
  EXPECT_NEAR(l.gen, nll(ex.gen), 1e-8);
  EXPECT_NEAR(l.m_gen, nll(ex.m_gen), 1e-8);
  EXPECT_NEAR(l.loc, kl(ex.loc), 1e-8);
  EXPECT_NEAR(l.m_loc, kl(ex.m_loc), 1e-8);
  EXPECT_GT(l.loc, 0.0);
  EXPECT_NEAR(l.total, 0.5 * l.gen + 2.0 * l.loc + 1.5 * l.m_gen + 0.25 * l.m_loc, 1e-12);
  for (const auto& q : ex.loc) EXPECT_EQ(q.image, synth::null_image());
}

TEST(EditorLoss, GradientMatchesFiniteDifferences) {
  Fixture f;
  Rng rng(12);
  randomize(f.editor, rng, 0.3);
  set_eta(f.editor, 0.3);
  const EditorExample ex = make_editor_example(f.w, f.bench.bundles[3], f.bench.vocab, 2);
  fit_input_scales(f.editor, {ex});
  EditorTrainConfig cfg;
  cfg.lambda_loc = 3.0;
  EditorParams grads = EditorParams::zeros_like(f.editor);
  editor_loss(f.w, ex, f.editor, cfg, &grads);
  const double h = 1e-5;
  auto params = named_params(f.editor);
  auto gparams = named_params(std::as_const(grads));
  int checked = 0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    const std::string& name = params[pi].first;
    const int layer_of = name.find(".L") == std::string::npos ? -1 : name[name.find(".L") + 2] - '0';
    if (layer_of >= 0 && std::find(ex.layers.begin(), ex.layers.end(), layer_of) == ex.layers.end()) continue;
    Matrix& m = *params[pi].second;
    const Matrix& g = *gparams[pi].second;
    double num = 0.0, den = 0.0;
    for (int s = 0; s < 4; ++s) {
      const std::size_t idx = rng.uniform_int(0, static_cast<int>(m.size()) - 1);
      const double keep = m.data[idx];
      m.data[idx] = keep + h;
      const double lp = editor_loss(f.w, ex, f.editor, cfg).total;
      m.data[idx] = keep - h;
      const double lm = editor_loss(f.w, ex, f.editor, cfg).total;
      m.data[idx] = keep;
      const double fd = (lp - lm) / (2 * h);
      num = std::max(num, std::abs(fd - g.data[idx]));
      den = std::max(den, std::abs(fd));
    }
    if (den < 1e-7) continue;
    EXPECT_LT(num / den, 1e-3) << name;
    ++checked;
  }
  EXPECT_GE(checked, 15);
}

TEST(EditorLoss, EmptyCategory) {
  Fixture f;
  EditorExample ex = make_editor_example(f.w, f.bench.bundles[0], f.bench.vocab, 2);
  ex.m_loc.clear();
  ex.m_loc_ref.clear();
  EXPECT_THROW(editor_loss(f.w, ex, f.editor, EditorTrainConfig{}), EmptyCategory);
  EditorTrainConfig cfg;
  cfg.lambda_m_loc = 0.0;
  EXPECT_NO_THROW(editor_loss(f.w, ex, f.editor, cfg));
}

TEST(EditorTraining, ZeroGradientStepKeepsParameters) {
  Fixture f;
  const EditorExample ex = make_editor_example(f.w, f.bench.bundles[0], f.bench.vocab, 2);
  EditorTrainConfig cfg;
  cfg.lambda_gen = cfg.lambda_loc = cfg.lambda_m_gen = cfg.lambda_m_loc = 0.0;
  EditorParams p = f.editor;
  Adam adam(1e-2);
  std::vector<Matrix*> ps;
  for (auto& [n, m] : named_params(p)) ps.push_back(m);
  for (int step = 0; step < 5; ++step) {
    EditorParams grads = EditorParams::zeros_like(p);
    editor_loss(f.w, ex, p, cfg, &grads);
    std::vector<const Matrix*> gs;
    for (auto& [n, m] : named_params(std::as_const(grads))) gs.push_back(m);
    adam.step(ps, gs);
  }
  EXPECT_EQ(p, f.editor);
  EXPECT_THROW(train_editor(f.w, {ex}, cfg), UsageError);
}

TEST(EditorTraining, SingleBundleOverfit) {
  Fixture f;
  const auto& bundle = f.bench.bundles[4];
  const EditorExample ex = make_editor_example(f.w, bundle, f.bench.vocab, 2);
  EditorTrainConfig cfg;
  cfg.steps = 150;
  cfg.batch_size = 1;
  cfg.lr = 1e-2;
  cfg.initial_eta = 0.1;
  cfg.rank = 2;
  const EditorLoss before = editor_loss(f.w, ex, EditorParams::initialize(f.config, 2, 0.1, 1), cfg);
  const EditorParams trained = train_editor(f.w, {ex}, cfg);
  EXPECT_EQ(trained, train_editor(f.w, {ex}, cfg));
  const EditorLoss after = editor_loss(f.w, ex, trained, cfg);
  EXPECT_LT(after.total, before.total);
  const EditPackage pkg = make_edit(f.w, ex.edit, 2, trained, f.router);
  std::vector<Matrix> storage;
  const FfnOverrides ffn = apply_deltas(f.w, pkg.deltas, storage);
  EXPECT_EQ(predict_answer(f.w, ex.edit.image, ex.edit.prompt, &ffn), ex.edit.target);
  EXPECT_NE(predict_answer(f.w, ex.edit.image, ex.edit.prompt), ex.edit.target);
}

TEST(EditorIo, SaveLoadRoundTrip) {
  Fixture f;
  Rng rng(13);
  randomize(f.editor, rng);
  for (auto& [n, m] : named_params(f.editor)) round_to_float(*m);
  f.editor.up.x_scale = 0.375;
  f.editor.down.delta_scale = 1.5e-3f;
  const auto dir = scratch_dir("editor_io");
  save_editor(dir / "e.ckpt", f.editor, {{"lr", "0.01"}});
  EXPECT_EQ(load_editor(dir / "e.ckpt"), f.editor);
  EXPECT_EQ(read_container(dir / "e.ckpt").get("run.lr"), "0.01");
}

TEST(EditorIo, PackageRoundTrip) {
  Fixture f;
  const EditPackage p = make_edit(f.w, f.instance(2), 2, f.editor, f.router, 42);
  const EditPackage back = package_from_container(parse_container(serialize_container(package_to_container(p))));
  EXPECT_EQ(back, p);
}
