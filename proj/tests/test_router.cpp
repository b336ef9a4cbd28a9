// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "ldke/editor.hpp"
#include "ldke/errors.hpp"
#include "ldke/eval.hpp"
#include "ldke/routing.hpp"
#include "test_util.hpp"

using namespace ldke;
using namespace ldke::testing;

namespace {

RouterParams lively_router(int d, int d_r, int d_e, std::uint64_t seed) {
  RouterParams p = RouterParams::initialize(d, d_r, d_e, seed);
  Rng rng(seed + 100);
  for (auto& [name, m] : named_params(p)) {
    const double base = name == "ln_scale" ? 1.0 : 0.0;
    for (double& v : m->data) v = base + 0.4 * rng.normal();
  }
  return p;
}

// Residual projection and normalized embedding with explicit loops.
Vector oracle_embed(const Vector& h, const RouterParams& p, Vector* r_out = nullptr) {
  const int d = p.d;
  const double mean = std::accumulate(h.begin(), h.end(), 0.0) / d;
  double var = 0.0;
  for (double v : h) var += (v - mean) * (v - mean);
  var /= d;
  Vector x(d);
  for (int i = 0; i < d; ++i) x[i] = (h[i] - mean) / std::sqrt(var + 1e-5) * p.ln_scale(0, i) + p.ln_shift(0, i);
  Vector a(p.d_r, 0.0);
  for (int j = 0; j < p.d_r; ++j) {
    for (int i = 0; i < d; ++i) a[j] += x[i] * p.w_up(i, j);
    a[j] = 0.5 * a[j] * (1.0 + std::erf(a[j] / std::sqrt(2.0)));
  }
  Vector r = h;
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < p.d_r; ++j) r[i] += a[j] * p.w_down(j, i);
  if (r_out) *r_out = r;
  Vector e(p.d_e, 0.0);
  for (int k = 0; k < p.d_e; ++k)
    for (int i = 0; i < d; ++i) e[k] += r[i] * p.w_emb(i, k);
  double n = 0.0;
  for (double v : e) n += v * v;
  for (double& v : e) v /= std::sqrt(n);
  return e;
}

RouterEmbedding unit(Vector v) {
  double n = 0.0;
  for (double x : v) n += x * x;
  for (double& x : v) x /= std::sqrt(n);
  return {v, 0};
}

// Embeddings with prescribed dot products against e = (1, 0, 0).
RouterEmbedding with_similarity(double s, double other = 0.0) {
  return {{s, std::sqrt(1.0 - s * s - other * other), other}, 0};
}

RouterSample random_sample(Rng& rng, int d) {
  RouterSample s;
  s.layer = 2;
  s.edit = random_vector(rng, d);
  for (int i = 0; i < 2; ++i) {
    s.rephrases.push_back(random_vector(rng, d));
    s.fg_gen.push_back(random_vector(rng, d));
    s.fg_loc.push_back(random_vector(rng, d));
    s.t_loc.push_back(random_vector(rng, d));
  }
  s.fg_loc.push_back(random_vector(rng, d));
  return s;
}

}  // namespace

TEST(RouterEmbed, UnitNorm) {
  const RouterParams p = lively_router(16, 16, 8, 1);
  Rng rng(2);
  for (int i = 0; i < 50; ++i) {
    const RouterTrace t = router_embed(random_vector(rng, 16, 3.0), p, 4);
    EXPECT_NEAR(norm2(t.embedding.v), 1.0, 1e-6);
    EXPECT_EQ(t.embedding.source_layer, 4);
  }
}

TEST(RouterEmbed, ZeroDownProjectionIsResidualIdentity) {
  RouterParams p = lively_router(16, 16, 8, 3);
  p.w_down.fill(0.0);
  Rng rng(4);
  const Vector h = random_vector(rng, 16);
  EXPECT_EQ(router_embed(h, p).r, h);
  RouterParams q = lively_router(16, 16, 8, 3);
  q.w_up.fill(0.0);
  EXPECT_EQ(router_embed(h, q).r, h);
  const RouterParams init = RouterParams::initialize(16, 16, 8, 5);
  EXPECT_EQ(router_embed(h, init).r, h);
}

TEST(RouterEmbed, MatchesOracle) {
  const RouterParams p = lively_router(16, 12, 8, 6);
  Rng rng(7);
  for (int i = 0; i < 20; ++i) {
    const Vector h = random_vector(rng, 16, 2.0);
    Vector r;
    const Vector e = oracle_embed(h, p, &r);
    const RouterTrace t = router_embed(h, p);
    EXPECT_LT(max_abs_diff(t.r, r), 1e-6);
    EXPECT_LT(max_abs_diff(t.embedding.v, e), 1e-6);
  }
}

TEST(RouterEmbed, Errors) {
  RouterParams p = RouterParams::initialize(16, 16, 8, 1);
  EXPECT_THROW(router_embed(Vector(15), p), ShapeMismatch);
  p.w_emb.fill(0.0);
  EXPECT_THROW(router_embed(Vector(16, 1.0), p), ZeroNorm);
  EXPECT_THROW(RouterParams::initialize(16, 0, 8, 1), ShapeMismatch);
}

TEST(Gate, Examples) {
  Rng rng(8);
  const RouterEmbedding a = unit(random_vector(rng, 8));
  const GateDecision self = gate(a, a);
  EXPECT_NEAR(self.s, 1.0, 1e-15);
  EXPECT_TRUE(self.g);
  const RouterEmbedding x{{1, 0, 0}, 0}, y{{0, 1, 0}, 0};
  const GateDecision orth = gate(x, y);
  EXPECT_EQ(orth.s, 0.0);
  EXPECT_FALSE(orth.g);
  const RouterEmbedding half{{0.5, std::sqrt(0.75), 0}, 0};
  const GateDecision h = gate(half, x);
  EXPECT_EQ(h.s, 0.5);
  EXPECT_TRUE(h.g);
  EXPECT_EQ(h.threshold, kGateThreshold);
}

TEST(Gate, ThresholdMonotone) {
  Rng rng(9);
  for (int i = 0; i < 200; ++i) {
    const RouterEmbedding a = unit(random_vector(rng, 4)), b = unit(random_vector(rng, 4));
    bool prev = true;
    for (double t = -1.0; t <= 1.0; t += 0.05) {
      const bool g = gate(a, b, t).g;
      EXPECT_FALSE(g && !prev);
      prev = g;
    }
  }
}

TEST(ComposeWeights, Cases) {
  Rng rng(10);
  const Matrix w = random_matrix(rng, 5, 7), d = random_matrix(rng, 5, 7);
  Matrix storage;
  EXPECT_EQ(&compose_weights(w, d, false, storage), &w);
  const Matrix& z = compose_weights(w, Matrix(5, 7), true, storage);
  EXPECT_EQ(z, w);
  const Matrix& s = compose_weights(w, d, true, storage);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 7; ++j) EXPECT_EQ(s(i, j), w(i, j) + d(i, j));
  EXPECT_THROW(compose_weights(w, Matrix(7, 5), true, storage), ShapeMismatch);
}

TEST(DisentanglementLoss, AnalyticExamples) {
  const RouterParams p = RouterParams::initialize(4, 4, 3, 1);
  RouterTrainConfig cfg;
  cfg.margin = 0.2;
  const RouterEmbedding e{{1, 0, 0}, 0};
  const RouterEmbedding pos[] = {e};
  {
    const auto l = disentanglement_losses(e, with_similarity(0.9), with_similarity(0.1, 0.3), pos, {}, p, cfg);
    EXPECT_EQ(l.trip1, 0.0);
  }
  {
    const auto l = disentanglement_losses(e, with_similarity(0.7), with_similarity(0.8, 0.2), pos, {}, p, cfg);
    EXPECT_NEAR(l.trip1, 0.3, 1e-12);
  }
  {
    const auto l = disentanglement_losses(e, e, RouterEmbedding{{0, 1, 0}, 0}, pos, {}, p, cfg);
    EXPECT_EQ(l.abs, 0.0);
  }
  EXPECT_NEAR(bce_with_logit(0.0, 1), std::log(2.0), 1e-9);
  EXPECT_NEAR(bce_with_logit(0.0, 0), std::log(2.0), 1e-9);
  // Untrained head has zero weights, so every logit is 0.
  const RouterEmbedding neg[] = {RouterEmbedding{{0, 1, 0}, 0}};
  const auto l = disentanglement_losses(e, e, neg[0], pos, neg, p, cfg);
  EXPECT_NEAR(l.bce, std::log(2.0), 1e-9);
  EXPECT_THROW(disentanglement_losses(e, e, e, {}, {}, p, cfg), EmptySet);
}

TEST(DisentanglementLoss, NonNegativeAndHingeInactive) {
  const RouterParams p = lively_router(6, 6, 4, 2);
  RouterTrainConfig cfg;
  Rng rng(11);
  for (int i = 0; i < 300; ++i) {
    const RouterEmbedding e = unit(random_vector(rng, 4)), g = unit(random_vector(rng, 4)),
                          l = unit(random_vector(rng, 4));
    const RouterEmbedding pos[] = {g}, neg[] = {l};
    const auto r = disentanglement_losses(e, g, l, pos, neg, p, cfg);
    EXPECT_GE(r.trip1, 0.0);
    EXPECT_GE(r.trip2, 0.0);
    EXPECT_GE(r.abs, 0.0);
    EXPECT_GE(r.bce, 0.0);
    if (dot(e.v, g.v) >= dot(e.v, l.v) + cfg.margin) EXPECT_EQ(r.trip1, 0.0);
    EXPECT_NEAR(r.total, r.trip1 + r.trip2 + r.abs + r.bce, 1e-12);
  }
}

TEST(RouterConfig, MarginValidation) {
  RouterTrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.margin = 0.0;
  EXPECT_THROW(c.validate(), UsageError);
  c.margin = 2.0;
  EXPECT_THROW(c.validate(), UsageError);
  c.margin = 0.5;
  c.lambda2 = -1.0;
  EXPECT_THROW(c.validate(), UsageError);
}

TEST(RouterSampleLoss, MatchesPerTripletDefinition) {
  const RouterParams p = lively_router(16, 16, 8, 12);
  Rng rng(13);
  const RouterSample s = random_sample(rng, 16);
  RouterTrainConfig cfg;
  cfg.lambda1 = 0.7;
  cfg.lambda2 = 1.3;
  cfg.lambda3 = 0.4;
  const auto loss = router_sample_loss(s, p, cfg);
  auto emb = [&](const Vector& h) { return router_embed(h, p, s.layer).embedding; };
  const RouterEmbedding e = emb(s.edit);
  std::vector<RouterEmbedding> pos = {e}, neg;
  for (const auto& h : s.rephrases) pos.push_back(emb(h));
  for (const auto& h : s.fg_gen) pos.push_back(emb(h));
  for (const auto& h : s.fg_loc) neg.push_back(emb(h));
  for (const auto& h : s.t_loc) neg.push_back(emb(h));
  double trip1 = 0, trip2 = 0, abs = 0, bce = 0;
  int pairs = 0;
  for (const auto& g : s.fg_gen)
    for (const auto& l : s.fg_loc) {
      const auto r = disentanglement_losses(e, emb(g), emb(l), pos, neg, p, cfg);
      trip1 += r.trip1;
      trip2 += r.trip2;
      abs += r.abs;
      bce = r.bce;
      ++pairs;
    }
  EXPECT_NEAR(loss.trip1, trip1 / pairs, 1e-12);
  EXPECT_NEAR(loss.trip2, trip2 / pairs, 1e-12);
  EXPECT_NEAR(loss.abs, abs / pairs, 1e-12);
  EXPECT_NEAR(loss.bce, bce, 1e-12);
  EXPECT_NEAR(loss.total, 0.7 * (loss.trip1 + loss.trip2) + 1.3 * loss.abs + 0.4 * loss.bce, 1e-12);
}

TEST(RouterSampleLoss, GradientMatchesFiniteDifferences) {
  RouterParams p = lively_router(16, 16, 8, 14);
  Rng rng(15);
  const RouterSample s = random_sample(rng, 16);
  RouterTrainConfig cfg;
  cfg.margin = 1.5;  // keeps the hinges active
  RouterParams grads = RouterParams::zeros_like(p);
  router_sample_loss(s, p, cfg, &grads);
  const double h = 1e-6;
  auto params = named_params(p);
  auto gparams = named_params(std::as_const(grads));
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Matrix& m = *params[pi].second;
    const Matrix& g = *gparams[pi].second;
    double num = 0.0, den = 0.0;
    for (int t = 0; t < 6; ++t) {
      const std::size_t idx = rng.uniform_int(0, static_cast<int>(m.size()) - 1);
      const double keep = m.data[idx];
      m.data[idx] = keep + h;
      const double lp = router_sample_loss(s, p, cfg).total;
      m.data[idx] = keep - h;
      const double lm = router_sample_loss(s, p, cfg).total;
      m.data[idx] = keep;
      const double fd = (lp - lm) / (2 * h);
      num = std::max(num, std::abs(fd - g.data[idx]));
      den = std::max(den, std::abs(fd));
    }
    ASSERT_GT(den, 0.0) << params[pi].first;
    EXPECT_LT(num / den, 1e-3) << params[pi].first;
  }
}

TEST(RouterTraining, ZeroWeightsLeaveParameters) {
  Rng rng(16);
  std::vector<RouterSample> samples = {random_sample(rng, 16), random_sample(rng, 16)};
  RouterTrainConfig cfg;
  cfg.lambda1 = cfg.lambda2 = cfg.lambda3 = 0.0;
  cfg.steps = 20;
  const RouterParams p = train_router(samples, 16, cfg);
  EXPECT_EQ(p, RouterParams::initialize(16, 16, 8, derive_seed(cfg.seed, "router-init")));
  RouterParams grads = RouterParams::zeros_like(p);
  router_sample_loss(samples[0], p, cfg, &grads);
  for (const auto& [name, m] : named_params(std::as_const(grads)))
    for (double v : m->data) EXPECT_EQ(v, 0.0) << name;
}

TEST(RouterTraining, SeparatesSyntheticClusters) {
  // In-scope states near the edit state, out-of-scope states elsewhere.
  Rng rng(17);
  std::vector<RouterSample> samples;
  for (int i = 0; i < 40; ++i) {
    RouterSample s;
    s.layer = 2;
    s.edit = random_vector(rng, 16);
    auto near = [&] {
      Vector v = s.edit;
      for (double& x : v) x += 0.6 * rng.normal();
      return v;
    };
    for (int j = 0; j < 2; ++j) {
      s.rephrases.push_back(near());
      s.fg_gen.push_back(near());
      s.fg_loc.push_back(random_vector(rng, 16));
      s.t_loc.push_back(random_vector(rng, 16));
    }
    samples.push_back(std::move(s));
  }
  RouterTrainConfig cfg;
  cfg.steps = 300;
  cfg.lr = 3e-3;
  const RouterParams init = RouterParams::initialize(16, 16, 8, derive_seed(cfg.seed, "router-init"));
  const RouterParams trained = train_router(samples, 16, cfg);
  EXPECT_EQ(trained, train_router(samples, 16, cfg));
  double before = 0.0, after = 0.0;
  for (const auto& s : samples) {
    before += router_sample_loss(s, init, cfg).total;
    after += router_sample_loss(s, trained, cfg).total;
  }
  EXPECT_LT(after, before);
  EXPECT_GT(routing_accuracy(samples, trained), routing_accuracy(samples, init));
  for (const auto& [n, m] : named_params(trained))
    for (double v : m->data) EXPECT_EQ(v, static_cast<double>(static_cast<float>(v)));
}

TEST(RouterIo, RoundTrip) {
  const RouterParams p = [] {
    RouterParams q = lively_router(16, 12, 8, 18);
    for (auto& [n, m] : named_params(q)) round_to_float(*m);
    return q;
  }();
  const auto dir = scratch_dir("router_io");
  save_router(dir / "r.ckpt", p, {{"margin", "0.2"}});
  EXPECT_EQ(load_router(dir / "r.ckpt"), p);
  EXPECT_EQ(read_container(dir / "r.ckpt").get("run.margin"), "0.2");
  Container c = read_container(dir / "r.ckpt");
  c.kind = "editor";
  EXPECT_THROW(router_from_container(c), DataError);
}

namespace {

struct RoutingFixture {
  ToyModelConfig config = synth_config();
  ToyModelWeights w = lively_weights(config, 21);
  synth::Benchmark bench = synth::generate_benchmark(6, 12);
  RouterParams router = RouterParams::initialize(config.hidden_dim, config.hidden_dim, config.hidden_dim / 2, 22);
  EditorParams editor = [this] {
    EditorParams e = EditorParams::initialize(config, 2, 0.5, 23);
    Rng rng(24);
    for (auto& [n, m] : named_params(e))
      if (n.find(".a") != std::string::npos)
        for (double& v : m->data) v = 0.2 * rng.normal();
    return e;
  }();
};

}  // namespace

TEST(RoutedForward, NoPackagesIsPlainForward) {
  RoutingFixture f;
  const EditInstance inst = edit_instance(f.bench.bundles[0], f.bench.vocab);
  const RoutedForward r = routed_forward(f.w, {}, f.router, inst.image, inst.prompt);
  EXPECT_EQ(r.logits, forward(f.w, inst.image, inst.prompt, false).logits);
  EXPECT_EQ(r.applied, -1);
  EXPECT_TRUE(r.decisions.empty());
}

TEST(RoutedForward, EditPromptOpensItsGate) {
  RoutingFixture f;
  const EditInstance inst = edit_instance(f.bench.bundles[0], f.bench.vocab);
  const EditPackage pkg = make_edit(f.w, inst, 2, f.editor, f.router);
  const RoutedForward r = routed_forward(f.w, {pkg}, f.router, inst.image, inst.prompt);
  ASSERT_EQ(r.decisions.size(), 1u);
  EXPECT_NEAR(r.decisions[0].s, 1.0, 1e-12);
  EXPECT_TRUE(r.decisions[0].g);
  EXPECT_EQ(r.applied, 0);
  std::vector<Matrix> storage;
  const FfnOverrides ffn = apply_deltas(f.w, pkg.deltas, storage);
  EXPECT_EQ(r.logits, forward(f.w, inst.image, inst.prompt, false, &ffn).logits);
  EXPECT_NE(r.logits, forward(f.w, inst.image, inst.prompt, false).logits);
  const RoutedAnswer a = routed_predict(f.w, {pkg}, f.router, inst.image, inst.prompt);
  EXPECT_EQ(a.answer, predict_answer(f.w, inst.image, inst.prompt, &ffn));
}

TEST(RoutedForward, ClosedGatesAreBitExactPassThrough) {
  RoutingFixture f;
  const EditInstance inst = edit_instance(f.bench.bundles[0], f.bench.vocab);
  EditPackage pkg = make_edit(f.w, inst, 2, f.editor, f.router);
  // Anchor pointing away from every query embedding.
  const Vector h = router_input(f.w, inst.image, inst.prompt, pkg.selection.l_min);
  for (double& v : pkg.anchor.v) v = -v;
  int closed = 0;
  for (const auto& b : f.bench.bundles) {
    for (const auto& q : b.fg_loc) {
      const LabeledInstance li = labeled(b, q, false, f.bench.vocab);
      const RoutedForward r = routed_forward(f.w, {pkg}, f.router, li.image, li.prompt);
      if (r.applied >= 0) continue;
      ++closed;
      EXPECT_EQ(r.logits, forward(f.w, li.image, li.prompt, false).logits);
    }
  }
  EXPECT_GT(closed, 0);
  EXPECT_FALSE(gate(router_embed(h, f.router, pkg.selection.l_min).embedding, pkg.anchor).g);
}

TEST(RoutedForward, NearestAnchorWins) {
  RoutingFixture f;
  const EditInstance inst = edit_instance(f.bench.bundles[0], f.bench.vocab);
  const EditPackage own = make_edit(f.w, inst, 2, f.editor, f.router, 0);
  EditPackage other = make_edit(f.w, edit_instance(f.bench.bundles[1], f.bench.vocab), 2, f.editor, f.router, 1);
  // Second anchor: still inside the gate for this prompt, but farther than the first.
  other.selection = own.selection;
  other.anchor = own.anchor;
  other.anchor.v[0] += 0.3;
  double n = norm2(other.anchor.v);
  for (double& v : other.anchor.v) v /= n;
  const RoutedForward r = routed_forward(f.w, {other, own}, f.router, inst.image, inst.prompt);
  ASSERT_EQ(r.decisions.size(), 2u);
  EXPECT_TRUE(r.decisions[0].g);
  EXPECT_TRUE(r.decisions[1].g);
  EXPECT_LT(r.decisions[0].s, r.decisions[1].s);
  EXPECT_EQ(r.applied, 1);
}

TEST(RouterSample, UsesLocalizedLayer) {
  RoutingFixture f;
  const auto& b = f.bench.bundles[2];
  const RouterSample s = router_sample(f.w, b, f.bench.vocab, 2);
  const EditInstance inst = edit_instance(b, f.bench.vocab);
  const Localization loc = localize(f.w, inst.image, inst.prompt, inst.target.front(), 2);
  EXPECT_EQ(s.layer, loc.selection.l_min);
  EXPECT_EQ(s.edit, router_input(f.w, inst.image, inst.prompt, s.layer));
  EXPECT_EQ(s.rephrases.size(), b.rephrases.size());
  EXPECT_EQ(s.fg_gen.size(), b.fg_gen.size());
  EXPECT_EQ(s.fg_loc.size(), b.fg_loc.size());
  EXPECT_EQ(s.t_loc.size(), b.t_loc.size());
}
