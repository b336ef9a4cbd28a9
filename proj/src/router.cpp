// SPDX-License-Identifier: Apache-2.0

#include "ldke/router.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ldke/errors.hpp"
#include "ldke/kernels.hpp"
#include "ldke/optim.hpp"
#include "ldke/rng.hpp"

namespace ldke {

namespace {

constexpr double kLnEps = 1e-5;

Matrix gaussian(Rng& rng, int rows, int cols, double stddev) {
  Matrix m(rows, cols);
  for (double& v : m.data) v = rng.normal(0.0, stddev);
  round_to_float(m);
  return m;
}

// y = x W for a row vector x.
Vector row_times(std::span<const double> x, const Matrix& w) {
  Vector y(w.cols, 0.0);
  for (int i = 0; i < w.rows; ++i) {
    if (x[i] == 0.0) continue;
    const auto wr = w.row(i);
    for (int j = 0; j < w.cols; ++j) y[j] += x[i] * wr[j];
  }
  return y;
}

// y = W g (g has w.cols entries).
Vector times_col(const Matrix& w, std::span<const double> g) {
  Vector y(w.rows, 0.0);
  for (int i = 0; i < w.rows; ++i) y[i] = dot(w.row(i), g);
  return y;
}

void add_outer(std::span<const double> x, std::span<const double> g, Matrix& out) {
  for (int i = 0; i < out.rows; ++i) {
    if (x[i] == 0.0) continue;
    auto o = out.row(i);
    for (int j = 0; j < out.cols; ++j) o[j] += x[i] * g[j];
  }
}

double sigmoid(double z) { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

}  // namespace

RouterParams RouterParams::initialize(int d, int d_r, int d_e, std::uint64_t seed) {
  if (d <= 0 || d_r <= 0 || d_e <= 0) throw ShapeMismatch("router dimensions must be positive");
  Rng rng(seed);
  RouterParams p;
  p.d = d;
  p.d_r = d_r;
  p.d_e = d_e;
  p.ln_scale = Matrix(1, d, 1.0);
  p.ln_shift = Matrix(1, d);
  p.w_up = gaussian(rng, d, d_r, 1.0 / std::sqrt(static_cast<double>(d)));
  p.w_down = Matrix(d_r, d);
  p.w_emb = gaussian(rng, d, d_e, 1.0 / std::sqrt(static_cast<double>(d)));
  p.w_cls = Matrix(1, d_e);
  p.b_cls = Matrix(1, 1);
  return p;
}

RouterParams RouterParams::zeros_like(const RouterParams& p) {
  RouterParams z = p;
  for (auto& [name, m] : named_params(z)) m->fill(0.0);
  return z;
}

template <typename P, typename M>
static std::vector<std::pair<std::string, M*>> collect(P& p) {
  return {{"ln_scale", &p.ln_scale}, {"ln_shift", &p.ln_shift}, {"w_up", &p.w_up},  {"w_down", &p.w_down},
          {"w_emb", &p.w_emb},       {"w_cls", &p.w_cls},       {"b_cls", &p.b_cls}};
}

std::vector<std::pair<std::string, Matrix*>> named_params(RouterParams& p) { return collect<RouterParams, Matrix>(p); }
std::vector<std::pair<std::string, const Matrix*>> named_params(const RouterParams& p) {
  return collect<const RouterParams, const Matrix>(p);
}

RouterTrace router_embed(std::span<const double> h, const RouterParams& p, int source_layer) {
  if (static_cast<int>(h.size()) != p.d) throw ShapeMismatch("router_embed: input has wrong length");
  RouterTrace t;
  t.h.assign(h.begin(), h.end());
  double mu = 0.0;
  for (double v : h) mu += v;
  mu /= p.d;
  double var = 0.0;
  for (double v : h) var += (v - mu) * (v - mu);
  var /= p.d;
  t.mean = mu;
  t.rstd = 1.0 / std::sqrt(var + kLnEps);
  t.x.resize(p.d);
  for (int i = 0; i < p.d; ++i) t.x[i] = (h[i] - mu) * t.rstd * p.ln_scale.data[i] + p.ln_shift.data[i];
  t.u = row_times(t.x, p.w_up);
  Vector gu(t.u.size());
  for (std::size_t i = 0; i < gu.size(); ++i) gu[i] = gelu(t.u[i]);
  t.r = row_times(gu, p.w_down);
  for (int i = 0; i < p.d; ++i) t.r[i] += h[i];
  t.e = row_times(t.r, p.w_emb);
  t.e_norm = norm2(t.e);
  if (!(t.e_norm >= 1e-12)) throw ZeroNorm("router embedding norm " + std::to_string(t.e_norm));
  t.embedding.source_layer = source_layer;
  t.embedding.v.resize(t.e.size());
  for (std::size_t i = 0; i < t.e.size(); ++i) t.embedding.v[i] = t.e[i] / t.e_norm;
  return t;
}

double router_logit(const RouterEmbedding& e, const RouterParams& p) { return dot(p.w_cls.data, e.v) + p.b_cls.data[0]; }

void router_backward(const RouterTrace& t, std::span<const double> d_emb, const RouterParams& p, RouterParams& grads) {
  const auto& v = t.embedding.v;
  const double proj = dot(v, d_emb);
  Vector de(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) de[i] = (d_emb[i] - v[i] * proj) / t.e_norm;
  add_outer(t.r, de, grads.w_emb);
  const Vector dr = times_col(p.w_emb, de);
  Vector gu(t.u.size());
  for (std::size_t i = 0; i < gu.size(); ++i) gu[i] = gelu(t.u[i]);
  add_outer(gu, dr, grads.w_down);
  Vector du = times_col(p.w_down, dr);
  for (std::size_t i = 0; i < du.size(); ++i) du[i] *= gelu_grad(t.u[i]);
  add_outer(t.x, du, grads.w_up);
  const Vector dx = times_col(p.w_up, du);
  for (int i = 0; i < p.d; ++i) {
    const double xhat = (t.h[i] - t.mean) * t.rstd;
    grads.ln_scale.data[i] += dx[i] * xhat;
    grads.ln_shift.data[i] += dx[i];
  }
}

GateDecision gate(const RouterEmbedding& test, const RouterEmbedding& anchor, double threshold) {
  GateDecision d;
  d.threshold = threshold;
  d.s = dot(test.v, anchor.v);
  d.g = d.s >= threshold;
  return d;
}

const Matrix& compose_weights(const Matrix& w, const Matrix& delta, bool g, Matrix& storage) {
  require_same_shape(w, delta, "compose_weights");
  if (!g) return w;
  kernels::add(w, delta, storage);
  return storage;
}

Vector router_input(const ToyModelWeights& w, const Matrix& image, const TokenIds& prompt, int layer) {
  if (layer < 0 || layer >= w.config.num_layers) throw UnknownLayer("router_input: layer " + std::to_string(layer));
  ForwardResult r = forward(w, image, prompt, true);
  return r.taps->h_pre[layer];
}

// -----------------------------------------------------------------------------

void RouterTrainConfig::validate() const {
  if (!(margin > 0.0 && margin < 2.0)) throw UsageError("router margin must lie in (0, 2)");
  if (lambda1 < 0 || lambda2 < 0 || lambda3 < 0) throw UsageError("router loss weights must be non-negative");
  if (steps < 0 || batch_size < 1) throw UsageError("router steps/batch_size out of range");
}

double bce_with_logit(double logit, int label) {
  // log(1 + exp(-z)) for label 1, log(1 + exp(z)) for label 0
  const double z = label ? logit : -logit;
  return z >= 0 ? std::log1p(std::exp(-z)) : -z + std::log1p(std::exp(z));
}

DisentanglementLoss disentanglement_losses(const RouterEmbedding& e, const RouterEmbedding& g,
                                           const RouterEmbedding& l, std::span<const RouterEmbedding> positives,
                                           std::span<const RouterEmbedding> negatives, const RouterParams& p,
                                           const RouterTrainConfig& config) {
  if (positives.empty() && negatives.empty()) throw EmptySet("disentanglement_losses: P and N are both empty");
  const double s_el = dot(e.v, l.v), s_eg = dot(e.v, g.v), s_gl = dot(g.v, l.v);
  DisentanglementLoss out;
  out.trip1 = std::max(0.0, s_el - s_eg + config.margin);
  out.trip2 = std::max(0.0, s_gl - s_eg + config.margin);
  out.abs = std::max(0.0, 1.0 - s_eg) + std::max(0.0, s_el);
  for (const auto& x : positives) out.bce += bce_with_logit(router_logit(x, p), 1);
  for (const auto& x : negatives) out.bce += bce_with_logit(router_logit(x, p), 0);
  out.bce /= static_cast<double>(positives.size() + negatives.size());
  out.total = config.lambda1 * (out.trip1 + out.trip2) + config.lambda2 * out.abs + config.lambda3 * out.bce;
  return out;
}

DisentanglementLoss router_sample_loss(const RouterSample& sample, const RouterParams& p,
                                       const RouterTrainConfig& config, RouterParams* grads, double scale) {
  if (sample.fg_gen.empty() || sample.fg_loc.empty()) throw EmptySet("router sample needs FG-Gen and FG-Loc queries");
  const int layer = sample.layer;
  std::vector<RouterTrace> gen, loc, others;  // others: rephrases then t_loc
  const RouterTrace edit = router_embed(sample.edit, p, layer);
  for (const auto& h : sample.fg_gen) gen.push_back(router_embed(h, p, layer));
  for (const auto& h : sample.fg_loc) loc.push_back(router_embed(h, p, layer));
  for (const auto& h : sample.rephrases) others.push_back(router_embed(h, p, layer));
  for (const auto& h : sample.t_loc) others.push_back(router_embed(h, p, layer));
  const std::size_t n_reph = sample.rephrases.size();

  const int de = p.d_e;
  Vector d_edit(de, 0.0);
  std::vector<Vector> d_gen(gen.size(), Vector(de, 0.0)), d_loc(loc.size(), Vector(de, 0.0)),
      d_other(others.size(), Vector(de, 0.0));

  DisentanglementLoss out;
  const double pairs = static_cast<double>(gen.size() * loc.size());
  const double w_trip = config.lambda1 / pairs, w_abs = config.lambda2 / pairs;
  const auto& E = edit.embedding.v;
  for (std::size_t j = 0; j < gen.size(); ++j) {
    const auto& G = gen[j].embedding.v;
    for (std::size_t k = 0; k < loc.size(); ++k) {
      const auto& L = loc[k].embedding.v;
      const double s_el = dot(E, L), s_eg = dot(E, G), s_gl = dot(G, L);
      const double t1 = s_el - s_eg + config.margin, t2 = s_gl - s_eg + config.margin;
      out.trip1 += std::max(0.0, t1) / pairs;
      out.trip2 += std::max(0.0, t2) / pairs;
      out.abs += (std::max(0.0, 1.0 - s_eg) + std::max(0.0, s_el)) / pairs;
      if (!grads) continue;
      // coefficients of s_el, s_eg, s_gl in the weighted loss
      double c_el = 0.0, c_eg = 0.0, c_gl = 0.0;
      if (t1 > 0) { c_el += w_trip; c_eg -= w_trip; }
      if (t2 > 0) { c_gl += w_trip; c_eg -= w_trip; }
      if (1.0 - s_eg > 0) c_eg -= w_abs;
      if (s_el > 0) c_el += w_abs;
      for (int i = 0; i < de; ++i) {
        d_edit[i] += c_el * L[i] + c_eg * G[i];
        d_gen[j][i] += c_eg * E[i] + c_gl * L[i];
        d_loc[k][i] += c_el * E[i] + c_gl * G[i];
      }
    }
  }

  const double n_bce = static_cast<double>(1 + gen.size() + loc.size() + others.size());
  RouterParams* gp = grads;
  auto bce_term = [&](const RouterTrace& t, int label, Vector& d_emb) {
    const double z = router_logit(t.embedding, p);
    out.bce += bce_with_logit(z, label) / n_bce;
    if (!gp) return;
    const double dz = config.lambda3 * (sigmoid(z) - label) / n_bce;
    for (int i = 0; i < de; ++i) {
      gp->w_cls.data[i] += scale * dz * t.embedding.v[i];
      d_emb[i] += dz * p.w_cls.data[i];
    }
    gp->b_cls.data[0] += scale * dz;
  };
  bce_term(edit, 1, d_edit);
  for (std::size_t j = 0; j < gen.size(); ++j) bce_term(gen[j], 1, d_gen[j]);
  for (std::size_t i = 0; i < others.size(); ++i) bce_term(others[i], i < n_reph ? 1 : 0, d_other[i]);
  for (std::size_t k = 0; k < loc.size(); ++k) bce_term(loc[k], 0, d_loc[k]);

  out.total = config.lambda1 * (out.trip1 + out.trip2) + config.lambda2 * out.abs + config.lambda3 * out.bce;
  if (grads) {
    auto back = [&](const RouterTrace& t, Vector& d) {
      for (double& v : d) v *= scale;
      router_backward(t, d, p, *grads);
    };
    back(edit, d_edit);
    for (std::size_t j = 0; j < gen.size(); ++j) back(gen[j], d_gen[j]);
    for (std::size_t k = 0; k < loc.size(); ++k) back(loc[k], d_loc[k]);
    for (std::size_t i = 0; i < others.size(); ++i) back(others[i], d_other[i]);
  }
  return out;
}

static bool all_zero_weights(const RouterTrainConfig& c) { return c.lambda1 == 0 && c.lambda2 == 0 && c.lambda3 == 0; }

RouterParams train_router(const std::vector<RouterSample>& samples, int hidden_dim, const RouterTrainConfig& config,
                          const RouterLog& log) {
  config.validate();
  if (samples.empty()) throw EmptySet("train_router: no samples");
  const int d_r = config.d_r > 0 ? config.d_r : hidden_dim;
  const int d_e = config.d_e > 0 ? config.d_e : hidden_dim / 2;
  RouterParams p = RouterParams::initialize(hidden_dim, d_r, d_e, derive_seed(config.seed, "router-init"));
  if (all_zero_weights(config)) return p;

  Rng rng(derive_seed(config.seed, "router-order"));
  std::vector<int> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  Adam adam(config.lr);
  std::vector<Matrix*> params;
  for (auto& [n, m] : named_params(p)) params.push_back(m);

  for (int step = 0; step < config.steps; ++step) {
    RouterParams grads = RouterParams::zeros_like(p);
    DisentanglementLoss mean;
    for (int b = 0; b < config.batch_size; ++b) {
      if (cursor == order.size()) {
        rng.shuffle(order.begin(), order.end());
        cursor = 0;
      }
      const double scale = 1.0 / config.batch_size;
      const DisentanglementLoss l = router_sample_loss(samples[order[cursor++]], p, config, &grads, scale);
      mean.total += l.total * scale;
      mean.trip1 += l.trip1 * scale;
      mean.trip2 += l.trip2 * scale;
      mean.abs += l.abs * scale;
      mean.bce += l.bce * scale;
    }
    if (!std::isfinite(mean.total)) {
      throw NonFiniteLoss("router loss became non-finite at step " + std::to_string(step));
    }
    std::vector<const Matrix*> g;
    for (auto& [n, m] : named_params(std::as_const(grads))) g.push_back(m);
    const double progress = static_cast<double>(step) / std::max(1, config.steps);
    adam.step(params, g, 0.1 + 0.9 * 0.5 * (1.0 + std::cos(M_PI * progress)));
    if (log) log(step, mean);
  }
  return p;
}

double routing_accuracy(const std::vector<RouterSample>& samples, const RouterParams& p) {
  long correct = 0, total = 0;
  for (const auto& s : samples) {
    const RouterEmbedding anchor = router_embed(s.edit, p, s.layer).embedding;
    auto score = [&](const std::vector<Vector>& hs, bool label) {
      for (const auto& h : hs) {
        correct += gate(router_embed(h, p, s.layer).embedding, anchor).g == label;
        ++total;
      }
    };
    ++total;
    ++correct;  // the anchor itself always opens its gate
    score(s.rephrases, true);
    score(s.fg_gen, true);
    score(s.fg_loc, false);
    score(s.t_loc, false);
  }
  return total ? static_cast<double>(correct) / total : 0.0;
}

Container router_to_container(const RouterParams& p) {
  Container c;
  c.kind = "router";
  c.set("d", std::to_string(p.d));
  c.set("d_r", std::to_string(p.d_r));
  c.set("d_e", std::to_string(p.d_e));
  for (const auto& [name, m] : named_params(p)) c.add(name, *m);
  return c;
}

RouterParams router_from_container(const Container& c) {
  if (c.kind != "router") throw DataError("expected a router checkpoint, found kind '" + c.kind + "'");
  RouterParams p = RouterParams::initialize(c.get_int("d"), c.get_int("d_r"), c.get_int("d_e"), 0);
  for (auto& [name, m] : named_params(p)) {
    const Matrix& t = c.tensor(name);
    if (!t.same_shape(*m)) throw DataError("router tensor '" + name + "' has the wrong shape");
    *m = t;
  }
  return p;
}

void save_router(const std::filesystem::path& path, const RouterParams& p,
                 const std::vector<std::pair<std::string, std::string>>& run_config) {
  Container c = router_to_container(p);
  for (const auto& [k, v] : run_config) c.set("run." + k, v);
  write_container(path, c);
}

RouterParams load_router(const std::filesystem::path& path) { return router_from_container(read_container(path)); }

}  // namespace ldke
