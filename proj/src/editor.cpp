// SPDX-License-Identifier: Apache-2.0

#include "ldke/editor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <sstream>

#include "ldke/errors.hpp"
#include "ldke/kernels.hpp"
#include "ldke/optim.hpp"
#include "ldke/rng.hpp"

namespace ldke {

namespace {

std::string exact(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string join_ints(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::vector<int> split_ints(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(std::stoi(item));
  }
  return out;
}

LayerScale make_scale(int dim, double eta) {
  LayerScale s;
  s.gamma1 = Matrix(1, dim, 1.0);
  s.beta1 = Matrix(1, dim);
  s.gamma2 = Matrix(1, dim, 1.0);
  s.beta2 = Matrix(1, dim);
  s.log_eta = Matrix(1, 1, std::log(eta));
  round_to_float(s.log_eta);
  return s;
}

EditorNet make_net(int x_dim, int delta_dim, int rank, const std::vector<int>& layers, double eta, Rng& rng) {
  EditorNet n;
  n.x_dim = x_dim;
  n.delta_dim = delta_dim;
  const int dim = x_dim + delta_dim;
  n.a1 = Matrix(dim, rank);
  n.a2 = Matrix(dim, rank);
  n.b1 = Matrix(rank, dim);
  n.b2 = Matrix(rank, dim);
  const double sd = 1.0 / std::sqrt(static_cast<double>(dim));
  for (double& v : n.b1.data) v = rng.normal(0.0, sd);
  for (double& v : n.b2.data) v = rng.normal(0.0, sd);
  round_to_float(n.b1);
  round_to_float(n.b2);
  n.bias = Matrix(1, dim);
  for (int l : layers) n.layers.emplace(l, make_scale(dim, eta));
  return n;
}

// a (D x r) times v (r)
Vector mat_vec(const Matrix& a, std::span<const double> v) {
  Vector y(a.rows, 0.0);
  for (int i = 0; i < a.rows; ++i) y[i] = dot(a.row(i), v);
  return y;
}

// a^T g
Vector mat_t_vec(const Matrix& a, std::span<const double> g) {
  Vector y(a.cols, 0.0);
  for (int i = 0; i < a.rows; ++i) {
    if (g[i] == 0.0) continue;
    axpy(g[i], a.row(i), y);
  }
  return y;
}

void outer_acc(std::span<const double> x, std::span<const double> y, double alpha, Matrix& out) {
  kernels::add_outer(alpha, x, y, out);
}

Vector concat(std::span<const double> a, double sa, std::span<const double> b, double sb) {
  Vector z;
  z.reserve(a.size() + b.size());
  for (double v : a) z.push_back(v / sa);
  for (double v : b) z.push_back(v / sb);
  return z;
}

}  // namespace

const LayerScale& EditorNet::layer(int l) const {
  auto it = layers.find(l);
  if (it == layers.end()) throw UnknownLayer("editor has no scales registered for layer " + std::to_string(l));
  return it->second;
}

int default_editor_rank(const ToyModelConfig& m) {
  const int lo = std::min(m.hidden_dim, m.hidden_dim + m.ffn_dim);
  return (lo + 7) / 8;
}

EditorParams EditorParams::initialize(const ToyModelConfig& model, int rank, double initial_eta, std::uint64_t seed) {
  if (rank < 1) throw UsageError("editor rank must be positive");
  if (!(initial_eta > 0.0)) throw UsageError("initial eta must be positive");
  Rng rng(seed);
  const auto layers = candidate_layers(model.num_layers);
  EditorParams p;
  p.rank = rank;
  p.up = make_net(model.hidden_dim, model.ffn_dim, rank, layers, initial_eta, rng);
  p.down = make_net(model.ffn_dim, model.hidden_dim, rank, layers, initial_eta, rng);
  return p;
}

EditorParams EditorParams::zeros_like(const EditorParams& p) {
  EditorParams z = p;
  for (auto& [n, m] : named_params(z)) m->fill(0.0);
  return z;
}

template <typename P, typename M>
static std::vector<std::pair<std::string, M*>> collect(P& p) {
  std::vector<std::pair<std::string, M*>> out;
  auto add_net = [&](const std::string& pre, auto& n) {
    out.emplace_back(pre + ".a1", &n.a1);
    out.emplace_back(pre + ".b1", &n.b1);
    out.emplace_back(pre + ".bias", &n.bias);
    out.emplace_back(pre + ".a2", &n.a2);
    out.emplace_back(pre + ".b2", &n.b2);
    for (auto& [l, s] : n.layers) {
      const std::string q = pre + ".L" + std::to_string(l);
      out.emplace_back(q + ".gamma1", &s.gamma1);
      out.emplace_back(q + ".beta1", &s.beta1);
      out.emplace_back(q + ".gamma2", &s.gamma2);
      out.emplace_back(q + ".beta2", &s.beta2);
      out.emplace_back(q + ".log_eta", &s.log_eta);
    }
  };
  add_net("up", p.up);
  add_net("down", p.down);
  return out;
}

std::vector<std::pair<std::string, Matrix*>> named_params(EditorParams& p) { return collect<EditorParams, Matrix>(p); }
std::vector<std::pair<std::string, const Matrix*>> named_params(const EditorParams& p) {
  return collect<const EditorParams, const Matrix>(p);
}

EditorTrace editor_forward(std::span<const double> z, int layer, const EditorParams& params, WeightClass c) {
  const EditorNet& n = params.net(c);
  const LayerScale& s = n.layer(layer);
  const int dim = n.dim();
  if (static_cast<int>(z.size()) != dim) {
    throw ShapeMismatch("editor_forward: input has " + std::to_string(z.size()) + " entries, expected " +
                        std::to_string(dim));
  }
  EditorTrace t;
  t.z.assign(z.begin(), z.end());
  t.v1 = mat_vec(n.b1, z);
  t.u1 = mat_vec(n.a1, t.v1);
  t.p1.resize(dim);
  t.m.resize(dim);
  for (int i = 0; i < dim; ++i) {
    t.u1[i] += n.bias.data[i];
    t.p1[i] = s.gamma1.data[i] * t.u1[i] + s.beta1.data[i];
    t.m[i] = z[i] + gelu(t.p1[i]);
  }
  t.v2 = mat_vec(n.b2, t.m);
  t.u2 = mat_vec(n.a2, t.v2);
  t.p2.resize(dim);
  t.out.resize(dim);
  for (int i = 0; i < dim; ++i) {
    t.p2[i] = s.gamma2.data[i] * t.u2[i] + s.beta2.data[i];
    t.out[i] = t.m[i] + gelu(t.p2[i]);
  }
  return t;
}

void editor_backward(const EditorTrace& t, std::span<const double> d_out, int layer, const EditorParams& params,
                     WeightClass c, EditorParams& grads) {
  const EditorNet& n = params.net(c);
  const LayerScale& s = n.layer(layer);
  EditorNet& gn = grads.net(c);
  LayerScale& gs = gn.layers.at(layer);
  const int dim = n.dim();
  Vector gp2(dim), gu2(dim);
  for (int i = 0; i < dim; ++i) {
    gp2[i] = d_out[i] * gelu_grad(t.p2[i]);
    gs.gamma2.data[i] += gp2[i] * t.u2[i];
    gs.beta2.data[i] += gp2[i];
    gu2[i] = gp2[i] * s.gamma2.data[i];
  }
  outer_acc(gu2, t.v2, 1.0, gn.a2);
  const Vector gv2 = mat_t_vec(n.a2, gu2);
  outer_acc(gv2, t.m, 1.0, gn.b2);
  Vector gm = mat_t_vec(n.b2, gv2);
  Vector gu1(dim);
  for (int i = 0; i < dim; ++i) {
    gm[i] += d_out[i];
    const double gp1 = gm[i] * gelu_grad(t.p1[i]);
    gs.gamma1.data[i] += gp1 * t.u1[i];
    gs.beta1.data[i] += gp1;
    gu1[i] = gp1 * s.gamma1.data[i];
    gn.bias.data[i] += gu1[i];
  }
  outer_acc(gu1, t.v1, 1.0, gn.a1);
  const Vector gv1 = mat_t_vec(n.a1, gu1);
  outer_acc(gv1, t.z, 1.0, gn.b1);
}

static Matrix class_delta(const std::vector<Vector>& outs, const EditorNet& n, double eta) {
  Matrix d(n.x_dim, n.delta_dim);
  for (const auto& o : outs) {
    if (static_cast<int>(o.size()) != n.dim()) {
      throw PartitionMismatch("editor output of length " + std::to_string(o.size()) + " cannot split into " +
                              std::to_string(n.x_dim) + " + " + std::to_string(n.delta_dim));
    }
    const std::span<const double> x(o.data(), n.x_dim);
    const std::span<const double> g(o.data() + n.x_dim, n.delta_dim);
    kernels::add_outer(-eta, x, g, d);
  }
  return d;
}

WeightDelta build_delta(const std::vector<Vector>& up_outputs, const std::vector<Vector>& down_outputs, int layer,
                        const EditorParams& params) {
  WeightDelta d;
  d.layer = layer;
  d.delta_up = class_delta(up_outputs, params.up, std::exp(params.up.layer(layer).log_eta.data[0]));
  d.delta_down = class_delta(down_outputs, params.down, std::exp(params.down.layer(layer).log_eta.data[0]));
  d.source_rank = static_cast<int>(std::max(up_outputs.size(), down_outputs.size()));
  return d;
}

// -----------------------------------------------------------------------------

static void factor_rows(const FfnFactors& f, std::vector<Vector>& x_up, std::vector<Vector>& d_up,
                        std::vector<Vector>& x_down, std::vector<Vector>& d_down) {
  for (int r : f.target_rows) {
    auto row = [r](const Matrix& m) { return Vector(m.row(r).begin(), m.row(r).end()); };
    x_up.push_back(row(f.x_up));
    d_up.push_back(row(f.delta_up));
    x_down.push_back(row(f.x_down));
    d_down.push_back(row(f.delta_down));
  }
}

EditInputs edit_inputs(const ToyModelWeights& w, const EditInstance& instance, const LayerSelection& selection,
                       const EditorParams& params) {
  EditInputs in;
  in.selection = selection;
  const GradFactors gf = ffn_grad_factors(w, instance, selection.edit_layers);
  for (int l : selection.edit_layers) {
    std::vector<Vector> xu, du, xd, dd;
    factor_rows(gf.for_layer(l), xu, du, xd, dd);
    std::vector<Vector> zu, zd;
    for (std::size_t t = 0; t < xu.size(); ++t) {
      zu.push_back(concat(xu[t], params.up.x_scale, du[t], params.up.delta_scale));
      zd.push_back(concat(xd[t], params.down.x_scale, dd[t], params.down.delta_scale));
    }
    in.z_up.push_back(std::move(zu));
    in.z_down.push_back(std::move(zd));
  }
  return in;
}

std::vector<WeightDelta> editor_deltas(const EditInputs& inputs, const EditorParams& params) {
  std::vector<WeightDelta> out;
  const auto& layers = inputs.selection.edit_layers;
  for (std::size_t j = 0; j < layers.size(); ++j) {
    std::vector<Vector> up, down;
    for (const auto& z : inputs.z_up[j]) up.push_back(editor_forward(z, layers[j], params, WeightClass::up).out);
    for (const auto& z : inputs.z_down[j])
      down.push_back(editor_forward(z, layers[j], params, WeightClass::down).out);
    out.push_back(build_delta(up, down, layers[j], params));
  }
  return out;
}

EditPackage make_edit_with_selection(const ToyModelWeights& w, const EditInstance& instance,
                                     const LayerSelection& selection, const EditorParams& editor,
                                     const RouterParams& router, int edit_id) {
  EditPackage p;
  p.edit_id = edit_id;
  p.selection = selection;
  p.target = instance.target;
  p.deltas = editor_deltas(edit_inputs(w, instance, selection, editor), editor);
  for (auto& d : p.deltas) {
    round_to_float(d.delta_up);
    round_to_float(d.delta_down);
  }
  const Vector h = router_input(w, instance.image, instance.prompt, selection.l_min);
  p.anchor = router_embed(h, router, selection.l_min).embedding;
  return p;
}

EditPackage make_edit(const ToyModelWeights& w, const EditInstance& instance, int k, const EditorParams& editor,
                      const RouterParams& router, int edit_id) {
  if (instance.target.empty()) throw AlignmentError("make_edit: empty target");
  const Localization loc = localize(w, instance.image, instance.prompt, instance.target.front(), k);
  return make_edit_with_selection(w, instance, loc.selection, editor, router, edit_id);
}

FfnOverrides apply_deltas(const ToyModelWeights& w, const std::vector<WeightDelta>& deltas,
                          std::vector<Matrix>& storage) {
  storage.clear();
  storage.reserve(2 * deltas.size());
  FfnOverrides o;
  o.up.assign(w.config.num_layers, nullptr);
  o.down.assign(w.config.num_layers, nullptr);
  for (const auto& d : deltas) {
    const LayerWeights& lw = w.layers.at(d.layer);
    require_same_shape(lw.w_up, d.delta_up, "delta_up");
    require_same_shape(lw.w_down, d.delta_down, "delta_down");
    Matrix up, down;
    kernels::add(lw.w_up, d.delta_up, up);
    kernels::add(lw.w_down, d.delta_down, down);
    storage.push_back(std::move(up));
    storage.push_back(std::move(down));
    o.up[d.layer] = &storage[storage.size() - 2];
    o.down[d.layer] = &storage.back();
  }
  return o;
}

// -----------------------------------------------------------------------------
// Instances

TokenIds answer_tokens(const std::string& answer, const Vocabulary& vocab) {
  TokenIds t = vocab.tokenize(answer);
  t.push_back(Vocabulary::kEndOfAnswer);
  return t;
}

EditInstance edit_instance(const synth::EditBundle& b, const Vocabulary& vocab) {
  return {synth::render_scene(b.scene), vocab.tokenize(b.edit_prompt), answer_tokens(b.new_answer, vocab)};
}

LabeledInstance labeled(const synth::EditBundle& b, const synth::QueryItem& q, bool text_only, const Vocabulary& vocab) {
  return {text_only ? synth::null_image() : synth::render_scene(b.scene), vocab.tokenize(q.prompt),
          answer_tokens(q.answer, vocab)};
}

// -----------------------------------------------------------------------------
// Loss pieces

double nll_of(const ToyModelWeights& w, const LabeledInstance& q, const FfnOverrides* ffn) {
  const ForwardResult r = forward(w, q.image, teacher_forced_input(q.prompt, q.target), false, ffn);
  return autoregressive_loss(r.logits, q.target, target_offset(w.config, q.prompt));
}

Matrix answer_log_distribution(const ToyModelWeights& w, const LabeledInstance& q, const FfnOverrides* ffn) {
  const ForwardResult r = forward(w, q.image, teacher_forced_input(q.prompt, q.target), false, ffn);
  const auto rows = target_rows(q.target, target_offset(w.config, q.prompt));
  Matrix lp(static_cast<int>(rows.size()), r.logits.cols);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto z = r.logits.row(rows[i]);
    const double lse = log_sum_exp(z);
    for (int j = 0; j < r.logits.cols; ++j) lp(static_cast<int>(i), j) = z[j] - lse;
  }
  return lp;
}

double kl_from(const Matrix& reference, const Matrix& logits_rows) {
  require_same_shape(reference, logits_rows, "kl_from");
  double kl = 0.0;
  for (int i = 0; i < reference.rows; ++i) {
    const double lse = log_sum_exp(logits_rows.row(i));
    for (int j = 0; j < reference.cols; ++j) {
      const double lp = reference(i, j);
      if (lp == -std::numeric_limits<double>::infinity()) continue;
      kl += std::exp(lp) * (lp - (logits_rows(i, j) - lse));
    }
  }
  return kl / reference.rows;
}

void EditorTrainConfig::validate() const {
  if (lambda_gen < 0 || lambda_loc < 0 || lambda_m_gen < 0 || lambda_m_loc < 0) {
    throw UsageError("editor loss weights must be non-negative");
  }
  if (lambda_gen == 0 && lambda_loc == 0 && lambda_m_gen == 0 && lambda_m_loc == 0) {
    throw UsageError("at least one editor loss weight must be positive");
  }
  if (steps < 0 || batch_size < 1 || k < 1 || rank < 0 || !(lr > 0) || !(initial_eta > 0)) {
    throw UsageError("editor training settings out of range");
  }
}

EditorExample make_editor_example(const ToyModelWeights& w, const synth::EditBundle& bundle, const Vocabulary& vocab,
                                  int k) {
  const EditInstance inst = edit_instance(bundle, vocab);
  const Localization loc = localize(w, inst.image, inst.prompt, inst.target.front(), k);
  EditorExample ex = make_editor_example(w, bundle, vocab, loc.selection);
  return ex;
}

EditorExample make_editor_example(const ToyModelWeights& w, const synth::EditBundle& bundle, const Vocabulary& vocab,
                                  const LayerSelection& selection) {
  EditorExample ex;
  ex.edit = edit_instance(bundle, vocab);
  ex.selection = selection;
  ex.layers = selection.edit_layers;
  const GradFactors gf = ffn_grad_factors(w, ex.edit, ex.layers);
  for (int l : ex.layers) {
    ex.x_up.emplace_back();
    ex.d_up.emplace_back();
    ex.x_down.emplace_back();
    ex.d_down.emplace_back();
    factor_rows(gf.for_layer(l), ex.x_up.back(), ex.d_up.back(), ex.x_down.back(), ex.d_down.back());
  }
  ex.gen.push_back({ex.edit.image, ex.edit.prompt, ex.edit.target});
  for (const auto& q : bundle.rephrases) ex.gen.push_back(labeled(bundle, q, false, vocab));
  for (const auto& q : bundle.fg_gen) ex.m_gen.push_back(labeled(bundle, q, false, vocab));
  for (const auto& q : bundle.t_loc) ex.loc.push_back(labeled(bundle, q, true, vocab));
  for (const auto& q : bundle.fg_loc) ex.m_loc.push_back(labeled(bundle, q, false, vocab));
  for (const auto& q : ex.loc) ex.loc_ref.push_back(answer_log_distribution(w, q, nullptr));
  for (const auto& q : ex.m_loc) ex.m_loc_ref.push_back(answer_log_distribution(w, q, nullptr));
  return ex;
}

EditorLoss editor_loss(const ToyModelWeights& w, const EditorExample& ex, const EditorParams& params,
                       const EditorTrainConfig& config, EditorParams* grads, double scale) {
  EditorLoss out;
  const int nl = static_cast<int>(ex.layers.size());
  // Editor forward for every (layer, token).
  std::vector<std::vector<EditorTrace>> tu(nl), td(nl);
  std::vector<WeightDelta> deltas;
  for (int j = 0; j < nl; ++j) {
    const int l = ex.layers[j];
    std::vector<Vector> up, down;
    for (std::size_t t = 0; t < ex.x_up[j].size(); ++t) {
      tu[j].push_back(editor_forward(concat(ex.x_up[j][t], params.up.x_scale, ex.d_up[j][t], params.up.delta_scale),
                                     l, params, WeightClass::up));
      td[j].push_back(editor_forward(
          concat(ex.x_down[j][t], params.down.x_scale, ex.d_down[j][t], params.down.delta_scale), l, params,
          WeightClass::down));
      up.push_back(tu[j].back().out);
      down.push_back(td[j].back().out);
    }
    deltas.push_back(build_delta(up, down, l, params));
  }
  std::vector<Matrix> storage;
  const FfnOverrides ffn = apply_deltas(w, deltas, storage);

  std::vector<Matrix> g_up, g_down;
  if (grads) {
    for (int j = 0; j < nl; ++j) {
      g_up.emplace_back(w.config.hidden_dim, w.config.ffn_dim);
      g_down.emplace_back(w.config.ffn_dim, w.config.hidden_dim);
    }
  }
  auto run = [&](const LabeledInstance& q, double weight, const Matrix* ref) -> double {
    const TokenIds seq = teacher_forced_input(q.prompt, q.target);
    const ForwardCache cache = forward_cached(w, q.image, seq, &ffn);
    const int offset = target_offset(w.config, q.prompt);
    double value;
    Matrix dlogits;
    if (!ref) {
      value = autoregressive_loss(cache.logits, q.target, offset);
      if (grads) dlogits = autoregressive_loss_grad(cache.logits, q.target, offset, weight * scale);
    } else {
      const auto rows = target_rows(q.target, offset);
      Matrix lr(static_cast<int>(rows.size()), cache.logits.cols);
      for (std::size_t i = 0; i < rows.size(); ++i) {
        std::copy(cache.logits.row(rows[i]).begin(), cache.logits.row(rows[i]).end(), lr.row(i).begin());
      }
      value = kl_from(*ref, lr);
      if (grads) {
        dlogits = Matrix(cache.logits.rows, cache.logits.cols);
        const double c = weight * scale / static_cast<double>(rows.size());
        Vector prob(cache.logits.cols);
        for (std::size_t i = 0; i < rows.size(); ++i) {
          softmax(cache.logits.row(rows[i]), prob);
          auto d = dlogits.row(rows[i]);
          for (int v = 0; v < cache.logits.cols; ++v) d[v] = c * (prob[v] - std::exp((*ref)(static_cast<int>(i), v)));
        }
      }
    }
    if (grads && weight != 0.0) {
      BackwardOptions opts;
      opts.factor_layers = ex.layers;
      const auto factors = backward(w, cache, dlogits, opts);
      for (const auto& f : factors) {
        const int j = static_cast<int>(std::find(ex.layers.begin(), ex.layers.end(), f.layer) - ex.layers.begin());
        kernels::matmul_tn_acc(f.x_up, f.delta_up, g_up[j]);
        kernels::matmul_tn_acc(f.x_down, f.delta_down, g_down[j]);
      }
    }
    return value;
  };
  auto category = [&](const std::vector<LabeledInstance>& qs, const std::vector<Matrix>* refs, double lambda,
                      const char* name) -> double {
    if (lambda == 0.0) return 0.0;
    if (qs.empty()) throw EmptyCategory(std::string("editor loss: bundle has no ") + name + " queries");
    double sum = 0.0;
    const double weight = lambda / static_cast<double>(qs.size());
    for (std::size_t i = 0; i < qs.size(); ++i) sum += run(qs[i], weight, refs ? &(*refs)[i] : nullptr);
    return sum / static_cast<double>(qs.size());
  };
  out.gen = category(ex.gen, nullptr, config.lambda_gen, "generality");
  out.m_gen = category(ex.m_gen, nullptr, config.lambda_m_gen, "FG-Gen");
  out.loc = category(ex.loc, &ex.loc_ref, config.lambda_loc, "T-Loc");
  out.m_loc = category(ex.m_loc, &ex.m_loc_ref, config.lambda_m_loc, "FG-Loc");
  out.total = config.lambda_gen * out.gen + config.lambda_loc * out.loc + config.lambda_m_gen * out.m_gen +
              config.lambda_m_loc * out.m_loc;
  if (!grads) return out;

  // Back through dW = -eta sum_t x~ d~^T into the editor.
  for (int j = 0; j < nl; ++j) {
    const int l = ex.layers[j];
    auto back_class = [&](const std::vector<EditorTrace>& traces, const Matrix& G, const Matrix& delta,
                          WeightClass c) {
      const EditorNet& n = params.net(c);
      const double eta = std::exp(n.layer(l).log_eta.data[0]);
      double g_log_eta = 0.0;
      for (std::size_t i = 0; i < delta.size(); ++i) g_log_eta += delta.data[i] * G.data[i];
      grads->net(c).layers.at(l).log_eta.data[0] += g_log_eta;
      for (const auto& t : traces) {
        const std::span<const double> x(t.out.data(), n.x_dim);
        const std::span<const double> g(t.out.data() + n.x_dim, n.delta_dim);
        Vector d_out(n.dim(), 0.0);
        for (int a = 0; a < n.x_dim; ++a) d_out[a] = -eta * dot(G.row(a), g);
        for (int a = 0; a < n.x_dim; ++a) {
          if (x[a] == 0.0) continue;
          const auto gr = G.row(a);
          for (int b = 0; b < n.delta_dim; ++b) d_out[n.x_dim + b] -= eta * x[a] * gr[b];
        }
        editor_backward(t, d_out, l, params, c, *grads);
      }
    };
    back_class(tu[j], g_up[j], deltas[j].delta_up, WeightClass::up);
    back_class(td[j], g_down[j], deltas[j].delta_down, WeightClass::down);
  }
  return out;
}

void fit_input_scales(EditorParams& params, const std::vector<EditorExample>& examples) {
  auto rms = [&](auto member) {
    double ss = 0.0;
    long n = 0;
    for (const auto& ex : examples)
      for (const auto& per_layer : ex.*member)
        for (const auto& v : per_layer) {
          for (double x : v) ss += x * x;
          n += static_cast<long>(v.size());
        }
    const double r = n ? std::sqrt(ss / n) : 1.0;
    return r > 0.0 ? static_cast<double>(static_cast<float>(r)) : 1.0;
  };
  params.up.x_scale = rms(&EditorExample::x_up);
  params.up.delta_scale = rms(&EditorExample::d_up);
  params.down.x_scale = rms(&EditorExample::x_down);
  params.down.delta_scale = rms(&EditorExample::d_down);
}

EditorParams train_editor(const ToyModelWeights& w, const std::vector<EditorExample>& examples,
                          const EditorTrainConfig& config, const EditorLog& log) {
  config.validate();
  if (examples.empty()) throw EmptySet("train_editor: no training bundles");
  const int rank = config.rank > 0 ? config.rank : default_editor_rank(w.config);
  EditorParams p = EditorParams::initialize(w.config, rank, config.initial_eta, derive_seed(config.seed, "editor-init"));
  fit_input_scales(p, examples);

  Rng rng(derive_seed(config.seed, "editor-order"));
  std::vector<int> order(examples.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  Adam adam(config.lr);
  std::vector<Matrix*> params;
  for (auto& [n, m] : named_params(p)) params.push_back(m);

  for (int step = 0; step < config.steps; ++step) {
    EditorParams grads = EditorParams::zeros_like(p);
    EditorLoss mean;
    const double scale = 1.0 / config.batch_size;
    for (int b = 0; b < config.batch_size; ++b) {
      if (cursor == order.size()) {
        rng.shuffle(order.begin(), order.end());
        cursor = 0;
      }
      const EditorLoss l = editor_loss(w, examples[order[cursor++]], p, config, &grads, scale);
      mean.total += scale * l.total;
      mean.gen += scale * l.gen;
      mean.loc += scale * l.loc;
      mean.m_gen += scale * l.m_gen;
      mean.m_loc += scale * l.m_loc;
    }
    if (!std::isfinite(mean.total)) {
      throw NonFiniteLoss("editor loss became non-finite at step " + std::to_string(step) + " (gen=" +
                          std::to_string(mean.gen) + " loc=" + std::to_string(mean.loc) + ")");
    }
    std::vector<const Matrix*> g;
    for (auto& [n, m] : named_params(std::as_const(grads))) g.push_back(m);
    const double progress = static_cast<double>(step) / std::max(1, config.steps);
    adam.step(params, g, 0.1 + 0.9 * 0.5 * (1.0 + std::cos(M_PI * progress)));
    if (log) log(step, mean);
  }
  return p;
}

// -----------------------------------------------------------------------------
// Persistence

Container editor_to_container(const EditorParams& p) {
  Container c;
  c.kind = "editor";
  c.set("rank", std::to_string(p.rank));
  c.set("layers", join_ints([&] {
          std::vector<int> v;
          for (const auto& [l, s] : p.up.layers) v.push_back(l);
          return v;
        }()));
  for (const auto* n : {&p.up, &p.down}) {
    const std::string pre = n == &p.up ? "up" : "down";
    c.set(pre + ".x_dim", std::to_string(n->x_dim));
    c.set(pre + ".delta_dim", std::to_string(n->delta_dim));
    c.set(pre + ".x_scale", exact(n->x_scale));
    c.set(pre + ".delta_scale", exact(n->delta_scale));
  }
  for (const auto& [name, m] : named_params(p)) c.add(name, *m);
  return c;
}

EditorParams editor_from_container(const Container& c) {
  if (c.kind != "editor") throw DataError("expected an editor checkpoint, found kind '" + c.kind + "'");
  EditorParams p;
  p.rank = c.get_int("rank");
  const auto layers = split_ints(c.get("layers"));
  for (auto* n : {&p.up, &p.down}) {
    const std::string pre = n == &p.up ? "up" : "down";
    n->x_dim = c.get_int(pre + ".x_dim");
    n->delta_dim = c.get_int(pre + ".delta_dim");
    n->x_scale = c.get_double(pre + ".x_scale");
    n->delta_scale = c.get_double(pre + ".delta_scale");
    for (int l : layers) n->layers.emplace(l, LayerScale{});
  }
  for (auto& [name, m] : named_params(p)) *m = c.tensor(name);
  return p;
}

void save_editor(const std::filesystem::path& path, const EditorParams& p,
                 const std::vector<std::pair<std::string, std::string>>& run_config) {
  Container c = editor_to_container(p);
  for (const auto& [k, v] : run_config) c.set("run." + k, v);
  write_container(path, c);
}

EditorParams load_editor(const std::filesystem::path& path) { return editor_from_container(read_container(path)); }

Container package_to_container(const EditPackage& p) {
  Container c;
  c.kind = "package";
  c.set("edit_id", std::to_string(p.edit_id));
  c.set("candidates", join_ints(p.selection.candidate_set));
  c.set("k", std::to_string(p.selection.k));
  c.set("edit_layers", join_ints(p.selection.edit_layers));
  c.set("l_min", std::to_string(p.selection.l_min));
  c.set("target", join_ints(p.target));
  c.set("anchor_layer", std::to_string(p.anchor.source_layer));
  std::string a;
  for (std::size_t i = 0; i < p.anchor.v.size(); ++i) a += (i ? "," : "") + exact(p.anchor.v[i]);
  c.set("anchor", a);
  for (const auto& d : p.deltas) {
    c.set("delta." + std::to_string(d.layer) + ".source_rank", std::to_string(d.source_rank));
    c.add("delta_up." + std::to_string(d.layer), d.delta_up);
    c.add("delta_down." + std::to_string(d.layer), d.delta_down);
  }
  return c;
}

EditPackage package_from_container(const Container& c) {
  if (c.kind != "package") throw DataError("expected an edit package, found kind '" + c.kind + "'");
  EditPackage p;
  p.edit_id = c.get_int("edit_id");
  p.selection.candidate_set = split_ints(c.get("candidates"));
  p.selection.k = c.get_int("k");
  p.selection.edit_layers = split_ints(c.get("edit_layers"));
  p.selection.l_min = c.get_int("l_min");
  p.target = split_ints(c.get("target"));
  p.anchor.source_layer = c.get_int("anchor_layer");
  std::stringstream ss(c.get("anchor"));
  std::string item;
  while (std::getline(ss, item, ',')) p.anchor.v.push_back(std::stod(item));
  for (int l : p.selection.edit_layers) {
    WeightDelta d;
    d.layer = l;
    d.source_rank = c.get_int("delta." + std::to_string(l) + ".source_rank");
    d.delta_up = c.tensor("delta_up." + std::to_string(l));
    d.delta_down = c.tensor("delta_down." + std::to_string(l));
    p.deltas.push_back(std::move(d));
  }
  return p;
}

}  // namespace ldke
