// SPDX-License-Identifier: Apache-2.0

#include "ldke/model.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>

#include "ldke/errors.hpp"
#include "ldke/kernels.hpp"
#include "ldke/rng.hpp"

namespace ldke {

namespace {

constexpr double kLnEps = 1e-5;

std::atomic<std::uint64_t> g_forward_calls{0};
thread_local std::uint64_t t_forward_calls = 0;

std::uint64_t count_forward() {
  ++t_forward_calls;
  return g_forward_calls.fetch_add(1, std::memory_order_relaxed) + 1;
}

Matrix gaussian(Rng& rng, int rows, int cols, double stddev) {
  Matrix m(rows, cols);
  for (double& v : m.data) v = rng.normal(0.0, stddev);
  round_to_float(m);
  return m;
}

// Row-wise layer norm; records per-row mean and reciprocal std.
void layer_norm(const Matrix& x, const Matrix& scale, const Matrix& shift, Matrix& out, Vector& mean, Vector& rstd) {
  const int n = x.cols;
  out = Matrix(x.rows, n);
  mean.assign(x.rows, 0.0);
  rstd.assign(x.rows, 0.0);
  for (int r = 0; r < x.rows; ++r) {
    auto xr = x.row(r);
    double mu = 0.0;
    for (double v : xr) mu += v;
    mu /= n;
    double var = 0.0;
    for (double v : xr) var += (v - mu) * (v - mu);
    var /= n;
    const double rs = 1.0 / std::sqrt(var + kLnEps);
    mean[r] = mu;
    rstd[r] = rs;
    auto o = out.row(r);
    for (int j = 0; j < n; ++j) o[j] = (xr[j] - mu) * rs * scale.data[j] + shift.data[j];
  }
}

// Backward of layer_norm for all rows. dx is accumulated into.
void layer_norm_backward(const Matrix& x, const Vector& mean, const Vector& rstd, const Matrix& scale,
                         const Matrix& dy, Matrix& dx, Matrix* dscale, Matrix* dshift, int row_begin = 0) {
  const int n = x.cols;
  Vector xhat(n), dxhat(n);
  for (int r = row_begin; r < x.rows; ++r) {
    auto xr = x.row(r);
    auto dyr = dy.row(r);
    double m1 = 0.0, m2 = 0.0;
    for (int j = 0; j < n; ++j) {
      xhat[j] = (xr[j] - mean[r]) * rstd[r];
      dxhat[j] = dyr[j] * scale.data[j];
      m1 += dxhat[j];
      m2 += dxhat[j] * xhat[j];
    }
    m1 /= n;
    m2 /= n;
    auto dxr = dx.row(r);
    for (int j = 0; j < n; ++j) dxr[j] += rstd[r] * (dxhat[j] - m1 - xhat[j] * m2);
    if (dscale) {
      for (int j = 0; j < n; ++j) {
        dscale->data[j] += dyr[j] * xhat[j];
        dshift->data[j] += dyr[j];
      }
    }
  }
}

const Matrix& ffn_up(const ToyModelWeights& w, const FfnOverrides& ffn, int l) {
  if (l < static_cast<int>(ffn.up.size()) && ffn.up[l]) return *ffn.up[l];
  return w.layers[l].w_up;
}

const Matrix& ffn_down(const ToyModelWeights& w, const FfnOverrides& ffn, int l) {
  if (l < static_cast<int>(ffn.down.size()) && ffn.down[l]) return *ffn.down[l];
  return w.layers[l].w_down;
}

void check_inputs(const ToyModelWeights& w, const Matrix& image, std::span<const int> tokens) {
  const auto& c = w.config;
  if (tokens.empty()) throw ShapeMismatch("forward: empty token sequence");
  if (image.rows != c.num_visual_tokens || image.cols != c.visual_feature_dim) {
    throw ShapeMismatch("forward: image features must be " + std::to_string(c.num_visual_tokens) + "x" +
                        std::to_string(c.visual_feature_dim) + ", got " + std::to_string(image.rows) + "x" +
                        std::to_string(image.cols));
  }
  if (c.num_visual_tokens + static_cast<int>(tokens.size()) > c.max_seq_len) {
    throw ShapeMismatch("forward: sequence of " + std::to_string(c.num_visual_tokens + tokens.size()) +
                        " positions exceeds max_seq_len " + std::to_string(c.max_seq_len));
  }
  for (int t : tokens)
    if (t < 0 || t >= c.vocab_size) throw ShapeMismatch("forward: token id out of range: " + std::to_string(t));
}

void run_forward(const ToyModelWeights& w, const Matrix& image, std::span<const int> tokens, ForwardCache& cache) {
  const auto& c = w.config;
  const int nv = c.num_visual_tokens;
  const int T = nv + static_cast<int>(tokens.size());
  const int d = c.hidden_dim;
  const int heads = c.num_heads;
  const int dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  cache.seq_len = T;
  cache.num_visual = nv;
  cache.tokens.assign(tokens.begin(), tokens.end());
  cache.image = image;

  Matrix h(T, d);
  if (nv > 0) {
    Matrix vis;
    kernels::matmul(image, w.visual_projection, vis);
    for (int i = 0; i < nv; ++i)
      for (int j = 0; j < d; ++j) h(i, j) = vis(i, j);
  }
  for (int t = 0; t < static_cast<int>(tokens.size()); ++t) {
    auto e = w.token_embedding.row(tokens[t]);
    for (int j = 0; j < d; ++j) h(nv + t, j) = e[j];
  }
  for (int i = 0; i < T; ++i)
    for (int j = 0; j < d; ++j) h(i, j) += w.position_embedding(i, j);

  cache.layers.resize(c.num_layers);
  for (int l = 0; l < c.num_layers; ++l) {
    const LayerWeights& lw = w.layers[l];
    LayerCache& lc = cache.layers[l];
    lc.h_in = h;
    layer_norm(h, lw.ln1_scale, lw.ln1_shift, lc.x1, lc.mean1, lc.rstd1);
    kernels::matmul(lc.x1, lw.wq, lc.q);
    kernels::matmul(lc.x1, lw.wk, lc.k);
    kernels::matmul(lc.x1, lw.wv, lc.v);
    lc.attn = Matrix(T, d);
    lc.probs.assign(heads, Matrix(T, T));
    for (int hh = 0; hh < heads; ++hh) {
      Matrix& P = lc.probs[hh];
      const int off = hh * dh;
      Vector scores(T);
      for (int i = 0; i < T; ++i) {
        for (int j = 0; j <= i; ++j) {
          double s = 0.0;
          for (int x = 0; x < dh; ++x) s += lc.q(i, off + x) * lc.k(j, off + x);
          scores[j] = s * inv_sqrt;
        }
        softmax(std::span<const double>(scores.data(), i + 1), std::span<double>(&P(i, 0), i + 1));
        for (int j = 0; j <= i; ++j) {
          const double p = P(i, j);
          for (int x = 0; x < dh; ++x) lc.attn(i, off + x) += p * lc.v(j, off + x);
        }
      }
    }
    Matrix o;
    kernels::matmul(lc.attn, lw.wo, o);
    lc.a = Matrix(T, d);
    for (std::size_t i = 0; i < h.size(); ++i) lc.a.data[i] = h.data[i] + o.data[i];

    layer_norm(lc.a, lw.ln2_scale, lw.ln2_shift, lc.x2, lc.mean2, lc.rstd2);
    kernels::matmul(lc.x2, ffn_up(w, cache.ffn, l), lc.u);
    lc.g = Matrix(lc.u.rows, lc.u.cols);
    for (std::size_t i = 0; i < lc.u.size(); ++i) lc.g.data[i] = gelu(lc.u.data[i]);
    Matrix f;
    kernels::matmul(lc.g, ffn_down(w, cache.ffn, l), f);
    for (std::size_t i = 0; i < h.size(); ++i) h.data[i] = lc.a.data[i] + f.data[i];
  }
  cache.h_final = h;
  layer_norm(h, w.final_ln_scale, w.final_ln_shift, cache.y, cache.meanf, cache.rstdf);
  kernels::matmul(cache.y, w.unembedding, cache.logits);
}

}  // namespace

// ----------------------------------------------------------------------------
// Config and weights

void ToyModelConfig::validate() const {
  if (num_layers < 2) throw InvalidDepth("num_layers must be >= 2, got " + std::to_string(num_layers));
  if (hidden_dim <= 0 || ffn_dim <= 0 || vocab_size <= 0 || num_heads <= 0 || max_seq_len <= 0 ||
      visual_feature_dim <= 0 || num_visual_tokens < 0) {
    throw ShapeMismatch("model dimensions must be positive");
  }
  if (hidden_dim % num_heads != 0) throw ShapeMismatch("hidden_dim must be divisible by num_heads");
  if (max_seq_len < num_visual_tokens + 2) throw ShapeMismatch("max_seq_len must be >= num_visual_tokens + 2");
}

ToyModelWeights ToyModelWeights::initialize(const ToyModelConfig& config) {
  config.validate();
  Rng rng(derive_seed(config.rng_seed, "model-init"));
  const int d = config.hidden_dim, f = config.ffn_dim;
  // 1/sqrt(fan_in); the residual output projections are further scaled by
  // 1/sqrt(2N).
  const double s_d = 1.0 / std::sqrt(d), s_f = 1.0 / std::sqrt(f);
  const double res = 1.0 / std::sqrt(2.0 * config.num_layers);
  ToyModelWeights w;
  w.config = config;
  w.token_embedding = gaussian(rng, config.vocab_size, d, s_d);
  w.position_embedding = gaussian(rng, config.max_seq_len, d, s_d);
  w.visual_projection = gaussian(rng, config.visual_feature_dim, d, 1.0 / std::sqrt(config.visual_feature_dim));
  for (int l = 0; l < config.num_layers; ++l) {
    LayerWeights lw;
    lw.ln1_scale = Matrix(1, d, 1.0);
    lw.ln1_shift = Matrix(1, d);
    lw.wq = gaussian(rng, d, d, s_d);
    lw.wk = gaussian(rng, d, d, s_d);
    lw.wv = gaussian(rng, d, d, s_d);
    lw.wo = gaussian(rng, d, d, s_d * res);
    lw.ln2_scale = Matrix(1, d, 1.0);
    lw.ln2_shift = Matrix(1, d);
    lw.w_up = gaussian(rng, d, f, s_d);
    lw.w_down = gaussian(rng, f, d, s_f * res);
    w.layers.push_back(std::move(lw));
  }
  w.final_ln_scale = Matrix(1, d, 1.0);
  w.final_ln_shift = Matrix(1, d);
  w.unembedding = gaussian(rng, d, config.vocab_size, s_d);
  return w;
}

ToyModelWeights ToyModelWeights::zeros(const ToyModelConfig& config) {
  ToyModelWeights w = initialize(config);
  for (auto& [name, m] : named_params(w)) m->fill(0.0);
  return w;
}

template <typename W, typename M>
static std::vector<std::pair<std::string, M*>> collect(W& w) {
  std::vector<std::pair<std::string, M*>> out;
  out.emplace_back("token_embedding", &w.token_embedding);
  out.emplace_back("position_embedding", &w.position_embedding);
  out.emplace_back("visual_projection", &w.visual_projection);
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    auto& lw = w.layers[l];
    const std::string p = "layer" + std::to_string(l) + ".";
    out.emplace_back(p + "ln1_scale", &lw.ln1_scale);
    out.emplace_back(p + "ln1_shift", &lw.ln1_shift);
    out.emplace_back(p + "wq", &lw.wq);
    out.emplace_back(p + "wk", &lw.wk);
    out.emplace_back(p + "wv", &lw.wv);
    out.emplace_back(p + "wo", &lw.wo);
    out.emplace_back(p + "ln2_scale", &lw.ln2_scale);
    out.emplace_back(p + "ln2_shift", &lw.ln2_shift);
    out.emplace_back(p + "w_up", &lw.w_up);
    out.emplace_back(p + "w_down", &lw.w_down);
  }
  out.emplace_back("final_ln_scale", &w.final_ln_scale);
  out.emplace_back("final_ln_shift", &w.final_ln_shift);
  out.emplace_back("unembedding", &w.unembedding);
  return out;
}

std::vector<std::pair<std::string, Matrix*>> named_params(ToyModelWeights& w) {
  return collect<ToyModelWeights, Matrix>(w);
}

std::vector<std::pair<std::string, const Matrix*>> named_params(const ToyModelWeights& w) {
  return collect<const ToyModelWeights, const Matrix>(w);
}

bool weights_finite(const ToyModelWeights& w) {
  for (const auto& [name, m] : named_params(w))
    if (!all_finite(*m)) return false;
  return true;
}

Container model_to_container(const ToyModelWeights& w) {
  Container c;
  c.kind = "model";
  const auto& cfg = w.config;
  c.set("num_layers", std::to_string(cfg.num_layers));
  c.set("hidden_dim", std::to_string(cfg.hidden_dim));
  c.set("ffn_dim", std::to_string(cfg.ffn_dim));
  c.set("vocab_size", std::to_string(cfg.vocab_size));
  c.set("num_heads", std::to_string(cfg.num_heads));
  c.set("max_seq_len", std::to_string(cfg.max_seq_len));
  c.set("num_visual_tokens", std::to_string(cfg.num_visual_tokens));
  c.set("visual_feature_dim", std::to_string(cfg.visual_feature_dim));
  c.set("rng_seed", std::to_string(cfg.rng_seed));
  for (const auto& [name, m] : named_params(w)) c.add(name, *m);
  return c;
}

ToyModelWeights model_from_container(const Container& c) {
  if (c.kind != "model") throw DataError("expected a model container, got kind '" + c.kind + "'");
  ToyModelConfig cfg;
  cfg.num_layers = c.get_int("num_layers");
  cfg.hidden_dim = c.get_int("hidden_dim");
  cfg.ffn_dim = c.get_int("ffn_dim");
  cfg.vocab_size = c.get_int("vocab_size");
  cfg.num_heads = c.get_int("num_heads");
  cfg.max_seq_len = c.get_int("max_seq_len");
  cfg.num_visual_tokens = c.get_int("num_visual_tokens");
  cfg.visual_feature_dim = c.get_int("visual_feature_dim");
  cfg.rng_seed = std::stoull(c.get("rng_seed"));
  cfg.validate();
  ToyModelWeights w = ToyModelWeights::zeros(cfg);
  for (auto& [name, m] : named_params(w)) {
    const Matrix& t = c.tensor(name);
    if (!t.same_shape(*m)) throw DataError("model tensor '" + name + "' has the wrong shape");
    *m = t;
  }
  return w;
}

void save_model(const std::filesystem::path& path, const ToyModelWeights& w,
                const std::vector<std::pair<std::string, std::string>>& run_config) {
  Container c = model_to_container(w);
  for (const auto& [k, v] : run_config) c.set("run." + k, v);
  write_container(path, c);
}

ToyModelWeights load_model(const std::filesystem::path& path) { return model_from_container(read_container(path)); }

// ----------------------------------------------------------------------------
// Forward

std::uint64_t forward_calls_total() { return g_forward_calls.load(std::memory_order_relaxed); }
std::uint64_t forward_calls_this_thread() { return t_forward_calls; }

ForwardCache forward_cached(const ToyModelWeights& w, const Matrix& image, std::span<const int> tokens,
                            const FfnOverrides* ffn) {
  check_inputs(w, image, tokens);
  ForwardCache cache;
  if (ffn) cache.ffn = *ffn;
  run_forward(w, image, tokens, cache);
  count_forward();
  return cache;
}

ForwardResult forward(const ToyModelWeights& w, const Matrix& image, std::span<const int> tokens, bool record_taps,
                      const FfnOverrides* ffn) {
  check_inputs(w, image, tokens);
  ForwardCache cache;
  if (ffn) cache.ffn = *ffn;
  run_forward(w, image, tokens, cache);
  const std::uint64_t id = count_forward();
  ForwardResult out;
  out.logits = std::move(cache.logits);
  if (record_taps) {
    TapRecord taps;
    const int last = cache.seq_len - 1;
    const int n = w.config.num_layers;
    taps.prompt_length = static_cast<int>(tokens.size());
    taps.forward_call_id = id;
    for (int l = 0; l < n; ++l) {
      auto pre = cache.layers[l].a.row(last);
      taps.h_pre.emplace_back(pre.begin(), pre.end());
      const Matrix& next = (l + 1 < n) ? cache.layers[l + 1].h_in : cache.h_final;
      auto post = next.row(last);
      taps.h_post.emplace_back(post.begin(), post.end());
    }
    out.taps = std::move(taps);
  }
  return out;
}

// ----------------------------------------------------------------------------
// Loss

std::vector<int> target_rows(std::span<const int> target, int target_offset) {
  std::vector<int> rows;
  for (std::size_t t = 0; t < target.size(); ++t) rows.push_back(target_offset + static_cast<int>(t) - 1);
  return rows;
}

static void check_alignment(const Matrix& logits, std::span<const int> target, int target_offset) {
  if (target.empty()) throw AlignmentError("empty target");
  if (target_offset < 1) throw AlignmentError("target_offset must be >= 1");
  const int last_row = target_offset + static_cast<int>(target.size()) - 2;
  if (last_row >= logits.rows) {
    throw AlignmentError("target extends past sequence end (needs row " + std::to_string(last_row) + ", have " +
                         std::to_string(logits.rows) + ")");
  }
  for (int t : target)
    if (t < 0 || t >= logits.cols) throw AlignmentError("target token out of range: " + std::to_string(t));
}

double autoregressive_loss(const Matrix& logits, std::span<const int> target, int target_offset) {
  check_alignment(logits, target, target_offset);
  double total = 0.0;
  for (std::size_t t = 0; t < target.size(); ++t) {
    auto row = logits.row(target_offset + static_cast<int>(t) - 1);
    total += log_sum_exp(row) - row[target[t]];
  }
  return total / static_cast<double>(target.size());
}

Matrix autoregressive_loss_grad(const Matrix& logits, std::span<const int> target, int target_offset, double scale) {
  check_alignment(logits, target, target_offset);
  Matrix g(logits.rows, logits.cols);
  const double s = scale / static_cast<double>(target.size());
  for (std::size_t t = 0; t < target.size(); ++t) {
    const int r = target_offset + static_cast<int>(t) - 1;
    auto out = g.row(r);
    Vector p(logits.cols);
    softmax(logits.row(r), p);
    for (int j = 0; j < logits.cols; ++j) out[j] += s * p[j];
    out[target[t]] -= s;
  }
  return g;
}

// ----------------------------------------------------------------------------
// Backward

Matrix reconstruct_up_grad(const FfnFactors& f) {
  Matrix g(f.x_up.cols, f.delta_up.cols);
  kernels::matmul_tn_acc(f.x_up, f.delta_up, g);
  return g;
}

Matrix reconstruct_down_grad(const FfnFactors& f) {
  Matrix g(f.x_down.cols, f.delta_down.cols);
  kernels::matmul_tn_acc(f.x_down, f.delta_down, g);
  return g;
}

std::vector<FfnFactors> backward(const ToyModelWeights& w, const ForwardCache& cache, const Matrix& dlogits,
                                 const BackwardOptions& opts) {
  const auto& c = w.config;
  const int T = cache.seq_len;
  const int d = c.hidden_dim;
  const int heads = c.num_heads;
  const int head_dim = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
  ToyModelWeights* G = opts.param_grads;
  if (dlogits.rows != T || dlogits.cols != c.vocab_size) throw ShapeMismatch("backward: dlogits shape");

  int stop_layer = 0;
  if (!G) {
    stop_layer = c.num_layers;
    for (int l : opts.factor_layers) stop_layer = std::min(stop_layer, l);
  }
  std::vector<FfnFactors> factors;
  std::vector<int> wanted(c.num_layers, 0);
  for (int l : opts.factor_layers) {
    if (l < 0 || l >= c.num_layers) throw UnknownLayer("backward: layer " + std::to_string(l) + " out of range");
    wanted[l] = 1;
  }

  // Final layer norm and unembedding.
  if (G) kernels::matmul_tn_acc(cache.y, dlogits, G->unembedding);
  Matrix dy;
  kernels::matmul_nt(dlogits, w.unembedding, dy);
  Matrix dh(T, d);
  layer_norm_backward(cache.h_final, cache.meanf, cache.rstdf, w.final_ln_scale, dy, dh,
                      G ? &G->final_ln_scale : nullptr, G ? &G->final_ln_shift : nullptr);

  for (int l = c.num_layers - 1; l >= stop_layer; --l) {
    const LayerWeights& lw = w.layers[l];
    const LayerCache& lc = cache.layers[l];
    const Matrix& w_up = ffn_up(w, cache.ffn, l);
    const Matrix& w_down = ffn_down(w, cache.ffn, l);

    // FFN: h' = a + GELU(LN2(a) W_up) W_down
    const Matrix& df = dh;
    Matrix dg;
    kernels::matmul_nt(df, w_down, dg);
    Matrix du(dg.rows, dg.cols);
    for (std::size_t i = 0; i < du.size(); ++i) du.data[i] = dg.data[i] * gelu_grad(lc.u.data[i]);
    if (G) {
      kernels::matmul_tn_acc(lc.g, df, G->layers[l].w_down);
      kernels::matmul_tn_acc(lc.x2, du, G->layers[l].w_up);
    }
    if (wanted[l]) {
      FfnFactors f;
      f.layer = l;
      f.x_up = lc.x2;
      f.delta_up = du;
      f.x_down = lc.g;
      f.delta_down = df;
      factors.push_back(std::move(f));
    }
    if (l == stop_layer && !G) break;

    Matrix dx2;
    kernels::matmul_nt(du, w_up, dx2);
    Matrix da = dh;
    layer_norm_backward(lc.a, lc.mean2, lc.rstd2, lw.ln2_scale, dx2, da, G ? &G->layers[l].ln2_scale : nullptr,
                        G ? &G->layers[l].ln2_shift : nullptr);

    // Attention: a = h + softmax(QK^T/sqrt(dh)) V W_o
    if (G) kernels::matmul_tn_acc(lc.attn, da, G->layers[l].wo);
    Matrix dattn;
    kernels::matmul_nt(da, lw.wo, dattn);
    Matrix dq(T, d), dk(T, d), dv(T, d);
    for (int hh = 0; hh < heads; ++hh) {
      const Matrix& P = lc.probs[hh];
      const int off = hh * head_dim;
      Vector dp(T), ds(T);
      for (int i = 0; i < T; ++i) {
        double rowdot = 0.0;
        for (int j = 0; j <= i; ++j) {
          double s = 0.0;
          for (int x = 0; x < head_dim; ++x) s += dattn(i, off + x) * lc.v(j, off + x);
          dp[j] = s;
          rowdot += s * P(i, j);
        }
        for (int j = 0; j <= i; ++j) {
          const double p = P(i, j);
          ds[j] = p * (dp[j] - rowdot) * inv_sqrt;
          for (int x = 0; x < head_dim; ++x) {
            dv(j, off + x) += p * dattn(i, off + x);
            dq(i, off + x) += ds[j] * lc.k(j, off + x);
            dk(j, off + x) += ds[j] * lc.q(i, off + x);
          }
        }
      }
    }
    if (G) {
      kernels::matmul_tn_acc(lc.x1, dq, G->layers[l].wq);
      kernels::matmul_tn_acc(lc.x1, dk, G->layers[l].wk);
      kernels::matmul_tn_acc(lc.x1, dv, G->layers[l].wv);
    }
    Matrix dx1, tmp;
    kernels::matmul_nt(dq, lw.wq, dx1);
    kernels::matmul_nt(dk, lw.wk, tmp);
    for (std::size_t i = 0; i < dx1.size(); ++i) dx1.data[i] += tmp.data[i];
    kernels::matmul_nt(dv, lw.wv, tmp);
    for (std::size_t i = 0; i < dx1.size(); ++i) dx1.data[i] += tmp.data[i];
    dh = da;
    layer_norm_backward(lc.h_in, lc.mean1, lc.rstd1, lw.ln1_scale, dx1, dh, G ? &G->layers[l].ln1_scale : nullptr,
                        G ? &G->layers[l].ln1_shift : nullptr);
  }

  if (G) {
    const int nv = cache.num_visual;
    for (int i = 0; i < T; ++i) {
      auto src = dh.row(i);
      axpy(1.0, src, G->position_embedding.row(i));
      if (i >= nv) axpy(1.0, src, G->token_embedding.row(cache.tokens[i - nv]));
    }
    if (nv > 0) {
      Matrix dvis(nv, d);
      for (int i = 0; i < nv; ++i)
        for (int j = 0; j < d; ++j) dvis(i, j) = dh(i, j);
      kernels::matmul_tn_acc(cache.image, dvis, G->visual_projection);
    }
  }
  std::reverse(factors.begin(), factors.end());
  return factors;
}

// ----------------------------------------------------------------------------
// Instances and decoding

TokenIds teacher_forced_input(const TokenIds& prompt, const TokenIds& target) {
  TokenIds seq = prompt;
  if (!target.empty()) seq.insert(seq.end(), target.begin(), target.end() - 1);
  return seq;
}

int target_offset(const ToyModelConfig& c, const TokenIds& prompt) {
  return c.num_visual_tokens + static_cast<int>(prompt.size());
}

const FfnFactors& GradFactors::for_layer(int layer) const {
  for (const auto& f : layers)
    if (f.layer == layer) return f;
  throw UnknownLayer("no gradient factors captured for layer " + std::to_string(layer));
}

GradFactors ffn_grad_factors(const ToyModelWeights& w, const EditInstance& instance, const std::vector<int>& layers,
                             double loss_scale) {
  for (int l : layers)
    if (l < 0 || l >= w.config.num_layers) throw UnknownLayer("layer " + std::to_string(l) + " out of range");
  const TokenIds seq = teacher_forced_input(instance.prompt, instance.target);
  const ForwardCache cache = forward_cached(w, instance.image, seq);
  const int offset = target_offset(w.config, instance.prompt);
  GradFactors out;
  out.loss = loss_scale * autoregressive_loss(cache.logits, instance.target, offset);
  const Matrix dlogits = autoregressive_loss_grad(cache.logits, instance.target, offset, loss_scale);
  BackwardOptions opts;
  opts.factor_layers = layers;
  out.layers = backward(w, cache, dlogits, opts);
  const auto rows = target_rows(instance.target, offset);
  for (auto& f : out.layers) f.target_rows = rows;
  // Return factors in the order requested.
  std::vector<FfnFactors> ordered;
  for (int l : layers) {
    for (auto& f : out.layers)
      if (f.layer == l) ordered.push_back(f);
  }
  out.layers = std::move(ordered);
  return out;
}

int argmax_lowest(std::span<const double> row) {
  int best = 0;
  for (int j = 1; j < static_cast<int>(row.size()); ++j)
    if (row[j] > row[best]) best = j;
  return best;
}

TokenIds predict_answer(const ToyModelWeights& w, const Matrix& image, const TokenIds& prompt,
                        const FfnOverrides* ffn) {
  TokenIds seq = prompt;
  TokenIds answer;
  for (int step = 0; step < kMaxAnswerTokens; ++step) {
    if (w.config.num_visual_tokens + static_cast<int>(seq.size()) > w.config.max_seq_len) break;
    const ForwardResult r = forward(w, image, seq, false, ffn);
    const int next = argmax_lowest(r.logits.row(r.logits.rows - 1));
    answer.push_back(next);
    if (next == Vocabulary::kEndOfAnswer) break;
    seq.push_back(next);
  }
  return answer;
}

}  // namespace ldke
