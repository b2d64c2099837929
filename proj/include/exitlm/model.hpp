#pragma once

#include "exitlm/common.hpp"

#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace exitlm {

struct ModelConfig {
  int n_layers = 8;
  int d_model = 128;
  int n_heads = 4;
  int ffn_mult = 4;
  int max_seq = 512;
  int vocab_size = 259;
  std::uint64_t seed = 0;

  int d_ffn() const { return ffn_mult * d_model; }
  int d_head() const { return d_model / n_heads; }

  void validate() const {
    EXITLM_CHECK(n_layers >= 2, "n_layers must be >= 2");
    EXITLM_CHECK(d_model > 0 && n_heads > 0 && d_model % n_heads == 0,
                 "d_model must be divisible by n_heads");
    EXITLM_CHECK(ffn_mult > 0 && max_seq > 0 && vocab_size > 1, "invalid model config");
  }
};

template <class Scalar>
struct LayerNormParams {
  Vec<Scalar> gain;
  Vec<Scalar> bias;
};

template <class Scalar>
struct BlockParams {
  LayerNormParams<Scalar> ln1, ln2;
  Mat<Scalar> wq, wk, wv, wo;  // d x d
  Vec<Scalar> bq, bk, bv, bo;
  Mat<Scalar> w1;              // f x d
  Vec<Scalar> b1;
  Mat<Scalar> w2;              // d x f
  Vec<Scalar> b2;
};

// Decoder-only pre-norm transformer with learned positional embeddings and
// one LM head shared by every exit layer. Hidden states handed to callers
// are the raw residual-stream outputs of each block; decode_head applies
// the final norm plus projection, so the head is layer-agnostic.
template <class Scalar>
struct TransformerModel {
  ModelConfig config;
  Mat<Scalar> tok_embed;  // d x vocab
  Mat<Scalar> pos_embed;  // d x max_seq
  std::vector<BlockParams<Scalar>> blocks;
  LayerNormParams<Scalar> ln_final;
  Mat<Scalar> head_w;  // vocab x d
  Vec<Scalar> head_b;

  // Counts block applications (one per layer per forward group, regardless
  // of how many positions the group holds). This is the energy proxy's
  // ground: layers that are skipped never tick it.
  mutable std::atomic<std::uint64_t> layer_invocations{0};

  TransformerModel() = default;
  TransformerModel(const TransformerModel& other) { *this = other; }
  TransformerModel& operator=(const TransformerModel& other) {
    config = other.config;
    tok_embed = other.tok_embed;
    pos_embed = other.pos_embed;
    blocks = other.blocks;
    ln_final = other.ln_final;
    head_w = other.head_w;
    head_b = other.head_b;
    layer_invocations.store(other.layer_invocations.load());
    return *this;
  }
  TransformerModel(TransformerModel&&) noexcept = default;
  TransformerModel& operator=(TransformerModel&& other) noexcept {
    config = std::move(other.config);
    tok_embed = std::move(other.tok_embed);
    pos_embed = std::move(other.pos_embed);
    blocks = std::move(other.blocks);
    ln_final = std::move(other.ln_final);
    head_w = std::move(other.head_w);
    head_b = std::move(other.head_b);
    layer_invocations.store(other.layer_invocations.load());
    return *this;
  }
};

struct HiddenStateMeta {
  int layer_index = 0;     // 1-based
  int token_position = 0;  // 0-based
};

template <class Scalar>
struct HiddenState {
  Vec<Scalar> values;
  int layer_index = 0;
  int token_position = 0;
};

template <class Scalar>
struct ParamView {
  std::string name;
  Scalar* data = nullptr;
  Eigen::Index rows = 0, cols = 0;
  Eigen::Index size() const { return rows * cols; }
  Eigen::Map<Vec<Scalar>> flat() const { return {data, rows * cols}; }
};

namespace detail {
constexpr double kLnEps = 1e-5;
}

template <class Scalar>
std::vector<ParamView<Scalar>> param_views(TransformerModel<Scalar>& m) {
  std::vector<ParamView<Scalar>> out;
  auto add_mat = [&](const std::string& name, Mat<Scalar>& t) {
    out.push_back({name, t.data(), t.rows(), t.cols()});
  };
  auto add_vec = [&](const std::string& name, Vec<Scalar>& t) {
    out.push_back({name, t.data(), t.rows(), 1});
  };
  add_mat("tok_embed", m.tok_embed);
  add_mat("pos_embed", m.pos_embed);
  for (std::size_t b = 0; b < m.blocks.size(); ++b) {
    auto& blk = m.blocks[b];
    const std::string p = "block" + std::to_string(b) + ".";
    add_vec(p + "ln1.gain", blk.ln1.gain);
    add_vec(p + "ln1.bias", blk.ln1.bias);
    add_mat(p + "wq", blk.wq);
    add_vec(p + "bq", blk.bq);
    add_mat(p + "wk", blk.wk);
    add_vec(p + "bk", blk.bk);
    add_mat(p + "wv", blk.wv);
    add_vec(p + "bv", blk.bv);
    add_mat(p + "wo", blk.wo);
    add_vec(p + "bo", blk.bo);
    add_vec(p + "ln2.gain", blk.ln2.gain);
    add_vec(p + "ln2.bias", blk.ln2.bias);
    add_mat(p + "w1", blk.w1);
    add_vec(p + "b1", blk.b1);
    add_mat(p + "w2", blk.w2);
    add_vec(p + "b2", blk.b2);
  }
  add_vec("ln_final.gain", m.ln_final.gain);
  add_vec("ln_final.bias", m.ln_final.bias);
  add_mat("head_w", m.head_w);
  add_vec("head_b", m.head_b);
  return out;
}

template <class Scalar>
void allocate_params(TransformerModel<Scalar>& m) {
  const auto& c = m.config;
  c.validate();
  const int d = c.d_model, f = c.d_ffn();
  m.tok_embed.setZero(d, c.vocab_size);
  m.pos_embed.setZero(d, c.max_seq);
  m.blocks.resize(c.n_layers);
  for (auto& blk : m.blocks) {
    blk.ln1.gain.setOnes(d);
    blk.ln1.bias.setZero(d);
    blk.ln2.gain.setOnes(d);
    blk.ln2.bias.setZero(d);
    blk.wq.setZero(d, d);
    blk.wk.setZero(d, d);
    blk.wv.setZero(d, d);
    blk.wo.setZero(d, d);
    blk.bq.setZero(d);
    blk.bk.setZero(d);
    blk.bv.setZero(d);
    blk.bo.setZero(d);
    blk.w1.setZero(f, d);
    blk.b1.setZero(f);
    blk.w2.setZero(d, f);
    blk.b2.setZero(d);
  }
  m.ln_final.gain.setOnes(d);
  m.ln_final.bias.setZero(d);
  m.head_w.setZero(c.vocab_size, d);
  m.head_b.setZero(c.vocab_size);
}

// Seeded init: N(0, 0.02) weights, zero biases, unit layer-norm gains.
// Residual output projections are scaled down by 1/sqrt(2*n_layers).
template <class Scalar>
TransformerModel<Scalar> make_model(const ModelConfig& config) {
  TransformerModel<Scalar> m;
  m.config = config;
  allocate_params(m);
  Rng rng(config.seed);
  const double base_std = 0.02;
  const double resid_scale = 1.0 / std::sqrt(2.0 * config.n_layers);
  for (auto& view : param_views(m)) {
    const bool is_weight = view.cols > 1;
    if (!is_weight) continue;  // biases/norms keep their allocation defaults
    double std = base_std;
    if (view.name.ends_with(".wo") || view.name.ends_with(".w2")) {
      std = base_std * resid_scale;
    }
    auto flat = view.flat();
    for (Eigen::Index i = 0; i < flat.size(); ++i) {
      flat[i] = static_cast<Scalar>(normal_real(rng, 0.0, std));
    }
  }
  return m;
}

template <class Scalar>
TransformerModel<Scalar> zeros_like(const TransformerModel<Scalar>& m) {
  TransformerModel<Scalar> z;
  z.config = m.config;
  allocate_params(z);
  z.ln_final.gain.setZero();
  for (auto& blk : z.blocks) {
    blk.ln1.gain.setZero();
    blk.ln2.gain.setZero();
  }
  return z;
}

// ---------------------------------------------------------------------------
// Shared primitives

template <class Scalar>
void layer_norm_forward(const LayerNormParams<Scalar>& p, const Mat<Scalar>& x,
                        Mat<Scalar>& y, Mat<Scalar>& xhat, Vec<Scalar>& inv_std) {
  const Eigen::Index d = x.rows(), n = x.cols();
  y.resize(d, n);
  xhat.resize(d, n);
  inv_std.resize(n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const Scalar mu = x.col(j).mean();
    const Scalar var = (x.col(j).array() - mu).square().mean();
    const Scalar inv = Scalar(1) / std::sqrt(var + Scalar(detail::kLnEps));
    inv_std[j] = inv;
    xhat.col(j) = (x.col(j).array() - mu) * inv;
    y.col(j) = xhat.col(j).cwiseProduct(p.gain) + p.bias;
  }
}

// dx is accumulated (+=); gain/bias grads likewise.
template <class Scalar>
void layer_norm_backward(const LayerNormParams<Scalar>& p, const Mat<Scalar>& xhat,
                         const Vec<Scalar>& inv_std, const Mat<Scalar>& dy,
                         Mat<Scalar>& dx, LayerNormParams<Scalar>& grads) {
  const Eigen::Index d = xhat.rows(), n = xhat.cols();
  grads.gain += (dy.array() * xhat.array()).rowwise().sum().matrix();
  grads.bias += dy.rowwise().sum();
  for (Eigen::Index j = 0; j < n; ++j) {
    Vec<Scalar> t = dy.col(j).cwiseProduct(p.gain);
    const Scalar mean_t = t.mean();
    const Scalar mean_tx = t.cwiseProduct(xhat.col(j)).mean();
    dx.col(j) += inv_std[j] * (t.array() - mean_t - xhat.col(j).array() * mean_tx)
                     .matrix();
  }
  (void)d;
}

template <class Scalar>
Scalar gelu_scalar(Scalar x) {
  return Scalar(0.5) * x * (Scalar(1) + std::erf(x * Scalar(M_SQRT1_2)));
}

template <class Scalar>
Scalar gelu_grad_scalar(Scalar x) {
  const Scalar cdf = Scalar(0.5) * (Scalar(1) + std::erf(x * Scalar(M_SQRT1_2)));
  const Scalar pdf = std::exp(Scalar(-0.5) * x * x) *
                     Scalar(0.3989422804014326779);  // 1/sqrt(2*pi)
  return cdf + x * pdf;
}

// Numerically stable column softmax in place.
template <class Scalar>
void softmax_columns(Mat<Scalar>& x) {
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    const Scalar mx = x.col(j).maxCoeff();
    x.col(j) = (x.col(j).array() - mx).exp();
    x.col(j) /= x.col(j).sum();
  }
}

template <class Scalar>
void softmax_rows(Mat<Scalar>& x) {
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const Scalar mx = x.row(i).maxCoeff();
    x.row(i) = (x.row(i).array() - mx).exp();
    x.row(i) /= x.row(i).sum();
  }
}

// ---------------------------------------------------------------------------
// KV cache + incremental execution
//
// Per-layer K/V fills are contiguous position prefixes, so "cached at layer
// L implies cached at every layer below" holds by construction. `hidden`
// always holds each position's residual-stream output at its deepest
// computed layer; that stored state is what lazy propagation resumes from.

template <class Scalar>
struct KVCache {
  int capacity = 0;
  int n_positions = 0;
  std::vector<Mat<Scalar>> k, v;  // per layer, d x capacity
  std::vector<int> fill;          // per layer, filled position count
  Mat<Scalar> hidden;             // d x capacity
  std::vector<TokenId> ids;

  int deepest_layer_cached(int position) const {
    int deepest = 0;
    for (std::size_t l = 1; l < fill.size(); ++l) {
      if (fill[l] > position) deepest = static_cast<int>(l);
    }
    return deepest;
  }

  void check_invariant() const {
    for (std::size_t l = 2; l < fill.size(); ++l) {
      EXITLM_CHECK(fill[l] <= fill[l - 1], "kv cache fill order violated");
    }
  }
};

template <class Scalar>
KVCache<Scalar> make_cache(const TransformerModel<Scalar>& m) {
  KVCache<Scalar> cache;
  cache.capacity = m.config.max_seq;
  cache.n_positions = 0;
  cache.k.resize(m.config.n_layers + 1);
  cache.v.resize(m.config.n_layers + 1);
  cache.fill.assign(m.config.n_layers + 1, 0);
  for (int l = 1; l <= m.config.n_layers; ++l) {
    cache.k[l].setZero(m.config.d_model, cache.capacity);
    cache.v[l].setZero(m.config.d_model, cache.capacity);
  }
  cache.hidden.setZero(m.config.d_model, cache.capacity);
  return cache;
}

// Embeds new tokens; their cached depth starts at zero (embedding level).
template <class Scalar>
void append_tokens(const TransformerModel<Scalar>& m, KVCache<Scalar>& cache,
                   std::span<const TokenId> new_ids) {
  EXITLM_CHECK(cache.n_positions + static_cast<int>(new_ids.size()) <= cache.capacity,
               "context overflow");
  for (TokenId id : new_ids) {
    EXITLM_CHECK(id >= 0 && id < m.config.vocab_size, "token id out of range");
    const int p = cache.n_positions++;
    cache.hidden.col(p) = m.tok_embed.col(id) + m.pos_embed.col(p);
    cache.ids.push_back(id);
  }
}

namespace detail {

// Applies block `layer` to positions [begin, end), attending over all cached
// positions [0, end) at that layer. Inputs are the stored hidden states,
// which for this group are outputs of layer-1 by the fill invariant.
template <class Scalar>
void apply_block_group(const TransformerModel<Scalar>& m, KVCache<Scalar>& cache,
                       int layer, int begin, int end) {
  const auto& blk = m.blocks[layer - 1];
  const auto& c = m.config;
  const int g = end - begin;
  const int dh = c.d_head();
  m.layer_invocations.fetch_add(1, std::memory_order_relaxed);

  Mat<Scalar> x = cache.hidden.middleCols(begin, g);
  Mat<Scalar> a, xhat;
  Vec<Scalar> inv;
  layer_norm_forward(blk.ln1, x, a, xhat, inv);

  Mat<Scalar> q = blk.wq * a;
  q.colwise() += blk.bq;
  cache.k[layer].middleCols(begin, g) = blk.wk * a;
  cache.k[layer].middleCols(begin, g).colwise() += blk.bk;
  cache.v[layer].middleCols(begin, g) = blk.wv * a;
  cache.v[layer].middleCols(begin, g).colwise() += blk.bv;

  const Scalar scale = Scalar(1) / std::sqrt(Scalar(dh));
  Mat<Scalar> attn_out(c.d_model, g);
  for (int h = 0; h < c.n_heads; ++h) {
    auto qh = q.middleRows(h * dh, dh);
    auto kh = cache.k[layer].block(h * dh, 0, dh, end);
    auto vh = cache.v[layer].block(h * dh, 0, dh, end);
    Mat<Scalar> scores = (qh.transpose() * kh) * scale;  // g x end
    for (int i = 0; i < g; ++i) {
      const int qpos = begin + i;
      for (int j = qpos + 1; j < end; ++j) {
        scores(i, j) = -std::numeric_limits<Scalar>::infinity();
      }
    }
    softmax_rows(scores);
    attn_out.middleRows(h * dh, dh) = vh * scores.transpose();
  }
  Mat<Scalar> x_mid = x + blk.wo * attn_out;
  x_mid.colwise() += blk.bo;

  Mat<Scalar> b, bhat;
  Vec<Scalar> binv;
  layer_norm_forward(blk.ln2, x_mid, b, bhat, binv);
  Mat<Scalar> h1 = blk.w1 * b;
  h1.colwise() += blk.b1;
  Mat<Scalar> act = h1.unaryExpr([](Scalar s) { return gelu_scalar(s); });
  Mat<Scalar> out = x_mid + blk.w2 * act;
  out.colwise() += blk.b2;

  cache.hidden.middleCols(begin, g) = out;
}

}  // namespace detail

// Ensures every appended position is computed through `layer`, filling any
// missing K/V entries layer by layer (lazy propagation). A no-op when the
// cache is already deep enough.
template <class Scalar>
void ascend(const TransformerModel<Scalar>& m, KVCache<Scalar>& cache, int layer) {
  EXITLM_CHECK(layer >= 1 && layer <= m.config.n_layers, "layer out of range");
  for (int l = 1; l <= layer; ++l) {
    if (cache.fill[l] < cache.n_positions) {
      detail::apply_block_group(m, cache, l, cache.fill[l], cache.n_positions);
      cache.fill[l] = cache.n_positions;
    }
  }
}

// Restores the cache invariant up to `needed_layer` for all positions at or
// before `position`.
template <class Scalar>
void kv_propagate(const TransformerModel<Scalar>& m, KVCache<Scalar>& cache,
                  int needed_layer, int position) {
  EXITLM_CHECK(position >= 0 && position < cache.n_positions, "position out of range");
  ascend(m, cache, needed_layer);
}

template <class Scalar>
HiddenState<Scalar> hidden_at(const KVCache<Scalar>& cache, int position) {
  HiddenState<Scalar> h;
  h.values = cache.hidden.col(position);
  h.layer_index = cache.deepest_layer_cached(position);
  h.token_position = position;
  EXITLM_CHECK(h.values.allFinite(), "hidden state is not finite");
  return h;
}

// Runs `input` through layers 1..stop_layer and returns the last position's
// hidden state at every layer up to stop_layer. With a caller-provided cache
// the input extends the cached stream; otherwise a scratch cache is used.
template <class Scalar>
std::vector<HiddenState<Scalar>> forward_to_layer(const TransformerModel<Scalar>& m,
                                                  std::span<const TokenId> input,
                                                  int stop_layer,
                                                  KVCache<Scalar>* cache = nullptr) {
  EXITLM_CHECK(stop_layer >= 1 && stop_layer <= m.config.n_layers,
               "stop_layer out of range");
  KVCache<Scalar> scratch;
  KVCache<Scalar>& c = cache ? *cache : scratch;
  if (!cache) scratch = make_cache(m);
  append_tokens(m, c, input);
  std::vector<HiddenState<Scalar>> states;
  states.reserve(stop_layer);
  const int last = c.n_positions - 1;
  for (int l = 1; l <= stop_layer; ++l) {
    ascend(m, c, l);
    HiddenState<Scalar> h;
    h.values = c.hidden.col(last);
    h.layer_index = l;
    h.token_position = last;
    EXITLM_CHECK(h.values.allFinite(), "hidden state is not finite");
    states.push_back(std::move(h));
  }
  return states;
}

// Final norm + shared projection; one weight matrix regardless of which
// layer produced `h`.
template <class Scalar>
Vec<Scalar> decode_head(const TransformerModel<Scalar>& m, const Vec<Scalar>& h) {
  EXITLM_CHECK(h.size() == m.config.d_model, "hidden dimension mismatch");
  EXITLM_CHECK(h.allFinite(), "hidden state is not finite");
  const Scalar mu = h.mean();
  const Scalar var = (h.array() - mu).square().mean();
  const Scalar inv = Scalar(1) / std::sqrt(var + Scalar(detail::kLnEps));
  Vec<Scalar> z = ((h.array() - mu) * inv).matrix().cwiseProduct(m.ln_final.gain) +
                  m.ln_final.bias;
  return m.head_w * z + m.head_b;
}

template <class Scalar>
Vec<Scalar> decode_head(const TransformerModel<Scalar>& m, const HiddenState<Scalar>& h) {
  return decode_head(m, h.values);
}

// ---------------------------------------------------------------------------
// Training path: full-sequence forward with stashed activations + backward.

template <class Scalar>
struct BlockStash {
  Mat<Scalar> x_in;
  Mat<Scalar> ln1_out, ln1_xhat;
  Vec<Scalar> ln1_inv;
  Mat<Scalar> q, k, v;
  std::vector<Mat<Scalar>> probs;  // per head, L x L
  Mat<Scalar> attn_concat;
  Mat<Scalar> x_mid;
  Mat<Scalar> ln2_out, ln2_xhat;
  Vec<Scalar> ln2_inv;
  Mat<Scalar> h1, act;
};

template <class Scalar>
struct ForwardStash {
  std::vector<TokenId> ids;
  std::vector<BlockStash<Scalar>> blocks;
  Mat<Scalar> final_x;

  // Residual-stream output of `layer` (1-based).
  const Mat<Scalar>& layer_output(int layer) const {
    return layer == static_cast<int>(blocks.size()) ? final_x : blocks[layer].x_in;
  }
};

template <class Scalar>
void forward_collect(const TransformerModel<Scalar>& m, std::span<const TokenId> ids,
                     ForwardStash<Scalar>& stash) {
  const auto& c = m.config;
  const int L = static_cast<int>(ids.size());
  EXITLM_CHECK(L >= 1 && L <= c.max_seq, "context overflow");
  const int dh = c.d_head();
  const Scalar scale = Scalar(1) / std::sqrt(Scalar(dh));

  stash.ids.assign(ids.begin(), ids.end());
  stash.blocks.resize(c.n_layers);
  Mat<Scalar> x(c.d_model, L);
  for (int p = 0; p < L; ++p) {
    EXITLM_CHECK(ids[p] >= 0 && ids[p] < c.vocab_size, "token id out of range");
    x.col(p) = m.tok_embed.col(ids[p]) + m.pos_embed.col(p);
  }

  for (int b = 0; b < c.n_layers; ++b) {
    auto& s = stash.blocks[b];
    const auto& blk = m.blocks[b];
    m.layer_invocations.fetch_add(1, std::memory_order_relaxed);
    s.x_in = x;

    layer_norm_forward(blk.ln1, x, s.ln1_out, s.ln1_xhat, s.ln1_inv);
    s.q = blk.wq * s.ln1_out;
    s.q.colwise() += blk.bq;
    s.k = blk.wk * s.ln1_out;
    s.k.colwise() += blk.bk;
    s.v = blk.wv * s.ln1_out;
    s.v.colwise() += blk.bv;

    s.probs.assign(c.n_heads, Mat<Scalar>());
    s.attn_concat.resize(c.d_model, L);
    for (int h = 0; h < c.n_heads; ++h) {
      auto qh = s.q.middleRows(h * dh, dh);
      auto kh = s.k.middleRows(h * dh, dh);
      auto vh = s.v.middleRows(h * dh, dh);
      Mat<Scalar> scores = (qh.transpose() * kh) * scale;
      for (int i = 0; i < L; ++i) {
        for (int j = i + 1; j < L; ++j) {
          scores(i, j) = -std::numeric_limits<Scalar>::infinity();
        }
      }
      softmax_rows(scores);
      s.attn_concat.middleRows(h * dh, dh) = vh * scores.transpose();
      s.probs[h] = std::move(scores);
    }
    s.x_mid = x + blk.wo * s.attn_concat;
    s.x_mid.colwise() += blk.bo;

    layer_norm_forward(blk.ln2, s.x_mid, s.ln2_out, s.ln2_xhat, s.ln2_inv);
    s.h1 = blk.w1 * s.ln2_out;
    s.h1.colwise() += blk.b1;
    s.act = s.h1.unaryExpr([](Scalar v) { return gelu_scalar(v); });
    x = s.x_mid + blk.w2 * s.act;
    x.colwise() += blk.b2;
  }
  stash.final_x = std::move(x);
}

// Backpropagates through all blocks and the embeddings. `d_layer_out[l]`
// carries the loss gradient injected at layer l's output (exit layers);
// entries may be empty. Gradients accumulate into `grads`.
template <class Scalar>
void backward_collect(const TransformerModel<Scalar>& m,
                      const ForwardStash<Scalar>& stash,
                      const std::vector<Mat<Scalar>>& d_layer_out,
                      TransformerModel<Scalar>& grads) {
  const auto& c = m.config;
  const int L = static_cast<int>(stash.ids.size());
  const int dh = c.d_head();
  const Scalar scale = Scalar(1) / std::sqrt(Scalar(dh));

  Mat<Scalar> dx = Mat<Scalar>::Zero(c.d_model, L);
  if (static_cast<int>(d_layer_out.size()) > c.n_layers &&
      d_layer_out[c.n_layers].size() > 0) {
    dx = d_layer_out[c.n_layers];
  }

  for (int b = c.n_layers - 1; b >= 0; --b) {
    const auto& s = stash.blocks[b];
    const auto& blk = m.blocks[b];
    auto& g = grads.blocks[b];

    // FFN sub-block: x_out = x_mid + w2 * gelu(w1 * ln2(x_mid) + b1) + b2
    Mat<Scalar> d_xmid = dx;  // residual branch
    g.w2 += dx * s.act.transpose();
    g.b2 += dx.rowwise().sum();
    Mat<Scalar> d_act = blk.w2.transpose() * dx;
    Mat<Scalar> d_h1 = d_act.cwiseProduct(
        s.h1.unaryExpr([](Scalar v) { return gelu_grad_scalar(v); }));
    g.w1 += d_h1 * s.ln2_out.transpose();
    g.b1 += d_h1.rowwise().sum();
    Mat<Scalar> d_ln2_out = blk.w1.transpose() * d_h1;
    layer_norm_backward(blk.ln2, s.ln2_xhat, s.ln2_inv, d_ln2_out, d_xmid, g.ln2);

    // Attention sub-block: x_mid = x_in + wo * attn(ln1(x_in)) + bo
    Mat<Scalar> d_xin = d_xmid;  // residual branch
    g.wo += d_xmid * s.attn_concat.transpose();
    g.bo += d_xmid.rowwise().sum();
    Mat<Scalar> d_concat = blk.wo.transpose() * d_xmid;

    Mat<Scalar> dq(c.d_model, L), dk(c.d_model, L), dv(c.d_model, L);
    for (int h = 0; h < c.n_heads; ++h) {
      auto qh = s.q.middleRows(h * dh, dh);
      auto kh = s.k.middleRows(h * dh, dh);
      auto vh = s.v.middleRows(h * dh, dh);
      auto d_oh = d_concat.middleRows(h * dh, dh);
      const Mat<Scalar>& ph = s.probs[h];

      dv.middleRows(h * dh, dh) = d_oh * ph;
      Mat<Scalar> d_ph = d_oh.transpose() * vh;  // L x L
      Mat<Scalar> d_scores(L, L);
      for (int i = 0; i < L; ++i) {
        const Scalar dot = d_ph.row(i).cwiseProduct(ph.row(i)).sum();
        d_scores.row(i) =
            (ph.row(i).array() * (d_ph.row(i).array() - dot)).matrix();
      }
      dq.middleRows(h * dh, dh) = (kh * d_scores.transpose()) * scale;
      dk.middleRows(h * dh, dh) = (qh * d_scores) * scale;
    }
    g.wq += dq * s.ln1_out.transpose();
    g.bq += dq.rowwise().sum();
    g.wk += dk * s.ln1_out.transpose();
    g.bk += dk.rowwise().sum();
    g.wv += dv * s.ln1_out.transpose();
    g.bv += dv.rowwise().sum();
    Mat<Scalar> d_ln1_out = blk.wq.transpose() * dq + blk.wk.transpose() * dk +
                            blk.wv.transpose() * dv;
    layer_norm_backward(blk.ln1, s.ln1_xhat, s.ln1_inv, d_ln1_out, d_xin, g.ln1);

    dx = std::move(d_xin);
    if (b >= 1 && static_cast<int>(d_layer_out.size()) > b &&
        d_layer_out[b].size() > 0) {
      dx += d_layer_out[b];
    }
  }

  for (int p = 0; p < L; ++p) {
    grads.tok_embed.col(stash.ids[p]) += dx.col(p);
    grads.pos_embed.col(p) += dx.col(p);
  }
}

// Cross-entropy of next-token predictions decoded from `hidden` through the
// shared head. Positions with target PAD (or no successor) are masked out.
// Returns the mean loss over valid positions; when `grads`/`d_hidden` are
// given, gradients scaled by `weight` are accumulated into them.
template <class Scalar>
Scalar head_cross_entropy(const TransformerModel<Scalar>& m, const Mat<Scalar>& hidden,
                          std::span<const TokenId> ids, TokenId pad_id, Scalar weight,
                          TransformerModel<Scalar>* grads, Mat<Scalar>* d_hidden) {
  const auto& c = m.config;
  const int L = static_cast<int>(ids.size());
  EXITLM_CHECK(hidden.cols() == L, "hidden/ids length mismatch");

  std::vector<int> valid;
  valid.reserve(L);
  for (int p = 0; p + 1 < L; ++p) {
    if (ids[p + 1] != pad_id) valid.push_back(p);
  }
  EXITLM_CHECK(!valid.empty(), "block has no trainable positions");

  Mat<Scalar> z, zhat;
  Vec<Scalar> zinv;
  layer_norm_forward(m.ln_final, hidden, z, zhat, zinv);
  Mat<Scalar> logits = m.head_w * z;
  logits.colwise() += m.head_b;

  const Scalar inv_n = Scalar(1) / Scalar(valid.size());
  Scalar loss = 0;
  Mat<Scalar> d_logits;
  if (grads) d_logits = Mat<Scalar>::Zero(c.vocab_size, L);
  for (int p : valid) {
    const TokenId target = ids[p + 1];
    Vec<Scalar> col = logits.col(p);
    const Scalar mx = col.maxCoeff();
    Vec<Scalar> ex = (col.array() - mx).exp();
    const Scalar sum = ex.sum();
    loss += -(col[target] - mx - std::log(sum));
    if (grads) {
      d_logits.col(p) = ex / sum;
      d_logits(target, p) -= Scalar(1);
      d_logits.col(p) *= weight * inv_n;
    }
  }
  loss *= inv_n;

  if (grads) {
    EXITLM_CHECK(d_hidden != nullptr, "d_hidden required with grads");
    grads->head_w += d_logits * z.transpose();
    grads->head_b += d_logits.rowwise().sum();
    Mat<Scalar> dz = m.head_w.transpose() * d_logits;
    if (d_hidden->size() == 0) d_hidden->setZero(c.d_model, L);
    layer_norm_backward(m.ln_final, zhat, zinv, dz, *d_hidden, grads->ln_final);
  }
  return loss;
}

}  // namespace exitlm
