#pragma once

#include <array>
#include <cmath>
#include <string>
#include <tuple>
#include <vector>

#include "xattn/params.hpp"
#include "xattn/rng.hpp"
#include "xattn/tensor.hpp"

namespace xattn {

// Multi-layer multi-head cross-attention branch: queries from one modality,
// keys/values from the other, with a layer-shared learnable fusion scalar on
// the head outputs and a residual feed-forward key-value updater per layer.
struct CrossAttentionBranchConfig {
  int n_layers = 3;
  int n_heads = 4;
  int query_dim = 64;
  int kv_dim = 64;
  double updater_dropout_p = 0.1;
  double updater_residual_scale = 0.5;

  int head_dim() const { return query_dim / n_heads; }

  void validate() const {
    if (n_layers < 1) throw ParamError("attention: n_layers must be >= 1");
    if (n_heads < 1 || query_dim % n_heads != 0)
      throw ParamError("attention: query_dim " + std::to_string(query_dim) +
                       " not divisible by n_heads " + std::to_string(n_heads));
    if (updater_residual_scale <= 0 || updater_residual_scale > 1)
      throw ParamError("attention: residual scale must be in (0,1]");
    if (updater_dropout_p < 0 || updater_dropout_p >= 1)
      throw ParamError("attention: updater dropout in [0,1)");
  }
};

template <typename T>
struct BranchLayerParams {
  Tensor<T> w_q, w_k, w_v;  // no bias on Q/K/V projections
  Tensor<T> w_out, b_out;
  Tensor<T> fusion_weight;  // one learnable scalar per layer, shared by heads
  Tensor<T> ln_gain, ln_bias;
  Tensor<T> upd_w, upd_b;
};

template <typename T>
struct BranchParameters {
  std::vector<BranchLayerParams<T>> layers;

  void init(const CrossAttentionBranchConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    layers.clear();
    for (int l = 0; l < cfg.n_layers; ++l) {
      Rng rng(derive_seed(seed, "xattn_layer", l));
      BranchLayerParams<T> p;
      p.w_q = Tensor<T>::zeros({cfg.query_dim, cfg.query_dim}, true);
      p.w_k = Tensor<T>::zeros({cfg.kv_dim, cfg.query_dim}, true);
      p.w_v = Tensor<T>::zeros({cfg.kv_dim, cfg.query_dim}, true);
      init_uniform_fanin(p.w_q, cfg.query_dim, rng);
      init_uniform_fanin(p.w_k, cfg.kv_dim, rng);
      init_uniform_fanin(p.w_v, cfg.kv_dim, rng);
      p.w_out = Tensor<T>::zeros({cfg.query_dim, cfg.query_dim}, true);
      init_uniform_fanin(p.w_out, cfg.query_dim, rng);
      p.b_out = Tensor<T>::zeros({cfg.query_dim}, true);
      p.fusion_weight = Tensor<T>::full({1}, T(1), true);  // neutral scaling
      p.ln_gain = Tensor<T>::full({cfg.kv_dim}, T(1), true);
      p.ln_bias = Tensor<T>::zeros({cfg.kv_dim}, true);
      p.upd_w = Tensor<T>::zeros({cfg.kv_dim, cfg.kv_dim}, true);
      init_uniform_fanin(p.upd_w, cfg.kv_dim, rng);
      p.upd_b = Tensor<T>::zeros({cfg.kv_dim}, true);
      layers.push_back(std::move(p));
    }
  }

  void collect(const std::string& prefix, ParamRegistry<T>& out) {
    for (size_t l = 0; l < layers.size(); ++l) {
      const std::string base = prefix + ".layer" + std::to_string(l);
      auto& p = layers[l];
      out.push_back({base + ".w_q", &p.w_q, ParamKind::kWeight});
      out.push_back({base + ".w_k", &p.w_k, ParamKind::kWeight});
      out.push_back({base + ".w_v", &p.w_v, ParamKind::kWeight});
      out.push_back({base + ".w_out", &p.w_out, ParamKind::kWeight});
      out.push_back({base + ".b_out", &p.b_out, ParamKind::kBias});
      out.push_back({base + ".fusion_weight", &p.fusion_weight, ParamKind::kScalar});
      out.push_back({base + ".ln_gain", &p.ln_gain, ParamKind::kNorm});
      out.push_back({base + ".ln_bias", &p.ln_bias, ParamKind::kNorm});
      out.push_back({base + ".upd_w", &p.upd_w, ParamKind::kWeight});
      out.push_back({base + ".upd_b", &p.upd_b, ParamKind::kBias});
    }
  }
};

// Per-layer, per-head attention weight matrices for one forward call,
// recorded as plain doubles (detached from the graph).
struct AttentionTrace {
  int n_layers = 0, n_heads = 0, batch = 0, query_tokens = 0, key_tokens = 0;
  // weights[layer][head] is a [batch, Tq, Tk] row-major block
  std::vector<std::vector<std::vector<double>>> weights;

  // Mean over heads (and batch) for one layer: [Tq, Tk].
  std::vector<double> layer_head_mean(int layer) const {
    std::vector<double> acc(static_cast<size_t>(query_tokens) * key_tokens, 0.0);
    for (int h = 0; h < n_heads; ++h) {
      const auto& w = weights[static_cast<size_t>(layer)][static_cast<size_t>(h)];
      for (int b = 0; b < batch; ++b)
        for (size_t i = 0; i < acc.size(); ++i)
          acc[i] += w[static_cast<size_t>(b) * acc.size() + i];
    }
    for (auto& v : acc) v /= static_cast<double>(n_heads) * batch;
    return acc;
  }

  std::vector<double> all_layer_mean() const {
    std::vector<double> acc(static_cast<size_t>(query_tokens) * key_tokens, 0.0);
    for (int l = 0; l < n_layers; ++l) {
      const auto lm = layer_head_mean(l);
      for (size_t i = 0; i < acc.size(); ++i) acc[i] += lm[i];
    }
    for (auto& v : acc) v /= static_cast<double>(n_layers);
    return acc;
  }

  // Mean attention mass per key token for one layer (over batch, heads and
  // queries); sums to 1 because every row does.
  std::vector<double> layer_key_mean(int layer) const {
    const auto lm = layer_head_mean(layer);
    std::vector<double> keys(static_cast<size_t>(key_tokens), 0.0);
    for (int q = 0; q < query_tokens; ++q)
      for (int k = 0; k < key_tokens; ++k)
        keys[static_cast<size_t>(k)] += lm[static_cast<size_t>(q) * key_tokens + k];
    for (auto& v : keys) v /= static_cast<double>(query_tokens);
    return keys;
  }

  std::vector<double> all_layer_key_mean() const {
    std::vector<double> keys(static_cast<size_t>(key_tokens), 0.0);
    for (int l = 0; l < n_layers; ++l) {
      const auto k = layer_key_mean(l);
      for (size_t i = 0; i < keys.size(); ++i) keys[i] += k[i];
    }
    for (auto& v : keys) v /= static_cast<double>(n_layers);
    return keys;
  }
};

namespace detail {

// [b, t, d] -> [b*h, t, d/h]
template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, int n_heads) {
  const int b = x.dim(0), t = x.dim(1), d = x.dim(2);
  const int hd = d / n_heads;
  auto r = reshape(x, {b, t, n_heads, hd});
  auto p = permute(r, {0, 2, 1, 3});  // [b, h, t, hd]
  return reshape(p, {b * n_heads, t, hd});
}

// [b*h, t, hd] -> [b, t, d]
template <typename T>
Tensor<T> merge_heads(const Tensor<T>& x, int b, int n_heads) {
  const int t = x.dim(1), hd = x.dim(2);
  auto r = reshape(x, {b, n_heads, t, hd});
  auto p = permute(r, {0, 2, 1, 3});  // [b, t, h, hd]
  return reshape(p, {b, t, n_heads * hd});
}

}  // namespace detail

// Q = X W_Q, K = Y W_K, V = Y W_V, all split into heads: [b, h, T, head_dim].
template <typename T>
std::tuple<Tensor<T>, Tensor<T>, Tensor<T>> project_qkv(const Tensor<T>& queries,
                                                        const Tensor<T>& kv,
                                                        const BranchLayerParams<T>& p,
                                                        const CrossAttentionBranchConfig& cfg) {
  if (queries.ndim() != 3 || queries.dim(2) != cfg.query_dim)
    throw ShapeError("project_qkv: queries " + shape_str(queries.shape()) + " vs query_dim " +
                     std::to_string(cfg.query_dim));
  if (kv.ndim() != 3 || kv.dim(2) != cfg.kv_dim)
    throw ShapeError("project_qkv: kv " + shape_str(kv.shape()) + " vs kv_dim " +
                     std::to_string(cfg.kv_dim));
  const int b = queries.dim(0), tq = queries.dim(1), tk = kv.dim(1);
  const int h = cfg.n_heads, hd = cfg.head_dim();
  auto q = permute(reshape(linear(queries, p.w_q), {b, tq, h, hd}), {0, 2, 1, 3});
  auto k = permute(reshape(linear(kv, p.w_k), {b, tk, h, hd}), {0, 2, 1, 3});
  auto v = permute(reshape(linear(kv, p.w_v), {b, tk, h, hd}), {0, 2, 1, 3});
  return {q, k, v};
}

// scores = Q K^T / sqrt(head_dim): [b, h, Tq, Tk]
template <typename T>
Tensor<T> attention_scores(const Tensor<T>& q, const Tensor<T>& k) {
  if (q.ndim() != 4 || k.ndim() != 4 || q.dim(3) != k.dim(3))
    throw ShapeError("attention_scores: " + shape_str(q.shape()) + " vs " + shape_str(k.shape()));
  const int b = q.dim(0), h = q.dim(1), tq = q.dim(2), hd = q.dim(3), tk = k.dim(2);
  auto qf = reshape(q, {b * h, tq, hd});
  auto kf = reshape(k, {b * h, tk, hd});
  auto scores = bmm(qf, kf, /*trans_b=*/true);
  return reshape(mul_scalar(scores, 1.0 / std::sqrt(static_cast<double>(hd))), {b, h, tq, tk});
}

// HeadOutput = AttentionWeight * V * FusionWeight: [b, h, Tq, head_dim]
template <typename T>
Tensor<T> head_output(const Tensor<T>& weights, const Tensor<T>& v,
                      const Tensor<T>& fusion_weight) {
  const int b = weights.dim(0), h = weights.dim(1), tq = weights.dim(2), tk = weights.dim(3);
  const int hd = v.dim(3);
  if (v.dim(0) != b || v.dim(1) != h || v.dim(2) != tk)
    throw ShapeError("head_output: " + shape_str(weights.shape()) + " vs " + shape_str(v.shape()));
  auto wf = reshape(weights, {b * h, tq, tk});
  auto vf = reshape(v, {b * h, tk, hd});
  return reshape(scale_by(bmm(wf, vf), fusion_weight), {b, h, tq, hd});
}

// LayerOutput = W_out . Concat(heads) + b_out: [b, Tq, query_dim]
template <typename T>
Tensor<T> layer_output(const Tensor<T>& head_out, const BranchLayerParams<T>& p) {
  const int b = head_out.dim(0), h = head_out.dim(1), tq = head_out.dim(2), hd = head_out.dim(3);
  auto merged = detail::merge_heads(reshape(head_out, {b * h, tq, hd}), b, h);
  return add_bias(linear(merged, p.w_out), p.b_out);
}

// Y_{l+1} = Y_l + scale * Dropout(GELU(Linear(LayerNorm(Y_l))))
template <typename T>
Tensor<T> kv_update(const Tensor<T>& y, const BranchLayerParams<T>& p,
                    const CrossAttentionBranchConfig& cfg, Mode mode, Rng& dropout_rng) {
  auto normed = layer_norm(y, p.ln_gain, p.ln_bias, 1e-5);
  auto update = dropout(gelu(add_bias(linear(normed, p.upd_w), p.upd_b)),
                        cfg.updater_dropout_p, mode, dropout_rng);
  return add(y, mul_scalar(update, cfg.updater_residual_scale));
}

// Runs the full branch; returns the enhanced query embedding mean-pooled over
// query tokens: [b, query_dim]. Optionally records attention weights.
template <typename T>
Tensor<T> branch_forward(const Tensor<T>& queries, const Tensor<T>& kv,
                         const CrossAttentionBranchConfig& cfg, BranchParameters<T>& params,
                         Mode mode, Rng& dropout_rng, AttentionTrace* trace = nullptr) {
  cfg.validate();
  if (static_cast<int>(params.layers.size()) != cfg.n_layers)
    throw ParamError("branch_forward: params/layers mismatch");
  const int b = queries.dim(0), tq = queries.dim(1), tk = kv.dim(1);
  if (trace) {
    trace->n_layers = cfg.n_layers;
    trace->n_heads = cfg.n_heads;
    trace->batch = b;
    trace->query_tokens = tq;
    trace->key_tokens = tk;
    trace->weights.assign(static_cast<size_t>(cfg.n_layers), {});
  }
  Tensor<T> x = queries;
  Tensor<T> y = kv;
  for (int l = 0; l < cfg.n_layers; ++l) {
    auto& p = params.layers[static_cast<size_t>(l)];
    auto [q, k, v] = project_qkv(x, y, p, cfg);
    auto weights = softmax(attention_scores(q, k), 3);  // rows over keys
    if (trace) {
      auto& layer_slot = trace->weights[static_cast<size_t>(l)];
      layer_slot.assign(static_cast<size_t>(cfg.n_heads), {});
      const auto& wd = weights.data();
      const std::int64_t per_head = static_cast<std::int64_t>(tq) * tk;
      for (int hh = 0; hh < cfg.n_heads; ++hh) {
        auto& dst = layer_slot[static_cast<size_t>(hh)];
        dst.resize(static_cast<size_t>(b) * per_head);
        for (int bi = 0; bi < b; ++bi)
          for (std::int64_t i = 0; i < per_head; ++i)
            dst[static_cast<size_t>(bi * per_head + i)] = static_cast<double>(
                wd[static_cast<size_t>(((static_cast<std::int64_t>(bi) * cfg.n_heads + hh) * per_head) + i)]);
      }
    }
    auto heads = head_output(weights, v, p.fusion_weight);
    x = layer_output(heads, p);
    y = kv_update(y, p, cfg, mode, dropout_rng);
  }
  return mean_axis(x, 1);
}

// Both branches of the bidirectional block; output [b, d_img + d_meta].
template <typename T>
Tensor<T> fuse_bidirectional(const Tensor<T>& img_tokens, const Tensor<T>& meta_tokens,
                             const CrossAttentionBranchConfig& img2meta_cfg,
                             BranchParameters<T>& img2meta,
                             const CrossAttentionBranchConfig& meta2img_cfg,
                             BranchParameters<T>& meta2img, Mode mode, Rng& dropout_rng,
                             AttentionTrace* img2meta_trace = nullptr,
                             AttentionTrace* meta2img_trace = nullptr) {
  auto img_enhanced = branch_forward(img_tokens, meta_tokens, img2meta_cfg, img2meta, mode,
                                     dropout_rng, img2meta_trace);
  auto meta_enhanced = branch_forward(meta_tokens, img_tokens, meta2img_cfg, meta2img, mode,
                                      dropout_rng, meta2img_trace);
  return concat<T>({img_enhanced, meta_enhanced}, 1);
}

}  // namespace xattn
