#pragma once

// Minimal decoder-only transformer: token + learned positional embeddings,
// pre-LN blocks with causal multi-head attention and a SiLU feed-forward,
// final LayerNorm, and a linear vocabulary head. Exposes h_norm / h_att per
// block so the adapter stack can gate attention outputs.

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "hycam/adapters.hpp"
#include "hycam/graph.hpp"
#include "hycam/rng.hpp"

namespace hycam {

struct BackboneConfig {
  int vocab_size = 64;
  int d_model = 64;
  int n_layers = 4;
  int n_heads = 4;
  int d_ff = 256;
  int max_seq_len = 128;
  double layer_norm_eps = 1e-5;

  void validate() const {
    if (vocab_size < 1) throw ConfigError("backbone.vocab_size: must be >= 1");
    if (d_model < 1) throw ConfigError("backbone.d_model: must be >= 1");
    if (n_layers < 1) throw ConfigError("backbone.n_layers: must be >= 1");
    if (n_heads < 1) throw ConfigError("backbone.n_heads: must be >= 1");
    if (d_ff < 1) throw ConfigError("backbone.d_ff: must be >= 1");
    if (max_seq_len < 2) throw ConfigError("backbone.max_seq_len: must be >= 2");
    if (d_model % n_heads != 0)
      throw ConfigError("backbone.d_model: " + std::to_string(d_model) +
                        " not divisible by n_heads " + std::to_string(n_heads));
    if (!(layer_norm_eps > 0.0)) throw ConfigError("backbone.layer_norm_eps: must be > 0");
  }

  bool operator==(const BackboneConfig&) const = default;
};

template <typename T>
struct TransformerBlock {
  Parameter<T>*Wq, *Wk, *Wv, *Wo;
  Parameter<T>*attn_ln_gain, *attn_ln_bias;
  Parameter<T>*W1, *b1, *W2, *b2;
  Parameter<T>*ffn_ln_gain, *ffn_ln_bias;
};

template <typename T>
struct BackboneModel {
  BackboneConfig config;
  ParameterStore<T> params;
  Parameter<T>* tok_embed = nullptr;
  Parameter<T>* pos_embed = nullptr;
  std::vector<TransformerBlock<T>> blocks;
  Parameter<T>* final_ln_gain = nullptr;
  Parameter<T>* final_ln_bias = nullptr;
  Parameter<T>* head = nullptr;
};

template <typename T>
BackboneModel<T> make_backbone(const BackboneConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  BackboneModel<T> m;
  m.config = cfg;
  Rng rng(mix_seed(seed, 0xbacc0deull));
  const double init_std = 0.02;
  auto dense = [&](const std::string& name, int rows, int cols) {
    auto& p = m.params.add(name, {rows, cols});
    rng.fill_normal(p.value, 0.0, init_std);
    return &p;
  };
  auto gain = [&](const std::string& name, int n) {
    auto& p = m.params.add(name, {n});
    std::fill(p.value.begin(), p.value.end(), T(1));
    return &p;
  };
  auto bias = [&](const std::string& name, int n) { return &m.params.add(name, {n}); };

  m.tok_embed = dense("embed.tok", cfg.vocab_size, cfg.d_model);
  m.pos_embed = dense("embed.pos", cfg.max_seq_len, cfg.d_model);
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string base = "layer" + std::to_string(l);
    TransformerBlock<T> b;
    b.attn_ln_gain = gain(base + ".attn.ln.gain", cfg.d_model);
    b.attn_ln_bias = bias(base + ".attn.ln.bias", cfg.d_model);
    b.Wq = dense(base + ".attn.Wq", cfg.d_model, cfg.d_model);
    b.Wk = dense(base + ".attn.Wk", cfg.d_model, cfg.d_model);
    b.Wv = dense(base + ".attn.Wv", cfg.d_model, cfg.d_model);
    b.Wo = dense(base + ".attn.Wo", cfg.d_model, cfg.d_model);
    b.ffn_ln_gain = gain(base + ".ffn.ln.gain", cfg.d_model);
    b.ffn_ln_bias = bias(base + ".ffn.ln.bias", cfg.d_model);
    b.W1 = dense(base + ".ffn.W1", cfg.d_model, cfg.d_ff);
    b.b1 = bias(base + ".ffn.b1", cfg.d_ff);
    b.W2 = dense(base + ".ffn.W2", cfg.d_ff, cfg.d_model);
    b.b2 = bias(base + ".ffn.b2", cfg.d_model);
    m.blocks.push_back(b);
  }
  m.final_ln_gain = gain("final_ln.gain", cfg.d_model);
  m.final_ln_bias = bias("final_ln.bias", cfg.d_model);
  m.head = dense("head.W", cfg.d_model, cfg.vocab_size);
  return m;
}

template <typename T>
void freeze(BackboneModel<T>& m) {
  m.params.freeze_all();
}

// Causal multi-head scaled-dot-product attention over an already-normalized
// input, heads concatenated through the output projection.
template <typename T>
Tensor<T> self_attention(Graph<T>& g, Tensor<T> h_norm, const TransformerBlock<T>& block,
                         const BackboneConfig& cfg, bool causal = true) {
  const int L = h_norm.shape().at(0);
  if (L > cfg.max_seq_len)
    throw ShapeError("self_attention: sequence length " + std::to_string(L) +
                     " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
  const int dk = cfg.d_model / cfg.n_heads;
  auto q = g.matmul(h_norm, g.param(*block.Wq));
  auto k = g.matmul(h_norm, g.param(*block.Wk));
  auto v = g.matmul(h_norm, g.param(*block.Wv));
  const T inv_sqrt_dk = T(1) / static_cast<T>(std::sqrt(static_cast<double>(dk)));
  std::vector<Tensor<T>> heads;
  heads.reserve(static_cast<std::size_t>(cfg.n_heads));
  for (int h = 0; h < cfg.n_heads; ++h) {
    auto qh = g.slice_cols(q, h * dk, dk);
    auto kh = g.slice_cols(k, h * dk, dk);
    auto vh = g.slice_cols(v, h * dk, dk);
    auto scores = g.scale(g.matmul(qh, g.transpose(kh)), inv_sqrt_dk);
    auto attn = causal ? g.softmax_causal(scores) : g.softmax_lastdim(scores);
    heads.push_back(g.matmul(attn, vh));
  }
  auto merged = cfg.n_heads == 1 ? heads[0] : g.concat_cols(heads);
  return g.matmul(merged, g.param(*block.Wo));
}

template <typename T>
struct BlockTrace {
  Tensor<T> h_norm;
  Tensor<T> h_att;
};

template <typename T>
struct BlockResult {
  Tensor<T> out;
  BlockTrace<T> trace;
  std::optional<Tensor<T>> modulation;  // fused per-token A when adapted
  std::optional<RoutingOutput<T>> routing;
};

// Pre-LN residual wiring. The adapter, when present, replaces h_att with
// the modulated h_out inside the attention residual.
template <typename T>
BlockResult<T> block_forward(Graph<T>& g, Tensor<T> h_in, const TransformerBlock<T>& block,
                             const BackboneConfig& cfg, const HyCamLayer<T>* adapter = nullptr,
                             RouteMode mode = RouteMode::Deterministic,
                             std::uint64_t noise_seed = 0) {
  BlockResult<T> res;
  const T eps = static_cast<T>(cfg.layer_norm_eps);
  auto h_norm = g.layer_norm(h_in, g.param(*block.attn_ln_gain), g.param(*block.attn_ln_bias), eps);
  auto h_att = self_attention(g, h_norm, block, cfg);
  res.trace = {h_norm, h_att};
  Tensor<T> h_out = h_att;
  if (adapter != nullptr) {
    auto ad = hycam_forward(g, h_norm, h_att, *adapter, mode, noise_seed);
    h_out = ad.h_out;
    res.modulation = ad.a_fusion;
    res.routing = ad.routing;
  }
  auto attn_res = g.add(h_in, h_out);
  auto f_norm = g.layer_norm(attn_res, g.param(*block.ffn_ln_gain), g.param(*block.ffn_ln_bias), eps);
  auto f1 = g.silu(g.add_bias(g.matmul(f_norm, g.param(*block.W1)), g.param(*block.b1)));
  auto f2 = g.add_bias(g.matmul(f1, g.param(*block.W2)), g.param(*block.b2));
  res.out = g.add(attn_res, f2);
  return res;
}

template <typename T>
struct LmResult {
  Tensor<T> logits;
  std::vector<BlockTrace<T>> traces;
  std::vector<Tensor<T>> modulations;      // one per adapted layer
  std::vector<RoutingOutput<T>> routings;  // one per adapted layer with a router
};

// Full causal LM pass. `adapters`, when present, must provide one layer
// bundle per transformer block. Per-layer Gumbel noise derives from
// noise_seed so a single seed drives the whole pass reproducibly.
template <typename T>
LmResult<T> lm_forward(Graph<T>& g, const std::vector<int>& tokens, const BackboneModel<T>& m,
                       const AdapterSet<T>* adapters = nullptr,
                       RouteMode mode = RouteMode::Deterministic, std::uint64_t noise_seed = 0) {
  const int L = static_cast<int>(tokens.size());
  if (L < 1) throw ShapeError("lm_forward: empty token sequence");
  if (L > m.config.max_seq_len)
    throw ShapeError("lm_forward: sequence length " + std::to_string(L) + " exceeds max_seq_len " +
                     std::to_string(m.config.max_seq_len));
  if (adapters != nullptr && static_cast<int>(adapters->layers.size()) != m.config.n_layers)
    throw ConfigError("lm_forward: adapter set has " + std::to_string(adapters->layers.size()) +
                      " layers, backbone has " + std::to_string(m.config.n_layers));
  for (int t : tokens)
    if (t < 0 || t >= m.config.vocab_size)
      throw ShapeError("lm_forward: token id " + std::to_string(t) + " out of range [0," +
                       std::to_string(m.config.vocab_size) + ")");

  std::vector<int> positions(static_cast<std::size_t>(L));
  for (int i = 0; i < L; ++i) positions[static_cast<std::size_t>(i)] = i;
  auto x = g.add(g.embedding(g.param(*m.tok_embed), tokens),
                 g.embedding(g.param(*m.pos_embed), positions));

  LmResult<T> res;
  for (int l = 0; l < m.config.n_layers; ++l) {
    const HyCamLayer<T>* layer =
        adapters != nullptr ? &adapters->layers[static_cast<std::size_t>(l)] : nullptr;
    auto br = block_forward(g, x, m.blocks[static_cast<std::size_t>(l)], m.config, layer, mode,
                            mix_seed(noise_seed, 0x1a7e5, static_cast<std::uint64_t>(l)));
    x = br.out;
    res.traces.push_back(br.trace);
    if (br.modulation) res.modulations.push_back(*br.modulation);
    if (br.routing) res.routings.push_back(*br.routing);
  }
  auto final_norm = g.layer_norm(x, g.param(*m.final_ln_gain), g.param(*m.final_ln_bias),
                                 static_cast<T>(m.config.layer_norm_eps));
  res.logits = g.matmul(final_norm, g.param(*m.head));
  return res;
}

}  // namespace hycam
