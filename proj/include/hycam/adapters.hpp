#pragma once

// CAM / HyCAM adapter stack: a shared full-parameter modulator, N_s
// low-rank (SLoRA) specialized modulators, and a per-token Gumbel-Softmax
// router with a load-balancing loss. Every variant is constructed so the
// adapted model is bit-identical to the frozen backbone at initialization:
// the final projection of each modulator starts at exactly zero.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "hycam/graph.hpp"
#include "hycam/rng.hpp"

namespace hycam {

enum class Variant : int {
  FullHybrid = 0,   // dense shared + SLoRA specialists + router
  SharedOnly = 1,   // dense shared only, no routing
  SpecOnly = 2,     // SLoRA specialists + router, no shared term
  FullSpec = 3,     // dense shared + dense specialists + router
  InversePeft = 4,  // SLoRA shared + dense specialists + router
};

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::FullHybrid: return "full-hybrid";
    case Variant::SharedOnly: return "shared-only";
    case Variant::SpecOnly: return "spec-only";
    case Variant::FullSpec: return "full-spec";
    case Variant::InversePeft: return "inverse-peft";
  }
  return "?";
}

inline Variant variant_from_name(const std::string& s) {
  for (int i = 0; i <= 4; ++i)
    if (s == variant_name(static_cast<Variant>(i))) return static_cast<Variant>(i);
  throw ConfigError("unknown adapter variant: " + s);
}

inline bool variant_has_shared(Variant v) { return v != Variant::SpecOnly; }
inline bool variant_has_specialists(Variant v) { return v != Variant::SharedOnly; }
inline bool variant_shared_dense(Variant v) { return v != Variant::InversePeft; }
inline bool variant_specialists_dense(Variant v) {
  return v == Variant::FullSpec || v == Variant::InversePeft;
}

struct AdapterConfig {
  Variant variant = Variant::FullHybrid;
  int rank = 8;
  int num_specialists = 5;
  double tau = 0.5;

  void validate(int d_model) const {
    if (num_specialists < 1)
      throw ConfigError("adapter.num_specialists: must be >= 1, got " +
                        std::to_string(num_specialists));
    if (rank < 1 || rank >= d_model)
      throw ConfigError("adapter.rank: must satisfy 1 <= rank < d_model, got rank=" +
                        std::to_string(rank) + " with d_model=" + std::to_string(d_model));
    if (!(tau > 0.0))
      throw ConfigError("adapter.tau: must be > 0, got " + std::to_string(tau));
  }
};

// One modulation projection, either a dense d×d matrix or the three-factor
// SLoRA parameterization W = B·N·A (B: d×r, N: r×r, A: r×d).
template <typename T>
struct Modulator {
  bool dense = true;
  Parameter<T>* Wproj = nullptr;
  Parameter<T>* B = nullptr;
  Parameter<T>* N = nullptr;
  Parameter<T>* A = nullptr;
};

template <typename T>
struct HyCamLayer {
  Variant variant = Variant::FullHybrid;
  int d = 0;
  int rank = 0;
  double tau = 0.5;
  std::optional<Modulator<T>> shared;
  std::vector<Modulator<T>> specialists;
  Parameter<T>* W_router = nullptr;

  int num_specialists() const { return static_cast<int>(specialists.size()); }
};

// Per-layer adapter bundle plus the store owning all adapter parameters.
template <typename T>
struct AdapterSet {
  AdapterConfig config;
  int d = 0;
  std::vector<HyCamLayer<T>> layers;
  ParameterStore<T> params;
};

namespace detail {

template <typename T>
Modulator<T> make_modulator(ParameterStore<T>& store, const std::string& prefix, bool dense,
                            int d, int r, Rng& rng) {
  Modulator<T> m;
  m.dense = dense;
  if (dense) {
    m.Wproj = &store.add(prefix + ".Wproj", {d, d});  // zero-initialized
  } else {
    m.B = &store.add(prefix + ".B", {d, r});  // zero-initialized: exact identity at start
    m.N = &store.add(prefix + ".N", {r, r});
    m.A = &store.add(prefix + ".A", {r, d});
    rng.fill_kaiming_uniform(m.N->value, r);
    rng.fill_kaiming_uniform(m.A->value, d);
  }
  return m;
}

}  // namespace detail

template <typename T>
AdapterSet<T> make_adapters(const AdapterConfig& cfg, int d_model, int n_layers,
                            std::uint64_t seed) {
  cfg.validate(d_model);
  AdapterSet<T> set;
  set.config = cfg;
  set.d = d_model;
  Rng rng(mix_seed(seed, 0xada47ull));
  for (int l = 0; l < n_layers; ++l) {
    const std::string base = "layer" + std::to_string(l) + ".hycam";
    HyCamLayer<T> layer;
    layer.variant = cfg.variant;
    layer.d = d_model;
    layer.rank = cfg.rank;
    layer.tau = cfg.tau;
    if (variant_has_shared(cfg.variant))
      layer.shared = detail::make_modulator(set.params, base + ".shared",
                                            variant_shared_dense(cfg.variant), d_model, cfg.rank,
                                            rng);
    if (variant_has_specialists(cfg.variant)) {
      for (int k = 0; k < cfg.num_specialists; ++k)
        layer.specialists.push_back(
            detail::make_modulator(set.params, base + ".spec" + std::to_string(k),
                                   variant_specialists_dense(cfg.variant), d_model, cfg.rank, rng));
      layer.W_router = &set.params.add(base + ".router.W", {d_model, cfg.num_specialists});
      // router starts at zero: uniform routing until trained
    }
    set.layers.push_back(std::move(layer));
  }
  return set;
}

// ---- forward pieces ------------------------------------------------------

// SiLU(h_norm · W) with W dense or factor-by-factor; the d×d product is
// never materialized for factorized modulators.
template <typename T>
Tensor<T> modulation_forward(Graph<T>& g, Tensor<T> h_norm, const Modulator<T>& m) {
  if (m.dense) return g.silu(g.matmul(h_norm, g.param(*m.Wproj)));
  auto x = g.matmul(h_norm, g.param(*m.B));
  x = g.matmul(x, g.param(*m.N));
  x = g.matmul(x, g.param(*m.A));
  return g.silu(x);
}

template <typename T>
Tensor<T> shared_modulation(Graph<T>& g, Tensor<T> h_norm, const HyCamLayer<T>& layer) {
  if (!layer.shared) throw ConfigError("shared_modulation: variant has no shared modulator");
  return modulation_forward(g, h_norm, *layer.shared);
}

template <typename T>
Tensor<T> specialized_modulation(Graph<T>& g, Tensor<T> h_norm, const Modulator<T>& spec) {
  return modulation_forward(g, h_norm, spec);
}

// Dense materialization of a modulator's projection matrix (B·N·A for
// factorized ones) for inspection and rank analysis; not used in training.
template <typename T>
std::vector<T> effective_weight(const Modulator<T>& m, int d) {
  if (m.dense) return m.Wproj->value;
  const int r = m.N->shape[0];
  std::vector<T> bn(static_cast<std::size_t>(d) * r, T(0));
  detail::mm_nn(m.B->value.data(), m.N->value.data(), bn.data(), d, r, r);
  std::vector<T> w(static_cast<std::size_t>(d) * d, T(0));
  detail::mm_nn(bn.data(), m.A->value.data(), w.data(), d, r, d);
  return w;
}

enum class RouteMode { Stochastic, Deterministic };

template <typename T>
struct RoutingOutput {
  Tensor<T> logits;         // L × N_s
  Tensor<T> p;              // soft routing weights, rows sum to 1
  Tensor<T> softmax_plain;  // noise-free, temperature-free softmax of logits
};

// logits = h_norm · W_router; p = softmax((logits + g)/τ) with g fresh
// standard-Gumbel noise per token per pass (or 0 in deterministic mode).
template <typename T>
RoutingOutput<T> route(Graph<T>& g, Tensor<T> h_norm, const HyCamLayer<T>& layer, RouteMode mode,
                       std::uint64_t noise_seed) {
  if (layer.W_router == nullptr) throw ConfigError("route: variant has no router");
  RoutingOutput<T> out;
  out.logits = g.matmul(h_norm, g.param(*layer.W_router));
  out.softmax_plain = g.softmax_lastdim(out.logits);
  const T inv_tau = T(1) / static_cast<T>(layer.tau);
  if (mode == RouteMode::Deterministic) {
    out.p = g.softmax_lastdim(g.scale(out.logits, inv_tau));
  } else {
    const auto& shape = out.logits.shape();
    Rng rng(noise_seed);
    std::vector<T> noise(static_cast<std::size_t>(shape[0]) * shape[1]);
    for (auto& v : noise) v = static_cast<T>(rng.gumbel());
    auto gn = g.input({shape[0], shape[1]}, std::move(noise));
    out.p = g.softmax_lastdim(g.scale(g.add(out.logits, gn), inv_tau));
  }
  return out;
}

// Σ_k mean_tokens(p_k) · mean_tokens(softmax_plain_k), differentiable
// through both factors. `p` and `plain` are [B_tokens × N_s].
template <typename T>
Tensor<T> load_balance_loss(Graph<T>& g, Tensor<T> p, Tensor<T> plain) {
  const int tokens = p.shape().at(0);
  const T inv = T(1) / static_cast<T>(tokens);
  auto mean_p = g.scale(g.sum_rows(p), inv);
  auto mean_plain = g.scale(g.sum_rows(plain), inv);
  return g.sum_all(g.hadamard(mean_p, mean_plain));
}

template <typename T>
Tensor<T> load_balance_loss(Graph<T>& g, const std::vector<RoutingOutput<T>>& parts) {
  if (parts.empty()) throw ConfigError("load_balance_loss: no routing outputs");
  if (parts.size() == 1) return load_balance_loss(g, parts[0].p, parts[0].softmax_plain);
  std::vector<Tensor<T>> ps, plains;
  for (const auto& r : parts) {
    ps.push_back(r.p);
    plains.push_back(r.softmax_plain);
  }
  return load_balance_loss(g, g.concat_rows(ps), g.concat_rows(plains));
}

// A_Fusion = A_Shared + Σ_k p_k · A_Spec_k, p applied per token (row).
template <typename T>
Tensor<T> fuse(Graph<T>& g, std::optional<Tensor<T>> shared_mod,
               const std::vector<Tensor<T>>& spec_mods, Tensor<T> p) {
  if (static_cast<int>(spec_mods.size()) != p.shape().at(1))
    throw ShapeError("fuse: " + std::to_string(spec_mods.size()) + " modulations vs " +
                     std::to_string(p.shape().at(1)) + " routing columns");
  std::optional<Tensor<T>> acc = shared_mod;
  for (std::size_t k = 0; k < spec_mods.size(); ++k) {
    auto weighted = g.row_scale(spec_mods[k], g.slice_cols(p, static_cast<int>(k), 1));
    acc = acc ? g.add(*acc, weighted) : weighted;
  }
  if (!acc) throw ConfigError("fuse: nothing to fuse");
  return *acc;
}

// h_out = h_att + h_att ⊙ A_Fusion.
template <typename T>
Tensor<T> apply_modulation(Graph<T>& g, Tensor<T> h_att, Tensor<T> a_fusion) {
  return g.add(h_att, g.hadamard(h_att, a_fusion));
}

template <typename T>
struct HyCamForwardResult {
  Tensor<T> h_out;
  Tensor<T> a_fusion;  // per-token fused modulation, exported as heatmap data
  std::optional<RoutingOutput<T>> routing;
};

// Full per-layer adapter pass; composition depends on the variant.
template <typename T>
HyCamForwardResult<T> hycam_forward(Graph<T>& g, Tensor<T> h_norm, Tensor<T> h_att,
                                    const HyCamLayer<T>& layer, RouteMode mode,
                                    std::uint64_t noise_seed) {
  HyCamForwardResult<T> out;
  if (layer.variant == Variant::SharedOnly) {
    out.a_fusion = shared_modulation(g, h_norm, layer);
    out.h_out = apply_modulation(g, h_att, out.a_fusion);
    return out;
  }
  std::optional<Tensor<T>> shared_mod;
  if (layer.shared) shared_mod = shared_modulation(g, h_norm, layer);
  std::vector<Tensor<T>> spec_mods;
  spec_mods.reserve(layer.specialists.size());
  for (const auto& spec : layer.specialists)
    spec_mods.push_back(specialized_modulation(g, h_norm, spec));
  out.routing = route(g, h_norm, layer, mode, noise_seed);
  out.a_fusion = fuse(g, shared_mod, spec_mods, out.routing->p);
  out.h_out = apply_modulation(g, h_att, out.a_fusion);
  return out;
}

// Trainable parameter count for one layer, matching the construction above.
inline std::int64_t adapter_param_count(Variant variant, int d, int r, int n_s) {
  const std::int64_t dense = static_cast<std::int64_t>(d) * d;
  const std::int64_t slora = 2ll * d * r + static_cast<std::int64_t>(r) * r;
  const std::int64_t router = static_cast<std::int64_t>(d) * n_s;
  switch (variant) {
    case Variant::FullHybrid: return dense + n_s * slora + router;
    case Variant::SharedOnly: return dense;
    case Variant::SpecOnly: return n_s * slora + router;
    case Variant::FullSpec: return dense + n_s * dense + router;
    case Variant::InversePeft: return slora + n_s * dense + router;
  }
  throw ConfigError("unreachable variant");
}

}  // namespace hycam
