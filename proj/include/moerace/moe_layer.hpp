// SPDX-License-Identifier: Apache-2.0
//
// MoE block replacing a transformer FFN.
//
// Fine-grained segmentation ("k-in-E"): E experts, each an FFN whose inner
// width is dense_hidden / k, with k experts active per token on average, so
// the activated expert parameters match one dense FFN of width dense_hidden.
//
// The router is a two-layer head: linear + GELU at model width, then two
// linear heads on the shared hidden state, a gating head (E logits) and a
// target head that predicts the regression target for per-layer
// regularization.
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "moerace/autodiff.hpp"
#include "moerace/parameters.hpp"
#include "moerace/router.hpp"

namespace moerace {

struct FineGrainedConfig {
  std::size_t k = 2;
  std::size_t experts = 8;
  std::size_t model_dim = 64;
  std::size_t dense_hidden = 256;
  std::size_t target_dim = 4;

  std::size_t expert_hidden() const { return dense_hidden / k; }
  void validate() const;  // throws ConfigError
};

struct FfnHandles {
  std::size_t w_in = 0;   // (D, H)
  std::size_t b_in = 0;   // (H)
  std::size_t w_out = 0;  // (H, D), no output bias
};

struct RouterHandles {
  std::size_t w_hidden = 0, b_hidden = 0;  // (D, D), (D)
  std::size_t w_gate = 0, b_gate = 0;      // (D, E), (E)
  std::size_t w_target = 0, b_target = 0;  // (D, target), (target)
};

struct MoeLayerParams {
  FineGrainedConfig config;
  RouterHandles router;
  std::vector<FfnHandles> experts;
  ThresholdState threshold;
};

// Xavier-uniform bound for an FFN's input projection. Experts use the
// dense width (expert_hidden * k) so their range matches the dense FFN.
double ffn_init_bound(std::size_t model_dim, std::size_t dense_hidden);

// FFN weights keyed by `init_key`, so a dense FFN and a 1-in-1 expert that
// share a key get identical draws.
FfnHandles init_ffn(ParameterStore& store, const std::string& name_prefix, std::size_t model_dim,
                    std::size_t hidden, std::size_t init_width, std::uint64_t seed, const std::string& init_key);

MoeLayerParams init_moe_params(ParameterStore& store, const std::string& prefix, const FineGrainedConfig& config,
                               std::uint64_t seed);

struct ParamCount {
  std::size_t router = 0;
  std::size_t per_expert = 0;
  std::size_t experts_total = 0;      // E * per_expert
  std::size_t experts_activated = 0;  // k * per_expert

  std::size_t total() const { return router + experts_total; }
  std::size_t activated() const { return router + experts_activated; }
};
ParamCount count_params(const FineGrainedConfig& config);
std::size_t dense_ffn_param_count(std::size_t model_dim, std::size_t hidden);

enum class Dispatch { Sparse, Dense };

struct RouterHeadOutput {
  Var hidden;  // (N, D)
  Var logits;  // (N, E)
  Var target;  // (N, target_dim)
};

RouterHeadOutput router_head(const Var& tokens, const RouterHandles& h, std::span<const Var> bound);

// Raw affinity logits (B,L,E) for x of shape (B,L,D).
Var compute_logits(const Var& x, const RouterHandles& h, std::span<const Var> bound);

// linear -> GELU -> linear on (n, D) rows.
Var ffn_forward(const Var& tokens, const FfnHandles& h, std::span<const Var> bound);

Var apply_gating(const Var& logits, Gating g);

struct MoeForwardOptions {
  RouteConfig route;
  Mode mode = Mode::Train;
  // Train mode updates it when non-null; infer mode reads it.
  ThresholdState* threshold = nullptr;
  Dispatch dispatch = Dispatch::Sparse;
};

struct LayerOutput {
  Var y;       // (B,L,D)
  Var logits;  // (B*L, E)
  Var y_hat;   // (B,L,target_dim)
  RouteResult route;
};

LayerOutput moe_forward(const Var& x, const MoeLayerParams& params, std::span<const Var> bound,
                        const MoeForwardOptions& options);

}  // namespace moerace
