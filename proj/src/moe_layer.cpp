// SPDX-License-Identifier: Apache-2.0
#include "moerace/moe_layer.hpp"

#include <fmt/format.h>

#include "moerace/errors.hpp"

namespace moerace {

void FineGrainedConfig::validate() const {
  if (experts == 0 || model_dim == 0 || dense_hidden == 0 || target_dim == 0) {
    throw ConfigError("MoE extents (experts, model_dim, dense_hidden, target_dim) must be positive");
  }
  if (k == 0 || k > experts) throw ConfigError(fmt::format("k={} must lie in [1, E={}]", k, experts));
  if (dense_hidden % k != 0) {
    throw ConfigError(fmt::format("{}-in-{}: k={} must divide the dense FFN width {}", k, experts, k, dense_hidden));
  }
}

double ffn_init_bound(std::size_t model_dim, std::size_t dense_hidden) {
  return xavier_bound(model_dim, dense_hidden);
}

FfnHandles init_ffn(ParameterStore& store, const std::string& name_prefix, std::size_t model_dim,
                    std::size_t hidden, std::size_t init_width, std::uint64_t seed, const std::string& init_key) {
  const double bound = ffn_init_bound(model_dim, init_width);
  FfnHandles h;
  h.w_in = store.add(name_prefix + ".w_in", uniform_weight(model_dim, hidden, bound, seed, init_key + ".w_in"));
  h.b_in = store.add(name_prefix + ".b_in", Tensor({hidden}));
  h.w_out = store.add(name_prefix + ".w_out", uniform_weight(hidden, model_dim, bound, seed, init_key + ".w_out"));
  return h;
}

MoeLayerParams init_moe_params(ParameterStore& store, const std::string& prefix, const FineGrainedConfig& config,
                               std::uint64_t seed) {
  config.validate();
  const std::size_t d = config.model_dim;
  MoeLayerParams p;
  p.config = config;
  auto linear = [&](const std::string& name, std::size_t in, std::size_t out, std::size_t& w, std::size_t& b) {
    w = store.add(prefix + ".router." + name + ".w",
                  uniform_weight(in, out, xavier_bound(in, out), seed, prefix + ".router." + name));
    b = store.add(prefix + ".router." + name + ".b", Tensor({out}));
  };
  linear("hidden", d, d, p.router.w_hidden, p.router.b_hidden);
  linear("gate", d, config.experts, p.router.w_gate, p.router.b_gate);
  linear("target", d, config.target_dim, p.router.w_target, p.router.b_target);
  for (std::size_t e = 0; e < config.experts; ++e) {
    p.experts.push_back(init_ffn(store, fmt::format("{}.expert{}", prefix, e), d, config.expert_hidden(),
                                 config.dense_hidden, seed, fmt::format("{}.ffn{}", prefix, e)));
  }
  return p;
}

std::size_t dense_ffn_param_count(std::size_t model_dim, std::size_t hidden) {
  return model_dim * hidden + hidden + hidden * model_dim;
}

ParamCount count_params(const FineGrainedConfig& config) {
  config.validate();
  const std::size_t d = config.model_dim;
  ParamCount c;
  c.router = d * d + d + d * config.experts + config.experts + d * config.target_dim + config.target_dim;
  c.per_expert = dense_ffn_param_count(d, config.expert_hidden());
  c.experts_total = config.experts * c.per_expert;
  c.experts_activated = config.k * c.per_expert;
  return c;
}

RouterHeadOutput router_head(const Var& tokens, const RouterHandles& h, std::span<const Var> bound) {
  RouterHeadOutput out;
  out.hidden = gelu(matmul(tokens, bound[h.w_hidden]) + bound[h.b_hidden]);
  out.logits = matmul(out.hidden, bound[h.w_gate]) + bound[h.b_gate];
  out.target = matmul(out.hidden, bound[h.w_target]) + bound[h.b_target];
  return out;
}

Var compute_logits(const Var& x, const RouterHandles& h, std::span<const Var> bound) {
  const Shape& s = x.shape();
  if (s.size() != 3) throw ShapeError(fmt::format("compute_logits: expected (B,L,D), got {}", shape_str(s)));
  const Var logits = router_head(reshape(x, {s[0] * s[1], s[2]}), h, bound).logits;
  return reshape(logits, {s[0], s[1], logits.shape()[1]});
}

Var ffn_forward(const Var& tokens, const FfnHandles& h, std::span<const Var> bound) {
  return matmul(gelu(matmul(tokens, bound[h.w_in]) + bound[h.b_in]), bound[h.w_out]);
}

Var apply_gating(const Var& logits, Gating g) {
  switch (g) {
    case Gating::Identity: return logits;
    case Gating::Sigmoid: return sigmoid(logits);
    case Gating::Softmax: return softmax(logits);
  }
  return logits;
}

LayerOutput moe_forward(const Var& x, const MoeLayerParams& params, std::span<const Var> bound,
                        const MoeForwardOptions& options) {
  const Shape& s = x.shape();
  const FineGrainedConfig& cfg = params.config;
  if (s.size() != 3 || s[2] != cfg.model_dim) {
    throw ShapeError(fmt::format("moe_forward: expected (B,L,{}), got {}", cfg.model_dim, shape_str(s)));
  }
  const std::size_t batch = s[0], tokens = s[1], n = s[0] * s[1], experts = cfg.experts;
  Tape& tape = *x.tape();

  const Var flat = reshape(x, {n, cfg.model_dim});
  const RouterHeadOutput head = router_head(flat, params.router, bound);
  const Var scores = apply_gating(head.logits, options.route.gating);
  const Tensor score_grid = scores.value().reshaped({batch, tokens, experts});

  Selection sel;
  if (options.mode == Mode::Train) {
    sel = select_topk(score_grid, options.route.strategy, options.route.k);
    if (options.threshold) *options.threshold = ema_update(*options.threshold, sel.kth_values);
  } else {
    const ThresholdState empty;
    sel = select_infer(score_grid, options.route.strategy, options.route.k,
                       options.threshold ? *options.threshold : empty);
  }
  const Var gates = mul(scores, tape.constant(sel.mask.reshaped({n, experts})));

  Var y;
  std::vector<std::size_t> rows;
  std::vector<std::size_t> gate_index;
  for (std::size_t e = 0; e < experts; ++e) {
    rows.clear();
    gate_index.clear();
    for (std::size_t t = 0; t < n; ++t) {
      if (options.dispatch == Dispatch::Dense || sel.mask[t * experts + e] != 0.0) {
        rows.push_back(t);
        gate_index.push_back(t * experts + e);
      }
    }
    if (rows.empty()) continue;
    Var contribution;
    if (options.dispatch == Dispatch::Dense) {
      contribution = scale_rows(ffn_forward(flat, params.experts[e], bound), take(gates, gate_index));
    } else {
      const Var out = ffn_forward(gather_rows(flat, rows), params.experts[e], bound);
      contribution = scatter_rows(scale_rows(out, take(gates, gate_index)), rows, n);
    }
    y = y.valid() ? add(y, contribution) : contribution;
  }
  if (!y.valid()) y = tape.constant(Tensor({n, cfg.model_dim}));

  LayerOutput out;
  out.y = reshape(y, {batch, tokens, cfg.model_dim});
  out.logits = head.logits;
  out.y_hat = reshape(head.target, {batch, tokens, cfg.target_dim});
  out.route.scores = score_grid;
  out.route.mask = sel.mask;
  out.route.gates = gates.value().reshaped({batch, tokens, experts});
  out.route.kth_values = std::move(sel.kth_values);
  out.route.budget = sel.budget;
  out.route.thresholded = sel.thresholded;
  return out;
}

}  // namespace moerace
