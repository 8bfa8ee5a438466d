// SPDX-License-Identifier: Apache-2.0
#include "moerace/objectives.hpp"

#include <fmt/format.h>

#include "moerace/errors.hpp"

namespace moerace {
namespace {

struct TokenGrid {
  std::size_t tokens = 0;
  std::size_t experts = 0;
};

TokenGrid check_aux_inputs(const Tensor& mask, const Shape& probs, const char* what) {
  if (mask.rank() < 2 || probs.size() != 2) {
    throw ShapeError(fmt::format("{}: mask {} and probabilities {} must be (T, E)", what, shape_str(mask.shape()),
                                 shape_str(probs)));
  }
  const std::size_t experts = mask.shape().back();
  const std::size_t tokens = mask.size() / experts;
  if (probs[0] != tokens || probs[1] != experts) {
    throw ShapeError(fmt::format("{}: mask {} does not match probabilities {}", what, shape_str(mask.shape()),
                                 shape_str(probs)));
  }
  if (tokens == 0) throw ShapeError(fmt::format("{}: no tokens", what));
  return {tokens, experts};
}

Var weighted_correlation(const Tensor& mask, const Var& probs, bool diagonal_only, const char* what) {
  const TokenGrid g = check_aux_inputs(mask, probs.shape(), what);
  const Tensor flat_mask = mask.reshaped({g.tokens, g.experts});
  Tensor w = similarity_weights(correlation_matrices(flat_mask, probs.value()).m).w;
  if (diagonal_only) {
    for (std::size_t i = 0; i < g.experts; ++i) {
      for (std::size_t j = 0; j < g.experts; ++j) {
        if (i != j) w[i * g.experts + j] = 0.0;
      }
    }
  }
  Tape& tape = *probs.tape();
  const Var p_corr = matmul(transpose(probs), probs);
  return scale(sum(mul(p_corr, tape.constant(std::move(w)))), 1.0 / static_cast<double>(g.tokens));
}

}  // namespace

Var router_probabilities(const Var& logits) { return softmax(logits); }

Var balance_loss(const Tensor& mask, const Var& probs, std::size_t k) {
  const TokenGrid g = check_aux_inputs(mask, probs.shape(), "balance_loss");
  if (k == 0) throw ConfigError("balance_loss: k must be positive");
  const double norm = static_cast<double>(g.experts) / (static_cast<double>(k) * static_cast<double>(g.tokens));
  Tensor f({1, g.experts});
  for (std::size_t t = 0; t < g.tokens; ++t) {
    for (std::size_t e = 0; e < g.experts; ++e) f[e] += mask[t * g.experts + e];
  }
  for (double& v : f.values()) v *= norm;

  Tape& tape = *probs.tape();
  const Var ones = tape.constant(Tensor::full({1, g.tokens}, 1.0 / static_cast<double>(g.tokens)));
  const Var p_mean = matmul(ones, probs);  // (1, E)
  return sum(mul(p_mean, tape.constant(std::move(f))));
}

CorrelationMatrices correlation_matrices(const Tensor& mask, const Tensor& probs) {
  const TokenGrid g = check_aux_inputs(mask, probs.shape(), "correlation_matrices");
  const std::size_t e = g.experts;
  CorrelationMatrices out{Tensor({e, e}), Tensor({e, e})};
  for (std::size_t t = 0; t < g.tokens; ++t) {
    const double* m_row = mask.data() + t * e;
    const double* p_row = probs.data() + t * e;
    for (std::size_t i = 0; i < e; ++i) {
      for (std::size_t j = 0; j < e; ++j) {
        out.m[i * e + j] += m_row[i] * m_row[j];
        out.p[i * e + j] += p_row[i] * p_row[j];
      }
    }
  }
  return out;
}

SimilarityWeights similarity_weights(const Tensor& m_corr) {
  if (m_corr.rank() != 2 || m_corr.dim(0) != m_corr.dim(1)) {
    throw ShapeError(fmt::format("similarity_weights: expected square matrix, got {}", shape_str(m_corr.shape())));
  }
  const std::size_t e = m_corr.dim(0);
  double diag = 0.0, off = 0.0;
  for (std::size_t i = 0; i < e; ++i) {
    for (std::size_t j = 0; j < e; ++j) (i == j ? diag : off) += m_corr[i * e + j];
  }
  SimilarityWeights out{Tensor({e, e})};
  out.diagonal_empty = diag == 0.0;
  out.off_diagonal_empty = off == 0.0;
  const double diag_scale = out.diagonal_empty ? 0.0 : static_cast<double>(e) / diag;
  const double off_scale = out.off_diagonal_empty ? 0.0 : static_cast<double>(e * e - e) / off;
  for (std::size_t i = 0; i < e; ++i) {
    for (std::size_t j = 0; j < e; ++j) out.w[i * e + j] = m_corr[i * e + j] * (i == j ? diag_scale : off_scale);
  }
  return out;
}

Var router_similarity_loss(const Tensor& mask, const Var& probs) {
  return weighted_correlation(mask, probs, false, "router_similarity_loss");
}

Var router_similarity_diagonal(const Tensor& mask, const Var& probs) {
  return weighted_correlation(mask, probs, true, "router_similarity_diagonal");
}

Var per_layer_reg_loss(std::span<const Var> y_hats, const Var& y) {
  if (y_hats.empty()) throw ContractError("per_layer_reg_loss: no layers");
  const Shape& s = y.shape();
  if (s.empty()) throw ShapeError("per_layer_reg_loss: target must have a feature axis");
  const double patches = static_cast<double>(y.value().size() / s.back());
  Var acc;
  for (const Var& y_hat : y_hats) {
    if (y_hat.shape() != s) {
      throw ShapeError(fmt::format("per_layer_reg_loss: prediction {} vs target {}", shape_str(y_hat.shape()),
                                   shape_str(s)));
    }
    const Var layer = sum(square(sub(y_hat, y)));
    acc = acc.valid() ? add(acc, layer) : layer;
  }
  return scale(acc, 1.0 / (patches * static_cast<double>(y_hats.size())));
}

Var diffusion_loss(const Var& prediction, const Var& target) {
  if (prediction.shape() != target.shape()) {
    throw ShapeError(fmt::format("diffusion_loss: prediction {} vs target {}", shape_str(prediction.shape()),
                                 shape_str(target.shape())));
  }
  return mean(square(sub(prediction, target)));
}

void validate_weights(const LossWeights& w) {
  if (w.w_plr < 0.0 || w.w_sim < 0.0 || w.w_blc < 0.0) {
    throw ConfigError(fmt::format("loss weights must be >= 0 (plr={}, sim={}, blc={})", w.w_plr, w.w_sim, w.w_blc));
  }
}

LossBreakdown total_loss(const LossParts& parts, const LossWeights& weights) {
  validate_weights(weights);
  if (!parts.diffusion.valid()) throw ContractError("total_loss: diffusion term missing");
  LossBreakdown out;
  out.total = parts.diffusion;
  out.diffusion = parts.diffusion.value().item();
  auto fold = [&](const Var& term, double weight, double& slot) {
    if (!term.valid()) return;
    slot = term.value().item();
    if (weight != 0.0) out.total = add(out.total, scale(term, weight));
  };
  fold(parts.plr, weights.w_plr, out.plr);
  fold(parts.sim, weights.w_sim, out.sim);
  fold(parts.blc, weights.w_blc, out.blc);
  out.total_value = out.total.value().item();
  return out;
}

}  // namespace moerace
