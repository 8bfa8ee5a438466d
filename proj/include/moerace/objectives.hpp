// SPDX-License-Identifier: Apache-2.0
//
// Training losses. Auxiliary routing losses take the routing mask M (T x E,
// detached) and softmax probabilities P (T x E) derived from the router
// logits; only P carries gradient.
#pragma once

#include <cstddef>
#include <span>

#include "moerace/autodiff.hpp"
#include "moerace/tensor.hpp"

namespace moerace {

// softmax over experts of (T, E) logits.
Var router_probabilities(const Var& logits);

// sum_i f_i * P_i, f_i = E/(k T) * count_i, P_i = mean_t p(i, t).
// k is the expected per-token activation, so k*T is the expected total.
Var balance_loss(const Tensor& mask, const Var& probs, std::size_t k);

struct CorrelationMatrices {
  Tensor m;  // M^T M, (E, E)
  Tensor p;  // P^T P, (E, E)
};
CorrelationMatrices correlation_matrices(const Tensor& mask, const Tensor& probs);

struct SimilarityWeights {
  Tensor w;  // (E, E)
  bool diagonal_empty = false;
  bool off_diagonal_empty = false;
};
// Diagonal and off-diagonal blocks of M' normalized separately to mean 1.
// A block with zero total mass yields zeros and sets its flag.
SimilarityWeights similarity_weights(const Tensor& m_corr);

// (1/T) sum_ij W_ij (P^T P)_ij.
Var router_similarity_loss(const Tensor& mask, const Var& probs);
// Diagonal terms only: (1/T) sum_i W_ii (P^T P)_ii.
Var router_similarity_diagonal(const Tensor& mask, const Var& probs);

// Mean over layers of (1/N) sum_n ||y_n - y_hat_n||^2, where n runs over
// the leading (patch) positions and the norm over the last axis.
Var per_layer_reg_loss(std::span<const Var> y_hats, const Var& y);

// Mean squared error over all elements.
Var diffusion_loss(const Var& prediction, const Var& target);

struct LossWeights {
  double w_plr = 1e-2;
  double w_sim = 1e-4;
  double w_blc = 0.0;
};
void validate_weights(const LossWeights& w);  // throws ConfigError on negative weights

struct LossParts {
  Var diffusion;
  Var plr;  // unset parts contribute zero
  Var sim;
  Var blc;
};

struct LossBreakdown {
  Var total;
  double diffusion = 0.0;
  double plr = 0.0;
  double sim = 0.0;
  double blc = 0.0;
  double total_value = 0.0;
};

LossBreakdown total_loss(const LossParts& parts, const LossWeights& weights);

}  // namespace moerace
