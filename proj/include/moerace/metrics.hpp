// SPDX-License-Identifier: Apache-2.0
//
// Routing observables. Masks are any tensor whose last axis is the expert
// axis; every leading position is one token.
#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "moerace/tensor.hpp"

namespace moerace {

// Sum of selected scores; scores and mask share a shape.
double routing_objective(const Tensor& scores, const Tensor& mask);

std::vector<double> expert_loads(const Tensor& mask);

// (max_i load_i - kT/E) / (kT/E). Throws ContractError on zero expected load.
double max_violation(const Tensor& mask, std::size_t k);

// Pair (i<j) flattened row-major over the upper triangle.
std::size_t pair_index(std::size_t i, std::size_t j, std::size_t experts);

struct PairHistogram {
  std::size_t experts = 0;
  std::vector<double> counts;  // length E(E-1)/2
  double total() const;
};
PairHistogram pair_histogram(const Tensor& mask);

struct CombinationUsage {
  double ratio = 0.0;
  std::size_t bins_used = 0;
  bool no_pairs = false;  // no token activated two or more experts
};
// Bins sorted by count, normalized; counts bins whose cumulative mass
// (including their own) stays strictly below `cutoff`, over C(E,2).
CombinationUsage combination_usage(const Tensor& mask, double cutoff = 0.95);

struct AllocationProfile {
  std::vector<double> edges;                // buckets + 1 edges over [0, T]
  std::vector<std::optional<double>> mean;  // mean active experts per token; nullopt = empty bucket
  std::vector<std::size_t> tokens;          // tokens seen per bucket

  // Token-weighted mean over all buckets.
  double overall_mean() const;
  // Population variance of the bucket means over non-empty buckets.
  double across_bucket_variance() const;
};

// mask (B, ..., E), one timestep per sample in [0, horizon].
AllocationProfile allocation_profile(const Tensor& mask, std::span<const std::size_t> timesteps, std::size_t horizon,
                                     std::size_t buckets = 50);

// Merges profiles with identical edges, weighting by token count.
AllocationProfile merge_profiles(std::span<const AllocationProfile> parts);

}  // namespace moerace
