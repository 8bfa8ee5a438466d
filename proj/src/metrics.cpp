// SPDX-License-Identifier: Apache-2.0
#include "moerace/metrics.hpp"

#include <algorithm>
#include <functional>
#include <numeric>

#include <fmt/format.h>

#include "moerace/errors.hpp"

namespace moerace {
namespace {

std::size_t expert_axis(const Tensor& mask, const char* what) {
  if (mask.rank() == 0 || mask.shape().back() == 0) {
    throw ShapeError(fmt::format("{}: mask {} needs a trailing expert axis", what, shape_str(mask.shape())));
  }
  return mask.shape().back();
}

}  // namespace

double routing_objective(const Tensor& scores, const Tensor& mask) {
  if (scores.shape() != mask.shape()) {
    throw ShapeError(fmt::format("routing_objective: scores {} vs mask {}", shape_str(scores.shape()),
                                 shape_str(mask.shape())));
  }
  double total = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (mask[i] != 0.0) total += scores[i];
  }
  return total;
}

std::vector<double> expert_loads(const Tensor& mask) {
  const std::size_t e = expert_axis(mask, "expert_loads");
  std::vector<double> loads(e, 0.0);
  for (std::size_t i = 0; i < mask.size(); ++i) loads[i % e] += mask[i];
  return loads;
}

double max_violation(const Tensor& mask, std::size_t k) {
  const std::size_t e = expert_axis(mask, "max_violation");
  const double expected = static_cast<double>(k) * static_cast<double>(mask.size() / e) / static_cast<double>(e);
  if (expected <= 0.0) throw ContractError("max_violation: expected load is zero (k = 0 or no tokens)");
  const std::vector<double> loads = expert_loads(mask);
  return (*std::max_element(loads.begin(), loads.end()) - expected) / expected;
}

std::size_t pair_index(std::size_t i, std::size_t j, std::size_t experts) {
  if (i >= j || j >= experts) throw ContractError(fmt::format("pair_index: need i < j < E, got ({}, {})", i, j));
  return i * (2 * experts - i - 1) / 2 + (j - i - 1);
}

double PairHistogram::total() const { return std::accumulate(counts.begin(), counts.end(), 0.0); }

PairHistogram pair_histogram(const Tensor& mask) {
  const std::size_t e = expert_axis(mask, "pair_histogram");
  PairHistogram h{e, std::vector<double>(e * (e - 1) / 2, 0.0)};
  std::vector<std::size_t> active;
  for (std::size_t base = 0; base < mask.size(); base += e) {
    active.clear();
    for (std::size_t i = 0; i < e; ++i) {
      if (mask[base + i] != 0.0) active.push_back(i);
    }
    for (std::size_t a = 0; a < active.size(); ++a) {
      for (std::size_t b = a + 1; b < active.size(); ++b) h.counts[pair_index(active[a], active[b], e)] += 1.0;
    }
  }
  return h;
}

CombinationUsage combination_usage(const Tensor& mask, double cutoff) {
  const std::size_t e = expert_axis(mask, "combination_usage");
  if (e < 2) return {0.0, 0, true};
  PairHistogram h = pair_histogram(mask);
  const double total = h.total();
  if (total == 0.0) return {0.0, 0, true};
  std::sort(h.counts.begin(), h.counts.end(), std::greater<>());
  CombinationUsage out;
  double cumulative = 0.0;
  for (double c : h.counts) {
    cumulative += c / total;
    if (cumulative >= cutoff) break;
    ++out.bins_used;
  }
  out.ratio = static_cast<double>(out.bins_used) / static_cast<double>(h.counts.size());
  return out;
}

double AllocationProfile::overall_mean() const {
  double weighted = 0.0;
  std::size_t n = 0;
  for (std::size_t b = 0; b < mean.size(); ++b) {
    if (!mean[b]) continue;
    weighted += *mean[b] * static_cast<double>(tokens[b]);
    n += tokens[b];
  }
  return n == 0 ? 0.0 : weighted / static_cast<double>(n);
}

double AllocationProfile::across_bucket_variance() const {
  std::vector<double> present;
  for (const auto& m : mean) {
    if (m) present.push_back(*m);
  }
  if (present.empty()) return 0.0;
  const double mu = std::accumulate(present.begin(), present.end(), 0.0) / static_cast<double>(present.size());
  double var = 0.0;
  for (double v : present) var += (v - mu) * (v - mu);
  return var / static_cast<double>(present.size());
}

AllocationProfile allocation_profile(const Tensor& mask, std::span<const std::size_t> timesteps, std::size_t horizon,
                                     std::size_t buckets) {
  const std::size_t e = expert_axis(mask, "allocation_profile");
  if (buckets == 0 || horizon == 0) throw ConfigError("allocation_profile: buckets and horizon must be positive");
  if (mask.rank() < 2 || mask.dim(0) != timesteps.size()) {
    throw ShapeError(fmt::format("allocation_profile: mask {} needs one timestep per sample, got {}",
                                 shape_str(mask.shape()), timesteps.size()));
  }
  AllocationProfile p;
  p.edges.resize(buckets + 1);
  for (std::size_t b = 0; b <= buckets; ++b) {
    p.edges[b] = static_cast<double>(horizon) * static_cast<double>(b) / static_cast<double>(buckets);
  }
  std::vector<double> active(buckets, 0.0);
  p.tokens.assign(buckets, 0);
  const std::size_t per_sample = mask.size() / timesteps.size();
  for (std::size_t s = 0; s < timesteps.size(); ++s) {
    const std::size_t t = timesteps[s];
    if (t > horizon) throw ContractError(fmt::format("allocation_profile: timestep {} outside [0, {}]", t, horizon));
    const std::size_t b = std::min(buckets - 1, t * buckets / horizon);
    const double* row = mask.data() + s * per_sample;
    active[b] += std::accumulate(row, row + per_sample, 0.0);
    p.tokens[b] += per_sample / e;
  }
  p.mean.resize(buckets);
  for (std::size_t b = 0; b < buckets; ++b) {
    if (p.tokens[b] > 0) p.mean[b] = active[b] / static_cast<double>(p.tokens[b]);
  }
  return p;
}

AllocationProfile merge_profiles(std::span<const AllocationProfile> parts) {
  if (parts.empty()) return {};
  AllocationProfile out;
  out.edges = parts.front().edges;
  const std::size_t buckets = out.edges.size() - 1;
  std::vector<double> active(buckets, 0.0);
  out.tokens.assign(buckets, 0);
  for (const AllocationProfile& p : parts) {
    if (p.edges != out.edges) throw ContractError("merge_profiles: bucket edges differ");
    for (std::size_t b = 0; b < buckets; ++b) {
      if (!p.mean[b]) continue;
      active[b] += *p.mean[b] * static_cast<double>(p.tokens[b]);
      out.tokens[b] += p.tokens[b];
    }
  }
  out.mean.resize(buckets);
  for (std::size_t b = 0; b < buckets; ++b) {
    if (out.tokens[b] > 0) out.mean[b] = active[b] / static_cast<double>(out.tokens[b]);
  }
  return out;
}

}  // namespace moerace
