// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "moerace/errors.hpp"
#include "moerace/metrics.hpp"
#include "moerace/router.hpp"
#include "oracles.hpp"

using namespace moerace;

namespace {

Tensor random_scores(Shape s, std::uint64_t seed) {
  Rng rng(seed);
  return Tensor::normal(std::move(s), 0.0, 1.0, rng);
}

Tensor random_mask(std::size_t tokens, std::size_t experts, double p, std::uint64_t seed) {
  Rng rng(seed);
  std::bernoulli_distribution on(p);
  Tensor m({tokens, experts});
  for (double& v : m.values()) v = on(rng) ? 1.0 : 0.0;
  return m;
}

oracle::Matrix to_matrix(const Tensor& t) {
  const std::size_t e = t.shape().back();
  oracle::Matrix m(t.size() / e, std::vector<double>(e));
  for (std::size_t i = 0; i < t.size(); ++i) m[i / e][i % e] = t[i];
  return m;
}

}  // namespace

TEST(RoutingObjective, SingleLargestElement) {
  const Tensor s = random_scores({1, 3, 4}, 1);
  const Tensor mask = select_topk(s, Strategy::ExpertRace, 1).mask;
  // Race with B*L*k = 3 picks the top three; with one-row, one-pick compare against max directly.
  Tensor single({1, 3, 4});
  const auto it = std::max_element(s.values().begin(), s.values().end());
  single[static_cast<std::size_t>(it - s.values().begin())] = 1.0;
  EXPECT_EQ(routing_objective(s, single), *it);
  EXPECT_GE(routing_objective(s, mask), *it);
}

TEST(RoutingObjective, RaceDominatesTokenChoiceBySorting) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const Tensor s = random_scores({2, 3, 4}, seed);
    std::vector<double> all(s.values().begin(), s.values().end());
    std::sort(all.begin(), all.end(), std::greater<>());
    const double race = std::accumulate(all.begin(), all.begin() + 6, 0.0);
    double tc = 0.0;
    for (std::size_t tok = 0; tok < 6; ++tok) {
      tc += *std::max_element(s.values().begin() + tok * 4, s.values().begin() + tok * 4 + 4);
    }
    EXPECT_NEAR(routing_objective(s, select_topk(s, Strategy::ExpertRace, 1).mask), race, 1e-12);
    EXPECT_NEAR(routing_objective(s, select_topk(s, Strategy::TokenChoice, 1).mask), tc, 1e-12);
    EXPECT_GE(race, tc - 1e-12);
  }
}

TEST(RoutingObjective, TopkIsBestRowConstrainedSelection) {
  const ScoreShape shape{2, 2, 4};
  for (Strategy st : kAllStrategies) {
    const std::size_t k = 2;
    const SelectionLayout layout = selection_layout(st, shape);
    if (layout.cols > 8) continue;
    const std::size_t budget = effective_k(st, shape, k);
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const Tensor s = random_scores({2, 2, 4}, 50 + seed);
      double best = 0.0;
      for (std::size_t r = 0; r < layout.rows; ++r) {
        std::vector<double> row;
        for (std::size_t c = 0; c < layout.cols; ++c) row.push_back(s[layout.source[r * layout.cols + c]]);
        best += oracle::best_subset_sum(row, budget);
      }
      EXPECT_NEAR(routing_objective(s, select_topk(s, st, k).mask), best, 1e-12) << to_string(st);
    }
  }
}

TEST(MaxViolation, UniformAndConcentrated) {
  Tensor uniform({8, 4});
  for (std::size_t t = 0; t < 8; ++t) uniform[t * 4 + t % 4] = 1.0;
  EXPECT_EQ(max_violation(uniform, 1), 0.0);

  Tensor all_one({8, 4});
  for (std::size_t t = 0; t < 8; ++t) all_one[t * 4] = 1.0;
  EXPECT_NEAR(max_violation(all_one, 1), 3.0, 1e-15);
  EXPECT_THROW(max_violation(all_one, 0), ContractError);
}

TEST(MaxViolation, MatchesNaiveLoop) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Tensor m = random_mask(10, 5, 0.4, seed);
    const oracle::Matrix mm = to_matrix(m);
    double worst = 0.0;
    for (std::size_t i = 0; i < 5; ++i) {
      double load = 0.0;
      for (const auto& row : mm) load += row[i];
      worst = std::max(worst, load);
    }
    const double expected = 2.0 * 10.0 / 5.0;
    EXPECT_NEAR(max_violation(m, 2), (worst - expected) / expected, 1e-12);
  }
}

TEST(MaxViolation, UnconstrainedRaceCanExceedOne) {
  // Adversarial scores: expert 0 dominates every token, race hands it all picks.
  Tensor s({1, 4, 4});
  for (std::size_t t = 0; t < 4; ++t) {
    s[t * 4] = 10.0;
    s[t * 4 + 1] = 9.0;
  }
  const Tensor race = select_topk(s, Strategy::ExpertRace, 1).mask;
  EXPECT_GT(max_violation(race, 1), 1.0);
  const Tensor ec = select_topk(s, Strategy::ExpertChoice, 1).mask;
  EXPECT_EQ(max_violation(ec, 1), 0.0);
}

TEST(PairIndex, UpperTriangleRowMajor) {
  std::size_t expected = 0;
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t j = i + 1; j < 5; ++j) EXPECT_EQ(pair_index(i, j, 5), expected++);
  }
  EXPECT_THROW(pair_index(2, 2, 5), ContractError);
}

TEST(PairHistogram, TotalIsSumOfChooseTwo) {
  const Tensor m = random_mask(20, 6, 0.5, 3);
  double expected = 0.0;
  for (std::size_t t = 0; t < 20; ++t) {
    double a = 0.0;
    for (std::size_t e = 0; e < 6; ++e) a += m[t * 6 + e];
    expected += a * (a - 1) / 2;
  }
  EXPECT_EQ(pair_histogram(m).total(), expected);
  EXPECT_EQ(pair_histogram(m).counts, oracle::pair_counts(to_matrix(m)));
}

TEST(CombinationUsage, UniformPairsWithFourExperts) {
  Tensor m({6, 4});
  std::size_t t = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = i + 1; j < 4; ++j, ++t) {
      m[t * 4 + i] = 1.0;
      m[t * 4 + j] = 1.0;
    }
  }
  const CombinationUsage c = combination_usage(m);
  EXPECT_DOUBLE_EQ(c.ratio, 5.0 / 6.0);
  EXPECT_EQ(c.bins_used, 5u);
  EXPECT_FALSE(c.no_pairs);
}

TEST(CombinationUsage, SinglePairIsZero) {
  Tensor m({3, 4});
  for (std::size_t t = 0; t < 3; ++t) {
    m[t * 4 + 1] = 1.0;
    m[t * 4 + 3] = 1.0;
  }
  EXPECT_EQ(combination_usage(m).ratio, 0.0);
  EXPECT_FALSE(combination_usage(m).no_pairs);
}

TEST(CombinationUsage, NoPairsIsFlagged) {
  Tensor m({3, 4});
  for (std::size_t t = 0; t < 3; ++t) m[t * 4 + t] = 1.0;
  const CombinationUsage c = combination_usage(m);
  EXPECT_EQ(c.ratio, 0.0);
  EXPECT_TRUE(c.no_pairs);
  EXPECT_TRUE(combination_usage(Tensor({3, 1}, {1, 1, 1})).no_pairs);
}

TEST(CombinationUsage, MatchesPairCountingOracle) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const Tensor m = random_mask(30, 6, 0.35, 1000 + seed);
    EXPECT_EQ(combination_usage(m).ratio, oracle::comb_usage(to_matrix(m))) << seed;
  }
}

TEST(CombinationUsage, RelabelingInvariant) {
  const std::vector<std::size_t> perm = {3, 0, 5, 1, 4, 2};
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Tensor m = random_mask(25, 6, 0.4, 2000 + seed);
    Tensor p({25, 6});
    for (std::size_t t = 0; t < 25; ++t) {
      for (std::size_t e = 0; e < 6; ++e) p[t * 6 + perm[e]] = m[t * 6 + e];
    }
    EXPECT_EQ(combination_usage(m).ratio, combination_usage(p).ratio);
  }
}

TEST(AllocationProfile, TokenChoiceIsConstantK) {
  const std::size_t b = 40;
  const Tensor s = random_scores({b, 4, 8}, 7);
  const Tensor mask = select_topk(s, Strategy::TokenChoice, 2).mask;
  std::vector<std::size_t> ts(b);
  for (std::size_t i = 0; i < b; ++i) ts[i] = (i * 37) % 101;
  const AllocationProfile p = allocation_profile(mask, ts, 100, 10);
  for (const auto& m : p.mean) {
    if (m) EXPECT_EQ(*m, 2.0);
  }
  EXPECT_EQ(p.across_bucket_variance(), 0.0);
}

TEST(AllocationProfile, EmptyBucketsAreMissing) {
  const Tensor mask = Tensor::full({2, 3, 4}, 1.0);
  const std::vector<std::size_t> ts = {0, 100};
  const AllocationProfile p = allocation_profile(mask, ts, 100, 5);
  EXPECT_EQ(p.edges.size(), 6u);
  EXPECT_TRUE(p.mean[0].has_value());
  EXPECT_FALSE(p.mean[1].has_value());
  EXPECT_TRUE(p.mean[4].has_value());  // t = T lands in the last bucket
  EXPECT_EQ(*p.mean[0], 4.0);
}

TEST(AllocationProfile, TwoClusterScoresUnderThreshold) {
  // Early timesteps get scores around +2, late ones around -2; a threshold
  // at 0 activates everything early and nothing late.
  const std::size_t b = 20;
  Rng rng(11);
  Tensor s({b, 4, 4});
  std::vector<std::size_t> ts(b);
  for (std::size_t i = 0; i < b; ++i) {
    ts[i] = i < b / 2 ? 10 : 90;
    std::normal_distribution<double> n(i < b / 2 ? 2.0 : -2.0, 0.2);
    for (std::size_t j = 0; j < 16; ++j) s[i * 16 + j] = n(rng);
  }
  ThresholdState st{0.0, 0.99};
  const Tensor mask = select_infer(s, Strategy::ExpertRace, 2, st).mask;
  const AllocationProfile p = allocation_profile(mask, ts, 100, 2);
  EXPECT_EQ(*p.mean[0], 4.0);
  EXPECT_EQ(*p.mean[1], 0.0);
}

TEST(AllocationProfile, OverallMeanIsGlobalRate) {
  const Tensor mask = random_mask(60, 5, 0.3, 5).reshaped({12, 5, 5});
  std::vector<std::size_t> ts(12);
  for (std::size_t i = 0; i < 12; ++i) ts[i] = i * 9;
  const AllocationProfile p = allocation_profile(mask, ts, 100, 7);
  double active = 0.0;
  for (double v : mask.values()) active += v;
  EXPECT_NEAR(p.overall_mean(), active / 60.0, 1e-12);
}

TEST(AllocationProfile, MergeWeightsByTokens) {
  const Tensor a = random_mask(12, 4, 0.5, 21).reshaped({4, 3, 4});
  const Tensor b = random_mask(12, 4, 0.5, 22).reshaped({4, 3, 4});
  const std::vector<std::size_t> ta = {1, 30, 60, 99}, tb = {5, 35, 65, 95};
  const std::vector<AllocationProfile> parts = {allocation_profile(a, ta, 100, 4), allocation_profile(b, tb, 100, 4)};
  Tensor both({8, 3, 4});
  std::copy(a.values().begin(), a.values().end(), both.values().begin());
  std::copy(b.values().begin(), b.values().end(), both.values().begin() + 48);
  const std::vector<std::size_t> tboth = {1, 30, 60, 99, 5, 35, 65, 95};
  const AllocationProfile merged = merge_profiles(parts);
  const AllocationProfile direct = allocation_profile(both, tboth, 100, 4);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(*merged.mean[i], *direct.mean[i], 1e-12);
}
