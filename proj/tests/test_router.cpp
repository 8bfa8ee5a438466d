// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include <gtest/gtest.h>

#include "moerace/errors.hpp"
#include "moerace/router.hpp"

using namespace moerace;

namespace {

Tensor randn(Shape s, std::uint64_t seed) {
  Rng rng(seed);
  return Tensor::normal(std::move(s), 0.0, 1.0, rng);
}

// Reference selection: stable sort of column indices by descending value.
std::vector<double> sort_oracle_row(const std::vector<double>& row, std::size_t budget) {
  std::vector<std::size_t> idx(row.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return row[a] > row[b]; });
  std::vector<double> mask(row.size(), 0.0);
  for (std::size_t i = 0; i < budget; ++i) mask[idx[i]] = 1.0;
  return mask;
}

double mask_total(const Tensor& m) { return std::accumulate(m.values().begin(), m.values().end(), 0.0); }

}  // namespace

TEST(Strategy, NamesRoundTrip) {
  for (Strategy s : kAllStrategies) EXPECT_EQ(parse_strategy(to_string(s)), s);
  for (Gating g : {Gating::Softmax, Gating::Sigmoid, Gating::Identity}) EXPECT_EQ(parse_gating(to_string(g)), g);
  EXPECT_THROW(parse_strategy("hash"), ConfigError);
  EXPECT_THROW(parse_gating("relu"), ConfigError);
}

TEST(Strategy, AxesPartitionAndMatchTable) {
  const ScoreShape shape{2, 3, 4};
  struct Row {
    Strategy s;
    std::size_t rows, pool;
  };
  const std::vector<Row> table = {
      {Strategy::TokenChoice, 6, 4}, {Strategy::ExpertChoice, 8, 3}, {Strategy::BLChoice, 4, 6},
      {Strategy::BEChoice, 3, 8},    {Strategy::LEChoice, 2, 12},    {Strategy::ExpertRace, 1, 24}};
  for (const Row& r : table) {
    const StrategyAxes axes = strategy_axes(r.s);
    std::vector<Axis> all = axes.rows;
    all.insert(all.end(), axes.pool.begin(), axes.pool.end());
    std::sort(all.begin(), all.end());
    EXPECT_EQ(all, (std::vector<Axis>{Axis::Batch, Axis::Token, Axis::Expert})) << to_string(r.s);
    const SelectionLayout layout = selection_layout(r.s, shape);
    EXPECT_EQ(layout.rows, r.rows) << to_string(r.s);
    EXPECT_EQ(layout.cols, r.pool) << to_string(r.s);
  }
}

TEST(EffectiveK, ValuesFromStrategyTable) {
  EXPECT_EQ(effective_k(Strategy::TokenChoice, {4, 16, 8}, 2), 2u);
  EXPECT_EQ(effective_k(Strategy::ExpertRace, {2, 4, 8}, 2), 16u);
  EXPECT_EQ(effective_k(Strategy::ExpertChoice, {1, 16, 8}, 2), 4u);
  EXPECT_EQ(effective_k(Strategy::BLChoice, {2, 4, 8}, 2), 2u);
  EXPECT_EQ(effective_k(Strategy::BEChoice, {2, 4, 8}, 2), 4u);
  EXPECT_EQ(effective_k(Strategy::LEChoice, {2, 4, 8}, 2), 8u);
}

TEST(EffectiveK, NonIntegralBudgetNamesConstraint) {
  try {
    effective_k(Strategy::ExpertChoice, {2, 3, 4}, 1);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("divide"), std::string::npos) << e.what();
  }
  EXPECT_THROW(effective_k(Strategy::TokenChoice, {2, 3, 4}, 5), ConfigError);
  EXPECT_THROW(effective_k(Strategy::TokenChoice, {2, 3, 4}, 0), ConfigError);
}

TEST(EffectiveK, ValidStrategiesListsIntegralOnes) {
  const auto valid = valid_strategies({2, 3, 4}, 1);
  EXPECT_EQ(valid, (std::vector<Strategy>{Strategy::TokenChoice, Strategy::BEChoice, Strategy::LEChoice,
                                          Strategy::ExpertRace}));
}

TEST(ReshapeScores, ExpertRaceIsOneRow) {
  const Tensor s = randn({2, 3, 4}, 1);
  const ReshapedScores r = reshape_scores(s, Strategy::ExpertRace);
  EXPECT_EQ(r.grid.shape(), (Shape{1, 24}));
  EXPECT_TRUE(std::equal(s.values().begin(), s.values().end(), r.grid.values().begin()));
}

TEST(ReshapeScores, TokenChoiceRowsAreTokens) {
  const Tensor s = randn({2, 3, 4}, 2);
  const ReshapedScores r = reshape_scores(s, Strategy::TokenChoice);
  EXPECT_EQ(r.grid.shape(), (Shape{6, 4}));
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t l = 0; l < 3; ++l) {
      for (std::size_t e = 0; e < 4; ++e) EXPECT_EQ(r.grid.at({b * 3 + l, e}), s.at({b, l, e}));
    }
  }
}

TEST(ReshapeScores, ExpertChoiceRowsAreSequences) {
  const Tensor s = randn({2, 3, 4}, 3);
  const ReshapedScores r = reshape_scores(s, Strategy::ExpertChoice);
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t e = 0; e < 4; ++e) {
      for (std::size_t l = 0; l < 3; ++l) EXPECT_EQ(r.grid.at({b * 4 + e, l}), s.at({b, l, e}));
    }
  }
}

TEST(ReshapeScores, RoundTripForEveryStrategy) {
  const Tensor s = randn({2, 3, 4}, 4);
  for (Strategy st : kAllStrategies) {
    const ReshapedScores r = reshape_scores(s, st);
    EXPECT_TRUE(bit_equal(r.layout.scatter(r.layout.gather(s), ScoreShape::of(s)), s)) << to_string(st);
    std::vector<std::size_t> src = r.layout.source;
    std::sort(src.begin(), src.end());
    for (std::size_t i = 0; i < src.size(); ++i) EXPECT_EQ(src[i], i);
  }
}

TEST(TopK, HandExample) {
  const Tensor m = topk_mask(Tensor({1, 4}, {5, 1, 3, 2}), 2);
  EXPECT_EQ(std::vector<double>(m.values().begin(), m.values().end()), (std::vector<double>{1, 0, 1, 0}));
}

TEST(TopK, TiesGoToLowestIndex) {
  const Tensor m = topk_mask(Tensor({1, 5}, {2, 2, 2, 2, 2}), 2);
  EXPECT_EQ(std::vector<double>(m.values().begin(), m.values().end()), (std::vector<double>{1, 1, 0, 0, 0}));
}

TEST(TopK, MatchesFullSortOracle) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Tensor grid = randn({4, 7}, seed);
    if (seed % 2 == 0) {
      for (double& v : grid.values()) v = std::round(v);  // force ties
    }
    const Tensor m = topk_mask(grid, 3);
    for (std::size_t r = 0; r < 4; ++r) {
      std::vector<double> row(grid.data() + r * 7, grid.data() + (r + 1) * 7);
      const std::vector<double> expected = sort_oracle_row(row, 3);
      for (std::size_t c = 0; c < 7; ++c) EXPECT_EQ(m[r * 7 + c], expected[c]) << "seed " << seed;
    }
  }
}

TEST(TopK, BudgetAboveRowIsConfigError) {
  EXPECT_THROW(topk_mask(Tensor({2, 3}), 4), ConfigError);
}

TEST(TopK, NonFiniteScoresAreNumericError) {
  Tensor g({1, 3});
  g[1] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(topk_mask(g, 1), NumericError);
}

TEST(KthValue, HandExamplesAndOracle) {
  EXPECT_EQ(kth_value_per_row(Tensor({1, 4}, {5, 1, 3, 2}), 2)[0], 3.0);
  EXPECT_EQ(kth_value_per_row(Tensor::full({1, 6}, 1.5), 4)[0], 1.5);
  const Tensor grid = randn({5, 9}, 8);
  const std::vector<double> kth = kth_value_per_row(grid, 4);
  for (std::size_t r = 0; r < 5; ++r) {
    std::vector<double> row(grid.data() + r * 9, grid.data() + (r + 1) * 9);
    std::sort(row.begin(), row.end(), std::greater<>());
    EXPECT_EQ(kth[r], row[3]);
  }
}

TEST(Gating, IdentitySigmoidSoftmax) {
  const Tensor s = randn({2, 3, 4}, 5);
  EXPECT_TRUE(bit_equal(apply_gating(s, Gating::Identity), s));
  EXPECT_EQ(apply_gating(Tensor({1}), Gating::Sigmoid)[0], 0.5);
  const Tensor p = apply_gating(s, Gating::Softmax);
  for (std::size_t t = 0; t < 6; ++t) {
    double sum = 0.0;
    for (std::size_t e = 0; e < 4; ++e) sum += p[t * 4 + e];
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }
}

TEST(Gating, MonotoneGatesPreserveGlobalOrder) {
  const Tensor s = randn({2, 3, 4}, 6);
  auto order = [](const Tensor& t) {
    std::vector<std::size_t> idx(t.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return t[a] < t[b]; });
    return idx;
  };
  EXPECT_EQ(order(apply_gating(s, Gating::Identity)), order(s));
  EXPECT_EQ(order(apply_gating(s, Gating::Sigmoid)), order(s));
}

TEST(Gating, SoftmaxBreaksCrossTokenOrder) {
  // Token 0 has a large but crowded logit, token 1 a smaller isolated one.
  const Tensor s({1, 2, 2}, {3.0, 3.0, 1.0, -2.0});
  const Tensor p = apply_gating(s, Gating::Softmax);
  EXPECT_GT(s[0], s[2]);
  EXPECT_LT(p[0], p[2]);
}

TEST(Ema, GeometricSeries) {
  ThresholdState st{0.0, 0.9};
  const std::vector<double> kth = {2.0, 2.0};
  for (int n = 1; n <= 25; ++n) {
    st = ema_update(st, kth);
    EXPECT_NEAR(*st.tau, 2.0 * (1.0 - std::pow(0.9, n)), 1e-12);
  }
  EXPECT_EQ(st.momentum, 0.9);
}

TEST(Ema, ZeroMomentumTracksBatchMean) {
  const ThresholdState st = ema_update({5.0, 0.0}, std::vector<double>{1.0, 2.0, 6.0});
  EXPECT_DOUBLE_EQ(*st.tau, 3.0);
}

TEST(Ema, WarmStartFromFirstBatch) {
  const ThresholdState st = ema_update({}, std::vector<double>{1.0, 3.0});
  EXPECT_DOUBLE_EQ(*st.tau, 2.0);
}

TEST(Route, ExpertRaceHandExample) {
  ThresholdState state;
  const RouteResult r = route(Tensor({1, 2, 2}, {4, 1, 2, 3}), {Strategy::ExpertRace, Gating::Identity, 1},
                              Mode::Train, state);
  EXPECT_EQ(std::vector<double>(r.mask.values().begin(), r.mask.values().end()),
            (std::vector<double>{1, 0, 0, 1}));
  EXPECT_EQ(*state.tau, 3.0);
  EXPECT_EQ(r.gates[0], 4.0);
  EXPECT_EQ(r.gates[3], 3.0);
  EXPECT_EQ(r.gates[1], 0.0);
}

TEST(Route, InferThresholdExtremes) {
  const Tensor s = randn({2, 3, 4}, 9);
  const RouteConfig cfg{Strategy::ExpertRace, Gating::Identity, 2};
  ThresholdState low{-std::numeric_limits<double>::infinity(), 0.99};
  ThresholdState high{std::numeric_limits<double>::infinity(), 0.99};
  EXPECT_EQ(mask_total(route(s, cfg, Mode::Infer, low).mask), 24.0);
  EXPECT_EQ(mask_total(route(s, cfg, Mode::Infer, high).mask), 0.0);
}

TEST(Route, InferWithoutThresholdIsStateError) {
  ThresholdState empty;
  EXPECT_THROW(route(randn({1, 2, 4}, 1), {Strategy::ExpertRace, Gating::Identity, 2}, Mode::Infer, empty),
               StateError);
}

TEST(Route, InferLeavesStateUntouched) {
  ThresholdState st{0.25, 0.99};
  route(randn({2, 2, 4}, 1), {Strategy::BLChoice, Gating::Identity, 2}, Mode::Infer, st);
  EXPECT_EQ(*st.tau, 0.25);
}

TEST(Route, TrainCardinalityForEveryStrategy) {
  const ScoreShape shape{2, 4, 8};
  for (Strategy s : kAllStrategies) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const RouteResult r = route_pure(randn({2, 4, 8}, seed), {s, Gating::Identity, 2});
      const SelectionLayout layout = selection_layout(s, shape);
      EXPECT_EQ(mask_total(r.mask), static_cast<double>(layout.rows * r.budget)) << to_string(s);
    }
  }
}

TEST(Route, TokenChoiceExactPerTokenRaceVaries) {
  const Tensor s = randn({4, 8, 8}, 10);
  const RouteResult tc = route_pure(s, {Strategy::TokenChoice, Gating::Identity, 2});
  const RouteResult race = route_pure(s, {Strategy::ExpertRace, Gating::Identity, 2});
  std::vector<double> counts;
  for (std::size_t t = 0; t < 32; ++t) {
    double a = 0.0, b = 0.0;
    for (std::size_t e = 0; e < 8; ++e) {
      a += tc.mask[t * 8 + e];
      b += race.mask[t * 8 + e];
    }
    EXPECT_EQ(a, 2.0);
    counts.push_back(b);
  }
  const double mean = std::accumulate(counts.begin(), counts.end(), 0.0) / counts.size();
  double var = 0.0;
  for (double c : counts) var += (c - mean) * (c - mean);
  EXPECT_DOUBLE_EQ(mean, 2.0);
  EXPECT_GT(var, 0.0);
}

TEST(Route, ScatterBackIsIdempotent) {
  const Tensor s = randn({2, 4, 4}, 11);
  for (Strategy st : kAllStrategies) {
    const RouteResult r = route_pure(s, {st, Gating::Identity, 2});
    const SelectionLayout layout = selection_layout(st, ScoreShape::of(s));
    const Tensor grid = layout.gather(r.mask);
    EXPECT_TRUE(bit_equal(layout.scatter(grid, ScoreShape::of(s)), r.mask));
    EXPECT_TRUE(bit_equal(topk_mask(layout.gather(s), r.budget), grid));
  }
}

TEST(Route, InferenceIsSampleLocal) {
  const Tensor s = randn({3, 4, 8}, 12);
  Tensor perturbed = s;
  Rng rng(13);
  std::normal_distribution<double> n(0.0, 5.0);
  for (std::size_t i = 32; i < perturbed.size(); ++i) perturbed[i] += n(rng);  // samples 1 and 2
  for (Strategy st : kAllStrategies) {
    ThresholdState a{0.3, 0.99}, b{0.3, 0.99};
    const RouteResult ra = route(s, {st, Gating::Identity, 2}, Mode::Infer, a);
    const RouteResult rb = route(perturbed, {st, Gating::Identity, 2}, Mode::Infer, b);
    for (std::size_t i = 0; i < 32; ++i) EXPECT_EQ(ra.mask[i], rb.mask[i]) << to_string(st);
  }
}

TEST(Route, SelectionRanksGatedScores) {
  // Softmax gating can reorder logits across tokens; selection follows the gates.
  const Tensor s({1, 2, 2}, {3.0, 3.0, 1.0, -2.0});
  const RouteResult r = route_pure(s, {Strategy::ExpertRace, Gating::Softmax, 1});
  EXPECT_EQ(r.mask[2], 1.0);
}
