// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "moerace/errors.hpp"
#include "moerace/objectives.hpp"
#include "moerace/router.hpp"
#include "oracles.hpp"

using namespace moerace;

namespace {

oracle::Matrix to_matrix(const Tensor& t) {
  const std::size_t e = t.shape().back();
  oracle::Matrix m(t.size() / e, std::vector<double>(e));
  for (std::size_t i = 0; i < t.size(); ++i) m[i / e][i % e] = t[i];
  return m;
}

Tensor random_logits(std::size_t tokens, std::size_t experts, std::uint64_t seed) {
  Rng rng(seed);
  return Tensor::normal({tokens, experts}, 0.0, 1.5, rng);
}

// Race mask over (1, T, E) so per-token counts vary; exactly k*T ones.
Tensor race_mask(const Tensor& logits, std::size_t k) {
  const std::size_t t = logits.dim(0), e = logits.dim(1);
  return select_topk(logits.reshaped({1, t, e}), Strategy::ExpertRace, k).mask.reshaped({t, e});
}

Tensor softmax_rows(const Tensor& logits) {
  Tape tape;
  return softmax(tape.constant(logits)).value();
}

double eval_scalar(const std::function<Var(Tape&, const Var&)>& fn, const Tensor& logits) {
  Tape tape;
  return fn(tape, tape.constant(logits)).value().item();
}

}  // namespace

TEST(BalanceLoss, UniformConfigurationGivesOne) {
  // 8 tokens, 4 experts, k=2: every expert chosen 4 times, uniform probabilities.
  Tensor mask({8, 4});
  for (std::size_t t = 0; t < 8; ++t) {
    mask[t * 4 + t % 4] = 1.0;
    mask[t * 4 + (t + 1) % 4] = 1.0;
  }
  Tape tape;
  const Var p = tape.constant(Tensor::full({8, 4}, 0.25));
  EXPECT_NEAR(balance_loss(mask, p, 2).value().item(), 1.0, 1e-15);
}

TEST(BalanceLoss, FullConcentrationGivesE) {
  Tensor mask({6, 5}), probs({6, 5});
  for (std::size_t t = 0; t < 6; ++t) {
    mask[t * 5] = 1.0;
    probs[t * 5] = 1.0;
  }
  Tape tape;
  EXPECT_NEAR(balance_loss(mask, tape.constant(probs), 1).value().item(), 5.0, 1e-15);
}

TEST(BalanceLoss, ConcentrationIncreasesLoss) {
  // Uniform mask, probabilities shifted towards expert 0 in steps.
  Tensor mask({4, 4});
  for (std::size_t t = 0; t < 4; ++t) mask[t * 4 + t] = 1.0;
  mask[0 * 4 + 1] = 1.0;  // expert 1 now carries extra load
  double previous = -1.0;
  for (double shift : {0.0, 0.05, 0.1, 0.15}) {
    Tensor probs = Tensor::full({4, 4}, 0.25);
    for (std::size_t t = 0; t < 4; ++t) {
      probs[t * 4 + 1] += shift;
      probs[t * 4 + 3] -= shift;
    }
    Tape tape;
    const double v = balance_loss(mask, tape.constant(probs), 1).value().item();
    EXPECT_GT(v, previous);
    previous = v;
  }
}

TEST(BalanceLoss, MatchesDoubleLoop) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Tensor logits = random_logits(12, 6, seed);
    const Tensor mask = race_mask(logits, 2);
    const Tensor probs = softmax_rows(logits);
    Tape tape;
    const double got = balance_loss(mask, tape.constant(probs), 2).value().item();
    EXPECT_NEAR(got, oracle::balance(to_matrix(mask), to_matrix(probs), 2.0), 1e-12);
  }
}

TEST(CorrelationMatrices, OneExpertPerTokenIsDiagonal) {
  Tensor mask({3, 3});
  for (std::size_t t = 0; t < 3; ++t) mask[t * 3 + t] = 1.0;
  const CorrelationMatrices c = correlation_matrices(mask, Tensor::full({3, 3}, 1.0 / 3));
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(c.m[i * 3 + j], i == j ? 1.0 : 0.0);
  }
}

TEST(CorrelationMatrices, ConstantProbabilitiesGiveTOverESquared) {
  const std::size_t t = 10, e = 4;
  const CorrelationMatrices c = correlation_matrices(Tensor({t, e}), Tensor::full({t, e}, 1.0 / e));
  for (double v : c.p.values()) EXPECT_NEAR(v, static_cast<double>(t) / (e * e), 1e-15);
}

TEST(CorrelationMatrices, MatchesTripleLoop) {
  const Tensor logits = random_logits(9, 5, 3);
  const Tensor mask = race_mask(logits, 2), probs = softmax_rows(logits);
  const CorrelationMatrices c = correlation_matrices(mask, probs);
  const oracle::Matrix m = oracle::gram(to_matrix(mask)), p = oracle::gram(to_matrix(probs));
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t j = 0; j < 5; ++j) {
      EXPECT_NEAR(c.m[i * 5 + j], m[i][j], 1e-12);
      EXPECT_NEAR(c.p[i * 5 + j], p[i][j], 1e-12);
      EXPECT_EQ(c.p[i * 5 + j], c.p[j * 5 + i]);
    }
  }
}

TEST(SimilarityWeights, UniformIsFixedPoint) {
  const SimilarityWeights w = similarity_weights(Tensor::full({4, 4}, 3.0));
  for (double v : w.w.values()) EXPECT_NEAR(v, 1.0, 1e-15);
  EXPECT_FALSE(w.diagonal_empty);
  EXPECT_FALSE(w.off_diagonal_empty);
}

TEST(SimilarityWeights, EmptyOffDiagonalIsFlagged) {
  const SimilarityWeights w = similarity_weights(Tensor({2, 2}, {2, 0, 0, 2}));
  EXPECT_EQ(w.w[0], 1.0);
  EXPECT_EQ(w.w[3], 1.0);
  EXPECT_EQ(w.w[1], 0.0);
  EXPECT_EQ(w.w[2], 0.0);
  EXPECT_TRUE(w.off_diagonal_empty);
  EXPECT_FALSE(w.diagonal_empty);
}

TEST(SimilarityWeights, MatchesNaiveEvaluation) {
  const Tensor logits = random_logits(11, 6, 4);
  const Tensor mask = race_mask(logits, 3);
  const Tensor mc = correlation_matrices(mask, softmax_rows(logits)).m;
  const oracle::Matrix ref = oracle::sim_weights(oracle::gram(to_matrix(mask)));
  const SimilarityWeights w = similarity_weights(mc);
  for (std::size_t i = 0; i < 36; ++i) EXPECT_NEAR(w.w[i], ref[i / 6][i % 6], 1e-12);
}

TEST(SimilarityLoss, ConstantScoresGiveOne) {
  for (auto [t, e] : {std::pair<std::size_t, std::size_t>{8, 4}, {5, 3}, {16, 8}}) {
    const Tensor logits = Tensor::full({t, e}, 0.3);
    // Constant scores tie everywhere; token-choice top-2 picks experts 0 and 1.
    const Tensor mask = select_topk(logits.reshaped({1, t, e}), Strategy::TokenChoice, 2).mask.reshaped({t, e});
    Tape tape;
    const Var p = router_probabilities(tape.constant(logits));
    EXPECT_NEAR(router_similarity_loss(mask, p).value().item(), 1.0, 1e-12);
  }
}

TEST(SimilarityLoss, MatchesNaiveDoubleSum) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Tensor logits = random_logits(10, 5, 100 + seed);
    const Tensor mask = race_mask(logits, 2);
    const Tensor probs = softmax_rows(logits);
    Tape tape;
    const Var p = tape.constant(probs);
    EXPECT_NEAR(router_similarity_loss(mask, p).value().item(),
                oracle::sim_loss(to_matrix(mask), to_matrix(probs)), 1e-12);
  }
}

TEST(SimilarityLoss, DiagonalEqualsGeometricBalance) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Tensor logits = random_logits(12, 4, 200 + seed);
    const Tensor mask = race_mask(logits, 2);
    const Tensor probs = softmax_rows(logits);
    Tape tape;
    const double diag = router_similarity_diagonal(mask, tape.constant(probs)).value().item();
    EXPECT_NEAR(diag, oracle::geometric_balance(to_matrix(mask), to_matrix(probs), 2.0), 1e-12);
  }
}

TEST(SimilarityLoss, TokenDuplicationInvariance) {
  const Tensor logits = random_logits(7, 5, 9);
  const Tensor mask = race_mask(logits, 2);
  Tensor logits2({14, 5}), mask2({14, 5});
  for (std::size_t i = 0; i < 35; ++i) {
    logits2[i] = logits2[i + 35] = logits[i];
    mask2[i] = mask2[i + 35] = mask[i];
  }
  Tape tape;
  const double a = router_similarity_loss(mask, router_probabilities(tape.constant(logits))).value().item();
  const double b = router_similarity_loss(mask2, router_probabilities(tape.constant(logits2))).value().item();
  EXPECT_NEAR(a, b, 1e-12);
}

TEST(SimilarityLoss, NonNegative) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Tensor logits = random_logits(6, 4, 300 + seed);
    Tape tape;
    EXPECT_GE(router_similarity_loss(race_mask(logits, 1), router_probabilities(tape.constant(logits)))
                  .value()
                  .item(),
              0.0);
  }
}

TEST(AuxLosses, GradientsMatchFiniteDifferences) {
  const Tensor logits = random_logits(8, 4, 17);
  const Tensor mask = race_mask(logits, 2);
  const std::vector<std::function<Var(Tape&, const Var&)>> losses = {
      [&](Tape&, const Var& l) { return balance_loss(mask, router_probabilities(l), 2); },
      [&](Tape&, const Var& l) { return router_similarity_loss(mask, router_probabilities(l)); },
      [&](Tape&, const Var& l) { return router_similarity_diagonal(mask, router_probabilities(l)); },
  };
  for (const auto& fn : losses) {
    const std::vector<Tensor> in = {logits};
    const Evaluation ev = evaluate([&](Tape& tape, std::span<const Var> x) { return fn(tape, x[0]); }, in);
    const Tensor fd = finite_difference_grad([&](const Tensor& l) { return eval_scalar(fn, l); }, logits, 1e-6);
    EXPECT_LT(relative_error(ev.gradients[0], fd), 1e-6);
  }
}

TEST(AuxLosses, MaskCarriesNoGradient) {
  // Only probabilities are differentiated: gradient w.r.t. logits vanishes
  // when every expert has the same mask count and the probabilities are uniform.
  Tensor mask({4, 4});
  for (std::size_t t = 0; t < 4; ++t) mask[t * 4 + t] = 1.0;
  const std::vector<Tensor> in = {Tensor({4, 4})};
  const Evaluation ev =
      evaluate([&](Tape&, std::span<const Var> x) { return balance_loss(mask, router_probabilities(x[0]), 1); }, in);
  for (double g : ev.gradients[0].values()) EXPECT_NEAR(g, 0.0, 1e-15);
}

TEST(AuxLosses, ShapeMismatchThrows) {
  Tape tape;
  EXPECT_THROW(balance_loss(Tensor({3, 4}), tape.constant(Tensor({3, 5})), 1), ShapeError);
  EXPECT_THROW(router_similarity_loss(Tensor({2, 4}), tape.constant(Tensor({3, 4}))), ShapeError);
}

TEST(PerLayerReg, ExactPredictionGivesZero) {
  Rng rng(1);
  const Tensor y = Tensor::normal({2, 3, 4}, 0, 1, rng);
  Tape tape;
  const std::vector<Var> hats = {tape.constant(y), tape.constant(y)};
  EXPECT_EQ(per_layer_reg_loss(hats, tape.constant(y)).value().item(), 0.0);
}

TEST(PerLayerReg, UnitOffsetGivesTargetDim) {
  Rng rng(2);
  const Tensor y = Tensor::normal({2, 3, 5}, 0, 1, rng);
  Tensor shifted = y;
  for (double& v : shifted.values()) v += 1.0;
  Tape tape;
  const std::vector<Var> hats = {tape.constant(shifted)};
  EXPECT_NEAR(per_layer_reg_loss(hats, tape.constant(y)).value().item(), 5.0, 1e-12);
}

TEST(PerLayerReg, MatchesNaiveLoop) {
  Rng rng(3);
  const Tensor y = Tensor::normal({2, 3, 4}, 0, 1, rng);
  std::vector<Tensor> hats_t;
  for (int l = 0; l < 3; ++l) hats_t.push_back(Tensor::normal({2, 3, 4}, 0, 1, rng));
  double ref = 0.0;
  for (const Tensor& h : hats_t) {
    for (std::size_t n = 0; n < 6; ++n) {
      double sq = 0.0;
      for (std::size_t d = 0; d < 4; ++d) sq += (h[n * 4 + d] - y[n * 4 + d]) * (h[n * 4 + d] - y[n * 4 + d]);
      ref += sq;
    }
  }
  ref /= 6.0 * 3.0;
  Tape tape;
  std::vector<Var> hats;
  for (const Tensor& h : hats_t) hats.push_back(tape.constant(h));
  EXPECT_NEAR(per_layer_reg_loss(hats, tape.constant(y)).value().item(), ref, 1e-12);
}

TEST(DiffusionLoss, ExamplesAndNaiveLoop) {
  Rng rng(4);
  const Tensor y = Tensor::normal({3, 4, 2}, 0, 1, rng);
  const Tensor pred = Tensor::normal({3, 4, 2}, 0, 1, rng);
  Tensor offset = y;
  for (double& v : offset.values()) v += 0.7;
  Tape tape;
  EXPECT_EQ(diffusion_loss(tape.constant(y), tape.constant(y)).value().item(), 0.0);
  EXPECT_NEAR(diffusion_loss(tape.constant(offset), tape.constant(y)).value().item(), 0.49, 1e-12);
  double ref = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) ref += (pred[i] - y[i]) * (pred[i] - y[i]);
  EXPECT_NEAR(diffusion_loss(tape.constant(pred), tape.constant(y)).value().item(), ref / 24.0, 1e-12);
  EXPECT_THROW(diffusion_loss(tape.constant(y), tape.constant(Tensor({3, 4, 3}))), ShapeError);
}

TEST(TotalLoss, DefaultWeightsMatchHandArithmetic) {
  Tape tape;
  LossParts parts{tape.constant(Tensor::scalar(0.8)), tape.constant(Tensor::scalar(2.0)),
                  tape.constant(Tensor::scalar(1.5)), tape.constant(Tensor::scalar(3.0))};
  const LossBreakdown b = total_loss(parts, LossWeights{});
  EXPECT_NEAR(b.total_value, 0.8 + 1e-2 * 2.0 + 1e-4 * 1.5, 1e-15);
  EXPECT_EQ(b.plr, 2.0);
  EXPECT_EQ(b.sim, 1.5);
  EXPECT_EQ(b.blc, 3.0);

  const LossBreakdown with_blc = total_loss(parts, LossWeights{0.1, 0.2, 0.3});
  EXPECT_NEAR(with_blc.total_value, 0.8 + 0.2 + 0.3 + 0.9, 1e-15);
}

TEST(TotalLoss, ZeroWeightsGiveDiffusionLoss) {
  Tape tape;
  LossParts parts{tape.constant(Tensor::scalar(0.8)), tape.constant(Tensor::scalar(2.0)),
                  tape.constant(Tensor::scalar(1.5)), {}};
  EXPECT_EQ(total_loss(parts, LossWeights{0, 0, 0}).total_value, 0.8);
}

TEST(TotalLoss, NegativeWeightRejected) {
  Tape tape;
  LossParts parts{tape.constant(Tensor::scalar(0.8)), {}, {}, {}};
  EXPECT_THROW(total_loss(parts, LossWeights{-1e-2, 0, 0}), ConfigError);
}
