// SPDX-License-Identifier: Apache-2.0
//
// Unified top-K routing over a (batch, token, expert) score tensor.
//
// Every strategy reorganizes the B x L x E scores into a D_A x D_B grid and
// selects the top K entries of each row independently, with the per-row
// budget K = k * D_B / E. The strategies differ only in which axes form the
// rows (independent selections) and which form the candidate pool:
//
//   strategy        rows (D_A)   pool (D_B)   K
//   token-choice    B*L          E            k
//   expert-choice   B*E          L            k*L/E
//   bl-choice       E            B*L          B*L*k/E
//   be-choice       L            B*E          B*k
//   le-choice       B            L*E          L*k
//   expert-race     1            B*L*E        B*L*k
//
// Expert race makes the whole tensor one pool, so its selection is the
// global top B*L*k, which maximizes the sum of selected scores over every
// row-constrained alternative.
#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "moerace/tensor.hpp"

namespace moerace {

enum class Strategy { TokenChoice, ExpertChoice, BLChoice, BEChoice, LEChoice, ExpertRace };
enum class Gating { Softmax, Sigmoid, Identity };
enum class Axis { Batch, Token, Expert };
enum class Mode { Train, Infer };

inline constexpr std::array<Strategy, 6> kAllStrategies = {
    Strategy::TokenChoice, Strategy::ExpertChoice, Strategy::BLChoice,
    Strategy::BEChoice,    Strategy::LEChoice,     Strategy::ExpertRace};

std::string_view to_string(Strategy s);
std::string_view to_string(Gating g);
Strategy parse_strategy(std::string_view name);
Gating parse_gating(std::string_view name);

struct StrategyAxes {
  std::vector<Axis> rows;  // D_A
  std::vector<Axis> pool;  // D_B
};
StrategyAxes strategy_axes(Strategy s);

// True when a selection row spans several batch samples, i.e. training-time
// routing of one sample depends on the others.
bool crosses_samples(Strategy s);

struct ScoreShape {
  std::size_t batch = 1;
  std::size_t tokens = 1;
  std::size_t experts = 1;

  std::size_t size() const noexcept { return batch * tokens * experts; }
  std::size_t extent(Axis a) const noexcept;
  static ScoreShape of(const Tensor& scores);
  bool operator==(const ScoreShape&) const = default;
};

// Per-row selection budget K = k * D_B / E. Throws ConfigError when it is not
// a positive integer or k is outside [1, E].
std::size_t effective_k(Strategy s, ScoreShape shape, std::size_t k);

// Strategies whose budget is integral for (shape, k).
std::vector<Strategy> valid_strategies(ScoreShape shape, std::size_t k);

// Index map between the (B,L,E) tensor and the D_A x D_B selection grid.
// Columns inside a row follow increasing flat (b,l,e) index.
struct SelectionLayout {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::size_t> source;  // source[r * cols + c] = flat (b,l,e) index

  Tensor gather(const Tensor& scores) const;
  Tensor scatter(const Tensor& grid, ScoreShape shape) const;
};
SelectionLayout selection_layout(Strategy s, ScoreShape shape);

struct ReshapedScores {
  Tensor grid;  // (D_A, D_B)
  SelectionLayout layout;
};
ReshapedScores reshape_scores(const Tensor& scores, Strategy s);

// Exactly `budget` ones per row; ties go to the lowest column index.
Tensor topk_mask(const Tensor& grid, std::size_t budget);

// The budget-th largest value of each row.
std::vector<double> kth_value_per_row(const Tensor& grid, std::size_t budget);

Tensor apply_gating(const Tensor& logits, Gating g);

struct ThresholdState {
  std::optional<double> tau;  // empty until the first training update
  double momentum = 0.99;

  bool initialized() const noexcept { return tau.has_value(); }
};

// tau <- m * tau + (1 - m) * mean(kth_values). An empty tau is warm-started
// with the batch mean.
ThresholdState ema_update(ThresholdState state, std::span<const double> kth_values);

struct RouteConfig {
  Strategy strategy = Strategy::ExpertRace;
  Gating gating = Gating::Identity;
  std::size_t k = 2;
};

struct Selection {
  Tensor mask;                      // (B,L,E) in {0,1}
  std::vector<double> kth_values;   // one per row; empty in thresholded inference
  std::size_t budget = 0;           // K
  bool thresholded = false;
};

// Exact top-K per row of the strategy's grid.
Selection select_topk(const Tensor& scores, Strategy s, std::size_t k);

// Inference selection. Strategies whose rows cross samples use the learned
// threshold (mask = score >= tau) so each sample is routed independently;
// the others already select within one sample and keep exact top-K.
Selection select_infer(const Tensor& scores, Strategy s, std::size_t k, const ThresholdState& state);

struct RouteResult {
  Tensor scores;  // gating(logits)
  Tensor mask;
  Tensor gates;   // scores * mask
  std::vector<double> kth_values;
  std::size_t budget = 0;
  bool thresholded = false;
};

// Full routing step on raw logits (B,L,E). Selection ranks the gated scores.
// Train mode updates `state` through ema_update.
RouteResult route(const Tensor& logits, const RouteConfig& config, Mode mode, ThresholdState& state);

// Train-mode routing without touching any threshold.
RouteResult route_pure(const Tensor& logits, const RouteConfig& config);

}  // namespace moerace
