// SPDX-License-Identifier: Apache-2.0
#include "moerace/router.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

#include "moerace/errors.hpp"

namespace moerace {

namespace {

struct StrategyInfo {
  Strategy strategy;
  std::string_view name;
  StrategyAxes axes;
  std::string_view divisibility;  // condition for an integral K
};

const std::array<StrategyInfo, 6>& strategy_table() {
  static const std::array<StrategyInfo, 6> table = {{
      {Strategy::TokenChoice, "token-choice", {{Axis::Batch, Axis::Token}, {Axis::Expert}}, "always integral"},
      {Strategy::ExpertChoice, "expert-choice", {{Axis::Batch, Axis::Expert}, {Axis::Token}}, "E must divide k*L"},
      {Strategy::BLChoice, "bl-choice", {{Axis::Expert}, {Axis::Batch, Axis::Token}}, "E must divide B*L*k"},
      {Strategy::BEChoice, "be-choice", {{Axis::Token}, {Axis::Batch, Axis::Expert}}, "always integral"},
      {Strategy::LEChoice, "le-choice", {{Axis::Batch}, {Axis::Token, Axis::Expert}}, "always integral"},
      {Strategy::ExpertRace, "expert-race", {{}, {Axis::Batch, Axis::Token, Axis::Expert}}, "always integral"},
  }};
  return table;
}

const StrategyInfo& info(Strategy s) {
  for (const auto& row : strategy_table())
    if (row.strategy == s) return row;
  throw ConfigError("unknown routing strategy");
}

std::size_t flat_stride(Axis a, ScoreShape shape) {
  switch (a) {
    case Axis::Batch: return shape.tokens * shape.experts;
    case Axis::Token: return shape.experts;
    case Axis::Expert: return 1;
  }
  return 0;
}

// Offsets (in flat b,l,e units) of every mixed-radix index over `axes`, last axis fastest.
std::vector<std::size_t> axis_offsets(const std::vector<Axis>& axes, ScoreShape shape) {
  std::vector<std::size_t> offsets{0};
  for (Axis a : axes) {
    std::vector<std::size_t> next;
    next.reserve(offsets.size() * shape.extent(a));
    for (std::size_t base : offsets)
      for (std::size_t i = 0; i < shape.extent(a); ++i) next.push_back(base + i * flat_stride(a, shape));
    offsets = std::move(next);
  }
  return offsets;
}

void check_grid(const Tensor& grid, std::size_t budget) {
  if (grid.rank() != 2) throw ShapeError(fmt::format("selection grid must be rank 2, got {}", shape_str(grid.shape())));
  if (budget > grid.dim(1)) {
    throw ConfigError(fmt::format("selection budget K={} exceeds pool size D_B={}", budget, grid.dim(1)));
  }
  if (!grid.all_finite()) throw NumericError("non-finite routing score");
}

// Column indices of one row ordered so that the first `budget` are the selected ones.
void partition_row(const double* row, std::size_t cols, std::size_t budget, std::vector<std::size_t>& order) {
  order.resize(cols);
  std::iota(order.begin(), order.end(), 0);
  if (budget == 0 || budget > cols) return;
  auto before = [row](std::size_t a, std::size_t b) { return row[a] > row[b] || (row[a] == row[b] && a < b); };
  std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(budget - 1), order.end(), before);
}

}  // namespace

std::string_view to_string(Strategy s) { return info(s).name; }

std::string_view to_string(Gating g) {
  switch (g) {
    case Gating::Softmax: return "softmax";
    case Gating::Sigmoid: return "sigmoid";
    case Gating::Identity: return "identity";
  }
  return "?";
}

Strategy parse_strategy(std::string_view name) {
  for (const auto& row : strategy_table())
    if (row.name == name) return row.strategy;
  throw ConfigError(fmt::format("unknown strategy '{}' (expected token-choice, expert-choice, bl-choice, "
                                "be-choice, le-choice or expert-race)",
                                name));
}

Gating parse_gating(std::string_view name) {
  for (Gating g : {Gating::Softmax, Gating::Sigmoid, Gating::Identity})
    if (to_string(g) == name) return g;
  throw ConfigError(fmt::format("unknown gating '{}' (expected softmax, sigmoid or identity)", name));
}

StrategyAxes strategy_axes(Strategy s) { return info(s).axes; }

bool crosses_samples(Strategy s) {
  const auto& pool = info(s).axes.pool;
  return std::find(pool.begin(), pool.end(), Axis::Batch) != pool.end();
}

std::size_t ScoreShape::extent(Axis a) const noexcept {
  switch (a) {
    case Axis::Batch: return batch;
    case Axis::Token: return tokens;
    case Axis::Expert: return experts;
  }
  return 0;
}

ScoreShape ScoreShape::of(const Tensor& scores) {
  if (scores.rank() != 3) {
    throw ShapeError(fmt::format("score tensor must be (B,L,E), got {}", shape_str(scores.shape())));
  }
  return {scores.dim(0), scores.dim(1), scores.dim(2)};
}

std::size_t effective_k(Strategy s, ScoreShape shape, std::size_t k) {
  if (shape.batch == 0 || shape.tokens == 0 || shape.experts == 0) {
    throw ConfigError("all of B, L, E must be at least 1");
  }
  if (k == 0 || k > shape.experts) {
    throw ConfigError(fmt::format("k={} must lie in [1, E={}]", k, shape.experts));
  }
  std::size_t pool = 1;
  for (Axis a : info(s).axes.pool) pool *= shape.extent(a);
  const std::size_t numerator = k * pool;
  if (numerator % shape.experts != 0) {
    throw ConfigError(fmt::format(
        "{}: selection budget K = k*D_B/E = {}*{}/{} is not an integer ({}; B={}, L={}, E={}, k={})", info(s).name,
        k, pool, shape.experts, info(s).divisibility, shape.batch, shape.tokens, shape.experts, k));
  }
  return numerator / shape.experts;
}

std::vector<Strategy> valid_strategies(ScoreShape shape, std::size_t k) {
  std::vector<Strategy> out;
  for (Strategy s : kAllStrategies) {
    try {
      effective_k(s, shape, k);
      out.push_back(s);
    } catch (const ConfigError&) {
    }
  }
  return out;
}

SelectionLayout selection_layout(Strategy s, ScoreShape shape) {
  const StrategyAxes& axes = info(s).axes;
  const auto row_offsets = axis_offsets(axes.rows, shape);
  const auto col_offsets = axis_offsets(axes.pool, shape);
  SelectionLayout layout;
  layout.rows = row_offsets.size();
  layout.cols = col_offsets.size();
  layout.source.reserve(shape.size());
  for (std::size_t r : row_offsets)
    for (std::size_t c : col_offsets) layout.source.push_back(r + c);
  return layout;
}

Tensor SelectionLayout::gather(const Tensor& scores) const {
  if (scores.size() != source.size()) {
    throw ShapeError(fmt::format("layout covers {} scores, tensor {} has {}", source.size(),
                                 shape_str(scores.shape()), scores.size()));
  }
  Tensor grid({rows, cols});
  for (std::size_t i = 0; i < source.size(); ++i) grid[i] = scores[source[i]];
  return grid;
}

Tensor SelectionLayout::scatter(const Tensor& grid, ScoreShape shape) const {
  if (grid.size() != source.size() || shape.size() != source.size()) {
    throw ShapeError(fmt::format("scatter: grid {} does not match layout {}x{}", shape_str(grid.shape()), rows, cols));
  }
  Tensor out({shape.batch, shape.tokens, shape.experts});
  for (std::size_t i = 0; i < source.size(); ++i) out[source[i]] = grid[i];
  return out;
}

ReshapedScores reshape_scores(const Tensor& scores, Strategy s) {
  SelectionLayout layout = selection_layout(s, ScoreShape::of(scores));
  Tensor grid = layout.gather(scores);
  return {std::move(grid), std::move(layout)};
}

Tensor topk_mask(const Tensor& grid, std::size_t budget) {
  check_grid(grid, budget);
  const std::size_t rows = grid.dim(0);
  const std::size_t cols = grid.dim(1);
  Tensor mask(grid.shape());
  std::vector<std::size_t> order;
  for (std::size_t r = 0; r < rows; ++r) {
    partition_row(grid.data() + r * cols, cols, budget, order);
    for (std::size_t i = 0; i < budget; ++i) mask[r * cols + order[i]] = 1.0;
  }
  return mask;
}

std::vector<double> kth_value_per_row(const Tensor& grid, std::size_t budget) {
  check_grid(grid, budget);
  if (budget == 0) throw ConfigError("selection budget must be at least 1");
  const std::size_t rows = grid.dim(0);
  const std::size_t cols = grid.dim(1);
  std::vector<double> out(rows);
  std::vector<std::size_t> order;
  for (std::size_t r = 0; r < rows; ++r) {
    partition_row(grid.data() + r * cols, cols, budget, order);
    out[r] = grid[r * cols + order[budget - 1]];
  }
  return out;
}

Tensor apply_gating(const Tensor& logits, Gating g) {
  Tensor out = logits;
  switch (g) {
    case Gating::Identity:
      break;
    case Gating::Sigmoid:
      for (double& v : out.values()) v = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
      break;
    case Gating::Softmax: {
      if (out.rank() == 0) throw ShapeError("softmax gating needs an expert axis");
      const std::size_t n = out.shape().back();
      for (std::size_t r = 0; r < out.size() / n; ++r) {
        double* row = out.data() + r * n;
        const double mx = *std::max_element(row, row + n);
        double total = 0.0;
        for (std::size_t j = 0; j < n; ++j) total += (row[j] = std::exp(row[j] - mx));
        for (std::size_t j = 0; j < n; ++j) row[j] /= total;
      }
      break;
    }
  }
  return out;
}

ThresholdState ema_update(ThresholdState state, std::span<const double> kth_values) {
  if (kth_values.empty()) throw ContractError("ema_update needs at least one k-th value");
  const double batch_mean =
      std::accumulate(kth_values.begin(), kth_values.end(), 0.0) / static_cast<double>(kth_values.size());
  if (!state.tau) {
    state.tau = batch_mean;
  } else {
    state.tau = state.momentum * *state.tau + (1.0 - state.momentum) * batch_mean;
  }
  return state;
}

Selection select_topk(const Tensor& scores, Strategy s, std::size_t k) {
  const ScoreShape shape = ScoreShape::of(scores);
  const std::size_t budget = effective_k(s, shape, k);
  const SelectionLayout layout = selection_layout(s, shape);
  const Tensor grid = layout.gather(scores);
  Selection sel;
  sel.mask = layout.scatter(topk_mask(grid, budget), shape);
  sel.kth_values = kth_value_per_row(grid, budget);
  sel.budget = budget;
  return sel;
}

Selection select_infer(const Tensor& scores, Strategy s, std::size_t k, const ThresholdState& state) {
  if (!crosses_samples(s)) return select_topk(scores, s, k);
  const ScoreShape shape = ScoreShape::of(scores);
  Selection sel;
  sel.budget = effective_k(s, shape, k);
  if (!state.tau) {
    throw StateError(fmt::format("{} inference needs an estimated threshold; run training updates or load a checkpoint first",
                                 to_string(s)));
  }
  if (!scores.all_finite()) throw NumericError("non-finite routing score");
  const double tau = *state.tau;
  sel.mask = Tensor(scores.shape());
  for (std::size_t i = 0; i < scores.size(); ++i) sel.mask[i] = scores[i] >= tau ? 1.0 : 0.0;
  sel.thresholded = true;
  return sel;
}

namespace {
RouteResult assemble(Tensor scores, Selection sel) {
  RouteResult out;
  out.gates = scores;
  for (std::size_t i = 0; i < out.gates.size(); ++i) out.gates[i] *= sel.mask[i];
  out.scores = std::move(scores);
  out.mask = std::move(sel.mask);
  out.kth_values = std::move(sel.kth_values);
  out.budget = sel.budget;
  out.thresholded = sel.thresholded;
  return out;
}
}  // namespace

RouteResult route_pure(const Tensor& logits, const RouteConfig& config) {
  Tensor scores = apply_gating(logits, config.gating);
  Selection sel = select_topk(scores, config.strategy, config.k);
  return assemble(std::move(scores), std::move(sel));
}

RouteResult route(const Tensor& logits, const RouteConfig& config, Mode mode, ThresholdState& state) {
  if (mode == Mode::Train) {
    RouteResult out = route_pure(logits, config);
    state = ema_update(state, out.kth_values);
    return out;
  }
  Tensor scores = apply_gating(logits, config.gating);
  Selection sel = select_infer(scores, config.strategy, config.k, state);
  return assemble(std::move(scores), std::move(sel));
}

}  // namespace moerace
