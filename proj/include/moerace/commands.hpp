// SPDX-License-Identifier: Apache-2.0
//
// Command implementations behind the `moerace` CLI. Each writes its
// reports into config.out and returns structured results for callers that
// want to cross-check them.
#pragma once

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "moerace/run_config.hpp"

namespace moerace {

// ---- route-sim --------------------------------------------------------------

struct RouteSimRow {
  Strategy strategy = Strategy::ExpertRace;
  std::size_t rows = 0;    // D_A
  std::size_t pool = 0;    // D_B
  std::size_t budget = 0;  // per-row K
  double mean_objective = 0.0;
  double mean_gap = 0.0;          // race objective minus this strategy's
  double strict_fraction = 0.0;   // draws where race is strictly better
  double mean_maxvio = 0.0;
  double mean_comb = 0.0;
};

// Scores are N(0,1) logits of shape (batch, tokens, experts), gated.
// Throws ConfigError naming the valid strategies when one is invalid.
std::vector<RouteSimRow> route_sim(const RunConfig& config, const std::vector<Strategy>& strategies);
std::vector<RouteSimRow> cmd_route_sim(const RunConfig& config, const std::vector<Strategy>& strategies,
                                       std::ostream& log);

// ---- train ------------------------------------------------------------------

struct EvalSummary {
  bool available = false;  // false when routing needs a threshold that is unset
  std::string note;
  RoutingReport routing;
  AllocationReport allocation;
  double alloc_variance = 0.0;
};

struct TrainSummary {
  std::vector<LogRecord> log;  // steps run by this invocation
  double final_loss = 0.0;     // mean diffusion loss over the last min(10, steps) steps
  EvalSummary eval;
};

// Held-out routing metrics in `mode` for a model built from `config`.
EvalSummary evaluate_model(Denoiser& model, const RunConfig& config, Mode mode);

// Runs config.steps total steps (resuming from `resume` when given),
// writing train_log.csv, checkpoints, config.txt and summary.json.
// Throws ConfigError with a per-key diff when the checkpoint disagrees.
TrainSummary cmd_train(const RunConfig& config, const std::optional<std::filesystem::path>& resume,
                       std::ostream& log);

// ---- metrics ----------------------------------------------------------------

EvalSummary cmd_metrics(const RunConfig& overrides, const std::filesystem::path& checkpoint, Mode mode,
                        bool use_ema, std::ostream& log);

// ---- ablate -----------------------------------------------------------------

enum class Balance { None, BalanceLoss, Similarity };

struct ArmSpec {
  Strategy strategy = Strategy::ExpertRace;
  Gating gating = Gating::Identity;
  Balance balance = Balance::Similarity;
  std::string name() const;
};

// "strategy[:gating[:balance]]", balance in none|blc|sim; missing parts
// default to the base config.
ArmSpec parse_arm(const std::string& text, const RunConfig& base);
RunConfig arm_config(const RunConfig& base, const ArmSpec& arm);

struct ArmResult {
  ArmSpec arm;
  TrainSummary summary;
};
std::vector<ArmResult> cmd_ablate(const RunConfig& base, const std::vector<ArmSpec>& arms, std::ostream& log);

// ---- entry point ------------------------------------------------------------

// Exit codes: 0 success, 2 configuration/state error, 3 numeric failure.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace moerace
