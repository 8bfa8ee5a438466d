// SPDX-License-Identifier: Apache-2.0
//
// Training loop for the toy denoiser: AdamW on the total loss, weight EMA,
// per-step log records, ancestral sampling and held-out routing reports.
//
// Step s trains on a batch drawn from derive_seed(seed, s), so a run
// resumed from a checkpoint at step s replays the same data.
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "moerace/denoiser.hpp"
#include "moerace/diffusion.hpp"
#include "moerace/metrics.hpp"
#include "moerace/objectives.hpp"

namespace moerace {

struct TrainConfig {
  DenoiserConfig model;
  double separation = 2.0;
  double sigma_min = 0.1;
  double sigma_max = 1.0;
  ScheduleKind schedule = ScheduleKind::Cosine;
  std::size_t batch = 32;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;
  double ema_decay = 0.999;
  LossWeights weights;
  std::uint64_t seed = 0;

  SyntheticConfig data() const;
  void validate() const;  // throws ConfigError
};

struct LogRecord {
  std::size_t step = 0;
  double diffusion = 0.0;
  double plr = 0.0;
  double sim = 0.0;
  double blc = 0.0;
  double total = 0.0;
  double maxvio = 0.0;      // mean over MoE layers
  double comb = 0.0;        // mean over MoE layers
  double alloc_mean = 0.0;  // active experts per token
  double alloc_std = 0.0;   // across tokens and layers

  static std::string csv_header();
  std::string csv_row() const;
};

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::size_t t = 0;
};

struct BatchLoss {
  LossBreakdown loss;
  DenoiserOutput output;
};

// Forward plus all loss terms on one batch. Auxiliary terms are averaged
// over MoE layers; the dense variant has none.
BatchLoss compute_batch_loss(Denoiser& model, std::span<const Var> bound, const DiffusionBatch& batch,
                             const LossWeights& weights, const ForwardOptions& options);

class Trainer {
 public:
  explicit Trainer(TrainConfig config);

  const TrainConfig& config() const noexcept { return config_; }
  Denoiser& model() noexcept { return model_; }
  const Denoiser& model() const noexcept { return model_; }
  const SyntheticDataset& dataset() const noexcept { return data_; }
  const NoiseSchedule& schedule() const noexcept { return schedule_; }

  std::size_t steps_done() const noexcept { return step_; }
  DiffusionBatch batch_for_step(std::size_t step) const;

  // Throws NumericError on a non-finite loss; parameters stay untouched.
  LogRecord step();

  // Copy of the model carrying the EMA weights (thresholds from the raw model).
  Denoiser ema_model() const;

  // Checkpoint access.
  std::vector<Tensor>& ema_shadow() noexcept { return ema_; }
  AdamState& adam() noexcept { return adam_; }
  void set_steps_done(std::size_t s) noexcept { step_ = s; }

 private:
  void apply_adamw(const std::vector<Var>& bound, const Gradients& grads);

  TrainConfig config_;
  Denoiser model_;
  SyntheticDataset data_;
  NoiseSchedule schedule_;
  AdamState adam_;
  std::vector<Tensor> ema_;
  std::size_t step_ = 0;
};

struct SampleStep {
  std::size_t t = 0;
  std::vector<Tensor> masks;  // per MoE layer, (n, L, E)
  double mean_active = 0.0;   // active experts per token, averaged over layers
};

struct SampleResult {
  Tensor x0;
  std::vector<SampleStep> steps;  // t = T .. 1
};

// Ancestral sampling with infer-mode routing. x0 estimates are clipped to
// [-clip, clip] before the posterior mean. Throws StateError when a
// threshold-routed layer has no threshold.
SampleResult sample(Denoiser& model, const NoiseSchedule& schedule, std::span<const std::size_t> labels,
                    std::uint64_t seed, double clip = 5.0);

struct AllocationReport {
  AllocationProfile overall;  // mean over layers
  std::vector<AllocationProfile> per_layer;
};

// Allocation per timestep: for every t in [1, T] a held-out batch at that t
// is routed in `mode` (train mode leaves thresholds untouched).
AllocationReport timestep_allocation(Denoiser& model, const SyntheticDataset& data, const NoiseSchedule& schedule,
                                     std::size_t samples_per_step, std::size_t buckets, std::uint64_t seed,
                                     Mode mode = Mode::Infer);

struct RoutingReport {
  std::vector<double> maxvio;                // per layer
  std::vector<CombinationUsage> comb;        // per layer
  std::vector<double> activation_rate;       // per layer, active fraction of (token, expert)
  double mean_maxvio() const;
  double mean_comb() const;
};

// MaxVio and combination usage on pooled held-out masks (random t).
RoutingReport routing_report(Denoiser& model, const SyntheticDataset& data, const NoiseSchedule& schedule,
                             std::size_t batches, std::size_t batch_size, std::uint64_t seed,
                             Mode mode = Mode::Infer);

}  // namespace moerace
