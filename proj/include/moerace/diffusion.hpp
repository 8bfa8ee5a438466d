// SPDX-License-Identifier: Apache-2.0
//
// Forward diffusion on synthetic token grids.
//
//   x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
//
// abar has T+1 entries with abar[0] = 1; training draws t from [1, T].
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "moerace/rng.hpp"
#include "moerace/tensor.hpp"

namespace moerace {

enum class ScheduleKind { Linear, Cosine };
enum class Parameterization { Eps, X0, V };

std::string_view to_string(ScheduleKind k);
std::string_view to_string(Parameterization p);
ScheduleKind parse_schedule(std::string_view name);
Parameterization parse_parameterization(std::string_view name);

struct NoiseSchedule {
  ScheduleKind kind = ScheduleKind::Cosine;
  std::size_t steps = 0;          // T
  std::vector<double> alpha_bar;  // T + 1 entries
  std::vector<double> beta;       // beta[t] = 1 - abar[t]/abar[t-1]; beta[0] = 0

  double at(std::size_t t) const;  // throws ContractError outside [0, T]
};

// Cosine: betas from the squared-cosine curve, clipped at 0.999.
// Linear: betas evenly spaced in [1e-4, 2e-2] rescaled to T steps.
NoiseSchedule build_schedule(std::size_t steps, ScheduleKind kind = ScheduleKind::Cosine);

// x0 and eps share shape (B, ...); one timestep per sample.
Tensor forward_diffuse(const Tensor& x0, std::span<const std::size_t> t, const Tensor& eps,
                       const NoiseSchedule& schedule);

Tensor make_target(const Tensor& x0, const Tensor& eps, std::span<const std::size_t> t,
                   const NoiseSchedule& schedule, Parameterization p);

// Recovers x0 from a model prediction of target p at x_t.
Tensor predict_x0(const Tensor& x_t, const Tensor& prediction, std::span<const std::size_t> t,
                  const NoiseSchedule& schedule, Parameterization p);

struct SyntheticConfig {
  std::size_t classes = 8;
  std::size_t tokens = 16;
  std::size_t data_dim = 4;
  double separation = 2.0;
  double sigma_min = 0.1;
  double sigma_max = 1.0;
};

// Class-conditional Gaussian token grids. Class c has mean
// separation * (+/-) onehot(c mod D); the sign flips every D classes.
// Token l has standard deviation ramping linearly from sigma_min (l = 0)
// to sigma_max (l = L-1), shared across features.
class SyntheticDataset {
 public:
  explicit SyntheticDataset(SyntheticConfig config);

  const SyntheticConfig& config() const noexcept { return config_; }
  const Tensor& class_means() const noexcept { return means_; }  // (classes, D)
  const std::vector<double>& token_sigma() const noexcept { return sigma_; }

  struct Draw {
    Tensor x0;  // (B, L, D)
    std::vector<std::size_t> labels;
  };
  Draw sample(std::size_t batch, Rng& rng) const;

 private:
  SyntheticConfig config_;
  Tensor means_;
  std::vector<double> sigma_;
};

struct DiffusionBatch {
  Tensor x0;
  std::vector<std::size_t> t;
  Tensor eps;
  Tensor x_t;
  Tensor y;
  std::vector<std::size_t> labels;
};

// Draws data, t ~ U{1..T} and eps, then diffuses.
DiffusionBatch make_batch(const SyntheticDataset& data, const NoiseSchedule& schedule, Parameterization p,
                          std::size_t batch, Rng& rng);

// Same as make_batch with every sample at timestep t.
DiffusionBatch make_batch_at(const SyntheticDataset& data, const NoiseSchedule& schedule, Parameterization p,
                             std::size_t batch, std::size_t t, Rng& rng);

}  // namespace moerace
