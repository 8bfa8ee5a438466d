// SPDX-License-Identifier: Apache-2.0
#include "moerace/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <fmt/format.h>

#include "moerace/errors.hpp"

namespace moerace {
namespace {

constexpr double kCosineOffset = 0.008;
constexpr double kMaxBeta = 0.999;

void check_batch(const Tensor& x0, std::span<const std::size_t> t, const Tensor* eps, const char* what) {
  if (x0.rank() == 0 || x0.dim(0) != t.size()) {
    throw ShapeError(fmt::format("{}: x0 {} needs one timestep per sample, got {}", what, shape_str(x0.shape()),
                                 t.size()));
  }
  if (eps && eps->shape() != x0.shape()) {
    throw ShapeError(fmt::format("{}: x0 {} vs eps {}", what, shape_str(x0.shape()), shape_str(eps->shape())));
  }
}

}  // namespace

std::string_view to_string(ScheduleKind k) { return k == ScheduleKind::Linear ? "linear" : "cosine"; }

std::string_view to_string(Parameterization p) {
  switch (p) {
    case Parameterization::Eps: return "eps";
    case Parameterization::X0: return "x0";
    case Parameterization::V: return "v";
  }
  return "eps";
}

ScheduleKind parse_schedule(std::string_view name) {
  if (name == "linear") return ScheduleKind::Linear;
  if (name == "cosine") return ScheduleKind::Cosine;
  throw ConfigError(fmt::format("unknown schedule '{}' (expected linear|cosine)", name));
}

Parameterization parse_parameterization(std::string_view name) {
  if (name == "eps") return Parameterization::Eps;
  if (name == "x0") return Parameterization::X0;
  if (name == "v") return Parameterization::V;
  throw ConfigError(fmt::format("unknown target parameterization '{}' (expected eps|x0|v)", name));
}

double NoiseSchedule::at(std::size_t t) const {
  if (t > steps) throw ContractError(fmt::format("timestep {} outside [0, {}]", t, steps));
  return alpha_bar[t];
}

NoiseSchedule build_schedule(std::size_t steps, ScheduleKind kind) {
  if (steps < 2) throw ConfigError(fmt::format("schedule needs T >= 2, got {}", steps));
  NoiseSchedule s;
  s.kind = kind;
  s.steps = steps;
  s.beta.assign(steps + 1, 0.0);
  const double n = static_cast<double>(steps);
  if (kind == ScheduleKind::Cosine) {
    auto f = [&](double t) {
      const double c = std::cos((t / n + kCosineOffset) / (1.0 + kCosineOffset) * std::numbers::pi / 2.0);
      return c * c;
    };
    for (std::size_t t = 1; t <= steps; ++t) {
      s.beta[t] = std::min(kMaxBeta, 1.0 - f(static_cast<double>(t)) / f(static_cast<double>(t - 1)));
    }
  } else {
    const double lo = 1e-4 * 1000.0 / n, hi = std::min(2e-2 * 1000.0 / n, kMaxBeta);
    for (std::size_t t = 1; t <= steps; ++t) s.beta[t] = lo + (hi - lo) * static_cast<double>(t - 1) / (n - 1.0);
  }
  s.alpha_bar.assign(steps + 1, 1.0);
  for (std::size_t t = 1; t <= steps; ++t) s.alpha_bar[t] = s.alpha_bar[t - 1] * (1.0 - s.beta[t]);
  return s;
}

Tensor forward_diffuse(const Tensor& x0, std::span<const std::size_t> t, const Tensor& eps,
                       const NoiseSchedule& schedule) {
  check_batch(x0, t, &eps, "forward_diffuse");
  Tensor out(x0.shape());
  const std::size_t per = x0.size() / t.size();
  for (std::size_t b = 0; b < t.size(); ++b) {
    const double ab = schedule.at(t[b]);
    const double sa = std::sqrt(ab), sn = std::sqrt(1.0 - ab);
    for (std::size_t i = b * per; i < (b + 1) * per; ++i) out[i] = sa * x0[i] + sn * eps[i];
  }
  return out;
}

Tensor make_target(const Tensor& x0, const Tensor& eps, std::span<const std::size_t> t,
                   const NoiseSchedule& schedule, Parameterization p) {
  check_batch(x0, t, &eps, "make_target");
  if (p == Parameterization::Eps) return eps;
  if (p == Parameterization::X0) return x0;
  Tensor v(x0.shape());
  const std::size_t per = x0.size() / t.size();
  for (std::size_t b = 0; b < t.size(); ++b) {
    const double ab = schedule.at(t[b]);
    const double sa = std::sqrt(ab), sn = std::sqrt(1.0 - ab);
    for (std::size_t i = b * per; i < (b + 1) * per; ++i) v[i] = sn * eps[i] - sa * x0[i];
  }
  return v;
}

Tensor predict_x0(const Tensor& x_t, const Tensor& prediction, std::span<const std::size_t> t,
                  const NoiseSchedule& schedule, Parameterization p) {
  check_batch(x_t, t, &prediction, "predict_x0");
  if (p == Parameterization::X0) return prediction;
  Tensor x0(x_t.shape());
  const std::size_t per = x_t.size() / t.size();
  for (std::size_t b = 0; b < t.size(); ++b) {
    const double ab = schedule.at(t[b]);
    const double sa = std::sqrt(ab), sn = std::sqrt(1.0 - ab);
    for (std::size_t i = b * per; i < (b + 1) * per; ++i) {
      // v = sn*eps - sa*x0 and x_t = sa*x0 + sn*eps give x_t - v = 2*sa*x0.
      x0[i] = p == Parameterization::Eps ? (x_t[i] - sn * prediction[i]) / sa : (x_t[i] - prediction[i]) / (2.0 * sa);
    }
  }
  return x0;
}

SyntheticDataset::SyntheticDataset(SyntheticConfig config) : config_(config) {
  if (config_.classes == 0 || config_.tokens == 0 || config_.data_dim == 0) {
    throw ConfigError("synthetic dataset extents (classes, tokens, data_dim) must be positive");
  }
  if (config_.sigma_min < 0.0 || config_.sigma_max < config_.sigma_min) {
    throw ConfigError(fmt::format("need 0 <= sigma_min <= sigma_max, got {} and {}", config_.sigma_min,
                                  config_.sigma_max));
  }
  const std::size_t d = config_.data_dim;
  means_ = Tensor({config_.classes, d});
  for (std::size_t c = 0; c < config_.classes; ++c) {
    const double sign = (c / d) % 2 == 0 ? 1.0 : -1.0;
    means_[c * d + c % d] = sign * config_.separation;
  }
  sigma_.resize(config_.tokens);
  for (std::size_t l = 0; l < config_.tokens; ++l) {
    const double frac = config_.tokens == 1 ? 0.0 : static_cast<double>(l) / static_cast<double>(config_.tokens - 1);
    sigma_[l] = config_.sigma_min + (config_.sigma_max - config_.sigma_min) * frac;
  }
}

SyntheticDataset::Draw SyntheticDataset::sample(std::size_t batch, Rng& rng) const {
  const std::size_t l_n = config_.tokens, d = config_.data_dim;
  Draw out{Tensor({batch, l_n, d}), std::vector<std::size_t>(batch)};
  std::uniform_int_distribution<std::size_t> pick(0, config_.classes - 1);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t c = pick(rng);
    out.labels[b] = c;
    for (std::size_t l = 0; l < l_n; ++l) {
      for (std::size_t j = 0; j < d; ++j) {
        out.x0[(b * l_n + l) * d + j] = means_[c * d + j] + sigma_[l] * normal(rng);
      }
    }
  }
  return out;
}

namespace {

DiffusionBatch finish_batch(SyntheticDataset::Draw draw, std::vector<std::size_t> t, const NoiseSchedule& schedule,
                            Parameterization p, Rng& rng) {
  DiffusionBatch batch;
  batch.eps = Tensor::normal(draw.x0.shape(), 0.0, 1.0, rng);
  batch.x_t = forward_diffuse(draw.x0, t, batch.eps, schedule);
  batch.y = make_target(draw.x0, batch.eps, t, schedule, p);
  batch.x0 = std::move(draw.x0);
  batch.t = std::move(t);
  batch.labels = std::move(draw.labels);
  return batch;
}

}  // namespace

DiffusionBatch make_batch(const SyntheticDataset& data, const NoiseSchedule& schedule, Parameterization p,
                          std::size_t batch, Rng& rng) {
  SyntheticDataset::Draw draw = data.sample(batch, rng);
  std::uniform_int_distribution<std::size_t> pick(1, schedule.steps);
  std::vector<std::size_t> t(batch);
  for (auto& v : t) v = pick(rng);
  return finish_batch(std::move(draw), std::move(t), schedule, p, rng);
}

DiffusionBatch make_batch_at(const SyntheticDataset& data, const NoiseSchedule& schedule, Parameterization p,
                             std::size_t batch, std::size_t t, Rng& rng) {
  schedule.at(t);
  return finish_batch(data.sample(batch, rng), std::vector<std::size_t>(batch, t), schedule, p, rng);
}

}  // namespace moerace
