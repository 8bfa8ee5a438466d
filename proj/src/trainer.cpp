// SPDX-License-Identifier: Apache-2.0
#include "moerace/trainer.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

#include "moerace/errors.hpp"

namespace moerace {
namespace {

// Stacks (n_i, ...) tensors along the first axis.
Tensor concat_rows(const std::vector<Tensor>& parts) {
  Shape shape = parts.front().shape();
  std::vector<double> data;
  shape[0] = 0;
  for (const Tensor& p : parts) {
    shape[0] += p.dim(0);
    data.insert(data.end(), p.values().begin(), p.values().end());
  }
  return Tensor(std::move(shape), std::move(data));
}

}  // namespace

SyntheticConfig TrainConfig::data() const {
  SyntheticConfig d;
  d.classes = model.classes;
  d.tokens = model.tokens;
  d.data_dim = model.data_dim;
  d.separation = separation;
  d.sigma_min = sigma_min;
  d.sigma_max = sigma_max;
  return d;
}

void TrainConfig::validate() const {
  model.validate();
  validate_weights(weights);
  if (batch == 0) throw ConfigError("batch must be positive");
  if (!(std::isfinite(lr) && lr >= 0.0 && std::isfinite(weight_decay) && weight_decay >= 0.0)) {
    throw ConfigError(fmt::format("lr and weight_decay must be finite and >= 0, got {} and {}", lr, weight_decay));
  }
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("Adam betas must lie in [0, 1)");
  if (!(ema_decay >= 0.0 && ema_decay <= 1.0)) throw ConfigError("ema_decay must lie in [0, 1]");
  if (!model.dense) {
    // Batch-wide strategies need the budget to be integral at this batch size.
    effective_k(model.route.strategy, {batch, model.tokens, model.experts}, model.k);
  }
}

std::string LogRecord::csv_header() {
  return "step,diffusion,plr,sim,blc,total,maxvio,comb,alloc_mean,alloc_std";
}

std::string LogRecord::csv_row() const {
  return fmt::format("{},{},{},{},{},{},{},{},{},{}", step, diffusion, plr, sim, blc, total, maxvio, comb, alloc_mean,
                     alloc_std);
}

BatchLoss compute_batch_loss(Denoiser& model, std::span<const Var> bound, const DiffusionBatch& batch,
                             const LossWeights& weights, const ForwardOptions& options) {
  BatchLoss out;
  out.output = model.forward(bound, batch.x_t, batch.t, batch.labels, options);
  Tape& tape = *bound[0].tape();
  const Var y = tape.constant(batch.y);

  LossParts parts;
  parts.diffusion = diffusion_loss(out.output.prediction, y);
  const auto& layers = out.output.layers;
  if (!layers.empty()) {
    std::vector<Var> y_hats;
    Var sim, blc;
    for (const LayerOutput& layer : layers) {
      y_hats.push_back(layer.y_hat);
      const Var probs = router_probabilities(layer.logits);
      const Var s = router_similarity_loss(layer.route.mask, probs);
      const Var b = balance_loss(layer.route.mask, probs, model.config().k);
      sim = sim.valid() ? add(sim, s) : s;
      blc = blc.valid() ? add(blc, b) : b;
    }
    const double inv = 1.0 / static_cast<double>(layers.size());
    parts.plr = per_layer_reg_loss(y_hats, y);
    parts.sim = scale(sim, inv);
    parts.blc = scale(blc, inv);
  }
  out.loss = total_loss(parts, weights);
  return out;
}

Trainer::Trainer(TrainConfig config)
    : config_(config),
      model_((config_.validate(), config_.model), config_.seed),
      data_(config_.data()),
      schedule_(build_schedule(config_.model.timesteps, config_.schedule)) {
  const ParameterStore& ps = model_.params();
  for (std::size_t i = 0; i < ps.size(); ++i) {
    adam_.m.emplace_back(ps.value(i).shape());
    adam_.v.emplace_back(ps.value(i).shape());
    ema_.push_back(ps.value(i));
  }
}

DiffusionBatch Trainer::batch_for_step(std::size_t step) const {
  Rng rng(derive_seed(config_.seed, static_cast<std::uint64_t>(step)));
  return make_batch(data_, schedule_, config_.model.target, config_.batch, rng);
}

LogRecord Trainer::step() {
  const DiffusionBatch batch = batch_for_step(step_);
  Tape tape;
  const std::vector<Var> bound = model_.params().bind(tape);

  // Thresholds advance only once the step is known to be finite.
  std::vector<ThresholdState> saved;
  for (const auto& layer : model_.moe_layers()) saved.push_back(layer.threshold);
  const BatchLoss result = compute_batch_loss(model_, bound, batch, config_.weights, {Mode::Train, true});

  const LossBreakdown& l = result.loss;
  if (!std::isfinite(l.total_value)) {
    for (std::size_t i = 0; i < saved.size(); ++i) model_.moe_layers()[i].threshold = saved[i];
    throw NumericError(fmt::format("non-finite loss at step {}: diffusion={} plr={} sim={} blc={} total={}", step_,
                                   l.diffusion, l.plr, l.sim, l.blc, l.total_value));
  }

  LogRecord rec;
  rec.step = step_;
  rec.diffusion = l.diffusion;
  rec.plr = l.plr;
  rec.sim = l.sim;
  rec.blc = l.blc;
  rec.total = l.total_value;
  const auto& layers = result.output.layers;
  if (!layers.empty()) {
    double sum = 0.0, sum_sq = 0.0;
    std::size_t n = 0;
    for (const LayerOutput& layer : layers) {
      const Tensor& mask = layer.route.mask;
      rec.maxvio += max_violation(mask, config_.model.k);
      rec.comb += combination_usage(mask).ratio;
      const std::size_t e = mask.shape().back();
      for (std::size_t base = 0; base < mask.size(); base += e) {
        double a = 0.0;
        for (std::size_t j = 0; j < e; ++j) a += mask[base + j];
        sum += a;
        sum_sq += a * a;
        ++n;
      }
    }
    rec.maxvio /= static_cast<double>(layers.size());
    rec.comb /= static_cast<double>(layers.size());
    rec.alloc_mean = sum / static_cast<double>(n);
    rec.alloc_std = std::sqrt(std::max(0.0, sum_sq / static_cast<double>(n) - rec.alloc_mean * rec.alloc_mean));
  }

  const Gradients grads = tape.backward(l.total);
  apply_adamw(bound, grads);
  ++step_;
  return rec;
}

void Trainer::apply_adamw(const std::vector<Var>& bound, const Gradients& grads) {
  ++adam_.t;
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(adam_.t));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(adam_.t));
  const double b1 = config_.beta1, b2 = config_.beta2, lr = config_.lr, wd = config_.weight_decay;
  const double d = config_.ema_decay;
  ParameterStore& ps = model_.params();
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const Tensor& g = grads[bound[i]];
    Tensor& p = ps.value(i);
    Tensor& m = adam_.m[i];
    Tensor& v = adam_.v[i];
    Tensor& shadow = ema_[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = b1 * m[j] + (1.0 - b1) * g[j];
      v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
      const double step = (m[j] / c1) / (std::sqrt(v[j] / c2) + config_.adam_eps) + wd * p[j];
      p[j] -= lr * step;
      shadow[j] = d * shadow[j] + (1.0 - d) * p[j];
    }
  }
}

Denoiser Trainer::ema_model() const {
  Denoiser copy = model_;
  for (std::size_t i = 0; i < ema_.size(); ++i) copy.params().value(i) = ema_[i];
  return copy;
}

SampleResult sample(Denoiser& model, const NoiseSchedule& schedule, std::span<const std::size_t> labels,
                    std::uint64_t seed, double clip) {
  const DenoiserConfig& cfg = model.config();
  if (schedule.steps != cfg.timesteps) {
    throw ConfigError(fmt::format("schedule has {} steps, model expects {}", schedule.steps, cfg.timesteps));
  }
  const std::size_t n = labels.size();
  Rng rng(derive_seed(seed, std::string_view("sample")));
  Tensor x = Tensor::normal({n, cfg.tokens, cfg.data_dim}, 0.0, 1.0, rng);
  SampleResult result;
  for (std::size_t t = schedule.steps; t >= 1; --t) {
    const std::vector<std::size_t> tv(n, t);
    Tape tape;
    const std::vector<Var> bound = model.params().bind(tape, false);
    const DenoiserOutput out = model.forward(bound, x, tv, labels, {Mode::Infer, false});

    SampleStep rec;
    rec.t = t;
    for (const LayerOutput& layer : out.layers) {
      rec.masks.push_back(layer.route.mask);
      const Tensor& m = layer.route.mask;
      double active = 0.0;
      for (double v : m.values()) active += v;
      rec.mean_active += active / static_cast<double>(m.size() / m.shape().back());
    }
    if (!out.layers.empty()) rec.mean_active /= static_cast<double>(out.layers.size());
    result.steps.push_back(std::move(rec));

    Tensor x0 = predict_x0(x, out.prediction.value(), tv, schedule, cfg.target);
    for (double& v : x0.values()) v = std::clamp(v, -clip, clip);
    const double ab = schedule.alpha_bar[t], ab_prev = schedule.alpha_bar[t - 1], beta = schedule.beta[t];
    const double c0 = std::sqrt(ab_prev) * beta / (1.0 - ab);
    const double ct = std::sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab);
    const double sigma = t > 1 ? std::sqrt(beta * (1.0 - ab_prev) / (1.0 - ab)) : 0.0;
    std::normal_distribution<double> normal(0.0, 1.0);
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double noise = t > 1 ? normal(rng) : 0.0;
      x[i] = c0 * x0[i] + ct * x[i] + sigma * noise;
    }
    if (!x.all_finite()) throw NumericError(fmt::format("sampling produced non-finite values at t={}", t));
  }
  result.x0 = std::move(x);
  return result;
}

AllocationReport timestep_allocation(Denoiser& model, const SyntheticDataset& data, const NoiseSchedule& schedule,
                                     std::size_t samples_per_step, std::size_t buckets, std::uint64_t seed,
                                     Mode mode) {
  const DenoiserConfig& cfg = model.config();
  AllocationReport report;
  if (cfg.dense) return report;
  std::vector<std::vector<AllocationProfile>> parts(cfg.layers);
  for (std::size_t t = 1; t <= schedule.steps; ++t) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(t)));
    const DiffusionBatch batch = make_batch_at(data, schedule, cfg.target, samples_per_step, t, rng);
    Tape tape;
    const std::vector<Var> bound = model.params().bind(tape, false);
    const DenoiserOutput out = model.forward(bound, batch.x_t, batch.t, batch.labels, {mode, false});
    for (std::size_t i = 0; i < out.layers.size(); ++i) {
      parts[i].push_back(allocation_profile(out.layers[i].route.mask, batch.t, schedule.steps, buckets));
    }
  }
  for (const auto& p : parts) report.per_layer.push_back(merge_profiles(p));

  AllocationProfile& overall = report.overall;
  overall.edges = report.per_layer.front().edges;
  overall.tokens = report.per_layer.front().tokens;
  overall.mean.resize(buckets);
  for (std::size_t b = 0; b < buckets; ++b) {
    if (!report.per_layer.front().mean[b]) continue;
    double acc = 0.0;
    for (const AllocationProfile& p : report.per_layer) acc += *p.mean[b];
    overall.mean[b] = acc / static_cast<double>(report.per_layer.size());
  }
  return report;
}

double RoutingReport::mean_maxvio() const {
  if (maxvio.empty()) return 0.0;
  double s = 0.0;
  for (double v : maxvio) s += v;
  return s / static_cast<double>(maxvio.size());
}

double RoutingReport::mean_comb() const {
  if (comb.empty()) return 0.0;
  double s = 0.0;
  for (const auto& c : comb) s += c.ratio;
  return s / static_cast<double>(comb.size());
}

RoutingReport routing_report(Denoiser& model, const SyntheticDataset& data, const NoiseSchedule& schedule,
                             std::size_t batches, std::size_t batch_size, std::uint64_t seed, Mode mode) {
  const DenoiserConfig& cfg = model.config();
  RoutingReport report;
  if (cfg.dense || batches == 0) return report;
  std::vector<std::vector<Tensor>> masks(cfg.layers);
  for (std::size_t b = 0; b < batches; ++b) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(b)));
    const DiffusionBatch batch = make_batch(data, schedule, cfg.target, batch_size, rng);
    Tape tape;
    const std::vector<Var> bound = model.params().bind(tape, false);
    const DenoiserOutput out = model.forward(bound, batch.x_t, batch.t, batch.labels, {mode, false});
    for (std::size_t i = 0; i < out.layers.size(); ++i) masks[i].push_back(out.layers[i].route.mask);
  }
  for (const auto& layer_masks : masks) {
    const Tensor pooled = concat_rows(layer_masks);
    report.maxvio.push_back(max_violation(pooled, cfg.k));
    report.comb.push_back(combination_usage(pooled));
    double active = 0.0;
    for (double v : pooled.values()) active += v;
    report.activation_rate.push_back(active / static_cast<double>(pooled.size()));
  }
  return report;
}

}  // namespace moerace
