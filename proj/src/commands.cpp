// SPDX-License-Identifier: Apache-2.0
#include "moerace/commands.hpp"

#include <algorithm>
#include <fstream>
#include <ostream>

#include <fmt/format.h>

#include "json.hpp"
#include "moerace/errors.hpp"

namespace moerace {
namespace {

using nlohmann::json;
namespace fs = std::filesystem;

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw ConfigError(fmt::format("cannot write '{}'", path.string()));
  out << text;
}

std::string strategy_list(const std::vector<Strategy>& list) {
  std::string s;
  for (Strategy st : list) s += (s.empty() ? "" : ", ") + std::string(to_string(st));
  return s.empty() ? "none" : s;
}

std::size_t checked_budget(Strategy s, ScoreShape shape, std::size_t k) {
  try {
    return effective_k(s, shape, k);
  } catch (const ConfigError& e) {
    throw ConfigError(fmt::format("{}; valid strategies for B={}, L={}, E={}, k={}: {}", e.what(), shape.batch,
                                  shape.tokens, shape.experts, k, strategy_list(valid_strategies(shape, k))));
  }
}

json profile_json(const AllocationProfile& p) {
  json mean = json::array();
  for (const auto& m : p.mean) mean.push_back(m ? json(*m) : json(nullptr));
  return {{"edges", p.edges}, {"mean", mean}, {"tokens", p.tokens},
          {"overall_mean", p.overall_mean()}, {"variance", p.across_bucket_variance()}};
}

json eval_json(const EvalSummary& e) {
  json j{{"available", e.available}};
  if (!e.available) {
    j["note"] = e.note;
    return j;
  }
  json layers = json::array();
  for (std::size_t i = 0; i < e.routing.maxvio.size(); ++i) {
    const CombinationUsage& c = e.routing.comb[i];
    layers.push_back({{"layer", i},
                      {"maxvio", e.routing.maxvio[i]},
                      {"comb", c.ratio},
                      {"comb_bins", c.bins_used},
                      {"comb_no_pairs", c.no_pairs},
                      {"activation_rate", e.routing.activation_rate[i]},
                      {"allocation", profile_json(e.allocation.per_layer[i])}});
  }
  j["layers"] = std::move(layers);
  j["maxvio"] = e.routing.mean_maxvio();
  j["comb"] = e.routing.mean_comb();
  j["allocation"] = profile_json(e.allocation.overall);
  j["alloc_variance"] = e.alloc_variance;
  return j;
}

json log_json(const LogRecord& r) {
  return {{"step", r.step},     {"diffusion", r.diffusion}, {"plr", r.plr},           {"sim", r.sim},
          {"blc", r.blc},       {"total", r.total},         {"maxvio", r.maxvio},     {"comb", r.comb},
          {"alloc_mean", r.alloc_mean}, {"alloc_std", r.alloc_std}};
}

std::string balance_name(Balance b) {
  switch (b) {
    case Balance::None: return "none";
    case Balance::BalanceLoss: return "blc";
    case Balance::Similarity: return "sim";
  }
  return "none";
}

}  // namespace

// ---- route-sim --------------------------------------------------------------

std::vector<RouteSimRow> route_sim(const RunConfig& config, const std::vector<Strategy>& strategies) {
  const ScoreShape shape{config.batch, config.tokens, config.experts};
  const Gating gating = parse_gating(config.gating);
  std::vector<RouteSimRow> rows;
  for (Strategy s : strategies) {
    RouteSimRow r;
    r.strategy = s;
    r.budget = checked_budget(s, shape, config.k);
    const SelectionLayout layout = selection_layout(s, shape);
    r.rows = layout.rows;
    r.pool = layout.cols;
    rows.push_back(r);
  }
  checked_budget(Strategy::ExpertRace, shape, config.k);
  if (config.draws == 0) return rows;

  for (std::size_t d = 0; d < config.draws; ++d) {
    Rng rng(derive_seed(config.seed, static_cast<std::uint64_t>(d)));
    const Tensor scores =
        apply_gating(Tensor::normal({shape.batch, shape.tokens, shape.experts}, 0.0, 1.0, rng), gating);
    const double race = routing_objective(scores, select_topk(scores, Strategy::ExpertRace, config.k).mask);
    for (RouteSimRow& r : rows) {
      const Tensor mask = select_topk(scores, r.strategy, config.k).mask;
      const double obj = routing_objective(scores, mask);
      r.mean_objective += obj;
      r.mean_gap += race - obj;
      if (race > obj) r.strict_fraction += 1.0;
      r.mean_maxvio += max_violation(mask, config.k);
      r.mean_comb += combination_usage(mask).ratio;
    }
  }
  const double n = static_cast<double>(config.draws);
  for (RouteSimRow& r : rows) {
    r.mean_objective /= n;
    r.mean_gap /= n;
    r.strict_fraction /= n;
    r.mean_maxvio /= n;
    r.mean_comb /= n;
  }
  return rows;
}

std::vector<RouteSimRow> cmd_route_sim(const RunConfig& config, const std::vector<Strategy>& strategies,
                                       std::ostream& log) {
  const std::vector<RouteSimRow> rows = route_sim(config, strategies);
  const fs::path out = config.out;
  std::string csv = "strategy,rows,pool,budget,mean_objective,mean_gap,strict_fraction,mean_maxvio,mean_comb\n";
  json records = json::array();
  for (const RouteSimRow& r : rows) {
    csv += fmt::format("{},{},{},{},{},{},{},{},{}\n", to_string(r.strategy), r.rows, r.pool, r.budget,
                       r.mean_objective, r.mean_gap, r.strict_fraction, r.mean_maxvio, r.mean_comb);
    records.push_back({{"strategy", to_string(r.strategy)},
                       {"rows", r.rows},
                       {"pool", r.pool},
                       {"budget", r.budget},
                       {"mean_objective", r.mean_objective},
                       {"mean_gap", r.mean_gap},
                       {"strict_fraction", r.strict_fraction},
                       {"mean_maxvio", r.mean_maxvio},
                       {"mean_comb", r.mean_comb}});
  }
  write_text(out / "route_sim.csv", csv);
  write_text(out / "route_sim.json", json{{"draws", config.draws}, {"rows", records}}.dump(2) + "\n");
  write_config(out / "config.txt", config);
  log << fmt::format("route-sim: {} strategies x {} draws -> {}\n", rows.size(), config.draws,
                     (out / "route_sim.csv").string());
  return rows;
}

// ---- train ------------------------------------------------------------------

EvalSummary evaluate_model(Denoiser& model, const RunConfig& config, Mode mode) {
  EvalSummary e;
  if (model.config().dense) {
    e.note = "dense model has no routing";
    return e;
  }
  const TrainConfig tc = config.training();
  const SyntheticDataset data(tc.data());
  const NoiseSchedule schedule = build_schedule(tc.model.timesteps, tc.schedule);
  try {
    e.routing = routing_report(model, data, schedule, config.eval_batches, config.eval_batch_size,
                               derive_seed(config.seed, std::string_view("eval")), mode);
    e.allocation = timestep_allocation(model, data, schedule, config.alloc_samples, config.buckets,
                                       derive_seed(config.seed, std::string_view("alloc")), mode);
  } catch (const StateError& err) {
    e.note = err.what();
    return e;
  }
  e.available = true;
  e.alloc_variance = e.allocation.overall.across_bucket_variance();
  return e;
}

TrainSummary cmd_train(const RunConfig& config, const std::optional<fs::path>& resume, std::ostream& log) {
  config.validate();
  const fs::path out = config.out;
  Trainer trainer(config.training());
  const ConfigMap map = config.to_map();
  if (resume) {
    const CheckpointInfo info = read_checkpoint_info(*resume);
    const std::vector<std::string> diff = config_diff(info.config, map);
    if (!diff.empty()) {
      std::string msg = fmt::format("refusing to resume from '{}': config differs", resume->string());
      for (const std::string& line : diff) msg += "\n  " + line;
      throw ConfigError(msg);
    }
    load_checkpoint(*resume, trainer);
    log << fmt::format("resumed from {} at step {}\n", resume->string(), trainer.steps_done());
  }

  fs::create_directories(out);
  write_config(out / "config.txt", config);
  const fs::path log_path = out / "train_log.csv";
  const bool append = resume && fs::exists(log_path);
  std::ofstream csv(log_path, append ? std::ios::app : std::ios::trunc);
  if (!csv) throw ConfigError(fmt::format("cannot write '{}'", log_path.string()));
  if (!append) csv << LogRecord::csv_header() << '\n';

  TrainSummary summary;
  while (trainer.steps_done() < config.steps) {
    const LogRecord rec = trainer.step();
    csv << rec.csv_row() << '\n';
    summary.log.push_back(rec);
    if (config.checkpoint_every > 0 && trainer.steps_done() % config.checkpoint_every == 0) {
      save_checkpoint(out / fmt::format("checkpoint_step{}.bin", trainer.steps_done()), trainer, map);
    }
  }
  csv.flush();
  save_checkpoint(out / "checkpoint.bin", trainer, map);

  if (!summary.log.empty()) {
    const std::size_t tail = std::min<std::size_t>(10, summary.log.size());
    for (std::size_t i = summary.log.size() - tail; i < summary.log.size(); ++i) {
      summary.final_loss += summary.log[i].diffusion;
    }
    summary.final_loss /= static_cast<double>(tail);
  }
  summary.eval = evaluate_model(trainer.model(), config, Mode::Infer);

  json j{{"steps", trainer.steps_done()}, {"final_loss", summary.final_loss}, {"eval", eval_json(summary.eval)}};
  if (!summary.log.empty()) {
    j["first"] = log_json(summary.log.front());
    j["last"] = log_json(summary.log.back());
  }
  write_text(out / "summary.json", j.dump(2) + "\n");
  log << fmt::format("train: {} steps, final loss {:.6f} -> {}\n", trainer.steps_done(), summary.final_loss,
                     out.string());
  return summary;
}

// ---- metrics ----------------------------------------------------------------

EvalSummary cmd_metrics(const RunConfig& overrides, const fs::path& checkpoint, Mode mode, bool use_ema,
                        std::ostream& log) {
  const CheckpointInfo info = read_checkpoint_info(checkpoint);
  RunConfig config = RunConfig::from_map(info.config);
  config.out = overrides.out;
  config.eval_batches = overrides.eval_batches;
  config.eval_batch_size = overrides.eval_batch_size;
  config.alloc_samples = overrides.alloc_samples;
  config.buckets = overrides.buckets;
  config.validate();

  Denoiser model(config.training().model, config.seed);
  load_model(checkpoint, model, use_ema);
  EvalSummary e = evaluate_model(model, config, mode);
  if (!e.available && !model.config().dense) {
    throw StateError(fmt::format("{}; run `moerace train` first or use --mode train", e.note));
  }
  json j{{"checkpoint", checkpoint.string()},
         {"step", info.step},
         {"mode", mode == Mode::Infer ? "infer" : "train"},
         {"weights", use_ema ? "ema" : "raw"},
         {"eval", eval_json(e)}};
  json taus = json::array();
  for (const auto& layer : model.moe_layers()) {
    taus.push_back(layer.threshold.tau ? json(*layer.threshold.tau) : json(nullptr));
  }
  j["tau"] = std::move(taus);
  const fs::path out = config.out;
  write_text(out / "metrics.json", j.dump(2) + "\n");
  log << fmt::format("metrics: maxvio {:.4f}, comb {:.4f} -> {}\n", e.routing.mean_maxvio(), e.routing.mean_comb(),
                     (out / "metrics.json").string());
  return e;
}

// ---- ablate -----------------------------------------------------------------

std::string ArmSpec::name() const {
  return fmt::format("{}_{}_{}", to_string(strategy), to_string(gating), balance_name(balance));
}

ArmSpec parse_arm(const std::string& text, const RunConfig& base) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  while (true) {
    const std::size_t colon = text.find(':', start);
    parts.push_back(text.substr(start, colon - start));
    if (colon == std::string::npos) break;
    start = colon + 1;
  }
  if (parts.empty() || parts.size() > 3) {
    throw ConfigError(fmt::format("arm '{}': expected strategy[:gating[:balance]]", text));
  }
  ArmSpec arm;
  arm.strategy = parse_strategy(parts[0].empty() ? base.strategy : parts[0]);
  arm.gating = parse_gating(parts.size() > 1 && !parts[1].empty() ? parts[1] : base.gating);
  const std::string balance = parts.size() > 2 ? parts[2] : "sim";
  if (balance == "none") {
    arm.balance = Balance::None;
  } else if (balance == "blc") {
    arm.balance = Balance::BalanceLoss;
  } else if (balance == "sim") {
    arm.balance = Balance::Similarity;
  } else {
    throw ConfigError(fmt::format("arm '{}': unknown balance setting '{}' (expected none|blc|sim)", text, balance));
  }
  return arm;
}

RunConfig arm_config(const RunConfig& base, const ArmSpec& arm) {
  RunConfig c = base;
  c.strategy = std::string(to_string(arm.strategy));
  c.gating = std::string(to_string(arm.gating));
  const double w_sim = base.w_sim > 0.0 ? base.w_sim : 1e-4;
  const double w_blc = base.w_blc > 0.0 ? base.w_blc : 1e-2;
  c.w_sim = arm.balance == Balance::Similarity ? w_sim : 0.0;
  c.w_blc = arm.balance == Balance::BalanceLoss ? w_blc : 0.0;
  c.out = (fs::path(base.out) / "arms" / arm.name()).string();
  return c;
}

std::vector<ArmResult> cmd_ablate(const RunConfig& base, const std::vector<ArmSpec>& arms, std::ostream& log) {
  if (arms.empty()) throw ConfigError("ablate: no arms given");
  for (const ArmSpec& arm : arms) arm_config(base, arm).validate();
  std::vector<ArmResult> results;
  std::string csv = "arm,strategy,gating,balance,final_loss,maxvio,comb,alloc_variance\n";
  for (const ArmSpec& arm : arms) {
    log << fmt::format("ablate: arm {}\n", arm.name());
    ArmResult r{arm, cmd_train(arm_config(base, arm), std::nullopt, log)};
    const EvalSummary& e = r.summary.eval;
    csv += fmt::format("{},{},{},{},{},{},{},{}\n", arm.name(), to_string(arm.strategy), to_string(arm.gating),
                       balance_name(arm.balance), r.summary.final_loss, e.routing.mean_maxvio(),
                       e.routing.mean_comb(), e.alloc_variance);
    results.push_back(std::move(r));
  }
  write_text(fs::path(base.out) / "ablate.csv", csv);
  write_config(fs::path(base.out) / "config.txt", base);
  return results;
}

}  // namespace moerace
