// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <ostream>

#include <fmt/format.h>

#include "CLI11.hpp"
#include "moerace/commands.hpp"
#include "moerace/errors.hpp"

namespace moerace {
namespace {

// Long flags take dashes on the command line; the underscore spelling is
// what config files and config.txt snapshots use.
std::string flag(const std::string& key) {
  std::string dashed = key;
  std::replace(dashed.begin(), dashed.end(), '_', '-');
  return dashed == key ? "--" + key : "--" + dashed + ",--" + key;
}

void add_global_options(CLI::App& app, RunConfig& c) {
  // Later flags override earlier ones and config-file values.
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.set_config("--config", "", "flat key = value config file (schema_version = 1)");
  app.add_option(flag("schema_version"), c.schema_version, "config schema version")->group("");
  app.add_option(flag("seed"), c.seed, "master seed");
  app.add_option(flag("out"), c.out, "output directory");
  app.add_option(flag("strategy"), c.strategy,
                 "token-choice|expert-choice|bl-choice|be-choice|le-choice|expert-race");
  app.add_option(flag("gating"), c.gating, "softmax|sigmoid|identity");
  app.add_option(flag("k"), c.k, "average active experts per token");
  app.add_option(flag("experts"), c.experts, "experts per MoE layer");
  app.add_option(flag("steps"), c.steps, "total training steps");
  app.add_option(flag("dispatch"), c.dispatch, "sparse|dense expert dispatch");
  app.add_option(flag("batch"), c.batch, "batch size B");
  app.add_option(flag("tokens"), c.tokens, "tokens per sample L");
  app.add_option(flag("model_dim"), c.model_dim, "model width D");
  app.add_option(flag("layers"), c.layers, "residual blocks");
  app.add_option(flag("data_dim"), c.data_dim, "features per token");
  app.add_option(flag("classes"), c.classes, "class labels");
  app.add_option(flag("ffn_mult"), c.ffn_mult, "dense FFN width / model width");
  app.add_option(flag("dense"), c.dense, "plain FFN blocks instead of MoE");
  app.add_option(flag("timesteps"), c.timesteps, "diffusion steps T");
  app.add_option(flag("schedule"), c.schedule, "cosine|linear");
  app.add_option(flag("target"), c.target, "eps|x0|v");
  app.add_option(flag("separation"), c.separation, "class mean separation");
  app.add_option(flag("sigma_min"), c.sigma_min, "per-token std at the first token");
  app.add_option(flag("sigma_max"), c.sigma_max, "per-token std at the last token");
  app.add_option(flag("lr"), c.lr, "AdamW learning rate");
  app.add_option(flag("ema_decay"), c.ema_decay, "weight EMA decay");
  app.add_option(flag("w_plr"), c.w_plr, "per-layer regularization weight");
  app.add_option(flag("w_sim"), c.w_sim, "router similarity loss weight");
  app.add_option(flag("w_blc"), c.w_blc, "balance loss weight");
  app.add_option(flag("checkpoint_every"), c.checkpoint_every, "periodic checkpoint interval (0 = final only)");
  app.add_option(flag("eval_batches"), c.eval_batches, "held-out batches for routing metrics");
  app.add_option(flag("eval_batch_size"), c.eval_batch_size, "held-out batch size");
  app.add_option(flag("alloc_samples"), c.alloc_samples, "samples per timestep for allocation profiles");
  app.add_option(flag("buckets"), c.buckets, "timestep buckets");
  app.add_option(flag("draws"), c.draws, "route-sim score draws");
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Unified top-K MoE routing engine and toy diffusion harness", "moerace"};
  app.require_subcommand(1);
  RunConfig config;
  add_global_options(app, config);

  std::vector<std::string> strategies;
  auto* route_sim_cmd = app.add_subcommand("route-sim", "compare routing strategies on random scores");
  route_sim_cmd->add_option("--strategies", strategies, "comma-separated strategies (default: all valid)")
      ->delimiter(',')
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);

  std::string resume;
  auto* train_cmd = app.add_subcommand("train", "train the toy denoiser");
  train_cmd->add_option("--resume", resume, "checkpoint to resume from");

  std::string checkpoint;
  std::string mode = "infer";
  bool use_ema = false;
  auto* metrics_cmd = app.add_subcommand("metrics", "routing metrics for a checkpoint");
  metrics_cmd->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  metrics_cmd->add_option("--mode", mode, "infer|train routing")->check(CLI::IsMember({"infer", "train"}));
  metrics_cmd->add_flag("--ema", use_ema, "evaluate EMA weights");

  std::vector<std::string> arms;
  auto* ablate_cmd = app.add_subcommand("ablate", "train one run per arm and tabulate");
  ablate_cmd->add_option("--arms", arms, "strategy[:gating[:none|blc|sim]], comma-separated")
      ->delimiter(',')
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll)
      ->required();

  for (auto* sub : {route_sim_cmd, train_cmd, metrics_cmd, ablate_cmd}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (route_sim_cmd->parsed()) {
      const ScoreShape shape{config.batch, config.tokens, config.experts};
      std::vector<Strategy> list;
      if (strategies.empty()) {
        list = valid_strategies(shape, config.k);
      } else {
        for (const std::string& s : strategies) list.push_back(parse_strategy(s));
      }
      cmd_route_sim(config, list, out);
    } else if (train_cmd->parsed()) {
      cmd_train(config, resume.empty() ? std::nullopt : std::optional<std::filesystem::path>(resume), out);
    } else if (metrics_cmd->parsed()) {
      cmd_metrics(config, checkpoint, mode == "train" ? Mode::Train : Mode::Infer, use_ema, out);
    } else if (ablate_cmd->parsed()) {
      std::vector<ArmSpec> specs;
      for (const std::string& a : arms) specs.push_back(parse_arm(a, config));
      cmd_ablate(config, specs, out);
    }
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << '\n';
    return 3;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return 2;
  } catch (const StateError& e) {
    err << "state error: " << e.what() << '\n';
    return 2;
  } catch (const ShapeError& e) {
    err << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace moerace
