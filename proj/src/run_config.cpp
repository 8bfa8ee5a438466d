// SPDX-License-Identifier: Apache-2.0
#include "moerace/run_config.hpp"

#include <charconv>
#include <fstream>
#include <type_traits>

#include <fmt/format.h>

#include "moerace/errors.hpp"

namespace moerace {
namespace {

template <typename Config, typename F>
void visit_fields(Config& c, F&& f) {
  f("schema_version", c.schema_version);
  f("seed", c.seed);
  f("out", c.out);
  f("strategy", c.strategy);
  f("gating", c.gating);
  f("k", c.k);
  f("experts", c.experts);
  f("dispatch", c.dispatch);
  f("batch", c.batch);
  f("tokens", c.tokens);
  f("model_dim", c.model_dim);
  f("layers", c.layers);
  f("data_dim", c.data_dim);
  f("classes", c.classes);
  f("ffn_mult", c.ffn_mult);
  f("dense", c.dense);
  f("timesteps", c.timesteps);
  f("schedule", c.schedule);
  f("target", c.target);
  f("separation", c.separation);
  f("sigma_min", c.sigma_min);
  f("sigma_max", c.sigma_max);
  f("steps", c.steps);
  f("lr", c.lr);
  f("ema_decay", c.ema_decay);
  f("w_plr", c.w_plr);
  f("w_sim", c.w_sim);
  f("w_blc", c.w_blc);
  f("checkpoint_every", c.checkpoint_every);
  f("eval_batches", c.eval_batches);
  f("eval_batch_size", c.eval_batch_size);
  f("alloc_samples", c.alloc_samples);
  f("buckets", c.buckets);
  f("draws", c.draws);
}

template <typename T>
void parse_value(const std::string& key, const std::string& text, T& out) {
  if constexpr (std::is_same_v<T, std::string>) {
    out = text;
  } else if constexpr (std::is_same_v<T, bool>) {
    if (text == "true" || text == "1") {
      out = true;
    } else if (text == "false" || text == "0") {
      out = false;
    } else {
      throw ConfigError(fmt::format("config key '{}': expected true|false, got '{}'", key, text));
    }
  } else {
    const char* end = text.data() + text.size();
    const auto [ptr, ec] = std::from_chars(text.data(), end, out);
    if (ec != std::errc() || ptr != end) {
      throw ConfigError(fmt::format("config key '{}': cannot parse '{}'", key, text));
    }
  }
}

}  // namespace

ConfigMap RunConfig::to_map() const {
  ConfigMap map;
  visit_fields(*this, [&](const char* key, const auto& value) { map[key] = fmt::format("{}", value); });
  return map;
}

RunConfig RunConfig::from_map(const ConfigMap& map) {
  RunConfig c;
  std::size_t used = 0;
  visit_fields(c, [&](const char* key, auto& value) {
    const auto it = map.find(key);
    if (it == map.end()) return;
    parse_value(key, it->second, value);
    ++used;
  });
  if (used != map.size()) {
    const ConfigMap known = RunConfig{}.to_map();
    for (const auto& [key, value] : map) {
      if (!known.count(key)) throw ConfigError(fmt::format("unknown config key '{}'", key));
    }
  }
  if (c.schema_version != kConfigSchemaVersion) {
    throw ConfigError(fmt::format("config schema_version {} unsupported (expected {})", c.schema_version,
                                  kConfigSchemaVersion));
  }
  return c;
}

void RunConfig::validate() const {
  if (schema_version != kConfigSchemaVersion) {
    throw ConfigError(fmt::format("config schema_version {} unsupported (expected {})", schema_version,
                                  kConfigSchemaVersion));
  }
  if (dispatch != "sparse" && dispatch != "dense") {
    throw ConfigError(fmt::format("unknown dispatch '{}' (expected sparse|dense)", dispatch));
  }
  if (buckets == 0 || eval_batch_size == 0 || alloc_samples == 0) {
    throw ConfigError("buckets, eval_batch_size and alloc_samples must be positive");
  }
  training().validate();
}

TrainConfig RunConfig::training() const {
  TrainConfig t;
  DenoiserConfig& m = t.model;
  m.layers = layers;
  m.model_dim = model_dim;
  m.tokens = tokens;
  m.data_dim = data_dim;
  m.classes = classes;
  m.timesteps = timesteps;
  m.ffn_mult = ffn_mult;
  m.k = k;
  m.experts = experts;
  m.route.strategy = parse_strategy(strategy);
  m.route.gating = parse_gating(gating);
  m.route.k = k;
  m.target = parse_parameterization(target);
  m.dense = dense;
  m.dispatch = dispatch == "dense" ? Dispatch::Dense : Dispatch::Sparse;
  t.separation = separation;
  t.sigma_min = sigma_min;
  t.sigma_max = sigma_max;
  t.schedule = parse_schedule(schedule);
  t.batch = batch;
  t.lr = lr;
  t.ema_decay = ema_decay;
  t.weights = {w_plr, w_sim, w_blc};
  t.seed = seed;
  return t;
}

const std::vector<std::string>& identity_keys() {
  static const std::vector<std::string> keys = {
      "seed",      "strategy", "gating",     "k",         "experts",   "dispatch", "batch",
      "tokens",    "model_dim", "layers",    "data_dim",  "classes",   "ffn_mult", "dense",
      "timesteps", "schedule", "target",     "separation", "sigma_min", "sigma_max", "lr",
      "ema_decay", "w_plr",    "w_sim",      "w_blc"};
  return keys;
}

std::vector<std::string> config_diff(const ConfigMap& checkpoint, const ConfigMap& run) {
  std::vector<std::string> out;
  for (const std::string& key : identity_keys()) {
    const auto a = checkpoint.find(key);
    const auto b = run.find(key);
    const std::string va = a == checkpoint.end() ? "<missing>" : a->second;
    const std::string vb = b == run.end() ? "<missing>" : b->second;
    if (va != vb) out.push_back(fmt::format("{}: checkpoint={} run={}", key, va, vb));
  }
  return out;
}

std::string format_config(const RunConfig& config) {
  std::string text;
  const ConfigMap map = config.to_map();
  text += fmt::format("schema_version = {}\n", config.schema_version);
  for (const auto& [key, value] : map) {
    if (key != "schema_version") text += fmt::format("{} = {}\n", key, value);
  }
  return text;
}

void write_config(const std::filesystem::path& path, const RunConfig& config) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw ConfigError(fmt::format("cannot write '{}'", path.string()));
  out << format_config(config);
}

}  // namespace moerace
