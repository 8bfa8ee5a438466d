// SPDX-License-Identifier: Apache-2.0
//
// Flat run configuration shared by every command. Serialized as
// `key = value` lines headed by `schema_version`, the same format the
// --config flag reads.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "moerace/checkpoint.hpp"
#include "moerace/trainer.hpp"

namespace moerace {

inline constexpr int kConfigSchemaVersion = 1;

struct RunConfig {
  int schema_version = kConfigSchemaVersion;
  std::uint64_t seed = 0;
  std::string out = "out";

  // routing
  std::string strategy = "expert-race";
  std::string gating = "identity";
  std::size_t k = 2;
  std::size_t experts = 8;
  std::string dispatch = "sparse";

  // model and data
  std::size_t batch = 32;
  std::size_t tokens = 16;
  std::size_t model_dim = 64;
  std::size_t layers = 4;
  std::size_t data_dim = 4;
  std::size_t classes = 8;
  std::size_t ffn_mult = 4;
  bool dense = false;
  std::size_t timesteps = 100;
  std::string schedule = "cosine";
  std::string target = "eps";
  double separation = 2.0;
  double sigma_min = 0.1;
  double sigma_max = 1.0;

  // optimization
  std::size_t steps = 200;
  double lr = 1e-4;
  double ema_decay = 0.999;
  double w_plr = 1e-2;
  double w_sim = 1e-4;
  double w_blc = 0.0;
  std::size_t checkpoint_every = 0;  // 0: final checkpoint only

  // evaluation
  std::size_t eval_batches = 8;
  std::size_t eval_batch_size = 32;
  std::size_t alloc_samples = 8;
  std::size_t buckets = 50;
  std::size_t draws = 1000;  // route-sim

  ConfigMap to_map() const;
  static RunConfig from_map(const ConfigMap& map);  // throws ConfigError on unknown keys

  // Validates names, extents and budget integrality; throws ConfigError.
  void validate() const;
  TrainConfig training() const;
};

// Keys that must agree between a checkpoint and a resuming run.
const std::vector<std::string>& identity_keys();

// "key: checkpoint=a run=b" lines for every differing identity key.
std::vector<std::string> config_diff(const ConfigMap& checkpoint, const ConfigMap& run);

std::string format_config(const RunConfig& config);
void write_config(const std::filesystem::path& path, const RunConfig& config);

}  // namespace moerace
