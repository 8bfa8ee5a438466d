// SPDX-License-Identifier: Apache-2.0
//
// Binary checkpoint container.
//
//   "MOERACE\0"            8-byte magic
//   u32 version
//   u64 n, n bytes         JSON header: config key/values, step, Adam step,
//                          parameter names/shapes/offsets, layer count
//   f64 blocks             params, EMA shadow, Adam m, Adam v (store order),
//                          then per MoE layer: has_tau, tau, momentum
//
// Little-endian host layout; values round-trip bit-exactly.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "moerace/trainer.hpp"

namespace moerace {

inline constexpr std::uint32_t kCheckpointVersion = 1;

using ConfigMap = std::map<std::string, std::string>;

// Written through a temporary file and renamed into place.
void save_checkpoint(const std::filesystem::path& path, Trainer& trainer, const ConfigMap& config);

struct CheckpointInfo {
  ConfigMap config;
  std::size_t step = 0;
};
CheckpointInfo read_checkpoint_info(const std::filesystem::path& path);

// Restores parameters, EMA shadow, optimizer state, thresholds and step.
// Throws ConfigError when names or shapes disagree with the trainer's model.
void load_checkpoint(const std::filesystem::path& path, Trainer& trainer);

// Restores parameters (raw or EMA) and thresholds into a bare model.
void load_model(const std::filesystem::path& path, Denoiser& model, bool use_ema = false);

}  // namespace moerace
