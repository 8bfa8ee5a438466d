// SPDX-License-Identifier: Apache-2.0
#include "moerace/checkpoint.hpp"

#include <array>
#include <cstring>
#include <fstream>

#include <fmt/format.h>
#include "json.hpp"

#include "moerace/errors.hpp"

namespace moerace {
namespace {

using nlohmann::json;

constexpr std::array<char, 8> kMagic = {'M', 'O', 'E', 'R', 'A', 'C', 'E', '\0'};

template <typename T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  return v;
}

void write_block(std::ostream& os, const std::vector<Tensor>& tensors) {
  for (const Tensor& t : tensors) os.write(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(double));
}

struct Parsed {
  json header;
  std::vector<double> payload;
};

Parsed parse(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(fmt::format("cannot open checkpoint '{}'", path.string()));
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kMagic) throw ConfigError(fmt::format("'{}' is not a checkpoint", path.string()));
  const auto version = read_pod<std::uint32_t>(in);
  if (version != kCheckpointVersion) {
    throw ConfigError(fmt::format("checkpoint version {} unsupported (expected {})", version, kCheckpointVersion));
  }
  const auto len = read_pod<std::uint64_t>(in);
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw ConfigError(fmt::format("checkpoint '{}' is truncated", path.string()));
  Parsed p;
  p.header = json::parse(text);
  const std::size_t count = p.header.at("payload_doubles").get<std::size_t>();
  p.payload.resize(count);
  in.read(reinterpret_cast<char*>(p.payload.data()), static_cast<std::streamsize>(count * sizeof(double)));
  if (!in) throw ConfigError(fmt::format("checkpoint '{}' is truncated", path.string()));
  return p;
}

// Validates the parameter table against `store`; returns scalars per block.
std::size_t check_layout(const json& header, const ParameterStore& store) {
  const json& table = header.at("params");
  if (table.size() != store.size()) {
    throw ConfigError(fmt::format("checkpoint has {} parameters, model has {}", table.size(), store.size()));
  }
  std::size_t offset = 0;
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto name = table[i].at("name").get<std::string>();
    const auto shape = table[i].at("shape").get<Shape>();
    if (name != store.name(i) || shape != store.value(i).shape()) {
      throw ConfigError(fmt::format("checkpoint parameter {} is {} {}, model expects {} {}", i, name,
                                    shape_str(shape), store.name(i), shape_str(store.value(i).shape())));
    }
    offset += shape_numel(shape);
  }
  return offset;
}

void fill(std::vector<Tensor>& dst, const std::vector<double>& src, std::size_t& cursor) {
  for (Tensor& t : dst) {
    std::memcpy(t.data(), src.data() + cursor, t.size() * sizeof(double));
    cursor += t.size();
  }
}

std::vector<Tensor> store_values(const ParameterStore& store) {
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < store.size(); ++i) out.push_back(store.value(i));
  return out;
}

void restore_thresholds(std::vector<MoeLayerParams>& layers, const Parsed& p, std::size_t cursor) {
  const auto n = p.header.at("moe_layers").get<std::size_t>();
  if (n != layers.size()) throw ConfigError(fmt::format("checkpoint has {} MoE layers, model has {}", n, layers.size()));
  for (MoeLayerParams& layer : layers) {
    const bool has = p.payload[cursor] != 0.0;
    layer.threshold.tau = has ? std::optional<double>(p.payload[cursor + 1]) : std::nullopt;
    layer.threshold.momentum = p.payload[cursor + 2];
    cursor += 3;
  }
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, Trainer& trainer, const ConfigMap& config) {
  const ParameterStore& store = trainer.model().params();
  const auto& layers = trainer.model().moe_layers();
  json header;
  header["config"] = config;
  header["step"] = trainer.steps_done();
  header["adam_step"] = trainer.adam().t;
  header["moe_layers"] = layers.size();
  json table = json::array();
  std::size_t offset = 0;
  for (std::size_t i = 0; i < store.size(); ++i) {
    table.push_back({{"name", store.name(i)}, {"shape", store.value(i).shape()}, {"offset", offset}});
    offset += store.value(i).size();
  }
  header["params"] = std::move(table);
  header["payload_doubles"] = 4 * offset + 3 * layers.size();
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError(fmt::format("cannot write checkpoint '{}'", tmp.string()));
    out.write(kMagic.data(), kMagic.size());
    write_pod(out, kCheckpointVersion);
    write_pod(out, static_cast<std::uint64_t>(text.size()));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    write_block(out, store_values(store));
    write_block(out, trainer.ema_shadow());
    write_block(out, trainer.adam().m);
    write_block(out, trainer.adam().v);
    for (const MoeLayerParams& layer : layers) {
      write_pod(out, layer.threshold.tau ? 1.0 : 0.0);
      write_pod(out, layer.threshold.tau.value_or(0.0));
      write_pod(out, layer.threshold.momentum);
    }
    if (!out) throw ConfigError(fmt::format("failed writing checkpoint '{}'", tmp.string()));
  }
  std::filesystem::rename(tmp, path);
}

CheckpointInfo read_checkpoint_info(const std::filesystem::path& path) {
  const Parsed p = parse(path);
  return {p.header.at("config").get<ConfigMap>(), p.header.at("step").get<std::size_t>()};
}

void load_checkpoint(const std::filesystem::path& path, Trainer& trainer) {
  const Parsed p = parse(path);
  ParameterStore& store = trainer.model().params();
  const std::size_t n = check_layout(p.header, store);
  std::size_t cursor = 0;
  std::vector<Tensor> values = store_values(store);
  fill(values, p.payload, cursor);
  for (std::size_t i = 0; i < store.size(); ++i) store.value(i) = std::move(values[i]);
  fill(trainer.ema_shadow(), p.payload, cursor);
  fill(trainer.adam().m, p.payload, cursor);
  fill(trainer.adam().v, p.payload, cursor);
  if (cursor != 4 * n) throw ContractError("checkpoint payload layout mismatch");
  restore_thresholds(trainer.model().moe_layers(), p, cursor);
  trainer.adam().t = p.header.at("adam_step").get<std::size_t>();
  trainer.set_steps_done(p.header.at("step").get<std::size_t>());
}

void load_model(const std::filesystem::path& path, Denoiser& model, bool use_ema) {
  const Parsed p = parse(path);
  ParameterStore& store = model.params();
  const std::size_t n = check_layout(p.header, store);
  std::size_t cursor = use_ema ? n : 0;
  std::vector<Tensor> values = store_values(store);
  fill(values, p.payload, cursor);
  for (std::size_t i = 0; i < store.size(); ++i) store.value(i) = std::move(values[i]);
  restore_thresholds(model.moe_layers(), p, 4 * n);
}

}  // namespace moerace
