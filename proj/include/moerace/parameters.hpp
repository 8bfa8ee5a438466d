// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "moerace/autodiff.hpp"
#include "moerace/tensor.hpp"

namespace moerace {

// Named, ordered collection of trainable tensors. Models refer to entries
// by handle (insertion index); the optimizer, EMA shadow and checkpoints
// walk the same order.
class ParameterStore {
 public:
  std::size_t add(std::string name, Tensor value);

  std::size_t size() const noexcept { return values_.size(); }
  const std::string& name(std::size_t handle) const { return names_.at(handle); }
  const Tensor& value(std::size_t handle) const { return values_.at(handle); }
  Tensor& value(std::size_t handle) { return values_.at(handle); }
  std::optional<std::size_t> find(std::string_view name) const;
  std::size_t scalar_count() const;

  // One leaf per parameter, indexable by handle.
  std::vector<Var> bind(Tape& tape, bool requires_grad = true) const;

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
};

inline double xavier_bound(std::size_t fan_in, std::size_t fan_out) {
  return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

// (fan_in, fan_out) weight drawn from U(-bound, bound) on the stream keyed by `init_key`.
Tensor uniform_weight(std::size_t fan_in, std::size_t fan_out, double bound, std::uint64_t seed,
                      std::string_view init_key);

}  // namespace moerace
