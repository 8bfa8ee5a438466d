// SPDX-License-Identifier: Apache-2.0
#include "moerace/parameters.hpp"

#include <algorithm>

#include <fmt/format.h>

#include "moerace/errors.hpp"

namespace moerace {

std::size_t ParameterStore::add(std::string name, Tensor value) {
  if (find(name)) throw ContractError(fmt::format("duplicate parameter '{}'", name));
  names_.push_back(std::move(name));
  values_.push_back(std::move(value));
  return values_.size() - 1;
}

std::optional<std::size_t> ParameterStore::find(std::string_view name) const {
  const auto it = std::find(names_.begin(), names_.end(), name);
  if (it == names_.end()) return std::nullopt;
  return static_cast<std::size_t>(it - names_.begin());
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const Tensor& t : values_) n += t.size();
  return n;
}

std::vector<Var> ParameterStore::bind(Tape& tape, bool requires_grad) const {
  std::vector<Var> out;
  out.reserve(values_.size());
  for (const Tensor& t : values_) out.push_back(tape.leaf(t, requires_grad));
  return out;
}

Tensor uniform_weight(std::size_t fan_in, std::size_t fan_out, double bound, std::uint64_t seed,
                      std::string_view init_key) {
  Rng rng(derive_seed(seed, init_key));
  return Tensor::uniform({fan_in, fan_out}, -bound, bound, rng);
}

}  // namespace moerace
