// SPDX-License-Identifier: Apache-2.0
#include "moerace/denoiser.hpp"

#include <cmath>

#include <fmt/format.h>

#include "moerace/errors.hpp"

namespace moerace {

FineGrainedConfig DenoiserConfig::moe() const {
  FineGrainedConfig c;
  c.k = k;
  c.experts = experts;
  c.model_dim = model_dim;
  c.dense_hidden = ffn_mult * model_dim;
  c.target_dim = data_dim;
  return c;
}

void DenoiserConfig::validate() const {
  if (layers == 0 || model_dim == 0 || tokens == 0 || data_dim == 0 || classes == 0 || ffn_mult == 0) {
    throw ConfigError("denoiser extents (layers, model_dim, tokens, data_dim, classes, ffn_mult) must be positive");
  }
  if (timesteps < 2) throw ConfigError(fmt::format("timesteps must be >= 2, got {}", timesteps));
  if (!dense) moe().validate();
}

Tensor sinusoidal_embedding(std::span<const double> values, std::size_t dim) {
  Tensor out({values.size(), dim});
  const std::size_t half = dim / 2;
  for (std::size_t n = 0; n < values.size(); ++n) {
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
      out[n * dim + i] = std::sin(values[n] * freq);
      out[n * dim + half + i] = std::cos(values[n] * freq);
    }
  }
  return out;
}

Denoiser::Denoiser(DenoiserConfig config, std::uint64_t seed) : config_(config) {
  config_.validate();
  config_.route.k = config_.k;
  const std::size_t d = config_.model_dim, l_n = config_.tokens;
  DenoiserHandles& h = handles_;

  auto linear = [&](const std::string& name, std::size_t in, std::size_t out, bool zero, std::size_t& w,
                    std::size_t& b) {
    w = store_.add(name + ".w", zero ? Tensor({in, out}) : uniform_weight(in, out, xavier_bound(in, out), seed, name));
    b = store_.add(name + ".b", Tensor({out}));
  };

  linear("input", config_.data_dim, d, false, h.w_in, h.b_in);
  linear("time.fc1", d, d, false, h.w_t1, h.b_t1);
  linear("time.fc2", d, d, false, h.w_t2, h.b_t2);
  {
    Rng rng(derive_seed(seed, std::string_view("class_table")));
    h.class_table = store_.add("class_table", Tensor::normal({config_.classes, d}, 0.0, 0.02, rng));
  }

  const FineGrainedConfig moe_cfg = config_.moe();
  for (std::size_t i = 0; i < config_.layers; ++i) {
    const std::string prefix = fmt::format("block{}", i);
    BlockHandles bh;
    linear(prefix + ".mod", d, 6 * d, config_.zero_init, bh.w_mod, bh.b_mod);
    linear(prefix + ".mix", l_n, l_n, false, bh.w_mix, bh.b_mix);
    if (config_.dense) {
      bh.dense_ffn = init_ffn(store_, prefix + ".ffn", d, moe_cfg.dense_hidden, moe_cfg.dense_hidden, seed,
                              prefix + ".ffn0");
    } else {
      moe_.push_back(init_moe_params(store_, prefix, moe_cfg, seed));
    }
    h.blocks.push_back(bh);
  }
  linear("final.mod", d, 2 * d, config_.zero_init, h.w_fmod, h.b_fmod);
  linear("final.out", d, config_.data_dim, config_.zero_init, h.w_out, h.b_out);

  std::vector<double> positions(l_n);
  for (std::size_t i = 0; i < l_n; ++i) positions[i] = static_cast<double>(i);
  positional_ = sinusoidal_embedding(positions, d);
}

Var Denoiser::modulate(const Var& h, const Var& shift, const Var& scale_by) const {
  return add(mul(layer_norm(h), add_scalar(scale_by, 1.0)), shift);
}

DenoiserOutput Denoiser::forward(std::span<const Var> bound, const Tensor& x_t, std::span<const std::size_t> t,
                                 std::span<const std::size_t> labels, const ForwardOptions& options) {
  const std::size_t d = config_.model_dim, l_n = config_.tokens, data_dim = config_.data_dim;
  if (x_t.rank() != 3 || x_t.dim(1) != l_n || x_t.dim(2) != data_dim) {
    throw ShapeError(fmt::format("denoiser: expected x_t (B,{},{}), got {}", l_n, data_dim, shape_str(x_t.shape())));
  }
  const std::size_t batch = x_t.dim(0);
  if (t.size() != batch || labels.size() != batch) {
    throw ShapeError(fmt::format("denoiser: batch {} with {} timesteps and {} labels", batch, t.size(),
                                 labels.size()));
  }
  for (std::size_t c : labels) {
    if (c >= config_.classes) throw ContractError(fmt::format("class label {} >= {}", c, config_.classes));
  }
  if (bound.size() != store_.size()) throw ContractError("denoiser: bound parameters do not match the store");
  if (!bound.empty() && !bound[0].valid()) throw ContractError("denoiser: unbound parameters");
  Tape& tape = *bound[0].tape();
  const DenoiserHandles& h = handles_;
  auto p = [&](std::size_t handle) -> const Var& { return bound[handle]; };

  Var x = tape.constant(x_t.reshaped({batch * l_n, data_dim}));
  Var hid = reshape(matmul(x, p(h.w_in)) + p(h.b_in), {batch, l_n, d});
  hid = add(hid, tape.constant(positional_));

  std::vector<double> tv(t.begin(), t.end());
  const Var temb = tape.constant(sinusoidal_embedding(tv, d));
  const Var cond = add(matmul(gelu(matmul(temb, p(h.w_t1)) + p(h.b_t1)), p(h.w_t2)) + p(h.b_t2),
                       gather_rows(p(h.class_table), labels));
  const Var act = gelu(cond);

  auto per_token = [&](const Var& mod, std::size_t chunk) {
    return broadcast_axis(reshape(slice_last(mod, chunk * d, d), {batch, 1, d}), 1, l_n);
  };

  DenoiserOutput out;
  for (std::size_t i = 0; i < config_.layers; ++i) {
    const BlockHandles& bh = h.blocks[i];
    const Var mod = matmul(act, p(bh.w_mod)) + p(bh.b_mod);

    const Var u = modulate(hid, per_token(mod, 0), per_token(mod, 1));
    const Var lanes = reshape(permute(u, {0, 2, 1}), {batch * d, l_n});
    const Var mixed = permute(reshape(matmul(lanes, p(bh.w_mix)) + p(bh.b_mix), {batch, d, l_n}), {0, 2, 1});
    hid = add(hid, mul(per_token(mod, 2), mixed));

    const Var v = modulate(hid, per_token(mod, 3), per_token(mod, 4));
    Var ffn_out;
    if (config_.dense) {
      ffn_out = reshape(ffn_forward(reshape(v, {batch * l_n, d}), bh.dense_ffn, bound), {batch, l_n, d});
    } else {
      MoeForwardOptions mo;
      mo.route = config_.route;
      mo.mode = options.mode;
      mo.dispatch = config_.dispatch;
      const bool writes = options.mode == Mode::Train && options.update_thresholds;
      mo.threshold = (options.mode == Mode::Infer || writes) ? &moe_[i].threshold : nullptr;
      out.layers.push_back(moe_forward(v, moe_[i], bound, mo));
      ffn_out = out.layers.back().y;
    }
    hid = add(hid, mul(per_token(mod, 5), ffn_out));
  }

  const Var fmod = matmul(act, p(h.w_fmod)) + p(h.b_fmod);
  const Var final_h = modulate(hid, per_token(fmod, 0), per_token(fmod, 1));
  out.prediction =
      reshape(matmul(reshape(final_h, {batch * l_n, d}), p(h.w_out)) + p(h.b_out), {batch, l_n, data_dim});
  return out;
}

}  // namespace moerace
