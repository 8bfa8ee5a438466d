// SPDX-License-Identifier: Apache-2.0
//
// Small residual denoiser over (B, L, data_dim) token grids.
//
//   h    = x_t W_in + pos
//   cond = MLP(sinusoid(t)) + class_table[c]
//   per block:
//     shift1, scale1, gate1, shift2, scale2, gate2 = Linear(GELU(cond))
//     h += gate1 * TokenMix(LN(h) (1 + scale1) + shift1)   linear over L
//     h += gate2 * FFN(LN(h) (1 + scale2) + shift2)        MoE or dense
//   out  = (LN(h) (1 + scale) + shift) W_out
//
// Modulation and output projections are zero-initialized, so a fresh
// model predicts exactly zero.
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "moerace/autodiff.hpp"
#include "moerace/diffusion.hpp"
#include "moerace/moe_layer.hpp"
#include "moerace/parameters.hpp"
#include "moerace/router.hpp"

namespace moerace {

struct DenoiserConfig {
  std::size_t layers = 4;
  std::size_t model_dim = 64;
  std::size_t tokens = 16;
  std::size_t data_dim = 4;
  std::size_t classes = 8;
  std::size_t timesteps = 100;
  std::size_t ffn_mult = 4;  // dense FFN width = ffn_mult * model_dim
  std::size_t k = 2;
  std::size_t experts = 8;
  RouteConfig route;  // route.k is overwritten by k
  Parameterization target = Parameterization::Eps;
  bool dense = false;       // plain FFN blocks instead of MoE
  bool zero_init = true;    // zero modulation and output layers
  Dispatch dispatch = Dispatch::Sparse;

  FineGrainedConfig moe() const;
  void validate() const;  // throws ConfigError
};

struct BlockHandles {
  std::size_t w_mod = 0, b_mod = 0;  // (D, 6D), (6D)
  std::size_t w_mix = 0, b_mix = 0;  // (L, L), (L)
  FfnHandles dense_ffn;              // dense variant only
};

struct DenoiserHandles {
  std::size_t w_in = 0, b_in = 0;          // (data_dim, D), (D)
  std::size_t w_t1 = 0, b_t1 = 0;          // (D, D)
  std::size_t w_t2 = 0, b_t2 = 0;          // (D, D)
  std::size_t class_table = 0;             // (classes, D)
  std::size_t w_fmod = 0, b_fmod = 0;      // (D, 2D)
  std::size_t w_out = 0, b_out = 0;        // (D, data_dim)
  std::vector<BlockHandles> blocks;
};

// Fixed sinusoidal features: (n, dim) for positions `values`.
Tensor sinusoidal_embedding(std::span<const double> values, std::size_t dim);

struct ForwardOptions {
  Mode mode = Mode::Train;
  bool update_thresholds = true;  // train mode only
};

struct DenoiserOutput {
  Var prediction;                  // (B, L, data_dim)
  std::vector<LayerOutput> layers;  // MoE variant only
};

class Denoiser {
 public:
  Denoiser(DenoiserConfig config, std::uint64_t seed);

  const DenoiserConfig& config() const noexcept { return config_; }
  ParameterStore& params() noexcept { return store_; }
  const ParameterStore& params() const noexcept { return store_; }
  std::vector<MoeLayerParams>& moe_layers() noexcept { return moe_; }
  const std::vector<MoeLayerParams>& moe_layers() const noexcept { return moe_; }

  // `bound` comes from params().bind(tape). Train mode with
  // update_thresholds advances each layer's threshold.
  DenoiserOutput forward(std::span<const Var> bound, const Tensor& x_t, std::span<const std::size_t> t,
                         std::span<const std::size_t> labels, const ForwardOptions& options);

 private:
  Var modulate(const Var& h, const Var& shift, const Var& scale_by) const;

  DenoiserConfig config_;
  ParameterStore store_;
  DenoiserHandles handles_;
  std::vector<MoeLayerParams> moe_;
  Tensor positional_;  // (L, D)
};

}  // namespace moerace
