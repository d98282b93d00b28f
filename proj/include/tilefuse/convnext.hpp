// Copyright (C) 2026 The tilefuse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "tilefuse/init.hpp"
#include "tilefuse/ops.hpp"

namespace tilefuse {

struct ConvBranchConfig {
  std::size_t in_channels = 3;
  std::size_t stem_stride = 4;
  std::array<std::size_t, 4> stage_channels{16, 32, 64, 128};
  std::array<std::size_t, 4> blocks_per_stage{1, 1, 2, 1};
  std::size_t kernel_size = 7;
  std::size_t mlp_ratio = 4;
  // Residual branch scale at init. The ConvNeXt recipe uses 1e-6 for
  // training stability; untrained desk models use 1 so blocks contribute.
  double layer_scale_init = 1.0;

  static constexpr std::size_t kDownsample = 2;

  std::size_t total_stride() const { return stem_stride * kDownsample * kDownsample * kDownsample; }

  void validate() const {
    if (total_stride() != 32)
      throw ConfigError("conv branch: total stride must be 32 (stem stride 4), got " + std::to_string(total_stride()));
    for (std::size_t i = 0; i < 4; ++i) {
      if (stage_channels[i] == 0) throw ConfigError("conv branch: zero stage width");
      if (i > 0 && stage_channels[i] != 2 * stage_channels[i - 1])
        throw ConfigError("conv branch: stage widths must double from stage to stage");
    }
    if (kernel_size % 2 == 0) throw ConfigError("conv branch: depthwise kernel must be odd");
    if (in_channels == 0 || mlp_ratio == 0) throw ConfigError("conv branch: zero in_channels or mlp_ratio");
  }

  static ConvBranchConfig paper_scale() {
    ConvBranchConfig c;
    c.stage_channels = {192, 384, 768, 1536};
    c.blocks_per_stage = {3, 3, 27, 3};
    c.layer_scale_init = 1e-6;
    return c;
  }
};

/// The four stage outputs F_vh^1..4, finest first.
template <std::floating_point T>
struct StageFeatureSet {
  std::array<Tensor<T>, 4> features;

  const Tensor<T>& operator[](std::size_t i) const { return features.at(i); }
};

/// Four-stage ConvNeXt backbone over a whole high-resolution image.
///
/// Stem: stride-4 patchify conv + channel norm. Stage transitions: channel
/// norm + stride-2 2x2 conv. Block: depthwise 7x7 -> norm -> pointwise x4 ->
/// gelu -> pointwise back -> layer scale -> residual.
template <std::floating_point T>
class ConvNextBranch {
 public:
  explicit ConvNextBranch(ConvBranchConfig config) : config_(std::move(config)) { config_.validate(); }

  const ConvBranchConfig& config() const { return config_; }

  /// Stage output dims for an input of `input` dims, without computing anything.
  std::array<Dims, 4> stage_dims(const Dims& input) const {
    check_input(input);
    std::array<Dims, 4> out;
    Dims cur = ops::conv2d_dims(input, stem_weight_dims(), {config_.stem_stride, 0, 1});
    for (std::size_t s = 0; s < 4; ++s) {
      if (s > 0) cur = ops::conv2d_dims(cur, down_weight_dims(s), {ConvBranchConfig::kDownsample, 0, 1});
      out[s] = cur;
    }
    return out;
  }

  ParamSet<T> init_params(std::uint64_t seed) const {
    ParamSet<T> p;
    const auto& ch = config_.stage_channels;
    auto tn = [&](const std::string& name, Dims d) { p.insert(name, init_trunc_normal<T>(seed, name, std::move(d))); };
    auto zeros = [&](const std::string& name, std::size_t n) { p.insert(name, init_constant<T>({n}, T(0))); };
    auto ones = [&](const std::string& name, std::size_t n) { p.insert(name, init_constant<T>({n}, T(1))); };

    tn("conv.stem.weight", stem_weight_dims());
    zeros("conv.stem.bias", ch[0]);
    ones("conv.stem.norm.weight", ch[0]);
    zeros("conv.stem.norm.bias", ch[0]);
    for (std::size_t s = 0; s < 4; ++s) {
      const std::string sp = "conv.stages." + std::to_string(s);
      const std::size_t c = ch[s];
      if (s > 0) {
        ones(sp + ".down.norm.weight", ch[s - 1]);
        zeros(sp + ".down.norm.bias", ch[s - 1]);
        tn(sp + ".down.weight", down_weight_dims(s));
        zeros(sp + ".down.bias", c);
      }
      for (std::size_t b = 0; b < config_.blocks_per_stage[s]; ++b) {
        const std::string bp = sp + ".blocks." + std::to_string(b);
        tn(bp + ".dw.weight", {c, 1, config_.kernel_size, config_.kernel_size});
        zeros(bp + ".dw.bias", c);
        ones(bp + ".norm.weight", c);
        zeros(bp + ".norm.bias", c);
        tn(bp + ".pw1.weight", {config_.mlp_ratio * c, c});
        zeros(bp + ".pw1.bias", config_.mlp_ratio * c);
        tn(bp + ".pw2.weight", {c, config_.mlp_ratio * c});
        zeros(bp + ".pw2.bias", c);
        p.insert(bp + ".gamma", init_constant<T>({c}, static_cast<T>(config_.layer_scale_init)));
      }
    }
    return p;
  }

  StageFeatureSet<T> forward_stages(const ParamSet<T>& p, const Tensor<T>& image) const {
    check_input(image.dims());
    StageFeatureSet<T> out;
    Tensor<T> x = ops::conv2d(image, p.at("conv.stem.weight"), p.at("conv.stem.bias"), {config_.stem_stride, 0, 1});
    x = ops::layer_norm_channels(x, p.at("conv.stem.norm.weight"), p.at("conv.stem.norm.bias"));
    for (std::size_t s = 0; s < 4; ++s) {
      const std::string sp = "conv.stages." + std::to_string(s);
      if (s > 0) {
        x = ops::layer_norm_channels(x, p.at(sp + ".down.norm.weight"), p.at(sp + ".down.norm.bias"));
        x = ops::conv2d(x, p.at(sp + ".down.weight"), p.at(sp + ".down.bias"), {ConvBranchConfig::kDownsample, 0, 1});
      }
      for (std::size_t b = 0; b < config_.blocks_per_stage[s]; ++b) x = block(p, sp + ".blocks." + std::to_string(b), x);
      out.features[s] = x;
    }
    return out;
  }

 private:
  Dims stem_weight_dims() const {
    return {config_.stage_channels[0], config_.in_channels, config_.stem_stride, config_.stem_stride};
  }

  Dims down_weight_dims(std::size_t s) const {
    return {config_.stage_channels[s], config_.stage_channels[s - 1], ConvBranchConfig::kDownsample,
            ConvBranchConfig::kDownsample};
  }

  void check_input(const Dims& d) const {
    const std::size_t st = config_.total_stride();
    if (d.size() != 3 || d[0] != config_.in_channels || d[1] % st != 0 || d[2] % st != 0)
      shape_fail("conv branch", "input " + dims_str(d) + " must be (" + std::to_string(config_.in_channels) +
                                    ",H,W) with H and W divisible by " + std::to_string(st));
  }

  Tensor<T> block(const ParamSet<T>& p, const std::string& bp, const Tensor<T>& x) const {
    const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    Tensor<T> y = ops::conv2d(x, p.at(bp + ".dw.weight"), p.at(bp + ".dw.bias"), {1, config_.kernel_size / 2, c});
    Tensor<T> t = ops::layer_norm(ops::to_tokens(y), p.at(bp + ".norm.weight"), p.at(bp + ".norm.bias"));
    t = ops::gelu(ops::linear(t, p.at(bp + ".pw1.weight"), p.at(bp + ".pw1.bias")));
    t = ops::linear(t, p.at(bp + ".pw2.weight"), p.at(bp + ".pw2.bias"));
    t = ops::mul_columns(t, p.at(bp + ".gamma"));
    return ops::add(x, ops::from_tokens(t, h, w));
  }

  ConvBranchConfig config_;
};

}  // namespace tilefuse
