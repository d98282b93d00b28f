// Copyright (C) 2026 The tilefuse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "tilefuse/convnext.hpp"
#include "tilefuse/crop_planner.hpp"
#include "tilefuse/init.hpp"
#include "tilefuse/vit.hpp"

// ConvNeXt-ViT fusion: align each conv stage to the ViT token grid, cut it
// into global/local counterparts, and add a gated correction to the ViT
// hidden state at interaction layers.
namespace tilefuse {

enum class FusionMode { channel, local_ca, global_ca, add };
enum class ResizeMethod { interp, conv };
enum class FusionStructure { multi_layer, last_layer, pyramid };

inline const char* to_string(FusionMode m) {
  switch (m) {
    case FusionMode::channel: return "channel";
    case FusionMode::local_ca: return "local_ca";
    case FusionMode::global_ca: return "global_ca";
    case FusionMode::add: return "add";
  }
  return "";
}

inline const char* to_string(ResizeMethod m) { return m == ResizeMethod::interp ? "interp" : "conv"; }

inline const char* to_string(FusionStructure s) {
  switch (s) {
    case FusionStructure::multi_layer: return "multi_layer";
    case FusionStructure::last_layer: return "last_layer";
    case FusionStructure::pyramid: return "pyramid";
  }
  return "";
}

inline FusionMode parse_fusion_mode(const std::string& s) {
  for (auto m : {FusionMode::channel, FusionMode::local_ca, FusionMode::global_ca, FusionMode::add})
    if (s == to_string(m)) return m;
  throw ConfigError("unknown fusion mode '" + s + "'");
}

inline ResizeMethod parse_resize_method(const std::string& s) {
  if (s == "interp") return ResizeMethod::interp;
  if (s == "conv") return ResizeMethod::conv;
  throw ConfigError("unknown resize method '" + s + "'");
}

inline FusionStructure parse_fusion_structure(const std::string& s) {
  for (auto m : {FusionStructure::multi_layer, FusionStructure::last_layer, FusionStructure::pyramid})
    if (s == to_string(m)) return m;
  throw ConfigError("unknown fusion structure '" + s + "'");
}

/// Per-stage alignment recipe. Stage i (1-based) feature maps are
/// `kStageSpatialFactor[i-1]` times the token grid per tile; stages 1-2 are
/// halved first, then space_to_depth closes the remaining factor.
inline constexpr std::array<std::size_t, 4> kStageSpatialFactor{8, 4, 2, 1};
inline constexpr std::array<bool, 4> kStageHalves{true, true, false, false};
inline constexpr std::array<std::size_t, 4> kStageBlock{4, 2, 2, 1};
inline constexpr std::array<std::size_t, 4> kStageChannelMultiplier{16, 4, 4, 1};

/// Token-grid geometry shared by both branches.
struct TokenGrid {
  std::size_t g = 0;       // tokens per tile side
  std::size_t grid_w = 1;  // n_w
  std::size_t grid_h = 1;  // n_h

  std::size_t width() const { return g * grid_w; }
  std::size_t height() const { return g * grid_h; }
  std::size_t tiles() const { return grid_w * grid_h; }

  static TokenGrid from_plan(const CropPlan& plan, std::size_t patch_size) {
    return {plan.tile_size / patch_size, plan.grid_w, plan.grid_h};
  }
};

inline void check_stage_index(std::size_t stage) {
  if (stage < 1 || stage > 4) throw ConfigError("stage index " + std::to_string(stage) + " outside 1..4");
}

/// Dims after alignment of a stage feature with dims `in`.
inline Dims aligned_dims(const Dims& in, std::size_t stage, const TokenGrid& grid) {
  check_stage_index(stage);
  const std::size_t f = kStageSpatialFactor[stage - 1];
  if (in.size() != 3 || in[1] != grid.height() * f || in[2] != grid.width() * f)
    shape_fail("align_stage", "stage " + std::to_string(stage) + " feature " + dims_str(in) + " expected (C," +
                                  std::to_string(grid.height() * f) + "," + std::to_string(grid.width() * f) + ")");
  Dims d = in;
  if (kStageHalves[stage - 1]) d = {d[0], d[1] / 2, d[2] / 2};
  return ops::space_to_depth_dims(d, kStageBlock[stage - 1]);
}

/// A conv stage brought onto the ViT token grid of the whole canvas.
template <std::floating_point T>
struct AlignedStage {
  std::size_t stage = 0;  // 1..4, or 0 for the pyramid merge
  Tensor<T> map;          // (C', g*n_h, g*n_w)
};

inline std::string resize_param_prefix(std::size_t stage) { return "fusion.resize.s" + std::to_string(stage); }

/// Learned 2x2 stride-2 downsampler for the conv resize method, initialized
/// to the 2x2 mean (which equals the half-pixel bilinear halving).
template <std::floating_point T>
void init_resize_params(ParamSet<T>& p, std::size_t stage, std::size_t channels) {
  std::vector<T> w(channels * channels * 4, T(0));
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t k = 0; k < 4; ++k) w[(c * channels + c) * 4 + k] = T(0.25);
  const std::string pre = resize_param_prefix(stage);
  p.insert(pre + ".weight", Tensor<T>({channels, channels, 2, 2}, std::move(w), true));
  p.insert(pre + ".bias", init_constant<T>({channels}, T(0)));
}

template <std::floating_point T>
AlignedStage<T> align_stage(const Tensor<T>& feature, std::size_t stage, ResizeMethod resize, const TokenGrid& grid,
                            const ParamSet<T>& params) {
  const Dims target = aligned_dims(feature.dims(), stage, grid);
  Tensor<T> x = feature;
  if (kStageHalves[stage - 1]) {
    if (resize == ResizeMethod::interp) {
      x = ops::interpolate_bilinear(x, x.dim(1) / 2, x.dim(2) / 2);
    } else {
      const std::string pre = resize_param_prefix(stage);
      x = ops::conv2d(x, params.at(pre + ".weight"), params.at(pre + ".bias"), {2, 0, 1});
    }
  }
  if (kStageBlock[stage - 1] > 1) x = ops::space_to_depth(x, kStageBlock[stage - 1]);
  if (x.dims() != target) shape_fail("align_stage", x.dims(), target);
  return {stage, x};
}

/// F_vh^i split into the whole-canvas global part and one local part per tile.
template <std::floating_point T>
struct CounterpartSet {
  Tensor<T> global;               // (C', g, g)
  std::vector<Tensor<T>> locals;  // row-major tiles, (C', g, g) each

  const Tensor<T>& for_view(ViewId v) const { return v.is_global() ? global : locals.at(v.tile()); }
};

template <std::floating_point T>
CounterpartSet<T> segment_views(const AlignedStage<T>& aligned, const TokenGrid& grid) {
  const Tensor<T>& m = aligned.map;
  if (m.rank() != 3 || m.dim(1) != grid.height() || m.dim(2) != grid.width())
    shape_fail("segment_views", m.dims(), Dims{m.rank() ? m.dim(0) : 0, grid.height(), grid.width()});
  CounterpartSet<T> out;
  const std::size_t g = grid.g;
  for (std::size_t r = 0; r < grid.grid_h; ++r)
    for (std::size_t c = 0; c < grid.grid_w; ++c) out.locals.push_back(ops::slice(ops::slice(m, 1, r * g, g), 2, c * g, g));
  out.global = ops::interpolate_bilinear(m, g, g);
  return out;
}

/// Channel-concatenates four aligned stages and projects them to one width.
template <std::floating_point T>
AlignedStage<T> build_pyramid(const std::array<AlignedStage<T>, 4>& stages, const ParamSet<T>& params) {
  std::vector<Tensor<T>> maps;
  for (auto& s : stages) maps.push_back(s.map);
  Tensor<T> merged = ops::concat(maps, 0);  // throws on spatial mismatch
  const Tensor<T>& w = params.at("fusion.pyramid.proj.weight");
  Tensor<T> t = ops::linear(ops::to_tokens(merged), w);
  return {0, ops::from_tokens(t, merged.dim(1), merged.dim(2))};
}

template <std::floating_point T>
void init_pyramid_params(ParamSet<T>& p, std::uint64_t seed, std::size_t in_channels, std::size_t width) {
  p.insert("fusion.pyramid.proj.weight", init_trunc_normal<T>(seed, "fusion.pyramid.proj.weight", {width, in_channels}));
}

/// One interaction layer: F' = F + tanh(alpha) * Delta(F, counterpart),
/// where Delta depends on the mode. The class token (row 0 when present)
/// passes through unchanged.
template <std::floating_point T>
class FusionLayer {
 public:
  FusionLayer(std::string prefix, FusionMode mode, std::size_t embed_dim, std::size_t counterpart_channels,
              std::size_t mlp_hidden, std::size_t heads)
      : prefix_(std::move(prefix)),
        mode_(mode),
        d_(embed_dim),
        c_(counterpart_channels),
        hidden_(mlp_hidden ? mlp_hidden : embed_dim),
        heads_(heads) {
    if (d_ == 0 || c_ == 0) throw ConfigError("fusion layer: zero width");
    if ((mode_ == FusionMode::local_ca || mode_ == FusionMode::global_ca) && (heads_ == 0 || d_ % heads_ != 0))
      throw ConfigError("fusion layer: attention heads must divide embed_dim");
  }

  const std::string& prefix() const { return prefix_; }
  FusionMode mode() const { return mode_; }
  std::size_t counterpart_channels() const { return c_; }

  void init_params(ParamSet<T>& p, std::uint64_t seed, double alpha_init = 0.0) const {
    auto tn = [&](const std::string& n, Dims d) { p.insert(prefix_ + n, init_trunc_normal<T>(seed, prefix_ + n, std::move(d))); };
    auto zeros = [&](const std::string& n, std::size_t k) { p.insert(prefix_ + n, init_constant<T>({k}, T(0))); };
    p.insert(prefix_ + ".alpha", init_constant<T>({1}, static_cast<T>(alpha_init)));
    switch (mode_) {
      case FusionMode::channel:
        tn(".mlp.fc1.weight", {hidden_, d_ + c_});
        zeros(".mlp.fc1.bias", hidden_);
        tn(".mlp.fc2.weight", {d_, hidden_});
        zeros(".mlp.fc2.bias", d_);
        break;
      case FusionMode::local_ca:
      case FusionMode::global_ca:
        tn(".kv_proj.weight", {d_, c_});
        zeros(".kv_proj.bias", d_);
        for (const char* proj : {"q", "k", "v", "o"}) {
          tn(std::string(".attn.") + proj + ".weight", {d_, d_});
          zeros(std::string(".attn.") + proj + ".bias", d_);
        }
        break;
      case FusionMode::add:
        tn(".proj.weight", {d_, c_});
        break;
    }
  }

  /// Counterpart (C',g,g) as g*g tokens in the ViT patch order.
  static Tensor<T> counterpart_tokens(const Tensor<T>& counterpart) { return ops::to_tokens(counterpart); }

  /// Key/value tokens for global cross-attention: every view's counterpart.
  static Tensor<T> global_kv(const CounterpartSet<T>& set) {
    std::vector<Tensor<T>> parts{counterpart_tokens(set.global)};
    for (auto& l : set.locals) parts.push_back(counterpart_tokens(l));
    return ops::concat(parts, 0);
  }

  /// `hidden` is (g*g, d) or (1 + g*g, d) with a leading class token.
  /// `global_kv_tokens` is required for global_ca and ignored otherwise.
  Tensor<T> fuse(const ParamSet<T>& p, const Tensor<T>& hidden, const Tensor<T>& counterpart,
                 const Tensor<T>& global_kv_tokens = {}) const {
    if (counterpart.rank() != 3 || counterpart.dim(0) != c_)
      shape_fail("fuse", "counterpart " + dims_str(counterpart.dims()) + " must have " + std::to_string(c_) + " channels");
    const std::size_t spatial = counterpart.dim(1) * counterpart.dim(2);
    if (hidden.rank() != 2 || hidden.dim(1) != d_)
      shape_fail("fuse", "hidden " + dims_str(hidden.dims()) + " must be (N," + std::to_string(d_) + ")");
    const bool has_cls = hidden.dim(0) == spatial + 1;
    if (!has_cls && hidden.dim(0) != spatial)
      shape_fail("fuse", "hidden has " + std::to_string(hidden.dim(0)) + " tokens, counterpart grid has " +
                             std::to_string(spatial));
    const Tensor<T> tokens = has_cls ? ops::slice(hidden, 0, 1, spatial) : hidden;
    const Tensor<T> cp = counterpart_tokens(counterpart);

    Tensor<T> delta;
    switch (mode_) {
      case FusionMode::channel: {
        Tensor<T> z = ops::concat<T>({tokens, cp}, 1);
        z = ops::gelu(ops::linear(z, p.at(prefix_ + ".mlp.fc1.weight"), p.at(prefix_ + ".mlp.fc1.bias")));
        delta = ops::linear(z, p.at(prefix_ + ".mlp.fc2.weight"), p.at(prefix_ + ".mlp.fc2.bias"));
        break;
      }
      case FusionMode::local_ca:
        delta = cross_attend(p, tokens, cp);
        break;
      case FusionMode::global_ca:
        if (!global_kv_tokens.defined()) throw UsageError("fuse: global_ca needs every view's counterpart tokens");
        delta = cross_attend(p, tokens, global_kv_tokens);
        break;
      case FusionMode::add:
        delta = ops::linear(cp, p.at(prefix_ + ".proj.weight"));
        break;
    }
    const Tensor<T> gate = ops::tanh(p.at(prefix_ + ".alpha"));
    Tensor<T> fused = ops::add(tokens, ops::mul_scalar(gate, delta));
    if (has_cls) fused = ops::concat<T>({ops::slice(hidden, 0, 0, 1), fused}, 0);
    return fused;
  }

 private:
  Tensor<T> cross_attend(const ParamSet<T>& p, const Tensor<T>& q, const Tensor<T>& kv_tokens) const {
    if (kv_tokens.rank() != 2 || kv_tokens.dim(1) != c_)
      shape_fail("fuse", "key/value tokens " + dims_str(kv_tokens.dims()) + " must have " + std::to_string(c_) + " channels");
    const Tensor<T> kv = ops::linear(kv_tokens, p.at(prefix_ + ".kv_proj.weight"), p.at(prefix_ + ".kv_proj.bias"));
    const std::string a = prefix_ + ".attn.";
    ops::AttentionParams<T> ap{p.at(a + "q.weight"), p.at(a + "q.bias"), p.at(a + "k.weight"), p.at(a + "k.bias"),
                               p.at(a + "v.weight"), p.at(a + "v.bias"), p.at(a + "o.weight"), p.at(a + "o.bias")};
    return ops::attention_block(q, kv, ap, heads_);
  }

  std::string prefix_;
  FusionMode mode_;
  std::size_t d_, c_, hidden_, heads_;
};

}  // namespace tilefuse
