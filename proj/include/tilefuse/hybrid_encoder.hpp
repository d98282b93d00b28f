// Copyright (C) 2026 The tilefuse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "tilefuse/convnext.hpp"
#include "tilefuse/crop_planner.hpp"
#include "tilefuse/cvfm.hpp"
#include "tilefuse/vit.hpp"

namespace tilefuse {

struct FusionConfig {
  bool enabled = true;
  FusionStructure structure = FusionStructure::multi_layer;
  FusionMode mode = FusionMode::channel;
  ResizeMethod resize = ResizeMethod::interp;
  // Conv stage (1..4) paired with each ViT interaction layer, same order.
  std::vector<std::size_t> stages{1, 2, 3, 4};
  std::size_t mlp_hidden = 0;     // 0: embed_dim
  std::size_t pyramid_width = 0;  // 0: embed_dim
  std::size_t attn_heads = 0;     // 0: ViT heads
  double alpha_init = 0.0;
};

struct EncoderConfig {
  PlannerConfig planner;
  ViTConfig vit;
  ConvBranchConfig conv;
  FusionConfig fusion;
  // Pretraining regime: no cropping, the whole image becomes one tile.
  bool force_single_tile = false;

  /// Copies the tile size and branch geometry into the planner and checks
  /// every cross-module constraint.
  void validate() {
    planner.vit_patch_size = vit.patch_size;
    planner.conv_total_stride = conv.total_stride();
    if (vit.image_size != planner.tile_size)
      throw ConfigError("encoder: ViT image size " + std::to_string(vit.image_size) + " != tile size " +
                        std::to_string(planner.tile_size));
    planner.validate();
    vit.validate();
    conv.validate();
    if (!fusion.enabled) return;
    if (fusion.stages.size() != vit.interaction_layers.size())
      throw ConfigError("encoder: " + std::to_string(vit.interaction_layers.size()) + " interaction layers but " +
                        std::to_string(fusion.stages.size()) + " paired stages");
    for (auto s : fusion.stages) check_stage_index(s);
    if (fusion.structure == FusionStructure::last_layer &&
        (vit.interaction_layers != std::vector<std::size_t>{vit.depth} || fusion.stages != std::vector<std::size_t>{4}))
      throw ConfigError("encoder: last_layer structure uses stage 4 at the final ViT layer only");
    if (fusion.structure == FusionStructure::last_layer && fusion.resize == ResizeMethod::conv)
      throw ConfigError("encoder: last_layer structure has no resize step for the conv method");
  }

  EncoderConfig validated() const {
    EncoderConfig c = *this;
    c.validate();
    return c;
  }

  PlannerConfig effective_planner() const { return force_single_tile ? planner.single_tile() : planner; }

  /// Small configuration that keeps every structural identity of the full
  /// model: 48px tiles, 8px patches (6x6 tokens), conv widths 16..128.
  static EncoderConfig desk() {
    EncoderConfig c;
    c.planner.tile_size = 48;
    c.planner.candidates = {{48, 96}, {96, 48}, {96, 96}};
    c.vit.image_size = 48;
    c.validate();
    return c;
  }

  /// The full-size geometry: 336px tiles, ViT-L/14, ConvNeXt-L widths.
  static EncoderConfig paper_scale() {
    EncoderConfig c;
    c.planner = PlannerConfig{};
    c.vit = ViTConfig::paper_scale();
    c.conv = ConvBranchConfig::paper_scale();
    c.validate();
    return c;
  }
};

/// Final tokens of every view (global first, then tiles row-major), class
/// token removed; each (g*g, d).
template <std::floating_point T>
struct VisualTokens {
  CropPlan plan;
  std::vector<Tensor<T>> views;

  Dims dump_dims() const { return {views.size(), views.at(0).dim(0), views.at(0).dim(1)}; }

  std::vector<T> flattened() const {
    std::vector<T> out;
    for (auto& v : views) out.insert(out.end(), v.data().begin(), v.data().end());
    return out;
  }
};

/// Image prepared for the ViT pass: plan, views and (when fusion is on)
/// the conv stage features of the high-resolution canvas.
template <std::floating_point T>
struct PreparedInput {
  CropPlan plan;
  TokenGrid grid;
  std::vector<Tensor<T>> views;
  std::optional<StageFeatureSet<T>> stages;
};

template <std::floating_point T>
class HybridEncoder {
 public:
  explicit HybridEncoder(EncoderConfig config)
      : config_(config.validated()), vit_(config_.vit), conv_(config_.conv) {
    if (!config_.fusion.enabled) return;
    const std::size_t d = config_.vit.embed_dim;
    const std::size_t heads = config_.fusion.attn_heads ? config_.fusion.attn_heads : config_.vit.heads;
    for (std::size_t k = 0; k < config_.vit.interaction_layers.size(); ++k) {
      const std::size_t layer = config_.vit.interaction_layers[k];
      layers_.emplace_back(layer_prefix(layer), config_.fusion.mode, d, counterpart_channels(config_.fusion.stages[k]),
                           config_.fusion.mlp_hidden, heads);
    }
  }

  const EncoderConfig& config() const { return config_; }
  const VisionTransformer<T>& vit() const { return vit_; }
  const ConvNextBranch<T>& conv() const { return conv_; }
  const std::vector<FusionLayer<T>>& fusion_layers() const { return layers_; }

  static std::string layer_prefix(std::size_t layer) {
    std::string n = std::to_string(layer);
    if (n.size() < 2) n = "0" + n;
    return "fusion.l" + n;
  }

  /// Aligned channel count C'_i for stage i, or the pyramid width.
  std::size_t aligned_channels(std::size_t stage) const {
    check_stage_index(stage);
    return config_.conv.stage_channels[stage - 1] * kStageChannelMultiplier[stage - 1];
  }

  std::size_t counterpart_channels(std::size_t stage) const {
    if (config_.fusion.structure == FusionStructure::pyramid)
      return config_.fusion.pyramid_width ? config_.fusion.pyramid_width : config_.vit.embed_dim;
    return aligned_channels(stage);
  }

  /// Stages whose aligned maps the fusion path consumes.
  std::vector<std::size_t> stages_used() const {
    if (!config_.fusion.enabled) return {};
    if (config_.fusion.structure == FusionStructure::pyramid) return {1, 2, 3, 4};
    std::vector<std::size_t> s = config_.fusion.stages;
    std::sort(s.begin(), s.end());
    s.erase(std::unique(s.begin(), s.end()), s.end());
    return s;
  }

  ParamSet<T> init_params(std::uint64_t seed) const {
    ParamSet<T> p = vit_.init_params(seed);
    p.merge(conv_.init_params(seed));
    p.merge(init_fusion_params(seed));
    return p;
  }

  /// Parameters owned by the fusion path only.
  ParamSet<T> init_fusion_params(std::uint64_t seed) const {
    ParamSet<T> p;
    if (!config_.fusion.enabled) return p;
    for (auto& l : layers_) l.init_params(p, seed, config_.fusion.alpha_init);
    if (config_.fusion.resize == ResizeMethod::conv)
      for (auto s : stages_used())
        if (kStageHalves[s - 1]) init_resize_params(p, s, config_.conv.stage_channels[s - 1]);
    if (config_.fusion.structure == FusionStructure::pyramid) {
      std::size_t total = 0;
      for (std::size_t s = 1; s <= 4; ++s) total += aligned_channels(s);
      init_pyramid_params(p, seed, total, counterpart_channels(1));
    }
    return p;
  }

  CropPlan plan_for(std::size_t width, std::size_t height) const {
    return build_crop_plan(width, height, config_.effective_planner());
  }

  PreparedInput<T> prepare(const ImageBuffer& image, const ParamSet<T>& params) const {
    PreparedInput<T> in;
    in.plan = plan_for(image.width, image.height);
    in.grid = TokenGrid::from_plan(in.plan, config_.vit.patch_size);
    PlannedViews<T> pv = apply_plan<T>(image, in.plan);
    in.views = pv.views();
    if (config_.fusion.enabled) in.stages = conv_.forward_stages(params, pv.highres_image);
    return in;
  }

  /// One counterpart set per interaction layer.
  std::vector<CounterpartSet<T>> counterparts(const PreparedInput<T>& in, const ParamSet<T>& params) const {
    std::vector<CounterpartSet<T>> out;
    if (!config_.fusion.enabled) return out;
    const auto& feats = in.stages.value();
    auto aligned = [&](std::size_t s) {
      return align_stage(feats[s - 1], s, config_.fusion.resize, in.grid, params);
    };
    if (config_.fusion.structure == FusionStructure::pyramid) {
      std::array<AlignedStage<T>, 4> all{aligned(1), aligned(2), aligned(3), aligned(4)};
      CounterpartSet<T> set = segment_views(build_pyramid(all, params), in.grid);
      out.assign(layers_.size(), set);
      return out;
    }
    std::array<std::optional<CounterpartSet<T>>, 4> per_stage;
    for (auto s : stages_used()) per_stage[s - 1] = segment_views(aligned(s), in.grid);
    for (auto s : config_.fusion.stages) out.push_back(*per_stage[s - 1]);
    return out;
  }

  VisualTokens<T> encode_prepared(const PreparedInput<T>& in, const ParamSet<T>& params) const {
    LayerHook<T> hook;
    std::vector<CounterpartSet<T>> cps;
    std::vector<Tensor<T>> global_kv;
    if (config_.fusion.enabled) {
      cps = counterparts(in, params);
      global_kv.resize(cps.size());
      if (config_.fusion.mode == FusionMode::global_ca)
        for (std::size_t k = 0; k < cps.size(); ++k) global_kv[k] = FusionLayer<T>::global_kv(cps[k]);
      hook = [&](std::size_t layer, ViewId view, const Tensor<T>& hidden) {
        const auto& li = config_.vit.interaction_layers;
        const std::size_t k = static_cast<std::size_t>(std::find(li.begin(), li.end(), layer) - li.begin());
        return layers_.at(k).fuse(params, hidden, cps[k].for_view(view), global_kv[k]);
      };
    }
    VisualTokens<T> out;
    out.plan = in.plan;
    for (auto& s : vit_.forward_with_hooks(params, in.views, hook)) out.views.push_back(s.patch_tokens());
    return out;
  }

  VisualTokens<T> encode(const ImageBuffer& image, const ParamSet<T>& params) const {
    return encode_prepared(prepare(image, params), params);
  }

 private:
  EncoderConfig config_;
  VisionTransformer<T> vit_;
  ConvNextBranch<T> conv_;
  std::vector<FusionLayer<T>> layers_;
};

/// Free-function form of HybridEncoder::encode.
template <std::floating_point T>
VisualTokens<T> encode(const ImageBuffer& image, const EncoderConfig& config, const ParamSet<T>& params) {
  return HybridEncoder<T>(config).encode(image, params);
}

// ---------------------------------------------------------------------------
// Shape-only evaluation, for geometries too large to allocate.

struct StageShape {
  std::size_t stage = 0;
  Dims input;
  Dims aligned;
  std::size_t vit_layer = 0;
  Dims vit_dims;  // (D, g, g)
};

struct ShapeReport {
  CropPlan plan;
  Dims highres_input;
  std::array<StageShape, 4> stages;
  std::size_t views = 0;
  Dims tokens_per_view;  // (g*g, D)
};

/// Shapes of every intermediate for a (width x height) image, computed with
/// the same shape functions the forward pass checks against. Aligned dims
/// cover the whole canvas (g*n_h, g*n_w).
inline ShapeReport dry_run_shapes(const EncoderConfig& config_in, std::size_t width, std::size_t height) {
  const EncoderConfig config = config_in.validated();
  ShapeReport r;
  r.plan = build_crop_plan(width, height, config.effective_planner());
  r.highres_input = {config.conv.in_channels, r.plan.highres_h, r.plan.highres_w};
  ConvNextBranch<float> conv(config.conv);
  VisionTransformer<float> vit(config.vit);
  const auto stage_dims = conv.stage_dims(r.highres_input);
  const TokenGrid grid = TokenGrid::from_plan(r.plan, config.vit.patch_size);
  const std::size_t g = grid.g, d = config.vit.embed_dim;
  for (std::size_t s = 0; s < 4; ++s) {
    r.stages[s].stage = s + 1;
    r.stages[s].input = stage_dims[s];
    r.stages[s].aligned = aligned_dims(stage_dims[s], s + 1, grid);
    r.stages[s].vit_dims = {d, g, g};
  }
  const auto& li = config.vit.interaction_layers;
  for (std::size_t k = 0; k < li.size() && config.fusion.enabled; ++k) {
    auto& st = r.stages.at(config.fusion.stages[k] - 1);
    if (st.vit_layer == 0) st.vit_layer = li[k];
  }
  r.views = r.plan.view_count();
  r.tokens_per_view = {vit.hidden_dims()[0] - 1, d};
  return r;
}

// ---------------------------------------------------------------------------
// Ablation variants.

/// Realizes one named ablation row on top of `base`.
///
/// Grammar: `ds`, `hybrid`, or `<structure>[_<mode>][_<resize>]` with
/// structure in {multi, multi_2, multi_4, multi_6, last_layer, pyramid},
/// mode in {channel, local_ca, global_ca, add} (default channel) and resize
/// in {interp, conv} (default interp). `multi` is `multi_4`.
inline EncoderConfig make_variant(const EncoderConfig& base_in, const std::string& spec) {
  EncoderConfig base = base_in.validated();
  EncoderConfig c = base;
  c.fusion.enabled = true;
  if (spec == "ds") {
    c.fusion.enabled = false;
    return c.validated();
  }
  std::string rest = spec == "hybrid" ? "multi" : spec;
  auto eat = [&](const std::string& tok) {
    if (rest == tok) {
      rest.clear();
      return true;
    }
    if (rest.rfind(tok + "_", 0) == 0) {
      rest = rest.substr(tok.size() + 1);
      return true;
    }
    return false;
  };
  std::string structure;
  for (const char* s : {"multi_2", "multi_4", "multi_6", "multi", "last_layer", "pyramid"})
    if (eat(s)) {
      structure = s;
      break;
    }
  if (structure.empty()) throw UsageError("unknown ablation spec '" + spec + "'");
  c.fusion.mode = FusionMode::channel;
  for (auto m : {FusionMode::local_ca, FusionMode::global_ca, FusionMode::channel, FusionMode::add})
    if (eat(to_string(m))) {
      c.fusion.mode = m;
      break;
    }
  c.fusion.resize = ResizeMethod::interp;
  if (eat("interp")) {
    c.fusion.resize = ResizeMethod::interp;
  } else if (eat("conv")) {
    c.fusion.resize = ResizeMethod::conv;
  }
  if (!rest.empty()) throw UsageError("unknown ablation spec '" + spec + "'");

  const std::vector<std::size_t> layers = base.vit.interaction_layers;
  if (layers.size() != 4) throw ConfigError("make_variant: base config must pair four layers with four stages");
  if (structure == "multi" || structure == "multi_4") {
    c.fusion.structure = FusionStructure::multi_layer;
    c.vit.interaction_layers = layers;
    c.fusion.stages = {1, 2, 3, 4};
  } else if (structure == "multi_2") {
    c.fusion.structure = FusionStructure::multi_layer;
    c.vit.interaction_layers = {layers.front(), layers.back()};
    c.fusion.stages = {1, 4};
  } else if (structure == "multi_6") {
    // Midpoints after the stage-2 and stage-3 layers, reusing those stages.
    c.fusion.structure = FusionStructure::multi_layer;
    const std::size_t a = (layers[1] + layers[2]) / 2, b = (layers[2] + layers[3]) / 2;
    if (a <= layers[1] || b <= layers[2])
      throw ConfigError("make_variant: no room to interleave layers into the base layer list");
    c.vit.interaction_layers = {layers[0], layers[1], a, layers[2], b, layers[3]};
    c.fusion.stages = {1, 2, 2, 3, 3, 4};
  } else if (structure == "last_layer") {
    c.fusion.structure = FusionStructure::last_layer;
    c.vit.interaction_layers = {base.vit.depth};
    c.fusion.stages = {4};
  } else {
    c.fusion.structure = FusionStructure::pyramid;
    c.vit.interaction_layers = layers;
    c.fusion.stages = {1, 2, 3, 4};
  }
  return c.validated();
}

/// Every defined row of the ablation matrix: the DS baseline, then
/// {multi, last_layer, pyramid} x modes x resize methods, then the 2- and
/// 6-layer channel variants. last_layer has no resize step, so it only
/// appears with interp.
inline std::vector<std::string> default_ablation_matrix() {
  std::vector<std::string> m{"ds"};
  for (const char* s : {"multi", "last_layer", "pyramid"})
    for (auto mode : {FusionMode::channel, FusionMode::local_ca, FusionMode::global_ca, FusionMode::add})
      for (const char* r : {"interp", "conv"}) {
        if (std::string(s) == "last_layer" && std::string(r) == "conv") continue;
        m.push_back(std::string(s) + "_" + to_string(mode) + "_" + r);
      }
  m.push_back("multi_2_channel_interp");
  m.push_back("multi_6_channel_interp");
  return m;
}

enum class TrainingStage { pretrain, finetune };

struct ParamPartition {
  std::vector<std::string> trainable;
  std::vector<std::string> frozen;
};

/// Pretrain: only the fusion path and the probe head learn; both branches
/// stay frozen. Finetune: everything learns.
template <std::floating_point T>
ParamPartition parameter_partition(const ParamSet<T>& params, TrainingStage stage) {
  ParamPartition out;
  for (auto& [name, _] : params) {
    const bool branch = name.rfind("vit.", 0) == 0 || name.rfind("conv.", 0) == 0;
    if (stage == TrainingStage::pretrain && branch) {
      out.frozen.push_back(name);
    } else {
      out.trainable.push_back(name);
    }
  }
  return out;
}

}  // namespace tilefuse
