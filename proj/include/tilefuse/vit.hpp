// Copyright (C) 2026 The tilefuse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "tilefuse/init.hpp"
#include "tilefuse/ops.hpp"

namespace tilefuse {

struct ViTConfig {
  std::size_t image_size = 48;  // one tile
  std::size_t patch_size = 8;
  std::size_t embed_dim = 64;
  std::size_t depth = 8;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t in_channels = 3;
  // 1-indexed layers after which the hidden state is handed to the hook.
  std::vector<std::size_t> interaction_layers{1, 2, 4, 6};

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t patch_tokens() const { return grid() * grid(); }

  void validate() const {
    if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0)
      throw ConfigError("vit: image size must be a positive multiple of the patch size");
    if (embed_dim == 0 || depth == 0 || heads == 0 || embed_dim % heads != 0)
      throw ConfigError("vit: heads must divide a positive embed_dim");
    for (std::size_t i = 0; i < interaction_layers.size(); ++i) {
      const auto l = interaction_layers[i];
      if (l == 0 || l > depth) throw ConfigError("vit: interaction layer " + std::to_string(l) + " outside 1.." + std::to_string(depth));
      if (i > 0 && l <= interaction_layers[i - 1]) throw ConfigError("vit: interaction layers must be strictly increasing");
    }
  }

  static ViTConfig paper_scale() {
    ViTConfig c;
    c.image_size = 336;
    c.patch_size = 14;
    c.embed_dim = 1024;
    c.depth = 24;
    c.heads = 16;
    c.interaction_layers = {2, 6, 12, 20};
    return c;
  }
};

/// View tag: index 0 is the global view, k >= 1 is local tile k (row-major).
struct ViewId {
  std::size_t index = 0;

  bool is_global() const { return index == 0; }
  std::size_t tile() const { return index - 1; }
  std::string name() const { return is_global() ? "global" : "loc" + std::to_string(index); }
  bool operator==(const ViewId&) const = default;
};

/// Hidden state of one view: row 0 is the class token, rows 1..g*g the
/// patch tokens in row-major spatial order.
template <std::floating_point T>
struct ViewHiddenState {
  ViewId view;
  Tensor<T> hidden;

  Tensor<T> patch_tokens() const { return ops::slice(hidden, 0, 1, hidden.dim(0) - 1); }
};

/// Replaces the hidden state after an interaction layer.
template <std::floating_point T>
using LayerHook = std::function<Tensor<T>(std::size_t layer, ViewId view, const Tensor<T>& hidden)>;

/// Pre-norm vision transformer applied independently to every view.
template <std::floating_point T>
class VisionTransformer {
 public:
  explicit VisionTransformer(ViTConfig config) : config_(std::move(config)) { config_.validate(); }

  const ViTConfig& config() const { return config_; }

  /// (tokens, dim) of every hidden state, class token included.
  Dims hidden_dims() const { return {config_.patch_tokens() + 1, config_.embed_dim}; }

  ParamSet<T> init_params(std::uint64_t seed) const {
    ParamSet<T> p;
    const std::size_t d = config_.embed_dim, pd = config_.in_channels * config_.patch_size * config_.patch_size;
    auto tn = [&](const std::string& name, Dims dims) { p.insert(name, init_trunc_normal<T>(seed, name, std::move(dims))); };
    auto zeros = [&](const std::string& name, std::size_t n) { p.insert(name, init_constant<T>({n}, T(0))); };
    auto ones = [&](const std::string& name, std::size_t n) { p.insert(name, init_constant<T>({n}, T(1))); };
    tn("vit.patch_embed.weight", {d, pd});
    zeros("vit.patch_embed.bias", d);
    tn("vit.cls_token", {1, d});
    tn("vit.pos_embed", {config_.patch_tokens() + 1, d});
    for (std::size_t i = 0; i < config_.depth; ++i) {
      const std::string bp = block_prefix(i);
      ones(bp + ".norm1.weight", d);
      zeros(bp + ".norm1.bias", d);
      for (const char* proj : {"q", "k", "v", "o"}) {
        tn(bp + ".attn." + proj + ".weight", {d, d});
        zeros(bp + ".attn." + proj + ".bias", d);
      }
      ones(bp + ".norm2.weight", d);
      zeros(bp + ".norm2.bias", d);
      tn(bp + ".mlp.fc1.weight", {config_.mlp_ratio * d, d});
      zeros(bp + ".mlp.fc1.bias", config_.mlp_ratio * d);
      tn(bp + ".mlp.fc2.weight", {d, config_.mlp_ratio * d});
      zeros(bp + ".mlp.fc2.bias", d);
    }
    ones("vit.norm.weight", d);
    zeros("vit.norm.bias", d);
    return p;
  }

  /// Patch embedding + class token + positional embedding.
  Tensor<T> embed(const ParamSet<T>& p, const Tensor<T>& view) const {
    const std::size_t s = config_.image_size;
    if (view.dims() != Dims{config_.in_channels, s, s})
      shape_fail("vit", "view " + dims_str(view.dims()) + " must be " + dims_str({config_.in_channels, s, s}));
    // space_to_depth puts each patch's (c, dy, dx) values in the channel axis.
    Tensor<T> patches = ops::to_tokens(ops::space_to_depth(view, config_.patch_size));
    Tensor<T> tokens = ops::linear(patches, p.at("vit.patch_embed.weight"), p.at("vit.patch_embed.bias"));
    return ops::add(ops::concat<T>({p.at("vit.cls_token"), tokens}, 0), p.at("vit.pos_embed"));
  }

  /// One pre-norm transformer block; `layer` is 1-indexed.
  Tensor<T> block(const ParamSet<T>& p, std::size_t layer, const Tensor<T>& x) const {
    const std::string bp = block_prefix(layer - 1);
    const Tensor<T> h = ops::layer_norm(x, p.at(bp + ".norm1.weight"), p.at(bp + ".norm1.bias"));
    ops::AttentionParams<T> ap{p.at(bp + ".attn.q.weight"), p.at(bp + ".attn.q.bias"), p.at(bp + ".attn.k.weight"),
                               p.at(bp + ".attn.k.bias"),   p.at(bp + ".attn.v.weight"), p.at(bp + ".attn.v.bias"),
                               p.at(bp + ".attn.o.weight"), p.at(bp + ".attn.o.bias")};
    Tensor<T> y = ops::add(x, ops::attention_block(h, h, ap, config_.heads));
    Tensor<T> m = ops::layer_norm(y, p.at(bp + ".norm2.weight"), p.at(bp + ".norm2.bias"));
    m = ops::gelu(ops::linear(m, p.at(bp + ".mlp.fc1.weight"), p.at(bp + ".mlp.fc1.bias")));
    m = ops::linear(m, p.at(bp + ".mlp.fc2.weight"), p.at(bp + ".mlp.fc2.bias"));
    return ops::add(y, m);
  }

  /// Runs layers first..last (1-indexed, inclusive) without hooks.
  Tensor<T> run_blocks(const ParamSet<T>& p, Tensor<T> x, std::size_t first, std::size_t last) const {
    for (std::size_t l = first; l <= last; ++l) x = block(p, l, x);
    return x;
  }

  Tensor<T> final_norm(const ParamSet<T>& p, const Tensor<T>& x) const {
    return ops::layer_norm(x, p.at("vit.norm.weight"), p.at("vit.norm.bias"));
  }

  /// Encodes one view. After each configured interaction layer the hidden
  /// state is replaced by `hook(layer, view, hidden)` when a hook is given.
  ViewHiddenState<T> forward_view(const ParamSet<T>& p, const Tensor<T>& view, ViewId id,
                                  const LayerHook<T>& hook = {}) const {
    Tensor<T> x = embed(p, view);
    std::size_t next_hook = 0;
    const auto& layers = config_.interaction_layers;
    for (std::size_t l = 1; l <= config_.depth; ++l) {
      x = block(p, l, x);
      if (next_hook < layers.size() && layers[next_hook] == l) {
        ++next_hook;
        if (hook) {
          Tensor<T> replaced = hook(l, id, x);
          if (!replaced.defined() || replaced.dims() != x.dims())
            shape_fail("vit hook", x.dims(), replaced.defined() ? replaced.dims() : Dims{});
          x = std::move(replaced);
        }
      }
    }
    return {id, final_norm(p, x)};
  }

  /// Views are the global view first, then tiles in row-major order.
  std::vector<ViewHiddenState<T>> forward_with_hooks(const ParamSet<T>& p, const std::vector<Tensor<T>>& views,
                                                     const LayerHook<T>& hook = {}) const {
    std::vector<ViewHiddenState<T>> out;
    out.reserve(views.size());
    for (std::size_t v = 0; v < views.size(); ++v) out.push_back(forward_view(p, views[v], ViewId{v}, hook));
    return out;
  }

 private:
  static std::string block_prefix(std::size_t i) {
    std::string n = std::to_string(i);
    if (n.size() < 2) n = "0" + n;
    return "vit.blocks." + n;
  }

  ViTConfig config_;
};

}  // namespace tilefuse
