// Copyright (C) 2026 The tilefuse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdio>
#include <filesystem>
#include <set>
#include <string>

#include <json.hpp>

#include "tilefuse/hybrid_encoder.hpp"
#include "tilefuse/image_io.hpp"
#include "tilefuse/rng.hpp"

// JSON encoder configuration, schema_version 1.
//
//   {
//     "schema_version": 1,
//     "seed": 7,                                  optional
//     "force_single_tile": false,
//     "planner": { "tile_size": 48, "candidates": [[W,H], ...],
//                  "normalization": { "mean": [r,g,b], "std": [r,g,b] } },
//     "vit":     { "patch_size", "embed_dim", "depth", "heads", "mlp_ratio",
//                  "interaction_layers": [...] },
//     "conv":    { "stem_stride", "stage_channels": [4], "blocks_per_stage": [4],
//                  "kernel_size", "mlp_ratio", "layer_scale_init" },
//     "fusion":  { "enabled", "structure": multi_layer|last_layer|pyramid,
//                  "mode": channel|local_ca|global_ca|add, "resize_method": interp|conv,
//                  "stages": [...], "mlp_hidden", "pyramid_width", "attn_heads",
//                  "alpha_init" }
//   }
//
// Every field is optional and defaults to the desk configuration. Unknown
// keys are rejected.
namespace tilefuse {

inline constexpr int kConfigSchemaVersion = 1;

struct EncoderSpec {
  EncoderConfig encoder = EncoderConfig::desk();
  Normalization normalization;
  std::optional<std::uint64_t> seed;
};

namespace detail_cfg {

using nlohmann::json;

inline void reject_unknown(const json& j, const std::string& where, std::initializer_list<const char*> known) {
  if (!j.is_object()) throw ConfigError("config: '" + where + "' must be an object");
  std::set<std::string> k(known.begin(), known.end());
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!k.count(it.key())) throw ConfigError("config: unknown key '" + where + "." + it.key() + "'");
}

template <class V>
void read(const json& j, const char* key, V& out) {
  if (j.contains(key)) {
    try {
      out = j.at(key).get<V>();
    } catch (const json::exception& e) {
      throw ConfigError(std::string("config: bad value for '") + key + "': " + e.what());
    }
  }
}

}  // namespace detail_cfg

inline nlohmann::json to_json(const EncoderSpec& spec) {
  using nlohmann::json;
  const EncoderConfig& c = spec.encoder;
  json cands = json::array();
  for (auto& r : c.planner.candidates) cands.push_back({r.width, r.height});
  json j = {
      {"schema_version", kConfigSchemaVersion},
      {"force_single_tile", c.force_single_tile},
      {"planner",
       {{"tile_size", c.planner.tile_size},
        {"candidates", cands},
        {"normalization", {{"mean", spec.normalization.mean}, {"std", spec.normalization.std}}}}},
      {"vit",
       {{"patch_size", c.vit.patch_size},
        {"embed_dim", c.vit.embed_dim},
        {"depth", c.vit.depth},
        {"heads", c.vit.heads},
        {"mlp_ratio", c.vit.mlp_ratio},
        {"interaction_layers", c.vit.interaction_layers}}},
      {"conv",
       {{"stem_stride", c.conv.stem_stride},
        {"stage_channels", c.conv.stage_channels},
        {"blocks_per_stage", c.conv.blocks_per_stage},
        {"kernel_size", c.conv.kernel_size},
        {"mlp_ratio", c.conv.mlp_ratio},
        {"layer_scale_init", c.conv.layer_scale_init}}},
      {"fusion",
       {{"enabled", c.fusion.enabled},
        {"structure", to_string(c.fusion.structure)},
        {"mode", to_string(c.fusion.mode)},
        {"resize_method", to_string(c.fusion.resize)},
        {"stages", c.fusion.stages},
        {"mlp_hidden", c.fusion.mlp_hidden},
        {"pyramid_width", c.fusion.pyramid_width},
        {"attn_heads", c.fusion.attn_heads},
        {"alpha_init", c.fusion.alpha_init}}},
  };
  if (spec.seed) j["seed"] = *spec.seed;
  return j;
}

inline EncoderSpec encoder_spec_from_json(const nlohmann::json& j) {
  using namespace detail_cfg;
  reject_unknown(j, "", {"schema_version", "seed", "force_single_tile", "planner", "vit", "conv", "fusion"});
  if (!j.contains("schema_version")) throw ConfigError("config: missing schema_version");
  if (j.at("schema_version") != kConfigSchemaVersion)
    throw ConfigError("config: unsupported schema_version " + j.at("schema_version").dump());
  EncoderSpec spec;
  EncoderConfig& c = spec.encoder;
  if (j.contains("seed")) spec.seed = j.at("seed").get<std::uint64_t>();
  read(j, "force_single_tile", c.force_single_tile);
  if (j.contains("planner")) {
    const json& p = j.at("planner");
    reject_unknown(p, "planner", {"tile_size", "candidates", "normalization"});
    read(p, "tile_size", c.planner.tile_size);
    if (p.contains("candidates")) {
      c.planner.candidates.clear();
      for (auto& e : p.at("candidates")) {
        if (!e.is_array() || e.size() != 2) throw ConfigError("config: candidates are [width, height] pairs");
        c.planner.candidates.push_back({e[0].get<std::size_t>(), e[1].get<std::size_t>()});
      }
    }
    if (p.contains("normalization")) {
      const json& n = p.at("normalization");
      reject_unknown(n, "planner.normalization", {"mean", "std"});
      read(n, "mean", spec.normalization.mean);
      read(n, "std", spec.normalization.std);
    }
  }
  c.vit.image_size = c.planner.tile_size;
  if (j.contains("vit")) {
    const json& v = j.at("vit");
    reject_unknown(v, "vit", {"patch_size", "embed_dim", "depth", "heads", "mlp_ratio", "interaction_layers"});
    read(v, "patch_size", c.vit.patch_size);
    read(v, "embed_dim", c.vit.embed_dim);
    read(v, "depth", c.vit.depth);
    read(v, "heads", c.vit.heads);
    read(v, "mlp_ratio", c.vit.mlp_ratio);
    read(v, "interaction_layers", c.vit.interaction_layers);
  }
  if (j.contains("conv")) {
    const json& v = j.at("conv");
    reject_unknown(v, "conv", {"stem_stride", "stage_channels", "blocks_per_stage", "kernel_size", "mlp_ratio",
                               "layer_scale_init"});
    read(v, "stem_stride", c.conv.stem_stride);
    read(v, "stage_channels", c.conv.stage_channels);
    read(v, "blocks_per_stage", c.conv.blocks_per_stage);
    read(v, "kernel_size", c.conv.kernel_size);
    read(v, "mlp_ratio", c.conv.mlp_ratio);
    read(v, "layer_scale_init", c.conv.layer_scale_init);
  }
  if (j.contains("fusion")) {
    const json& f = j.at("fusion");
    reject_unknown(f, "fusion", {"enabled", "structure", "mode", "resize_method", "stages", "mlp_hidden",
                                 "pyramid_width", "attn_heads", "alpha_init"});
    read(f, "enabled", c.fusion.enabled);
    if (f.contains("structure")) c.fusion.structure = parse_fusion_structure(f.at("structure").get<std::string>());
    if (f.contains("mode")) c.fusion.mode = parse_fusion_mode(f.at("mode").get<std::string>());
    if (f.contains("resize_method")) c.fusion.resize = parse_resize_method(f.at("resize_method").get<std::string>());
    read(f, "stages", c.fusion.stages);
    read(f, "mlp_hidden", c.fusion.mlp_hidden);
    read(f, "pyramid_width", c.fusion.pyramid_width);
    read(f, "attn_heads", c.fusion.attn_heads);
    read(f, "alpha_init", c.fusion.alpha_init);
  }
  c.validate();
  return spec;
}

inline EncoderSpec load_encoder_spec(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config: " + path.string() + ": " + e.what());
  }
  try {
    return encoder_spec_from_json(j);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config: " + path.string() + ": " + e.what());
  }
}

/// Stable 64-bit hash of the canonical JSON form, as 16 hex digits.
inline std::string config_hash(const EncoderSpec& spec) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(to_json(spec).dump())));
  return buf;
}

}  // namespace tilefuse
