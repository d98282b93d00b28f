// Copyright (C) 2026 The tilefuse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdint>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "tilefuse/error.hpp"
#include "tilefuse/image_io.hpp"
#include "tilefuse/ops.hpp"

namespace tilefuse {

/// Width x height in pixels.
struct Resolution {
  std::size_t width = 0;
  std::size_t height = 0;

  bool operator==(const Resolution&) const = default;
};

/// The five predefined target resolutions, in selection priority order.
inline const std::vector<Resolution>& default_candidates() {
  static const std::vector<Resolution> kCandidates{{336, 672}, {672, 336}, {672, 672}, {1008, 336}, {336, 1008}};
  return kCandidates;
}

/// One predefined resolution scored against an input size.
///
/// scale = min(W_h/W_l, H_h/H_l) is kept as an exact fraction; the scaled
/// extents are rounded half-up so every score is an exact integer.
struct ResolutionCandidate {
  Resolution target;
  std::uint64_t scale_num = 1;
  std::uint64_t scale_den = 1;
  std::size_t scaled_w = 0;
  std::size_t scaled_h = 0;
  std::uint64_t res_eff = 0;
  std::uint64_t res_wasted = 0;

  double scale() const { return static_cast<double>(scale_num) / static_cast<double>(scale_den); }
  bool operator==(const ResolutionCandidate&) const = default;
};

/// round_half_up(value * num / den) for non-negative integers.
constexpr std::uint64_t scaled_round(std::uint64_t value, std::uint64_t num, std::uint64_t den) {
  return (2 * value * num + den) / (2 * den);
}

inline ResolutionCandidate score_candidate(std::size_t w_l, std::size_t h_l, Resolution target) {
  if (w_l == 0 || h_l == 0) throw UsageError("select_resolution: image extents must be positive");
  if (target.width == 0 || target.height == 0) throw UsageError("select_resolution: zero-extent candidate");
  ResolutionCandidate c;
  c.target = target;
  // W_h/W_l <= H_h/H_l  <=>  W_h*H_l <= H_h*W_l
  if (std::uint64_t(target.width) * h_l <= std::uint64_t(target.height) * w_l) {
    c.scale_num = target.width;
    c.scale_den = w_l;
  } else {
    c.scale_num = target.height;
    c.scale_den = h_l;
  }
  c.scaled_w = std::min<std::size_t>(target.width, scaled_round(w_l, c.scale_num, c.scale_den));
  c.scaled_h = std::min<std::size_t>(target.height, scaled_round(h_l, c.scale_num, c.scale_den));
  const std::uint64_t scaled_area = std::uint64_t(c.scaled_w) * c.scaled_h;
  c.res_eff = std::min<std::uint64_t>(scaled_area, std::uint64_t(w_l) * h_l);
  c.res_wasted = std::uint64_t(target.width) * target.height - c.res_eff;
  return c;
}

enum class TieBreak { none, res_wasted, list_order };

inline const char* to_string(TieBreak t) {
  switch (t) {
    case TieBreak::none: return "unique maximum res_eff";
    case TieBreak::res_wasted: return "res_eff tie resolved by minimum res_wasted";
    case TieBreak::list_order: return "res_eff and res_wasted tie resolved by candidate list order";
  }
  return "";
}

struct ResolutionRanking {
  std::vector<ResolutionCandidate> scored;  // in candidate-list order
  std::size_t chosen = 0;
  TieBreak tie_break = TieBreak::none;
};

/// Scores every candidate and records how the winner was decided: largest
/// res_eff, then smallest res_wasted, then earliest in the list.
inline ResolutionRanking rank_resolutions(std::size_t w_l, std::size_t h_l, const std::vector<Resolution>& candidates) {
  if (candidates.empty()) throw UsageError("select_resolution: empty candidate list");
  ResolutionRanking r;
  for (auto& c : candidates) r.scored.push_back(score_candidate(w_l, h_l, c));
  std::uint64_t best_eff = 0;
  for (auto& s : r.scored) best_eff = std::max(best_eff, s.res_eff);
  std::vector<std::size_t> eff_ties;
  for (std::size_t i = 0; i < r.scored.size(); ++i)
    if (r.scored[i].res_eff == best_eff) eff_ties.push_back(i);
  std::uint64_t best_waste = UINT64_MAX;
  for (auto i : eff_ties) best_waste = std::min(best_waste, r.scored[i].res_wasted);
  std::vector<std::size_t> waste_ties;
  for (auto i : eff_ties)
    if (r.scored[i].res_wasted == best_waste) waste_ties.push_back(i);
  r.chosen = waste_ties.front();
  r.tie_break = eff_ties.size() == 1 ? TieBreak::none : waste_ties.size() == 1 ? TieBreak::res_wasted : TieBreak::list_order;
  return r;
}

inline ResolutionCandidate select_resolution(std::size_t w_l, std::size_t h_l,
                                             const std::vector<Resolution>& candidates = default_candidates()) {
  auto r = rank_resolutions(w_l, h_l, candidates);
  return r.scored[r.chosen];
}

struct PlannerConfig {
  std::size_t tile_size = 336;
  std::size_t vit_patch_size = 14;
  std::size_t conv_total_stride = 32;
  std::vector<Resolution> candidates = default_candidates();

  void validate() const {
    if (tile_size == 0 || vit_patch_size == 0 || conv_total_stride == 0)
      throw ConfigError("planner: tile_size, patch size and stride must be positive");
    if (tile_size % vit_patch_size != 0) throw ConfigError("planner: tile_size must be a multiple of the patch size");
    if ((tile_size * conv_total_stride) % vit_patch_size != 0)
      throw ConfigError("planner: branch scale " + std::to_string(conv_total_stride) + "/" +
                        std::to_string(vit_patch_size) + " times tile_size " + std::to_string(tile_size) +
                        " is not integral");
    if (candidates.empty()) throw ConfigError("planner: empty candidate list");
    for (auto& c : candidates)
      if (c.width == 0 || c.height == 0 || c.width % tile_size != 0 || c.height % tile_size != 0)
        throw ConfigError("planner: candidate " + std::to_string(c.width) + "x" + std::to_string(c.height) +
                          " is not a multiple of tile_size");
  }

  /// The pretraining regime: the whole image goes into a single tile.
  PlannerConfig single_tile() const {
    PlannerConfig p = *this;
    p.candidates = {{tile_size, tile_size}};
    return p;
  }
};

struct Padding {
  std::size_t left = 0, top = 0, right = 0, bottom = 0;
  bool operator==(const Padding&) const = default;
};

struct CropPlan {
  std::size_t image_w = 0, image_h = 0;
  ResolutionCandidate chosen;
  std::size_t tile_size = 0;
  std::size_t grid_w = 0, grid_h = 0;  // n_w, n_h
  std::size_t resize_w = 0, resize_h = 0;
  Padding pad;
  std::size_t branch_num = 1, branch_den = 1;  // conv stride / patch size
  std::size_t highres_w = 0, highres_h = 0;
  std::size_t highres_resize_w = 0, highres_resize_h = 0;
  Padding highres_pad;

  std::size_t tile_count() const { return grid_w * grid_h; }
  std::size_t view_count() const { return 1 + tile_count(); }
  std::size_t canvas_w() const { return chosen.target.width; }
  std::size_t canvas_h() const { return chosen.target.height; }
  std::size_t highres_tile() const { return tile_size * branch_num / branch_den; }
};

inline CropPlan build_crop_plan(std::size_t w_l, std::size_t h_l, const PlannerConfig& config) {
  config.validate();
  CropPlan p;
  p.image_w = w_l;
  p.image_h = h_l;
  p.chosen = select_resolution(w_l, h_l, config.candidates);
  p.tile_size = config.tile_size;
  p.grid_w = p.chosen.target.width / config.tile_size;
  p.grid_h = p.chosen.target.height / config.tile_size;
  p.resize_w = std::clamp<std::size_t>(p.chosen.scaled_w, 1, p.chosen.target.width);
  p.resize_h = std::clamp<std::size_t>(p.chosen.scaled_h, 1, p.chosen.target.height);
  p.pad = {0, 0, p.chosen.target.width - p.resize_w, p.chosen.target.height - p.resize_h};
  p.branch_num = config.conv_total_stride;
  p.branch_den = config.vit_patch_size;
  p.highres_w = p.chosen.target.width * p.branch_num / p.branch_den;
  p.highres_h = p.chosen.target.height * p.branch_num / p.branch_den;
  p.highres_resize_w = std::clamp<std::size_t>(scaled_round(p.resize_w, p.branch_num, p.branch_den), 1, p.highres_w);
  p.highres_resize_h = std::clamp<std::size_t>(scaled_round(p.resize_h, p.branch_num, p.branch_den), 1, p.highres_h);
  p.highres_pad = {0, 0, p.highres_w - p.highres_resize_w, p.highres_h - p.highres_resize_h};
  return p;
}

/// Everything the two branches consume for one image.
template <std::floating_point T>
struct PlannedViews {
  Tensor<T> global_view;         // (3, tile, tile)
  std::vector<Tensor<T>> tiles;  // row-major, (3, tile, tile) each
  Tensor<T> canvas;              // resized + padded low-res image (3, H_h, W_h)
  Tensor<T> highres_image;       // (3, highres_h, highres_w)

  /// Global view first, then tiles: the order the ViT sees them.
  std::vector<Tensor<T>> views() const {
    std::vector<Tensor<T>> v{global_view};
    v.insert(v.end(), tiles.begin(), tiles.end());
    return v;
  }
};

namespace detail_plan {

template <class T>
Tensor<T> normalized(const ImageBuffer& img) {
  std::vector<T> v(img.values.size());
  const std::size_t hw = img.width * img.height;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < hw; ++i)
      v[c * hw + i] = static_cast<T>((img.values[c * hw + i] - img.norm.mean[c]) / img.norm.std[c]);
  return Tensor<T>(img.dims(), std::move(v));
}

// Top-left placement of `src` on a zero canvas.
template <class T>
Tensor<T> pad_bottom_right(const Tensor<T>& src, std::size_t h, std::size_t w) {
  const std::size_t C = src.dim(0), sh = src.dim(1), sw = src.dim(2);
  std::vector<T> v(C * h * w, T(0));
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < sh; ++y)
      std::copy_n(&src.data()[(c * sh + y) * sw], sw, &v[(c * h + y) * w]);
  return Tensor<T>({C, h, w}, std::move(v));
}

}  // namespace detail_plan

/// Produces the global view, the row-major tiles and the high-resolution
/// canvas. Padding is zero in normalized units.
template <std::floating_point T>
PlannedViews<T> apply_plan(const ImageBuffer& image, const CropPlan& plan) {
  image.validate();
  if (image.width != plan.image_w || image.height != plan.image_h)
    throw UsageError("apply_plan: image is " + std::to_string(image.width) + "x" + std::to_string(image.height) +
                     " but plan was built for " + std::to_string(plan.image_w) + "x" + std::to_string(plan.image_h));
  const Tensor<T> norm = detail_plan::normalized<T>(image);
  PlannedViews<T> out;
  const std::size_t t = plan.tile_size;
  out.global_view = ops::interpolate_bilinear(norm, t, t);
  out.canvas = detail_plan::pad_bottom_right(ops::interpolate_bilinear(norm, plan.resize_h, plan.resize_w),
                                             plan.canvas_h(), plan.canvas_w());
  for (std::size_t r = 0; r < plan.grid_h; ++r)
    for (std::size_t c = 0; c < plan.grid_w; ++c)
      out.tiles.push_back(ops::slice(ops::slice(out.canvas, 1, r * t, t), 2, c * t, t));
  out.highres_image = detail_plan::pad_bottom_right(
      ops::interpolate_bilinear(norm, plan.highres_resize_h, plan.highres_resize_w), plan.highres_h, plan.highres_w);
  return out;
}

/// Row-major indices of the tiles whose pixels read original pixel (x, y)
/// through the bilinear resize (any tap, including zero-weight ones).
inline std::set<std::size_t> influenced_tiles(const CropPlan& plan, std::size_t x, std::size_t y) {
  if (x >= plan.image_w || y >= plan.image_h) throw UsageError("influenced_tiles: pixel outside the image");
  auto hit = [](std::size_t src_extent, std::size_t out_extent, std::size_t s, std::size_t tile) {
    std::set<std::size_t> out;
    auto taps = ops::detail_ops::bilinear_taps(src_extent, out_extent);
    for (std::size_t i = 0; i < out_extent; ++i)
      if (src_extent == out_extent ? i == s : (taps[i].i0 == s || taps[i].i1 == s)) out.insert(i / tile);
    return out;
  };
  auto cols = hit(plan.image_w, plan.resize_w, x, plan.tile_size);
  auto rows = hit(plan.image_h, plan.resize_h, y, plan.tile_size);
  std::set<std::size_t> tiles;
  for (auto r : rows)
    for (auto c : cols) tiles.insert(r * plan.grid_w + c);
  return tiles;
}

}  // namespace tilefuse
