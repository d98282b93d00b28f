// Copyright (C) 2026 The tilefuse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "tilefuse/hybrid_encoder.hpp"
#include "tilefuse/init.hpp"
#include "tilefuse/rng.hpp"

namespace tilefuse {

/// An encoder together with the parameters it runs with.
template <std::floating_point T>
struct EncoderBundle {
  HybridEncoder<T> encoder;
  ParamSet<T> params;
};

template <std::floating_point T>
EncoderBundle<T> make_bundle(const EncoderConfig& config, std::uint64_t seed) {
  HybridEncoder<T> enc(config);
  ParamSet<T> p = enc.init_params(seed).with_grad(false);
  return {std::move(enc), std::move(p)};
}

/// Sets every fusion gate to `alpha`.
template <std::floating_point T>
ParamSet<T> with_alpha(const ParamSet<T>& params, double alpha) {
  ParamSet<T> out = params;
  for (auto& [name, t] : params)
    if (name.size() > 6 && name.compare(name.size() - 6, 6, ".alpha") == 0)
      out.set(name, Tensor<T>::full(t.dims(), static_cast<T>(alpha), t.requires_grad()));
  return out;
}

inline bool is_fusion_param(const std::string& name) { return name.rfind("fusion.", 0) == 0; }

// ---------------------------------------------------------------------------
// Glyphs.

struct Placement {
  enum class Kind { interior, straddling };
  Kind kind = Kind::interior;
  std::size_t tile = 0;      // interior: row-major tile index
  std::size_t boundary = 0;  // straddling: vertical boundaries first, then horizontal
  double overlap = 0.5;      // straddling: fraction of the glyph before the boundary
  double along = 0.5;        // position along the boundary (or inside the tile), 0..1
  long shift_x = 0, shift_y = 0;

  static Placement interior_at(std::size_t tile) { return {Kind::interior, tile}; }
  static Placement straddling_at(std::size_t boundary, double overlap) {
    Placement p;
    p.kind = Kind::straddling;
    p.boundary = boundary;
    p.overlap = overlap;
    return p;
  }
};

struct GlyphSpec {
  std::size_t glyph_w = 0, glyph_h = 0;
  std::vector<std::uint8_t> bitmap;  // row-major, 0 or 1
  Placement placement;
  std::size_t canvas_w = 0, canvas_h = 0;
  double background = 0.0;
  double foreground = 1.0;

  /// A hollow square with a centre dot.
  static GlyphSpec ring(std::size_t size, std::size_t canvas_w, std::size_t canvas_h) {
    if (size < 3) throw UsageError("glyph: size must be at least 3");
    GlyphSpec g;
    g.glyph_w = g.glyph_h = size;
    g.bitmap.assign(size * size, 0);
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x)
        if (x == 0 || y == 0 || x + 1 == size || y + 1 == size || (x == size / 2 && y == size / 2))
          g.bitmap[y * size + x] = 1;
    g.canvas_w = canvas_w;
    g.canvas_h = canvas_h;
    return g;
  }
};

struct PixelRect {
  long x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // half-open
};

namespace detail_probe {

inline long lround_half_up(double v) { return static_cast<long>(std::floor(v + 0.5)); }

// Canvas coordinate -> image coordinate along x (horizontal) or y.
inline double canvas_to_image(const CropPlan& plan, double c, bool horizontal) {
  return horizontal ? c * double(plan.image_w) / double(plan.resize_w) : c * double(plan.image_h) / double(plan.resize_h);
}

}  // namespace detail_probe

/// Top-left corner of the glyph in image pixels.
inline std::pair<long, long> glyph_origin(const GlyphSpec& g, const CropPlan& plan) {
  using detail_probe::canvas_to_image;
  using detail_probe::lround_half_up;
  const double t = double(plan.tile_size);
  double x = 0, y = 0;
  const Placement& pl = g.placement;
  if (pl.kind == Placement::Kind::interior) {
    if (pl.tile >= plan.tile_count()) throw UsageError("glyph: interior tile out of range");
    const std::size_t r = pl.tile / plan.grid_w, c = pl.tile % plan.grid_w;
    const double x0 = canvas_to_image(plan, c * t, true);
    const double x1 = canvas_to_image(plan, std::min((c + 1) * t, double(plan.resize_w)), true);
    const double y0 = canvas_to_image(plan, r * t, false);
    const double y1 = canvas_to_image(plan, std::min((r + 1) * t, double(plan.resize_h)), false);
    x = x0 + pl.along * (x1 - x0 - double(g.glyph_w));
    y = y0 + 0.5 * (y1 - y0 - double(g.glyph_h));
  } else {
    const std::size_t nv = plan.grid_w - 1, nh = plan.grid_h - 1;
    if (pl.boundary >= nv + nh) throw UsageError("glyph: boundary id out of range for this plan");
    if (!(pl.overlap > 0.0 && pl.overlap < 1.0)) throw UsageError("glyph: overlap fraction must be in (0,1)");
    if (pl.boundary < nv) {
      const double bx = canvas_to_image(plan, (pl.boundary + 1) * t, true);
      const double y0 = canvas_to_image(plan, 0, false);
      const double y1 = canvas_to_image(plan, std::min(t, double(plan.resize_h)), false);
      x = bx - pl.overlap * double(g.glyph_w);
      y = y0 + pl.along * (y1 - y0 - double(g.glyph_h));
    } else {
      const double by = canvas_to_image(plan, (pl.boundary - nv + 1) * t, false);
      const double x0 = canvas_to_image(plan, 0, true);
      const double x1 = canvas_to_image(plan, std::min(t, double(plan.resize_w)), true);
      y = by - pl.overlap * double(g.glyph_h);
      x = x0 + pl.along * (x1 - x0 - double(g.glyph_w));
    }
  }
  return {lround_half_up(x) + pl.shift_x, lround_half_up(y) + pl.shift_y};
}

inline PixelRect glyph_rect(const GlyphSpec& g, const CropPlan& plan) {
  auto [x, y] = glyph_origin(g, plan);
  return {x, y, x + long(g.glyph_w), y + long(g.glyph_h)};
}

/// Tiles whose resized pixels read any glyph pixel.
inline std::set<std::size_t> glyph_tiles(const GlyphSpec& g, const CropPlan& plan) {
  const PixelRect r = glyph_rect(g, plan);
  std::set<std::size_t> out;
  for (long y = std::max(0L, r.y0); y < std::min(long(plan.image_h), r.y1); ++y)
    for (long x = std::max(0L, r.x0); x < std::min(long(plan.image_w), r.x1); ++x)
      if (g.bitmap[std::size_t((y - r.y0) * long(g.glyph_w) + (x - r.x0))])
        for (auto t : influenced_tiles(plan, std::size_t(x), std::size_t(y))) out.insert(t);
  return out;
}

inline void check_glyph(const GlyphSpec& g, const CropPlan& plan) {
  if (g.bitmap.size() != g.glyph_w * g.glyph_h || g.glyph_w == 0) throw UsageError("glyph: bitmap size mismatch");
  if (g.canvas_w != plan.image_w || g.canvas_h != plan.image_h) throw UsageError("glyph: canvas does not match the plan");
  const double sx = double(plan.resize_w) / double(plan.image_w), sy = double(plan.resize_h) / double(plan.image_h);
  if (double(g.glyph_w) * sx > double(plan.tile_size) || double(g.glyph_h) * sy > double(plan.tile_size))
    throw UsageError("glyph: larger than a tile");
  glyph_origin(g, plan);  // placement range checks
  if (g.placement.kind == Placement::Kind::straddling && glyph_tiles(g, plan).size() < 2)
    throw UsageError("glyph: straddling placement touches a single tile");
}

/// Draws the glyph onto `img` (all three channels).
inline void draw_glyph(ImageBuffer& img, const GlyphSpec& g, const CropPlan& plan) {
  const PixelRect r = glyph_rect(g, plan);
  for (long y = std::max(0L, r.y0); y < std::min(long(img.height), r.y1); ++y)
    for (long x = std::max(0L, r.x0); x < std::min(long(img.width), r.x1); ++x)
      if (g.bitmap[std::size_t((y - r.y0) * long(g.glyph_w) + (x - r.x0))])
        for (std::size_t c = 0; c < 3; ++c) img.at(c, std::size_t(y), std::size_t(x)) = g.foreground;
}

inline ImageBuffer render_glyph(const GlyphSpec& g, const CropPlan& plan) {
  check_glyph(g, plan);
  ImageBuffer img = ImageBuffer::filled(g.canvas_w, g.canvas_h, g.background);
  draw_glyph(img, g, plan);
  return img;
}

// ---------------------------------------------------------------------------
// Cross-tile saliency.

struct SaliencyTarget {
  std::size_t view = 1;  // a local view (>= 1)
  std::size_t token = 0;
};

struct ProbePixel {
  std::size_t x = 0, y = 0;
};

struct SaliencyResult {
  std::vector<double> responses;           // one per probe pixel
  std::map<std::size_t, double> tile_max;  // tile owning the probe pixel -> max response
  double max_response = 0.0;
};

/// Probe pixels for every tile other than the target's: points along the
/// tile diagonal plus the point nearest the target tile. Pixels the target
/// tile reads through the resize are skipped or walked away from.
inline std::vector<ProbePixel> default_probe_pixels(const CropPlan& plan, std::size_t target_tile, std::size_t per_tile) {
  std::vector<ProbePixel> out;
  const double sx = double(plan.image_w) / double(plan.resize_w), sy = double(plan.image_h) / double(plan.resize_h);
  const double ts = double(plan.tile_size);
  auto to_image = [&](double cx, double cy) {
    return ProbePixel{std::min(plan.image_w - 1, std::size_t(cx * sx)), std::min(plan.image_h - 1, std::size_t(cy * sy))};
  };
  const double tx = (double(target_tile % plan.grid_w) + 0.5) * ts, ty = (double(target_tile / plan.grid_w) + 0.5) * ts;
  for (std::size_t t = 0; t < plan.tile_count(); ++t) {
    if (t == target_tile) continue;
    const double x0 = double(t % plan.grid_w) * ts, y0 = double(t / plan.grid_w) * ts;
    const double x1 = std::min(x0 + ts, double(plan.resize_w)), y1 = std::min(y0 + ts, double(plan.resize_h));
    if (x0 >= x1 || y0 >= y1) continue;  // tile lies entirely in the padding
    for (std::size_t k = 0; k < per_tile; ++k) {
      const double f = (double(k) + 0.5) / double(per_tile);
      const double cx = x0 + f * ts, cy = y0 + f * ts;
      if (cx >= x1 || cy >= y1) continue;
      ProbePixel px = to_image(cx, cy);
      if (!influenced_tiles(plan, px.x, px.y).count(target_tile)) out.push_back(px);
    }
    // Nearest point to the target tile's centre, stepped inward until the
    // target tile no longer reads it.
    double cx = std::clamp(tx, x0, x1 - 1), cy = std::clamp(ty, y0, y1 - 1);
    const double mx = 0.5 * (x0 + x1), my = 0.5 * (y0 + y1);
    for (int guard = 0; guard < int(plan.tile_size); ++guard) {
      ProbePixel px = to_image(cx, cy);
      if (!influenced_tiles(plan, px.x, px.y).count(target_tile)) {
        if (std::none_of(out.begin(), out.end(), [&](const ProbePixel& q) { return q.x == px.x && q.y == px.y; }))
          out.push_back(px);
        break;
      }
      cx += cx < mx ? 1.0 : (cx > mx ? -1.0 : 0.0);
      cy += cy < my ? 1.0 : (cy > my ? -1.0 : 0.0);
    }
  }
  return out;
}

/// Central-difference response of the target token's L2 norm to each probe
/// pixel (all three channels perturbed together by +-eps).
template <std::floating_point T>
SaliencyResult cross_tile_saliency(const EncoderBundle<T>& bundle, const ImageBuffer& image, SaliencyTarget target,
                                   const std::vector<ProbePixel>& probes, double eps = 1e-3) {
  const CropPlan plan = bundle.encoder.plan_for(image.width, image.height);
  if (target.view == 0 || target.view > plan.tile_count())
    throw UsageError("cross_tile_saliency: target must be a local view 1.." + std::to_string(plan.tile_count()));
  const std::size_t target_tile = target.view - 1;
  const std::size_t tokens = bundle.encoder.config().vit.patch_tokens();
  if (target.token >= tokens) throw UsageError("cross_tile_saliency: token index out of range");
  for (auto& px : probes) {
    if (px.x >= image.width || px.y >= image.height) throw UsageError("cross_tile_saliency: probe pixel outside image");
    if (influenced_tiles(plan, px.x, px.y).count(target_tile))
      throw UsageError("cross_tile_saliency: probe pixel (" + std::to_string(px.x) + "," + std::to_string(px.y) +
                       ") lies in the target tile");
  }
  const ParamSet<T> params = bundle.params.with_grad(false);
  auto token_norm = [&](const ImageBuffer& img) {
    const VisualTokens<T> vt = bundle.encoder.encode(img, params);
    const Tensor<T>& v = vt.views.at(target.view);
    const std::size_t d = v.dim(1);
    T acc = 0;
    for (std::size_t i = 0; i < d; ++i) acc += v[target.token * d + i] * v[target.token * d + i];
    return std::sqrt(acc);
  };
  SaliencyResult out;
  for (auto& px : probes) {
    ImageBuffer plus = image, minus = image;
    for (std::size_t c = 0; c < 3; ++c) {
      plus.at(c, px.y, px.x) += eps;
      minus.at(c, px.y, px.x) -= eps;
    }
    const double r = std::abs(double(token_norm(plus) - token_norm(minus))) / (2.0 * eps);
    out.responses.push_back(r);
    const std::size_t cx = px.x * plan.resize_w / plan.image_w, cy = px.y * plan.resize_h / plan.image_h;
    const std::size_t owner = (cy / plan.tile_size) * plan.grid_w + cx / plan.tile_size;
    auto [it, fresh] = out.tile_max.emplace(owner, r);
    if (!fresh) it->second = std::max(it->second, r);
    out.max_response = std::max(out.max_response, r);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Boundary shift probe.

struct DriftEntry {
  long shift = 0;
  std::size_t tiles_touched = 0;
  double feature_drift = 0.0;
};

/// Mean of the local-view tokens whose patch overlaps the glyph.
template <std::floating_point T>
std::vector<double> glyph_descriptor(const VisualTokens<T>& vt, const GlyphSpec& g, std::size_t patch) {
  const CropPlan& plan = vt.plan;
  const PixelRect r = glyph_rect(g, plan);
  const double sx = double(plan.resize_w) / double(plan.image_w), sy = double(plan.resize_h) / double(plan.image_h);
  const double gx0 = r.x0 * sx, gx1 = r.x1 * sx, gy0 = r.y0 * sy, gy1 = r.y1 * sy;
  const std::size_t gsz = plan.tile_size / patch, d = vt.views.at(1).dim(1);
  std::vector<double> acc(d, 0.0);
  std::size_t n = 0;
  for (std::size_t t = 0; t < plan.tile_count(); ++t) {
    const std::size_t tr = t / plan.grid_w, tc = t % plan.grid_w;
    const Tensor<T>& v = vt.views[t + 1];
    for (std::size_t i = 0; i < gsz; ++i)
      for (std::size_t j = 0; j < gsz; ++j) {
        const double px0 = double(tc * plan.tile_size + j * patch), py0 = double(tr * plan.tile_size + i * patch);
        if (px0 >= gx1 || px0 + double(patch) <= gx0 || py0 >= gy1 || py0 + double(patch) <= gy0) continue;
        for (std::size_t k = 0; k < d; ++k) acc[k] += double(v[(i * gsz + j) * d + k]);
        ++n;
      }
  }
  if (n == 0) throw UsageError("glyph_descriptor: glyph covers no token");
  for (auto& a : acc) a /= double(n);
  return acc;
}

/// 1 - cos(a, b), clamped at 0; exactly 0 for identical vectors.
inline double cosine_distance(const std::vector<double>& a, const std::vector<double>& b) {
  if (a == b) return 0.0;
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0 || bb == 0) throw NumericError("cosine_distance: zero vector");
  return std::max(0.0, 1.0 - ab / std::sqrt(aa * bb));
}

/// Drift of the glyph-covering tokens as the glyph moves by each horizontal
/// shift, relative to the unshifted placement.
template <std::floating_point T>
std::vector<DriftEntry> boundary_shift_probe(const EncoderBundle<T>& bundle, const GlyphSpec& glyph,
                                             const std::vector<long>& shifts) {
  const CropPlan plan = bundle.encoder.plan_for(glyph.canvas_w, glyph.canvas_h);
  check_glyph(glyph, plan);
  const std::size_t patch = bundle.encoder.config().vit.patch_size;
  const ParamSet<T> params = bundle.params.with_grad(false);
  const auto base = glyph_descriptor(bundle.encoder.encode(render_glyph(glyph, plan), params), glyph, patch);
  std::vector<DriftEntry> out;
  for (long s : shifts) {
    GlyphSpec moved = glyph;
    moved.placement.shift_x += s;
    const PixelRect r = glyph_rect(moved, plan);
    if (r.x0 < 0 || r.x1 > long(plan.image_w)) throw UsageError("boundary_shift_probe: shift moves the glyph off the image");
    ImageBuffer img = ImageBuffer::filled(moved.canvas_w, moved.canvas_h, moved.background);
    draw_glyph(img, moved, plan);
    const auto desc = glyph_descriptor(bundle.encoder.encode(img, params), moved, patch);
    out.push_back({s, glyph_tiles(moved, plan).size(), cosine_distance(base, desc)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Toy two-stage training on a glyph-count task.

struct GlyphCountTask {
  std::size_t image_w = 64, image_h = 64;
  std::size_t samples = 8;
  std::size_t max_count = 4;
  std::size_t glyph_size = 8;
};

struct Sample {
  ImageBuffer image;
  double label = 0.0;  // count / max_count
  std::size_t straddling = 0;
};

/// Images with 0..max_count glyphs; every odd-numbered glyph straddles a tile
/// boundary, the others sit inside a tile.
inline std::vector<Sample> make_glyph_count_dataset(const GlyphCountTask& task, const CropPlan& plan, std::uint64_t seed) {
  if (task.max_count == 0 || task.samples == 0) throw UsageError("glyph count task: empty task");
  const std::size_t boundaries = plan.grid_w - 1 + plan.grid_h - 1;
  Rng rng = Rng::for_stream(seed, "probe.dataset");
  std::vector<Sample> out;
  for (std::size_t s = 0; s < task.samples; ++s) {
    Sample smp;
    smp.image = ImageBuffer::filled(task.image_w, task.image_h, 0.0);
    const std::size_t k = std::size_t(rng.below(task.max_count + 1));
    for (std::size_t j = 0; j < k; ++j) {
      GlyphSpec g = GlyphSpec::ring(task.glyph_size, task.image_w, task.image_h);
      if (j % 2 == 1 && boundaries > 0) {
        g.placement = Placement::straddling_at(std::size_t(rng.below(boundaries)), rng.uniform(0.25, 0.75));
        ++smp.straddling;
      } else {
        g.placement = Placement::interior_at(std::size_t(rng.below(plan.tile_count())));
      }
      g.placement.along = rng.uniform(0.0, 1.0);
      check_glyph(g, plan);
      draw_glyph(smp.image, g, plan);
    }
    smp.label = double(k) / double(task.max_count);
    out.push_back(std::move(smp));
  }
  return out;
}

struct TrainSchedule {
  std::size_t stage1_steps = 60;
  std::size_t stage2_steps = 60;
  double stage1_lr = 0.01;
  double stage2_lr = 0.001;
};

struct CurvePoint {
  std::size_t step = 0;
  int stage = 1;
  double loss = 0.0;
};

template <std::floating_point T>
struct TrainResult {
  std::vector<CurvePoint> curve;  // loss before each update
  double initial_loss = 0.0;
  double final_loss = 0.0;  // after the last update
  bool stage1_frozen_bit_identical = false;
  ParamSet<T> params;  // trained, head included
};

inline constexpr const char* kHeadWeight = "head.weight";
inline constexpr const char* kHeadBias = "head.bias";

/// Mean-pooled tokens of every view -> linear head -> scalar.
template <std::floating_point T>
Tensor<T> head_predict(const VisualTokens<T>& vt, const ParamSet<T>& p) {
  return ops::linear(ops::mean_rows(ops::concat(vt.views, 0)), p.at(kHeadWeight), p.at(kHeadBias));
}

namespace detail_probe {

template <class T>
bool bit_identical(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.dims() != b.dims()) return false;
  return std::equal(a.data().begin(), a.data().end(), b.data().begin(),
                    [](T x, T y) { return std::memcmp(&x, &y, sizeof(T)) == 0; });
}

}  // namespace detail_probe

/// Plain gradient descent: stage 1 updates the pretrain partition only (the
/// conv features are computed once), stage 2 updates everything.
template <std::floating_point T>
TrainResult<T> toy_train(const EncoderBundle<T>& bundle, const GlyphCountTask& task, const TrainSchedule& schedule,
                         std::uint64_t seed) {
  const HybridEncoder<T>& enc = bundle.encoder;
  const CropPlan plan = enc.plan_for(task.image_w, task.image_h);
  const auto data = make_glyph_count_dataset(task, plan, seed);
  const std::size_t d = enc.config().vit.embed_dim;

  ParamSet<T> p = bundle.params.with_grad(false);
  if (!p.contains(kHeadWeight)) {
    p.insert(kHeadWeight, init_trunc_normal<T>(seed, kHeadWeight, {1, d}));
    p.insert(kHeadBias, init_constant<T>({1}, T(0)));
  }
  const ParamSet<T> init = p;

  auto loss_of = [&](const ParamSet<T>& params, const std::vector<PreparedInput<T>>* cached) {
    Tensor<T> total;
    for (std::size_t i = 0; i < data.size(); ++i) {
      const VisualTokens<T> vt = cached ? enc.encode_prepared((*cached)[i], params) : enc.encode(data[i].image, params);
      Tensor<T> err = ops::sub(head_predict(vt, params), Tensor<T>({1, 1}, {static_cast<T>(data[i].label)}));
      Tensor<T> sq = ops::sum(ops::square(err));
      total = total.defined() ? ops::add(total, sq) : sq;
    }
    return ops::scale(total, T(1) / static_cast<T>(data.size()));
  };

  TrainResult<T> out;
  std::size_t step = 0;
  auto run_stage = [&](int stage, std::size_t steps, double lr, const std::vector<std::string>& trainable,
                       const std::vector<PreparedInput<T>>* cached) {
    const std::set<std::string> train(trainable.begin(), trainable.end());
    for (std::size_t k = 0; k < steps; ++k, ++step) {
      const ParamSet<T> live = p.with_grad_where([&](const std::string& n) { return train.count(n) > 0; });
      try {
        const Tensor<T> loss = loss_of(live, cached);
        const double lv = double(loss.item());
        if (!std::isfinite(lv)) throw NumericError("non-finite loss");
        out.curve.push_back({step, stage, lv});
        const GradMap<T> g = backward(loss, live);
        for (auto& name : trainable) {
          const Tensor<T>& w = p.at(name);
          const Tensor<T>& gw = g.at(name);
          std::vector<T> nv = w.values();
          for (std::size_t i = 0; i < nv.size(); ++i) nv[i] -= static_cast<T>(lr) * gw[i];
          p.set(name, Tensor<T>(w.dims(), std::move(nv)));
        }
      } catch (const NumericError& e) {
        throw NumericError("toy_train: divergence at step " + std::to_string(step) + ": " + e.what());
      }
    }
  };

  // Stage 1: branches frozen, so their stage features never change.
  {
    const ParamSet<T> frozen_view = p.with_grad(false);
    std::vector<PreparedInput<T>> cached;
    for (auto& s : data) cached.push_back(enc.prepare(s.image, frozen_view));
    run_stage(1, schedule.stage1_steps, schedule.stage1_lr, parameter_partition(p, TrainingStage::pretrain).trainable,
              &cached);
  }
  out.stage1_frozen_bit_identical = true;
  for (auto& name : parameter_partition(p, TrainingStage::pretrain).frozen)
    out.stage1_frozen_bit_identical &= detail_probe::bit_identical(p.at(name), init.at(name));

  run_stage(2, schedule.stage2_steps, schedule.stage2_lr, parameter_partition(p, TrainingStage::finetune).trainable,
            nullptr);

  out.initial_loss = out.curve.empty() ? double(loss_of(p, nullptr).item()) : out.curve.front().loss;
  out.final_loss = double(loss_of(p.with_grad(false), nullptr).item());
  if (!std::isfinite(out.final_loss)) throw NumericError("toy_train: divergence at step " + std::to_string(step));
  out.params = p.with_grad(false);
  return out;
}

// ---------------------------------------------------------------------------
// Gradient check of the fusion path.

struct GradcheckOptions {
  double rtol = 1e-3;
  double atol = 1e-6;
  double eps = 1e-6;
  std::size_t max_coords = 0;  // per tensor; 0 = every coordinate
  bool corrupt = false;        // negative control: perturb one analytic entry
};

struct GradcheckEntry {
  std::string name;
  std::size_t coords = 0;
  double max_abs_err = 0.0;
  double max_rel_err = 0.0;
  std::size_t worst_index = 0;
  bool pass = true;
};

struct GradcheckReport {
  std::string variant;
  std::vector<GradcheckEntry> entries;

  bool pass() const {
    return std::all_of(entries.begin(), entries.end(), [](const GradcheckEntry& e) { return e.pass; });
  }
  const GradcheckEntry* worst() const {
    const GradcheckEntry* w = nullptr;
    for (auto& e : entries)
      if (!w || e.max_rel_err > w->max_rel_err) w = &e;
    return w;
  }
};

/// Analytic vs central-difference gradients of a fixed random projection of
/// the visual tokens, over every fusion parameter. `params` should have
/// nonzero gates, or most fusion gradients vanish.
inline GradcheckReport fusion_gradcheck(const HybridEncoder<double>& enc, const ParamSet<double>& params,
                                        const ImageBuffer& image, std::uint64_t seed, const GradcheckOptions& opt = {}) {
  GradcheckReport rep;
  const ParamSet<double> frozen = params.with_grad(false);
  const PreparedInput<double> prep = enc.prepare(image, frozen);
  const std::size_t V = prep.views.size(), n = enc.config().vit.patch_tokens(), d = enc.config().vit.embed_dim;
  Rng rng = Rng::for_stream(seed, "gradcheck.projection");
  std::vector<double> wv(V * n * d);
  for (auto& v : wv) v = rng.normal();
  const Tensor<double> w({V * n, d}, std::move(wv));
  auto f = [&](const ParamSet<double>& p) {
    return ops::sum(ops::mul(ops::concat(enc.encode_prepared(prep, p).views, 0), w));
  };

  const ParamSet<double> live = params.with_grad_where(is_fusion_param);
  const GradMap<double> analytic = backward(f(live), live);

  CoordSelection coords;
  for (auto& [name, t] : params) {
    if (!is_fusion_param(name)) continue;
    auto& c = coords[name];
    const std::size_t k = opt.max_coords ? std::min(opt.max_coords, t.size()) : t.size();
    for (std::size_t i = 0; i < k; ++i) c.push_back(i * t.size() / k);
  }
  const SparseGrad<double> numeric = finite_difference_probe<double>(f, params, coords, opt.eps);

  bool corrupted = false;
  for (auto& [name, list] : numeric.entries) {
    GradcheckEntry e;
    e.name = name;
    e.coords = list.size();
    const Tensor<double>& a = analytic.at(name);
    for (auto [i, num] : list) {
      double an = a[i];
      if (opt.corrupt && !corrupted) {
        an += 1e-2 * (1.0 + std::abs(an));
        corrupted = true;
      }
      const double abs_err = std::abs(an - num);
      const double rel = abs_err / std::max({std::abs(an), std::abs(num), opt.atol});
      if (!(abs_err <= opt.atol + opt.rtol * std::abs(num))) e.pass = false;
      if (rel > e.max_rel_err || (rel == e.max_rel_err && abs_err > e.max_abs_err)) {
        e.max_rel_err = rel;
        e.worst_index = i;
      }
      e.max_abs_err = std::max(e.max_abs_err, abs_err);
    }
    rep.entries.push_back(std::move(e));
  }
  return rep;
}

/// Random gates in [lo, hi], one stream per gate.
template <std::floating_point T>
ParamSet<T> with_random_alpha(const ParamSet<T>& params, std::uint64_t seed, double lo = 0.3, double hi = 0.7) {
  ParamSet<T> out = params;
  for (auto& [name, t] : params)
    if (name.size() > 6 && name.compare(name.size() - 6, 6, ".alpha") == 0) {
      Rng rng = Rng::for_stream(seed, name + ".gradcheck");
      out.set(name, Tensor<T>::full(t.dims(), static_cast<T>(rng.uniform(lo, hi)), t.requires_grad()));
    }
  return out;
}

// ---------------------------------------------------------------------------
// Reports.

struct MetricRecord {
  std::string config_hash;
  std::string variant;
  std::string metric;
  double value = 0.0;
  std::uint64_t seed = 0;
};

struct CurveRecord {
  std::string variant;
  CurvePoint point;
};

struct ProbeReport {
  std::vector<MetricRecord> records;
  std::vector<CurveRecord> curves;

  void add(const std::string& hash, const std::string& variant, const std::string& metric, double value,
           std::uint64_t seed) {
    if (!std::isfinite(value)) throw NumericError("probe report: non-finite metric " + variant + "/" + metric);
    records.push_back({hash, variant, metric, value, seed});
  }

  nlohmann::json to_json() const {
    nlohmann::json recs = nlohmann::json::array();
    for (auto& r : records)
      recs.push_back(
          {{"config_hash", r.config_hash}, {"variant", r.variant}, {"metric", r.metric}, {"value", r.value}, {"seed", r.seed}});
    return {{"schema_version", 1}, {"records", recs}};
  }

  std::string curves_csv() const {
    std::string out = "variant,step,stage,loss\n";
    char buf[64];
    for (auto& c : curves) {
      std::snprintf(buf, sizeof buf, ",%zu,%d,%.17g\n", c.point.step, c.point.stage, c.point.loss);
      out += c.variant + buf;
    }
    return out;
  }
};

}  // namespace tilefuse
