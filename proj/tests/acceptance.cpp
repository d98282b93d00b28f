// Copyright (C) 2026 The tilefuse Authors
// SPDX-License-Identifier: Apache-2.0

// Acceptance run: one PASS/FAIL line per criterion, exit status 0 only if
// every criterion passes within its time budget.

#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "tilefuse/tilefuse.hpp"

namespace fs = std::filesystem;
using namespace tilefuse;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string source(const std::string& rel) { return std::string(TILEFUSE_SOURCE_DIR) + "/" + rel; }

template <class... A>
std::string fmt(const char* f, A... a) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, a...);
  return buf;
}

bool bit_equal(const Tensor<double>& a, const Tensor<double>& b) {
  return a.dims() == b.dims() && std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(double)) == 0;
}

ImageBuffer noise_image(std::size_t w, std::size_t h, std::uint64_t seed) {
  ImageBuffer img = ImageBuffer::filled(w, h, 0.0);
  Rng rng = Rng::for_stream(seed, "acceptance.image");
  for (auto& v : img.values) v = rng.uniform();
  return img;
}

// 1 ---------------------------------------------------------------------------

Outcome alignment_shapes() {
  EncoderConfig c = EncoderConfig::paper_scale();
  c.force_single_tile = true;
  const ShapeReport r = dry_run_shapes(c, 336, 336);
  const Dims in[4] = {{192, 192, 192}, {384, 96, 96}, {768, 48, 48}, {1536, 24, 24}};
  const Dims out[4] = {{3072, 24, 24}, {1536, 24, 24}, {3072, 24, 24}, {1536, 24, 24}};
  const std::size_t layer[4] = {2, 6, 12, 20};
  std::string bad;
  for (std::size_t s = 0; s < 4; ++s) {
    const StageShape& st = r.stages[s];
    if (st.input != in[s] || st.aligned != out[s] || st.vit_layer != layer[s] || st.vit_dims != Dims{1024, 24, 24})
      bad += fmt(" stage %zu: %s -> %s @%zu vit %s;", s + 1, dims_str(st.input).c_str(), dims_str(st.aligned).c_str(),
                 st.vit_layer, dims_str(st.vit_dims).c_str());
  }
  if (!bad.empty()) return {false, "mismatch:" + bad};
  return {true, "4 stages match, ViT (1024,24,24) at layers 2/6/12/20"};
}

// 2 ---------------------------------------------------------------------------

struct Scored {
  std::uint64_t eff, wasted;
};

// Direct evaluation: scale = min(W/w, H/h), scaled extents rounded half up
// and clipped to the target, eff = min(scaled area, original area).
Scored brute_force(std::uint64_t w, std::uint64_t h, std::uint64_t W, std::uint64_t H) {
  const bool by_width = W * h <= H * w;
  const std::uint64_t num = by_width ? W : H, den = by_width ? w : h;
  auto round_scaled = [&](std::uint64_t v) {
    const std::uint64_t q = v * num / den, r = v * num % den;
    return q + (2 * r >= den ? 1 : 0);
  };
  const std::uint64_t ws = std::min(W, round_scaled(w)), hs = std::min(H, round_scaled(h));
  const std::uint64_t eff = std::min(ws * hs, w * h);
  return {eff, W * H - eff};
}

std::size_t brute_choice(std::uint64_t w, std::uint64_t h, const std::vector<Resolution>& cands) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < cands.size(); ++i) {
    const Scored a = brute_force(w, h, cands[i].width, cands[i].height);
    const Scored b = brute_force(w, h, cands[best].width, cands[best].height);
    if (a.eff > b.eff || (a.eff == b.eff && a.wasted < b.wasted)) best = i;
  }
  return best;
}

Outcome resolution_selection() {
  const auto& cands = default_candidates();
  Rng rng = Rng::for_stream(2026, "acceptance.sizes");
  std::size_t checked = 0;
  auto check = [&](std::uint64_t w, std::uint64_t h) -> std::string {
    const ResolutionRanking r = rank_resolutions(w, h, cands);
    const std::size_t want = brute_choice(w, h, cands);
    if (r.chosen != want) return fmt("%llux%llu chose %zu, oracle %zu", (unsigned long long)w, (unsigned long long)h, r.chosen, want);
    for (std::size_t i = 0; i < cands.size(); ++i) {
      const Scored s = brute_force(w, h, cands[i].width, cands[i].height);
      if (r.scored[i].res_eff != s.eff || r.scored[i].res_wasted != s.wasted)
        return fmt("%llux%llu candidate %zu scores differ", (unsigned long long)w, (unsigned long long)h, i);
    }
    ++checked;
    return "";
  };
  for (int i = 0; i < 1000; ++i) {
    const std::uint64_t w = 1 + rng.below(4000), h = 1 + rng.below(4000);
    if (auto e = check(w, h); !e.empty()) return {false, e};
  }
  const ResolutionCandidate a = select_resolution(800, 600, cands);
  if (a.target != Resolution{672, 672} || a.res_eff != 338688 || a.res_wasted != 112896)
    return {false, "800x600 worked example"};
  const ResolutionCandidate b = select_resolution(2000, 500, cands);
  if (b.target != Resolution{1008, 336} || b.res_eff != 254016 || b.res_wasted != 84672)
    return {false, "2000x500 worked example"};
  const ResolutionRanking c = rank_resolutions(336, 336, cands);
  for (auto& s : c.scored)
    if (s.res_eff != 112896) return {false, "336x336: res_eff not tied"};
  if (c.scored[0].res_wasted != c.scored[1].res_wasted || c.scored[0].res_wasted >= c.scored[2].res_wasted)
    return {false, "336x336: wasted tie chain"};
  if (c.chosen != 0 || c.tie_break != TieBreak::list_order) return {false, "336x336: list order"};
  for (auto [w, h] : {std::pair{800, 600}, {2000, 500}, {336, 336}})
    if (auto e = check(w, h); !e.empty()) return {false, e};
  return {true, fmt("%zu sizes match the oracle, worked examples exact", checked)};
}

// 3 ---------------------------------------------------------------------------

Outcome gate_zero_identity() {
  const EncoderConfig base = EncoderConfig::desk();
  const ImageBuffer img = noise_image(96, 96, 3);
  HybridEncoder<double> ds(make_variant(base, "ds"));
  const auto ds_tokens = ds.encode(img, ds.init_params(7));
  std::size_t n = 0;
  for (auto& name : default_ablation_matrix()) {
    if (name == "ds") continue;
    HybridEncoder<double> enc(make_variant(base, name));
    const auto p = with_alpha(enc.init_params(7), 0.0);
    const auto vt = enc.encode(img, p);
    if (vt.views.size() != ds_tokens.views.size()) return {false, name + ": view count"};
    for (std::size_t v = 0; v < vt.views.size(); ++v)
      if (!bit_equal(vt.views[v], ds_tokens.views[v])) return {false, name + ": view " + std::to_string(v) + " differs"};
    ++n;
  }
  return {true, fmt("%zu fusion variants bit-identical to ds at alpha 0", n)};
}

// 4 ---------------------------------------------------------------------------

Outcome cross_tile_separation() {
  const ImageBuffer img = noise_image(96, 96, 4);
  const EncoderConfig base = EncoderConfig::desk();
  const CropPlan plan = build_crop_plan(96, 96, base.effective_planner());
  std::string detail;
  std::size_t n_probes = 0;
  for (std::size_t view : {1, 4}) {
    const auto probes = default_probe_pixels(plan, view - 1, 3);
    const SaliencyTarget target{view, view == 1 ? std::size_t(2 * 6 + 5) : std::size_t(3 * 6)};
    auto ds = make_bundle<double>(make_variant(base, "ds"), 7);
    ds.params = with_alpha(ds.params, 0.5);
    const auto r0 = cross_tile_saliency(ds, img, target, probes);
    for (double r : r0.responses)
      if (r != 0.0) return {false, fmt("ds response %.3g for view %zu", r, view)};
    for (const char* v : {"multi_channel_interp", "multi_local_ca_interp", "multi_global_ca_interp", "multi_add_interp"}) {
      auto hy = make_bundle<double>(make_variant(base, v), 7);
      hy.params = with_alpha(hy.params, 0.5);
      const auto r1 = cross_tile_saliency(hy, img, target, probes);
      if (!(r1.max_response > 0.0)) return {false, fmt("%s view %zu: max response 0", v, view)};
      if (view == 1) detail += fmt(" %s %.2e", v + 6, r1.max_response);
    }
    n_probes += probes.size();
  }
  return {true, fmt("%zu probes over 2 targets, ds all 0; hybrid max (view 1):", n_probes) + detail};
}

// 5 ---------------------------------------------------------------------------

Outcome gradient_correctness() {
  std::string detail;
  std::size_t tensors = 0, coords = 0;
  for (auto mode : {FusionMode::channel, FusionMode::local_ca, FusionMode::global_ca, FusionMode::add}) {
    // Desk config: every fusion tensor, four coordinates each.
    {
      EncoderConfig c = EncoderConfig::desk();
      c.fusion.mode = mode;
      HybridEncoder<double> enc(c);
      const auto p = with_random_alpha(enc.init_params(7), 7);
      GradcheckOptions opt;
      opt.max_coords = 4;
      const auto rep = fusion_gradcheck(enc, p, noise_image(96, 96, 5), 7, opt);
      std::size_t fusion_tensors = 0;
      for (auto& n : p.names()) fusion_tensors += is_fusion_param(n);
      if (rep.entries.size() != fusion_tensors) return {false, std::string(to_string(mode)) + ": tensors skipped"};
      if (!rep.pass())
        return {false, fmt("desk %s: %s rel %.3g", to_string(mode), rep.worst()->name.c_str(), rep.worst()->max_rel_err)};
      tensors += rep.entries.size();
      for (auto& e : rep.entries) coords += e.coords;
    }
    // Small config: every coordinate of every fusion tensor.
    {
      EncoderConfig c = load_encoder_spec(source("configs/gradcheck.json")).encoder;
      c.fusion.mode = mode;
      HybridEncoder<double> enc(c);
      const auto p = with_random_alpha(enc.init_params(11), 11);
      const auto rep = fusion_gradcheck(enc, p, noise_image(32, 32, 6), 11);
      if (!rep.pass())
        return {false, fmt("small %s: %s rel %.3g", to_string(mode), rep.worst()->name.c_str(), rep.worst()->max_rel_err)};
      tensors += rep.entries.size();
      for (auto& e : rep.entries) coords += e.coords;
    }
  }
  return {true, fmt("4 modes, %zu tensors, %zu coordinates within rtol 1e-3 / atol 1e-6", tensors, coords)};
}

// 6 ---------------------------------------------------------------------------

Outcome round_trips() {
  std::size_t n = 0;
  const std::pair<std::size_t, std::size_t> sizes[] = {{96, 96}, {70, 40}, {33, 150}, {800, 600}, {2000, 500}};
  for (auto [w, h] : sizes) {
    const PlannerConfig pc = w >= 200 ? PlannerConfig{} : EncoderConfig::desk().effective_planner();
    const CropPlan plan = build_crop_plan(w, h, pc);
    const auto pv = apply_plan<double>(noise_image(w, h, w + h), plan);
    std::vector<Tensor<double>> rows;
    for (std::size_t r = 0; r < plan.grid_h; ++r) {
      std::vector<Tensor<double>> row(pv.tiles.begin() + long(r * plan.grid_w),
                                      pv.tiles.begin() + long((r + 1) * plan.grid_w));
      rows.push_back(ops::concat(row, 2));
    }
    if (!bit_equal(ops::concat(rows, 1), pv.canvas)) return {false, fmt("tiles of %zux%zu do not rebuild the canvas", w, h)};
    ++n;
  }
  const TokenGrid grids[] = {{6, 2, 2}, {6, 1, 2}, {6, 2, 1}, {3, 3, 1}, {24, 2, 2}};
  for (const TokenGrid& g : grids) {
    for (std::size_t stage = 1; stage <= 4; ++stage) {
      Rng rng = Rng::for_stream(stage, "acceptance.map");
      std::vector<double> v(5 * g.g * g.grid_h * g.g * g.grid_w);
      for (auto& x : v) x = rng.normal();
      const Tensor<double> map({5, g.g * g.grid_h, g.g * g.grid_w}, v);
      const auto set = segment_views(AlignedStage<double>{stage, map}, g);
      std::vector<Tensor<double>> rows;
      for (std::size_t r = 0; r < g.grid_h; ++r) {
        std::vector<Tensor<double>> row(set.locals.begin() + long(r * g.grid_w), set.locals.begin() + long((r + 1) * g.grid_w));
        rows.push_back(ops::concat(row, 2));
      }
      if (!bit_equal(ops::concat(rows, 1), map)) return {false, "counterpart locals do not rebuild the aligned stage"};
      ++n;
    }
  }
  for (std::size_t b : {1, 2, 4, 8}) {
    Rng rng = Rng::for_stream(b, "acceptance.s2d");
    std::vector<double> v(3 * 16 * 24);
    for (auto& x : v) x = rng.normal();
    const Tensor<double> x({3, 16, 24}, v);
    if (!bit_equal(ops::depth_to_space(ops::space_to_depth(x, b), b), x)) return {false, fmt("s2d round trip, block %zu", b)};
    std::vector<double> w(3 * 32 * 24);
    for (auto& x : w) x = rng.normal();
    const Tensor<double> y({3 * b * b, 32 / b, 24 / b}, w);
    if (!bit_equal(ops::space_to_depth(ops::depth_to_space(y, b), b), y)) return {false, fmt("d2s round trip, block %zu", b)};
    ++n;
  }
  return {true, fmt("%zu round trips exact", n)};
}

// 7 ---------------------------------------------------------------------------

Outcome ablation_integrity() {
  const EncoderConfig base = EncoderConfig::desk();
  const ImageBuffer img = noise_image(96, 96, 8);
  const CropPlan plan = build_crop_plan(96, 96, base.effective_planner());
  const auto probes = default_probe_pixels(plan, 0, 3);
  std::optional<Dims> shape;
  std::size_t n = 0;
  for (auto& name : default_ablation_matrix()) {
    auto b = make_bundle<double>(make_variant(base, name), 7);
    b.params = with_alpha(b.params, 0.5);
    const auto vt = b.encoder.encode(img, b.params);
    for (auto& v : vt.views)
      for (double x : v.data())
        if (!std::isfinite(x)) return {false, name + ": non-finite token"};
    if (!shape) shape = vt.dump_dims();
    if (vt.dump_dims() != *shape) return {false, name + ": token dims " + dims_str(vt.dump_dims())};
    if (name == "ds") {
      const auto s = cross_tile_saliency(b, img, {1, 2 * 6 + 5}, probes);
      if (s.max_response != 0.0) return {false, fmt("ds saliency %.3g", s.max_response)};
    }
    ++n;
  }
  return {true, fmt("%zu variants encode to %s, ds saliency 0", n, dims_str(*shape).c_str())};
}

// 8 ---------------------------------------------------------------------------

Outcome two_stage_schedule() {
  const EncoderSpec spec = load_encoder_spec(source("configs/probe.json"));
  const auto bundle = make_bundle<double>(spec.encoder, *spec.seed);
  GlyphCountTask task;
  task.image_w = task.image_h = 2 * spec.encoder.planner.tile_size;
  const TrainSchedule full;  // 60 + 60 steps, lr 0.01 then 0.001

  TrainSchedule only1 = full;
  only1.stage2_steps = 0;
  const auto s1 = toy_train(bundle, task, only1, *spec.seed);
  std::size_t branch = 0;
  for (auto& [name, t] : bundle.params) {
    if (name.rfind("vit.", 0) != 0 && name.rfind("conv.", 0) != 0) continue;
    if (!bit_equal(s1.params.at(name), t)) return {false, "stage 1 changed " + name};
    ++branch;
  }
  if (!s1.stage1_frozen_bit_identical) return {false, "stage-1 frozen flag false"};

  const auto r = toy_train(bundle, task, full, *spec.seed);
  const double ratio = r.final_loss / r.initial_loss;
  const std::size_t steps = full.stage1_steps + full.stage2_steps;
  const std::string d = fmt("%zu branch tensors bit-identical after stage 1; loss %.4f -> %.4f (ratio %.3f) in %zu steps",
                            branch, r.initial_loss, r.final_loss, ratio, steps);
  return {ratio < 0.5 && steps <= 500 && r.stage1_frozen_bit_identical, d};
}

// 9 ---------------------------------------------------------------------------

int run_cli(const std::string& args) {
  const std::string cmd = std::string("'") + TILEFUSE_CLI_PATH + "' " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Outcome determinism() {
  const fs::path dir = fs::temp_directory_path() / ("tilefuse_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  auto same = [&](const std::string& a, const std::string& b) { return read_file(dir / a) == read_file(dir / b); };
  const std::string enc = "encode '" + source("tests/data/desk96.ppm") + "' --config '" + source("configs/desk.json") +
                          "' --precision test --out-dir ";
  const std::string probe = "probe --config '" + source("configs/probe.json") +
                            "' --task boundary_glyph_count --seed 3 --precision test --out-dir ";
  for (const char* run : {"e1", "e2"})
    if (int c = run_cli(enc + "'" + (dir / run).string() + "'"); c != 0) return {false, fmt("encode exit %d", c)};
  for (const char* run : {"p1", "p2"})
    if (int c = run_cli(probe + "'" + (dir / run).string() + "'"); c != 0) return {false, fmt("probe exit %d", c)};
  const bool ok = same("e1/tokens.rfp", "e2/tokens.rfp") && same("e1/tokens.json", "e2/tokens.json") &&
                  same("p1/report.json", "p2/report.json") && same("p1/curves.csv", "p2/curves.csv");
  const std::size_t bytes = read_file(dir / "e1/tokens.rfp").size() + read_file(dir / "p1/report.json").size() +
                            read_file(dir / "p1/curves.csv").size();
  fs::remove_all(dir);
  return {ok, ok ? fmt("encode and probe artifacts byte-identical (%zu bytes compared per run)", bytes)
                 : std::string("artifacts differ between runs")};
}

}  // namespace

int main() {
  struct Criterion {
    int id;
    const char* name;
    double budget_s;
    std::function<Outcome()> fn;
  };
  const std::vector<Criterion> criteria{
      {1, "alignment-shape oracle", 10, alignment_shapes},
      {2, "resolution-selection oracle", 5, resolution_selection},
      {3, "gate-zero identity", 120, gate_zero_identity},
      {4, "cross-tile gradient separation", 300, cross_tile_separation},
      {5, "gradient correctness", 300, gradient_correctness},
      {6, "tiling/segmentation round trips", 60, round_trips},
      {7, "ablation matrix integrity", 600, ablation_integrity},
      {8, "two-stage schedule", 900, two_stage_schedule},
      {9, "determinism", 0, determinism},
  };
  int failed = 0;
  for (auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (c.budget_s > 0 && s > c.budget_s) {
      o.pass = false;
      o.detail += fmt(" [over budget: %.1fs > %.0fs]", s, c.budget_s);
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " [" << c.id << "] " << c.name << " (" << fmt("%.1f", s) << "s): " << o.detail
              << std::endl;
  }
  std::cout << (failed ? fmt("%d criteria failed", failed) : std::string("all criteria passed")) << std::endl;
  return failed ? 1 : 0;
}
