// Copyright (C) 2026 The tilefuse Authors
// SPDX-License-Identifier: Apache-2.0

// tilefuse: plan, encode, ablate, gradcheck and probe from the command line.
//
// Exit codes: 0 ok, 1 check failed, 2 usage or input error, 3 shape error,
// 4 numeric error.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "tilefuse/tilefuse.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace tilefuse;

namespace {

enum Exit : int { kOk = 0, kCheckFailed = 1, kUsage = 2, kShape = 3, kNumeric = 4 };

// A failed check that should still produce its artifacts.
struct CheckFailed : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  std::string precision = "test";
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "Encoder config JSON (default: built-in desk config)")->check(CLI::ExistingFile);
  app->add_option("--seed", c.seed, "Seed for weight init and synthetic data (default: the config's seed)");
  app->add_option("--out-dir", c.out_dir, "Output directory (env TILEFUSE_OUT_DIR, else ./tilefuse_out)");
  app->add_option("--precision", c.precision, "test (float64) or fast (float32)")
      ->check(CLI::IsMember({"test", "fast"}));
}

EncoderSpec load_spec(const Common& c) {
  EncoderSpec spec = c.config.empty() ? EncoderSpec{} : load_encoder_spec(c.config);
  if (c.seed) spec.seed = c.seed;
  return spec;
}

std::uint64_t require_seed(const EncoderSpec& spec) {
  if (!spec.seed) throw UsageError("a seed is required: pass --seed or set \"seed\" in the config");
  return *spec.seed;
}

fs::path out_dir(const Common& c) {
  if (!c.out_dir.empty()) return c.out_dir;
  if (const char* env = std::getenv("TILEFUSE_OUT_DIR"); env && *env) return env;
  return "tilefuse_out";
}

void write_json(const fs::path& p, const json& j) { write_file_atomic(p, j.dump(2) + "\n"); }

// Wall-clock timings live in their own file so every other artifact stays
// byte-reproducible.
void write_runtime(const fs::path& dir, const std::string& command, const json& timings) {
  write_json(dir / "runtime.json", {{"command", command}, {"seconds", timings}});
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

json dims_json(const Dims& d) { return json(d); }

json candidate_json(const ResolutionCandidate& c) {
  return {{"target", {c.target.width, c.target.height}},
          {"scale", std::to_string(c.scale_num) + "/" + std::to_string(c.scale_den)},
          {"scaled", {c.scaled_w, c.scaled_h}},
          {"res_eff", c.res_eff},
          {"res_wasted", c.res_wasted}};
}

json plan_json(const CropPlan& p) {
  return {{"image", {p.image_w, p.image_h}},
          {"chosen", candidate_json(p.chosen)},
          {"tile_size", p.tile_size},
          {"grid", {p.grid_w, p.grid_h}},
          {"resize", {p.resize_w, p.resize_h}},
          {"pad", {{"right", p.pad.right}, {"bottom", p.pad.bottom}}},
          {"views", p.view_count()},
          {"highres", {p.highres_w, p.highres_h}},
          {"highres_resize", {p.highres_resize_w, p.highres_resize_h}},
          {"highres_pad", {{"right", p.highres_pad.right}, {"bottom", p.highres_pad.bottom}}}};
}

ImageBuffer synthetic_image(std::size_t w, std::size_t h, std::uint64_t seed) {
  ImageBuffer img = ImageBuffer::filled(w, h, 0.0);
  Rng rng = Rng::for_stream(seed, "cli.image");
  for (auto& v : img.values) v = rng.uniform();
  return img;
}

// ---------------------------------------------------------------------------
// plan

struct PlanArgs {
  long width = 0, height = 0;
  std::string candidates;
  std::string config;
  std::string out_dir;
};

int cmd_plan(const PlanArgs& a) {
  if (a.width <= 0 || a.height <= 0)
    throw UsageError("plan: width and height must be positive, got " + std::to_string(a.width) + "x" +
                     std::to_string(a.height));
  PlannerConfig cfg = a.config.empty() ? PlannerConfig{} : load_encoder_spec(a.config).encoder.effective_planner();
  if (!a.candidates.empty()) {
    json j;
    try {
      j = json::parse(read_file(a.candidates));
      cfg.candidates.clear();
      for (auto& e : j) cfg.candidates.push_back({e.at(0).get<std::size_t>(), e.at(1).get<std::size_t>()});
    } catch (const json::exception& e) {
      throw UsageError("plan: candidates file must be a JSON list of [width, height]: " + std::string(e.what()));
    }
  }
  const auto w = std::size_t(a.width), h = std::size_t(a.height);
  const ResolutionRanking rank = rank_resolutions(w, h, cfg.candidates);
  const CropPlan plan = build_crop_plan(w, h, cfg);

  std::cout << "image " << w << "x" << h << "\n";
  std::cout << "candidate       scale      scaled       res_eff   res_wasted\n";
  for (std::size_t i = 0; i < rank.scored.size(); ++i) {
    const auto& c = rank.scored[i];
    char line[160];
    std::snprintf(line, sizeof line, "%c %4zux%-4zu  %5llu/%-5llu %5zux%-5zu %10llu %12llu\n", i == rank.chosen ? '*' : ' ',
                  c.target.width, c.target.height, (unsigned long long)c.scale_num, (unsigned long long)c.scale_den,
                  c.scaled_w, c.scaled_h, (unsigned long long)c.res_eff, (unsigned long long)c.res_wasted);
    std::cout << line;
  }
  std::cout << "chosen " << plan.chosen.target.width << "x" << plan.chosen.target.height << " (" << to_string(rank.tie_break)
            << ")\n";
  std::cout << "grid " << plan.grid_w << "x" << plan.grid_h << ", " << plan.view_count() << " views of "
            << plan.tile_size << "px\n";
  std::cout << "resize " << plan.resize_w << "x" << plan.resize_h << ", pad right " << plan.pad.right << " bottom "
            << plan.pad.bottom << "\n";
  std::cout << "highres " << plan.highres_w << "x" << plan.highres_h << "\n";

  json scores = json::array();
  for (auto& c : rank.scored) scores.push_back(candidate_json(c));
  json j = {{"schema_version", 1},
            {"command", "plan"},
            {"plan", plan_json(plan)},
            {"candidates", scores},
            {"chosen_index", rank.chosen},
            {"tie_break", to_string(rank.tie_break)}};
  std::cout << j.dump(2) << "\n";
  if (!a.out_dir.empty()) write_json(fs::path(a.out_dir) / "plan.json", j);
  return kOk;
}

// ---------------------------------------------------------------------------
// encode

struct EncodeArgs {
  Common common;
  std::string image;
  std::string out;
  bool dry_run = false;
  std::string size;
};

template <std::floating_point T>
int encode_with(const EncodeArgs& a, const EncoderSpec& spec, const std::string& hash) {
  const std::uint64_t seed = require_seed(spec);
  ImageBuffer img = load_image(a.image);
  img.norm = spec.normalization;
  const auto t0 = std::chrono::steady_clock::now();
  const auto bundle = make_bundle<T>(spec.encoder, seed);
  const double t_init = seconds_since(t0);
  const auto t1 = std::chrono::steady_clock::now();
  const VisualTokens<T> vt = bundle.encoder.encode(img, bundle.params);
  const double t_encode = seconds_since(t1);

  const fs::path dir = out_dir(a.common);
  const fs::path tokens = a.out.empty() ? dir / "tokens.rfp" : fs::path(a.out);
  fs::path summary = tokens;
  summary.replace_extension(".json");
  write_file_atomic(tokens, encode_raw_float(vt.dump_dims(), vt.flattened()));
  write_json(summary, {{"schema_version", 1},
                       {"command", "encode"},
                       {"config_hash", hash},
                       {"seed", seed},
                       {"precision", a.common.precision},
                       {"image", {img.width, img.height}},
                       {"plan", plan_json(vt.plan)},
                       {"fusion", spec.encoder.fusion.enabled ? to_string(spec.encoder.fusion.mode) : "off"},
                       {"tokens", {{"file", tokens.filename().string()}, {"dims", dims_json(vt.dump_dims())}}}});
  write_runtime(tokens.parent_path().empty() ? fs::path(".") : tokens.parent_path(), "encode",
                {{"init", t_init}, {"encode", t_encode}});
  std::cout << "wrote " << tokens.string() << ": " << dims_str(vt.dump_dims()) << " (" << vt.views.size()
            << " views), config " << hash << "\n";
  return kOk;
}

int cmd_encode(const EncodeArgs& a) {
  const EncoderSpec spec = load_spec(a.common);
  const std::string hash = config_hash(spec);
  if (a.dry_run) {
    std::size_t w = 0, h = 0;
    if (!a.size.empty()) {
      char x = 0;
      std::istringstream in(a.size);
      if (!(in >> w >> x >> h) || x != 'x' || w == 0 || h == 0) throw UsageError("encode: --size must be WxH");
    } else if (!a.image.empty()) {
      const ImageBuffer img = load_image(a.image);
      w = img.width;
      h = img.height;
    } else {
      throw UsageError("encode: --dry-run needs --size WxH or an image");
    }
    const ShapeReport r = dry_run_shapes(spec.encoder, w, h);
    json stages = json::array();
    for (auto& s : r.stages)
      stages.push_back({{"stage", s.stage},
                        {"input", dims_json(s.input)},
                        {"aligned", dims_json(s.aligned)},
                        {"vit_layer", s.vit_layer},
                        {"vit", dims_json(s.vit_dims)}});
    const json j = {{"schema_version", 1},     {"command", "encode --dry-run"},
                    {"config_hash", hash},     {"plan", plan_json(r.plan)},
                    {"highres_input", r.highres_input}, {"stages", stages},
                    {"views", r.views},        {"tokens_per_view", dims_json(r.tokens_per_view)}};
    std::cout << j.dump(2) << "\n";
    if (!a.common.out_dir.empty() || std::getenv("TILEFUSE_OUT_DIR")) write_json(out_dir(a.common) / "shapes.json", j);
    return kOk;
  }
  if (a.image.empty()) throw UsageError("encode: an image path is required");
  return a.common.precision == "fast" ? encode_with<float>(a, spec, hash) : encode_with<double>(a, spec, hash);
}

// ---------------------------------------------------------------------------
// ablate

struct AblateArgs {
  Common common;
  std::vector<std::string> matrix;
  std::string image;
  double alpha = 0.5;
  std::size_t probes_per_tile = 1;
};

std::vector<long> drift_shifts(const CropPlan& plan) {
  const long s = long(plan.tile_size / 3);
  return {-s, 0, s};
}

GlyphSpec boundary_glyph(const CropPlan& plan, std::size_t size) {
  GlyphSpec g = GlyphSpec::ring(size, plan.image_w, plan.image_h);
  if (plan.grid_w > 1 || plan.grid_h > 1) {
    g.placement = Placement::straddling_at(0, 0.5);
  } else {
    g.placement = Placement::interior_at(0);
  }
  return g;
}

std::size_t glyph_size_for(const CropPlan& plan) { return std::max<std::size_t>(3, plan.tile_size / 6); }

// Token in the target view nearest the tile's right edge, mid-height.
SaliencyTarget edge_target(const EncoderConfig& c) {
  const std::size_t g = c.vit.grid();
  return {1, (g / 2) * g + g - 1};
}

template <std::floating_point T>
int ablate_with(const AblateArgs& a, const EncoderSpec& spec, const std::string& hash) {
  const std::uint64_t seed = require_seed(spec);
  std::vector<std::string> matrix = a.matrix.empty() ? default_ablation_matrix() : a.matrix;
  std::vector<EncoderConfig> configs;
  for (auto& name : matrix) {
    try {
      configs.push_back(make_variant(spec.encoder, name));
    } catch (const UsageError& e) {
      std::string valid;
      for (auto& v : default_ablation_matrix()) valid += " " + v;
      throw UsageError(std::string(e.what()) + "; valid specs:" + valid + " (plus ds, hybrid, multi_2, multi_6)");
    }
  }
  const std::size_t tile = spec.encoder.planner.tile_size;
  ImageBuffer img = a.image.empty() ? synthetic_image(2 * tile, 2 * tile, seed) : load_image(a.image);
  img.norm = spec.normalization;

  json rows = json::array(), timings = json::object();
  std::string csv = "variant,views,tokens,dim,cross_tile_saliency_max";
  std::optional<Dims> shape0;
  bool shapes_equal = true, ds_zero = true;
  for (std::size_t i = 0; i < matrix.size(); ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    auto bundle = make_bundle<T>(configs[i], seed);
    bundle.params = with_alpha(bundle.params, a.alpha);
    const VisualTokens<T> vt = bundle.encoder.encode(img, bundle.params);
    const Dims shape = vt.dump_dims();
    if (!shape0) shape0 = shape;
    shapes_equal &= shape == *shape0;
    const CropPlan& plan = vt.plan;

    double saliency = 0.0;
    if (plan.tile_count() > 1) {
      const auto probes = default_probe_pixels(plan, 0, a.probes_per_tile);
      saliency = cross_tile_saliency(bundle, img, edge_target(configs[i]), probes).max_response;
    }
    if (!std::isfinite(saliency)) throw NumericError("ablate: non-finite saliency for " + matrix[i]);
    if (matrix[i] == "ds") ds_zero &= saliency == 0.0;

    json row = {{"variant", matrix[i]},
                {"config_hash", hash},
                {"seed", seed},
                {"alpha", configs[i].fusion.enabled ? a.alpha : 0.0},
                {"token_dims", dims_json(shape)},
                {"cross_tile_saliency_max", saliency}};
    std::string line = matrix[i] + "," + std::to_string(shape[0]) + "," + std::to_string(shape[1]) + "," +
                       std::to_string(shape[2]) + "," + json(saliency).dump();
    const GlyphSpec glyph = boundary_glyph(plan, glyph_size_for(plan));
    const auto shifts = drift_shifts(plan);
    for (auto& d : boundary_shift_probe(bundle, glyph, shifts)) {
      const std::string key = "feature_drift_shift_" + std::to_string(d.shift);
      row[key] = d.feature_drift;
      if (i == 0) csv += "," + key;
      line += "," + json(d.feature_drift).dump();
    }
    if (i == 0) csv += "\n";
    csv += line + "\n";
    rows.push_back(row);
    timings[matrix[i]] = seconds_since(t0);
    std::cout << matrix[i] << ": tokens " << dims_str(shape) << ", saliency " << saliency << "\n";
  }
  const fs::path dir = out_dir(a.common);
  write_json(dir / "ablation.json", {{"schema_version", 1},
                                     {"command", "ablate"},
                                     {"config_hash", hash},
                                     {"seed", seed},
                                     {"precision", a.common.precision},
                                     {"rows", rows},
                                     {"token_shapes_equal", shapes_equal}});
  write_file_atomic(dir / "ablation.csv", csv);
  write_runtime(dir, "ablate", timings);
  if (!shapes_equal) throw CheckFailed("ablate: variants disagree on token shapes");
  if (!ds_zero) throw CheckFailed("ablate: ds row shows cross-tile saliency");
  return kOk;
}

int cmd_ablate(const AblateArgs& a) {
  const EncoderSpec spec = load_spec(a.common);
  const std::string hash = config_hash(spec);
  return a.common.precision == "fast" ? ablate_with<float>(a, spec, hash) : ablate_with<double>(a, spec, hash);
}

// ---------------------------------------------------------------------------
// gradcheck

struct GradcheckArgs {
  Common common;
  std::vector<std::string> modes;
  std::size_t max_coords = 4;
  double rtol = 1e-3;
  double atol = 1e-6;
  bool corrupt = false;
};

int cmd_gradcheck(const GradcheckArgs& a) {
  if (a.common.precision != "test") throw UsageError("gradcheck: needs --precision test (float64)");
  const EncoderSpec spec = load_spec(a.common);
  const std::string hash = config_hash(spec);
  const std::uint64_t seed = require_seed(spec);
  std::vector<FusionMode> modes;
  if (a.modes.empty()) {
    modes = {FusionMode::channel, FusionMode::local_ca, FusionMode::global_ca, FusionMode::add};
  } else {
    for (auto& m : a.modes) modes.push_back(parse_fusion_mode(m));
  }
  const std::size_t tile = spec.encoder.planner.tile_size;
  ImageBuffer img = synthetic_image(2 * tile, 2 * tile, seed);
  img.norm = spec.normalization;

  GradcheckOptions opt;
  opt.rtol = a.rtol;
  opt.atol = a.atol;
  opt.max_coords = a.max_coords;
  opt.corrupt = a.corrupt;

  json reports = json::array(), timings = json::object();
  bool all_pass = true;
  std::string worst_path;
  double worst_rel = -1;
  for (auto mode : modes) {
    EncoderConfig c = spec.encoder;
    c.fusion.enabled = true;
    c.fusion.mode = mode;
    const auto t0 = std::chrono::steady_clock::now();
    HybridEncoder<double> enc(c);
    const auto params = with_random_alpha(enc.init_params(seed), seed);
    GradcheckReport rep = fusion_gradcheck(enc, params, img, seed, opt);
    rep.variant = to_string(mode);
    timings[rep.variant] = seconds_since(t0);
    json entries = json::array();
    for (auto& e : rep.entries) {
      entries.push_back({{"param", e.name},
                         {"coords", e.coords},
                         {"max_abs_err", e.max_abs_err},
                         {"max_rel_err", e.max_rel_err},
                         {"worst_index", e.worst_index},
                         {"pass", e.pass}});
      if (!e.pass && (worst_rel < e.max_rel_err || worst_path.empty())) {
        worst_rel = e.max_rel_err;
        worst_path = rep.variant + ":" + e.name + "[" + std::to_string(e.worst_index) + "]";
      }
    }
    const GradcheckEntry* w = rep.worst();
    std::cout << (rep.pass() ? "PASS " : "FAIL ") << rep.variant << ": " << rep.entries.size() << " tensors, max rel err "
              << (w ? w->max_rel_err : 0.0) << (w ? " at " + w->name : "") << "\n";
    for (auto& e : rep.entries)
      if (!e.pass) std::cout << "  FAIL " << e.name << "[" << e.worst_index << "] rel " << e.max_rel_err << "\n";
    all_pass &= rep.pass();
    reports.push_back({{"mode", rep.variant}, {"pass", rep.pass()}, {"entries", entries}});
  }
  const fs::path dir = out_dir(a.common);
  write_json(dir / "gradcheck.json", {{"schema_version", 1},
                                      {"command", "gradcheck"},
                                      {"config_hash", hash},
                                      {"seed", seed},
                                      {"rtol", a.rtol},
                                      {"atol", a.atol},
                                      {"max_coords", a.max_coords},
                                      {"pass", all_pass},
                                      {"modes", reports}});
  write_runtime(dir, "gradcheck", timings);
  if (!all_pass) throw CheckFailed("gradcheck: worst offender " + worst_path);
  return kOk;
}

// ---------------------------------------------------------------------------
// probe

struct ProbeArgs {
  Common common;
  std::string task = "boundary_glyph_count";
  GlyphCountTask glyph_task;
  TrainSchedule schedule;
  double alpha_probe = -1;  // < 0: use the trained gates
};

template <std::floating_point T>
int probe_with(const ProbeArgs& a, const EncoderSpec& spec, const std::string& hash) {
  const std::uint64_t seed = require_seed(spec);
  const EncoderConfig hybrid_cfg =
      spec.encoder.fusion.enabled ? spec.encoder.validated() : make_variant(spec.encoder, "hybrid");
  const std::vector<std::pair<std::string, EncoderConfig>> variants{{"ds", make_variant(spec.encoder, "ds")},
                                                                    {"hybrid", hybrid_cfg}};
  GlyphCountTask task = a.glyph_task;
  const std::size_t tile = spec.encoder.planner.tile_size;
  if (task.image_w == 0) task.image_w = 2 * tile;
  if (task.image_h == 0) task.image_h = 2 * tile;

  ProbeReport report;
  json timings = json::object();
  bool frozen_ok = true;
  for (auto& [name, cfg] : variants) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto bundle = make_bundle<T>(cfg, seed);
    const TrainResult<T> tr = toy_train(bundle, task, a.schedule, seed);
    for (auto& pt : tr.curve) report.curves.push_back({name, pt});
    report.add(hash, name, "initial_loss", tr.initial_loss, seed);
    report.add(hash, name, "final_loss", tr.final_loss, seed);
    report.add(hash, name, "loss_ratio", tr.final_loss / tr.initial_loss, seed);
    report.add(hash, name, "stage1_frozen_bit_identical", tr.stage1_frozen_bit_identical ? 1.0 : 0.0, seed);
    frozen_ok &= tr.stage1_frozen_bit_identical;

    EncoderBundle<T> trained{bundle.encoder, tr.params};
    if (a.alpha_probe >= 0) trained.params = with_alpha(trained.params, a.alpha_probe);
    const CropPlan plan = trained.encoder.plan_for(task.image_w, task.image_h);
    const GlyphSpec glyph = boundary_glyph(plan, std::min(task.glyph_size, plan.tile_size));
    for (auto& d : boundary_shift_probe(trained, glyph, drift_shifts(plan)))
      report.add(hash, name, "feature_drift_shift_" + std::to_string(d.shift), d.feature_drift, seed);
    if (plan.tile_count() > 1) {
      ImageBuffer img = synthetic_image(task.image_w, task.image_h, seed);
      img.norm = spec.normalization;
      const auto sal = cross_tile_saliency(trained, img, edge_target(cfg), default_probe_pixels(plan, 0, 1));
      report.add(hash, name, "cross_tile_saliency_max", sal.max_response, seed);
    }
    timings[name] = seconds_since(t0);
    std::cout << name << ": loss " << tr.initial_loss << " -> " << tr.final_loss << " (ratio "
              << tr.final_loss / tr.initial_loss << "), stage-1 frozen weights "
              << (tr.stage1_frozen_bit_identical ? "bit-identical" : "CHANGED") << "\n";
  }
  const fs::path dir = out_dir(a.common);
  json j = report.to_json();
  j["command"] = "probe";
  j["task"] = a.task;
  j["config_hash"] = hash;
  j["seed"] = seed;
  j["precision"] = a.common.precision;
  j["schedule"] = {{"stage1_steps", a.schedule.stage1_steps},
                   {"stage2_steps", a.schedule.stage2_steps},
                   {"stage1_lr", a.schedule.stage1_lr},
                   {"stage2_lr", a.schedule.stage2_lr}};
  j["dataset"] = {{"image", {task.image_w, task.image_h}},
                  {"samples", task.samples},
                  {"max_count", task.max_count},
                  {"glyph_size", task.glyph_size}};
  write_json(dir / "report.json", j);
  write_file_atomic(dir / "curves.csv", report.curves_csv());
  write_runtime(dir, "probe", timings);
  if (!frozen_ok) throw CheckFailed("probe: stage-1 training changed frozen weights");
  return kOk;
}

int cmd_probe(const ProbeArgs& a) {
  if (a.task != "boundary_glyph_count") throw UsageError("probe: unknown task '" + a.task + "'");
  const EncoderSpec spec = load_spec(a.common);
  const std::string hash = config_hash(spec);
  return a.common.precision == "fast" ? probe_with<float>(a, spec, hash) : probe_with<double>(a, spec, hash);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tilefuse: tiled ViT with a convolutional fusion branch"};
  app.require_subcommand(1);

  PlanArgs plan;
  auto* p = app.add_subcommand("plan", "Choose a target resolution and print the crop plan");
  p->add_option("width", plan.width, "Image width")->required();
  p->add_option("height", plan.height, "Image height")->required();
  p->add_option("--candidates", plan.candidates, "JSON list of [width, height] candidates")->check(CLI::ExistingFile);
  p->add_option("--config", plan.config, "Take tile size and candidates from an encoder config")
      ->check(CLI::ExistingFile);
  p->add_option("--out-dir", plan.out_dir, "Also write plan.json here");

  EncodeArgs enc;
  auto* e = app.add_subcommand("encode", "Encode an image into visual tokens");
  e->add_option("image", enc.image, "PPM (P6) or raw float image");
  add_common(e, enc.common);
  e->add_option("--out", enc.out, "Token dump path (default <out-dir>/tokens.rfp)");
  e->add_flag("--dry-run", enc.dry_run, "Report shapes only, without allocating weights");
  e->add_option("--size", enc.size, "Image size WxH for --dry-run");

  AblateArgs abl;
  auto* ab = app.add_subcommand("ablate", "Run the ablation matrix");
  add_common(ab, abl.common);
  ab->add_option("--matrix", abl.matrix, "Variant specs (default: full matrix)")->delimiter(',');
  ab->add_option("--image", abl.image, "Input image (default: seeded noise of two tiles square)");
  ab->add_option("--alpha", abl.alpha, "Gate value for fusion variants");
  ab->add_option("--probes-per-tile", abl.probes_per_tile, "Saliency probe pixels per tile");

  GradcheckArgs gc;
  auto* g = app.add_subcommand("gradcheck", "Compare fusion gradients with finite differences");
  add_common(g, gc.common);
  g->add_option("--mode", gc.modes, "Fusion modes (default: all four)")->delimiter(',');
  g->add_option("--max-coords", gc.max_coords, "Coordinates checked per tensor, 0 for all");
  g->add_option("--rtol", gc.rtol, "Relative tolerance")->capture_default_str();
  g->add_option("--atol", gc.atol, "Absolute tolerance")->capture_default_str();
  g->add_flag("--corrupt-gradient", gc.corrupt)->group("");

  ProbeArgs pr;
  pr.glyph_task.image_w = pr.glyph_task.image_h = 0;
  auto* pb = app.add_subcommand("probe", "Toy two-stage training plus fragmentation probes");
  add_common(pb, pr.common);
  pb->add_option("--task", pr.task, "Synthetic task")->check(CLI::IsMember({"boundary_glyph_count"}));
  pb->add_option("--samples", pr.glyph_task.samples, "Dataset size")->capture_default_str();
  pb->add_option("--max-count", pr.glyph_task.max_count, "Most glyphs per image")->capture_default_str();
  pb->add_option("--glyph-size", pr.glyph_task.glyph_size, "Glyph side in pixels")->capture_default_str();
  pb->add_option("--stage1-steps", pr.schedule.stage1_steps, "Fusion-only steps")->capture_default_str();
  pb->add_option("--stage2-steps", pr.schedule.stage2_steps, "Joint steps")->capture_default_str();
  pb->add_option("--stage1-lr", pr.schedule.stage1_lr, "Stage-1 learning rate")->capture_default_str();
  pb->add_option("--stage2-lr", pr.schedule.stage2_lr, "Stage-2 learning rate")->capture_default_str();
  pb->add_option("--probe-alpha", pr.alpha_probe, "Set every gate to this value before probing (default: trained gates)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::CallForAllHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::ParseError& ex) {
    app.exit(ex);
    return kUsage;
  }

  try {
    if (p->parsed()) return cmd_plan(plan);
    if (e->parsed()) return cmd_encode(enc);
    if (ab->parsed()) return cmd_ablate(abl);
    if (g->parsed()) return cmd_gradcheck(gc);
    if (pb->parsed()) return cmd_probe(pr);
  } catch (const CheckFailed& ex) {
    std::cerr << "check failed: " << ex.what() << "\n";
    return kCheckFailed;
  } catch (const ShapeError& ex) {
    std::cerr << "shape error: " << ex.what() << "\n";
    return kShape;
  } catch (const NumericError& ex) {
    std::cerr << "numeric error: " << ex.what() << "\n";
    return kNumeric;
  } catch (const UsageError& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return kUsage;
  } catch (const ConfigError& ex) {
    std::cerr << "config error: " << ex.what() << "\n";
    return kUsage;
  } catch (const fs::filesystem_error& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return kUsage;
  }
  return kUsage;
}
