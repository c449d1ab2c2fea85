#pragma once
// The `cn2` command line: simulate, stabilize, estimate, train, evaluate,
// report and ingest. Exit codes: 0 success, 1 invalid input or usage, 2
// runtime failure.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cn2/dataset.hpp"
#include "cn2/error.hpp"
#include "cn2/eval.hpp"
#include "cn2/gradient_estimator.hpp"
#include "cn2/image_io.hpp"
#include "cn2/ingest.hpp"
#include "cn2/models.hpp"
#include "cn2/stabilize.hpp"
#include "cn2/svg_chart.hpp"
#include "cn2/turbsim.hpp"

namespace cn2::cli {

namespace fs = std::filesystem;

inline int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::Validation:
    case ErrorKind::Config:
    case ErrorKind::Parse:
    case ErrorKind::Bounds:
    case ErrorKind::Dimension:
    case ErrorKind::Shape:
    case ErrorKind::Split:
      return 1;
    default:
      return 2;
  }
}

// ---- shared option groups ------------------------------------------------

struct GeometryArgs {
  std::optional<double> pfov, aperture, path_length, turbulence_p;

  void add(CLI::App* app) {
    app->add_option("--pfov", pfov, "pixel field of view, rad/px");
    app->add_option("--aperture", aperture, "aperture diameter D, m");
    app->add_option("--path-length", path_length, "path length L, m");
    app->add_option("--turbulence-p", turbulence_p, "turbulence constant P");
  }

  CameraGeometry apply(CameraGeometry g) const {
    if (pfov) g.pfov = *pfov;
    if (aperture) g.aperture_d = *aperture;
    if (path_length) g.path_length_l = *path_length;
    if (turbulence_p) g.turbulence_p = *turbulence_p;
    g.validate();
    return g;
  }
};

struct RoiArg {
  std::vector<int> values;  // x0,y0,size

  void add(CLI::App* app, const std::string& help = "ROI x0,y0,size (default: centred 256 px square)") {
    app->add_option("--roi", values, help)->delimiter(',')->expected(3);
  }

  std::optional<Roi> get() const {
    if (values.empty()) return std::nullopt;
    if (values.size() != 3) fail(ErrorKind::Validation, "--roi needs x0,y0,size");
    return Roi{values[0], values[1], values[2]};
  }
};

struct EstimatorArgs {
  std::string kernel = "central";
  bool normalized = false;
  std::string reduction = "ratio";
  int margin = 2;

  void add(CLI::App* app) {
    app->add_option("--kernel", kernel, "sobel | prewitt | central | intermediate")->capture_default_str();
    app->add_flag("--normalized", normalized, "divide Sobel by 4 / Prewitt by 3");
    app->add_option("--reduction", reduction, "ratio (ratio of means) | mean-of-ratios")->capture_default_str();
    app->add_option("--margin", margin, "border pixels excluded inside the ROI")->capture_default_str();
  }

  EstimatorOptions get() const {
    EstimatorOptions o;
    o.kernel.variant = parse_kernel(kernel);
    o.kernel.normalized = normalized;
    if (reduction == "ratio")
      o.reduction = ReductionOrder::RatioOfMeans;
    else if (reduction == "mean-of-ratios")
      o.reduction = ReductionOrder::MeanOfRatios;
    else
      fail(ErrorKind::Config, "unknown reduction '" + reduction + "'");
    if (margin < 0) fail(ErrorKind::Config, "--margin must be >= 0");
    o.border_margin = margin;
    return o;
  }
};

struct ModelArgs {
  std::string model = "physics";
  int frames = 3;
  std::string init = "gradient";
  std::uint64_t seed = 0;
  double lr = 1e-3;
  int epochs = 30;
  int batch_size = 3;
  std::string loss_domain = "log10";
  std::string optimizer = "adam";
  double momentum = 0.9;

  void add(CLI::App* app, bool with_gradient) {
    app->add_option("--model", model, with_gradient ? "gradient | physics | baseline" : "physics | baseline")
        ->capture_default_str();
    app->add_option("--frames", frames, "frames per model input group")->capture_default_str();
    app->add_option("--init", init, "physics init: gradient | random")->capture_default_str();
    app->add_option("--seed", seed, "model and shuffling seed")->capture_default_str();
    app->add_option("--lr", lr, "learning rate")->capture_default_str();
    app->add_option("--epochs", epochs)->capture_default_str();
    app->add_option("--batch-size", batch_size)->capture_default_str();
    app->add_option("--loss-domain", loss_domain, "log10 | linear")->capture_default_str();
    app->add_option("--optimizer", optimizer, "adam | sgd")->capture_default_str();
    app->add_option("--momentum", momentum, "sgd momentum")->capture_default_str();
  }

  TrainConfig train_config() const {
    TrainConfig c;
    c.lr = lr;
    c.epochs = epochs;
    c.batch_size = batch_size;
    c.seed = seed;
    c.loss_domain = parse_loss_domain(loss_domain);
    c.optimizer = parse_optimizer(optimizer);
    c.momentum = momentum;
    c.validate();
    return c;
  }

  std::unique_ptr<Cn2Model> make(const CameraGeometry& geom, int input_size) const {
    if (model == "physics") {
      PhysicsConfig c;
      c.n_input_frames = frames;
      if (init == "gradient")
        c.init = PhysicsInit::Gradient;
      else if (init == "random")
        c.init = PhysicsInit::Random;
      else
        fail(ErrorKind::Config, "unknown init '" + init + "'");
      c.seed = seed;
      c.geom = geom;
      return std::make_unique<PhysicsGradNet>(c);
    }
    if (model == "baseline") {
      BaselineConfig c;
      c.n_input_frames = frames;
      c.input_size = input_size;
      c.seed = seed;
      return std::make_unique<BaselineCnn>(c);
    }
    fail(ErrorKind::Config, "unknown model '" + model + "'");
  }
};

// ---- helpers -------------------------------------------------------------

struct Context {
  std::ostream& out;
  std::ostream& err;
  int verbose = 0;
  std::string config_echo;

  void log(const std::string& msg) const {
    if (verbose > 0) err << msg << '\n';
  }
};

inline fs::path prepare_out(const std::string& dir) {
  if (dir.empty()) fail(ErrorKind::Validation, "--out is required");
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) fail(ErrorKind::Io, "cannot create output directory '" + dir + "': " + ec.message());
  return fs::path(dir);
}

inline void write_text(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary);
  if (!f) fail(ErrorKind::Io, "cannot write '" + p.string() + "'");
  f << text;
  if (!f) fail(ErrorKind::Io, "write failed for '" + p.string() + "'");
}

inline void write_echo(const fs::path& dir, const Context& ctx) { write_text(dir / "config.toml", ctx.config_echo); }

inline std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9e", v);
  return buf;
}

/// Frame indices of each minute, in time order.
inline std::vector<std::pair<std::int64_t, std::vector<std::size_t>>> frames_by_minute(const ingest::DatasetManifest& m) {
  std::map<std::int64_t, std::vector<std::size_t>> b;
  for (std::size_t i = 0; i < m.frames.size(); ++i) b[minute_floor(m.frames[i].timestamp_us)].push_back(i);
  return {b.begin(), b.end()};
}

/// Minute -> truth from the manifest's scint log, empty when it cannot be read.
inline std::map<std::int64_t, double> truth_map(const ingest::DatasetManifest& m, const fs::path& dir, const Context& ctx) {
  std::map<std::int64_t, double> t;
  if (m.scint_log.empty()) return t;
  try {
    for (const auto& r : ingest::load_scint_csv(ingest::resolve(dir, m.scint_log)).records) t[r.minute_timestamp_us] = r.cn2;
  } catch (const Error& e) {
    ctx.err << "warning: no ground truth (" << e.what() << ")\n";
  }
  return t;
}

inline Roi resolve_roi(const std::optional<Roi>& roi, const ingest::DatasetManifest& m, const fs::path& dir) {
  if (roi) return *roi;
  if (m.frames.empty()) fail(ErrorKind::EmptyInput, "manifest lists no frames");
  const ImageFrame f = io::read_frame(ingest::resolve(dir, m.frames.front().path));
  return Roi::centered(f.width(), f.height());
}

struct PredictionCsvRow {
  std::int64_t minute_timestamp_us = 0;
  std::optional<double> truth;
  double pred = 0.0;
};

inline std::string predictions_csv(const std::vector<PredictionCsvRow>& rows) {
  std::string s = "minute_timestamp,truth,pred\n";
  for (const auto& r : rows)
    s += ingest::format_iso8601(r.minute_timestamp_us) + "," + (r.truth ? fmt(*r.truth) : "") + "," + fmt(r.pred) + "\n";
  return s;
}

inline std::vector<PredictionCsvRow> read_predictions_csv(const fs::path& p) {
  std::ifstream in(p);
  if (!in) fail(ErrorKind::Io, "cannot open '" + p.string() + "'");
  std::string line;
  if (!std::getline(in, line) || ingest::trim(line) != "minute_timestamp,truth,pred")
    fail(ErrorKind::Parse, p.filename().string() + ": expected header 'minute_timestamp,truth,pred'");
  std::vector<PredictionCsvRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (ingest::trim(line).empty()) continue;
    const std::string where = p.filename().string() + " line " + std::to_string(lineno);
    const auto f = ingest::split_csv_line(line);
    if (f.size() != 3) fail(ErrorKind::Parse, where + ": expected 3 fields");
    const auto ts = ingest::try_parse_iso8601(f[0]);
    if (!ts) fail(ErrorKind::Parse, where + ": invalid timestamp '" + f[0] + "'");
    PredictionCsvRow r{*ts, std::nullopt, ingest::parse_number(f[2], where)};
    if (!f[1].empty()) r.truth = ingest::parse_number(f[1], where);
    rows.push_back(r);
  }
  return rows;
}

inline std::string chart(const std::vector<PredictionCsvRow>& rows, const std::string& title, const std::string& pred_label) {
  svg::Series truth{"truth", "#222222", {}}, pred{pred_label, "#d1495b", {}};
  for (const auto& r : rows) {
    if (r.truth) truth.points.push_back({r.minute_timestamp_us, *r.truth});
    pred.points.push_back({r.minute_timestamp_us, r.pred});
  }
  std::vector<svg::Series> s;
  if (!truth.points.empty()) s.push_back(truth);
  s.push_back(pred);
  return svg::line_chart(s, {.title = title});
}

inline nlohmann::json metrics_json(const std::vector<PredictionCsvRow>& rows) {
  std::vector<double> p, t;
  for (const auto& r : rows)
    if (r.truth) {
      p.push_back(r.pred);
      t.push_back(*r.truth);
    }
  nlohmann::json j;
  for (auto d : {MetricDomain::Linear, MetricDomain::Log10}) {
    try {
      j[to_string(d)] = metrics(p, t, d).to_json();
    } catch (const Error& e) {
      j[to_string(d)] = {{"error", e.what()}};
    }
  }
  return j;
}

// ---- simulate ------------------------------------------------------------

struct SimulateArgs {
  std::vector<double> cn2{1e-13};
  std::vector<double> cn2_range;
  int minutes = 0;
  int frames = 100;
  int size = 256;
  double motion = 0.0;
  double correlation_length = 16.0;
  double fps = 120.0;
  std::uint64_t seed = 0;
  std::optional<std::uint64_t> scene_seed;
  bool scene_per_minute = false;
  bool random_style = false;
  std::string start = "2000-01-01T00:00:00Z";
  std::string dataset_id = "sim";
  std::string out;
  GeometryArgs geom;
};

inline int run_simulate(const SimulateArgs& a, const Context& ctx) {
  const CameraGeometry geom = a.geom.apply({});
  if (a.cn2.empty() && a.cn2_range.empty()) fail(ErrorKind::Validation, "give --cn2 or --cn2-range");
  if (!a.cn2_range.empty() && (a.cn2_range.size() != 2 || !(a.cn2_range[0] > 0) || !(a.cn2_range[1] >= a.cn2_range[0])))
    fail(ErrorKind::Validation, "--cn2-range needs lo,hi with 0 < lo <= hi");
  const int minutes = a.minutes > 0 ? a.minutes : (a.cn2_range.empty() ? static_cast<int>(a.cn2.size()) : 1);
  if (!(a.fps > 0)) fail(ErrorKind::Validation, "--fps must be positive");
  if (a.frames < 2) fail(ErrorKind::Validation, "--frames must be >= 2");
  const auto interval = static_cast<std::int64_t>(std::llround(kMicrosPerSecond / a.fps));
  if (interval * (a.frames - 1) >= kMicrosPerMinute)
    fail(ErrorKind::Validation, "--frames at --fps do not fit in one minute");
  const std::int64_t t0 = minute_floor(ingest::parse_iso8601(a.start));

  const fs::path out = prepare_out(a.out);
  fs::create_directories(out / "frames");
  ingest::DatasetManifest m;
  m.dataset_id = a.dataset_id;
  m.geometry = geom;
  m.scint_log = "scint.csv";
  m.truth_source = ingest::TruthSource::Simulator;
  std::vector<ingest::ScintRecord> truth;

  std::mt19937_64 range_rng(sim::mix_seed(a.seed, 0x72616e6765ULL));
  const std::uint64_t scene_seed = a.scene_seed.value_or(a.seed);
  ImageFrame scene;
  for (int k = 0; k < minutes; ++k) {
    if (k == 0 || a.scene_per_minute) {
      const std::uint64_t s = sim::mix_seed(scene_seed, a.scene_per_minute ? static_cast<std::uint64_t>(k) : 0);
      std::mt19937_64 style_rng(s);
      scene = sim::make_scene(a.size, a.size, s, a.random_style ? sim::random_scene_style(style_rng) : sim::SceneStyle{});
    }
    double cn2 = 0.0;
    if (a.cn2_range.empty()) {
      cn2 = a.cn2[static_cast<std::size_t>(k) % a.cn2.size()];
    } else {
      std::uniform_real_distribution<double> u(std::log10(a.cn2_range[0]), std::log10(a.cn2_range[1]));
      cn2 = std::pow(10.0, u(range_rng));
    }
    sim::SimConfig cfg;
    cfg.cn2_true = cn2;
    cfg.geom = geom;
    cfg.n_frames = a.frames;
    cfg.correlation_length = a.correlation_length;
    cfg.motion_px = a.motion;
    cfg.seed = sim::mix_seed(a.seed, static_cast<std::uint64_t>(k));
    cfg.start_timestamp_us = t0 + k * kMicrosPerMinute;
    cfg.frame_interval_us = interval;
    const auto res = sim::simulate_sequence(scene, cfg);
    for (std::size_t i = 0; i < res.sequence.size(); ++i) {
      char name[64];
      std::snprintf(name, sizeof name, "frames/m%04d_f%04zu.png", k, i);
      io::write_frame16(out / name, res.sequence[i]);
      m.frames.push_back({name, res.sequence[i].timestamp_us(), std::nullopt});
    }
    if (cn2 > 0) truth.push_back({cfg.start_timestamp_us, cn2, cn2, cn2, 0.0});
    ctx.log("minute " + std::to_string(k) + ": cn2 " + fmt(cn2) + ", tilt sigma " + fmt(res.tilt_sigma_px) + " px");
  }
  ingest::write_scint_csv(out / m.scint_log, truth);
  ingest::write_manifest(out / "manifest.json", m);
  write_echo(out, ctx);
  ctx.out << "simulated " << minutes << " minute(s), " << m.frames.size() << " frames -> " << (out / "manifest.json").string()
          << '\n';
  return 0;
}

// ---- stabilize -----------------------------------------------------------

struct StabilizeArgs {
  std::string manifest;
  std::string out;
  bool no_coarse = false;
  bool no_fine = false;
  int max_shift = 32;
  double min_correlation = 0.3;
  RoiArg anchor;
};

inline int run_stabilize(const StabilizeArgs& a, const Context& ctx) {
  const fs::path mpath(a.manifest), dir = mpath.parent_path();
  const auto m = ingest::read_manifest(mpath);
  const fs::path out = prepare_out(a.out);
  fs::create_directories(out / "frames");
  StabilizeOptions opt;
  opt.anchor = a.anchor.get();
  opt.coarse = !a.no_coarse;
  opt.fine = !a.no_fine;
  opt.align.max_shift = a.max_shift;
  opt.align.min_correlation = a.min_correlation;

  ingest::DatasetManifest res = m;
  res.frames.clear();
  std::string shifts = "timestamp,dx,dy\n";
  std::vector<RigidShift> all;
  for (const auto& [minute, idx] : frames_by_minute(m)) {
    if (idx.size() < 2) {
      ctx.err << "warning: minute " << ingest::format_iso8601(minute) << " has one frame, skipped\n";
      continue;
    }
    const ImageSequence seq = ingest::load_group(m, dir, idx);
    const AlignResult r = stabilize(seq, opt);
    for (const auto& w : r.warnings) ctx.err << "warning: " << ingest::format_iso8601(minute) << " " << w << '\n';
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const std::string name = "frames/" + fs::path(m.frames[idx[i]].path).stem().string() + "_" +
                               std::to_string(idx[i]) + ".png";
      io::write_frame16(out / name, r.sequence[i]);
      res.frames.push_back({name, m.frames[idx[i]].timestamp_us, m.frames[idx[i]].exposure_s});
      shifts += ingest::format_iso8601(m.frames[idx[i]].timestamp_us) + "," + fmt(r.shifts[i].dx) + "," +
                fmt(r.shifts[i].dy) + "\n";
      all.push_back(r.shifts[i]);
    }
  }
  if (res.frames.empty()) fail(ErrorKind::EmptyInput, "no minute with at least 2 frames");
  if (!m.scint_log.empty()) {
    const fs::path src = ingest::resolve(dir, m.scint_log);
    if (fs::exists(src)) {
      fs::copy_file(src, out / "scint.csv", fs::copy_options::overwrite_existing);
      res.scint_log = "scint.csv";
    }
  }
  ingest::write_manifest(out / "manifest.json", res);
  write_text(out / "shifts.csv", shifts);
  write_echo(out, ctx);
  ctx.out << "stabilized " << res.frames.size() << " frames, RMS correction " << fmt(residual_motion(all)) << " px\n";
  return 0;
}

// ---- estimate ------------------------------------------------------------

struct EstimateArgs {
  std::string manifest;
  std::string out;
  std::string weights;
  int group_size = 0;  // 0: 3, or the model's frame count
  RoiArg roi;
  EstimatorArgs est;
  GeometryArgs geom;
};

inline int run_estimate(const EstimateArgs& a, const Context& ctx) {
  const fs::path mpath(a.manifest), dir = mpath.parent_path();
  const auto m = ingest::read_manifest(mpath);
  const CameraGeometry geom = a.geom.apply(m.geometry);
  const Roi roi = resolve_roi(a.roi.get(), m, dir);
  std::shared_ptr<const Cn2Model> model;
  if (!a.weights.empty()) model = load_model(a.weights);
  const int group = a.group_size > 0 ? a.group_size : (model ? model->n_input_frames() : 3);
  const EstimatorOptions eo = a.est.get();
  const auto truth = truth_map(m, dir, ctx);
  const fs::path out = prepare_out(a.out);

  std::string groups_csv = "timestamp,minute_timestamp,n_frames,cn2,error\n";
  std::vector<PredictionCsvRow> rows;
  for (const auto& bucket : ingest::group_by_minute(m, group)) {
    std::vector<double> vals;
    for (const auto& g : bucket.groups) {
      const std::int64_t ts = m.frames[g[g.size() / 2]].timestamp_us;
      std::string line = ingest::format_iso8601(ts) + "," + ingest::format_iso8601(bucket.minute_timestamp_us) + "," +
                         std::to_string(g.size()) + ",";
      try {
        const ImageSequence seq = ingest::load_group(m, dir, g, roi);
        const Roi inner{0, 0, roi.size};
        const double v = model ? predict_group(*model, seq, geom, inner) : estimate_cn2(seq, inner, geom, eo).value;
        vals.push_back(v);
        line += fmt(v) + ",";
      } catch (const Error& e) {
        if (e.kind() == ErrorKind::Bounds || e.kind() == ErrorKind::Config) throw;
        std::string msg = e.what();
        std::replace(msg.begin(), msg.end(), ',', ';');
        line += "," + msg;
      }
      groups_csv += line + "\n";
    }
    if (vals.empty()) continue;
    PredictionCsvRow r{bucket.minute_timestamp_us, std::nullopt, median(vals)};
    if (auto it = truth.find(bucket.minute_timestamp_us); it != truth.end()) r.truth = it->second;
    rows.push_back(r);
  }
  write_text(out / "groups.csv", groups_csv);
  write_text(out / "predictions.csv", predictions_csv(rows));
  write_echo(out, ctx);
  ctx.out << "estimated " << rows.size() << " minute(s) -> " << (out / "predictions.csv").string() << '\n';
  if (rows.empty()) fail(ErrorKind::EmptyInput, "no minute produced an estimate");
  return 0;
}

// ---- train ---------------------------------------------------------------

struct TrainArgs {
  std::vector<std::string> manifests;
  std::string out;
  RoiArg roi;
  ModelArgs model;
  GeometryArgs geom;
};

inline int run_train(const TrainArgs& a, const Context& ctx) {
  if (a.model.model == "gradient") fail(ErrorKind::Config, "the gradient estimator has nothing to train");
  const TrainConfig tc = a.model.train_config();
  std::vector<Sample> samples;
  std::optional<CameraGeometry> geom;
  Roi roi{};
  for (const auto& path : a.manifests) {
    const fs::path mp(path);
    const auto m = ingest::read_manifest(mp);
    roi = resolve_roi(a.roi.get(), m, mp.parent_path());
    const Dataset d = ingest::load_dataset(mp, a.model.frames, roi);
    if (!geom) geom = a.geom.apply(d.geom);
    for (const auto& minute : d.minutes)
      for (const auto& g : minute.groups) samples.push_back({g, minute.truth});
    ctx.log(path + ": " + std::to_string(d.group_count()) + " groups");
  }
  auto model = a.model.make(*geom, roi.size);
  const TrainResult r = train(*model, samples, tc);
  const fs::path out = prepare_out(a.out);
  save_weights(*model, (out / "weights.bin").string());
  std::string loss = "epoch,loss,smoothed\n";
  for (std::size_t i = 0; i < r.loss_history.size(); ++i)
    loss += std::to_string(i + 1) + "," + fmt(r.loss_history[i]) + "," + fmt(r.smoothed_history[i]) + "\n";
  write_text(out / "loss.csv", loss);
  write_echo(out, ctx);
  ctx.out << "trained " << model->kind() << " on " << samples.size() << " groups for " << r.loss_history.size()
          << " epoch(s)";
  if (!r.loss_history.empty()) ctx.out << ", final loss " << fmt(r.loss_history.back());
  ctx.out << '\n';
  if (r.aborted) {
    ctx.err << "training aborted, last good weights saved: " << r.abort_reason << '\n';
    return 2;
  }
  return 0;
}

// ---- evaluate ------------------------------------------------------------

struct EvaluateArgs {
  std::string protocol = "interpolation";
  std::string manifest, train_manifest, test_manifest;
  std::string out;
  std::string weights;
  int group_size = 0;
  double train_fraction = 0.66;
  int block_minutes = 3;
  int k = 6;
  bool plot = false;
  RoiArg roi;
  EstimatorArgs est;
  ModelArgs model;
};

inline int run_evaluate(const EvaluateArgs& a, const Context& ctx) {
  SplitSpec spec;
  spec.kind = parse_split_kind(a.protocol);
  spec.train_fraction = a.train_fraction;
  spec.block_minutes = a.block_minutes;
  spec.k = a.k;
  spec.validate();
  const bool transfer = spec.kind == SplitKind::Transfer;
  if (transfer && (a.train_manifest.empty() || a.test_manifest.empty()))
    fail(ErrorKind::Validation, "transfer needs --train and --test manifests");
  if (!transfer && a.manifest.empty()) fail(ErrorKind::Validation, "--manifest is required");

  std::shared_ptr<const Cn2Model> pretrained;
  if (!a.weights.empty()) pretrained = load_model(a.weights);
  const bool learned = a.model.model != "gradient";
  const int group = a.group_size > 0 ? a.group_size : (pretrained ? pretrained->n_input_frames() : a.model.frames);

  auto load = [&](const std::string& path, Roi& roi) {
    const fs::path mp(path);
    const auto m = ingest::read_manifest(mp);
    roi = resolve_roi(a.roi.get(), m, mp.parent_path());
    return ingest::load_dataset(mp, group, roi);
  };
  Roi roi{};
  std::vector<Dataset> data;
  if (transfer) {
    data.push_back(load(a.train_manifest, roi));
    data.push_back(load(a.test_manifest, roi));
  } else {
    data.push_back(load(a.manifest, roi));
  }
  const Roi inner{0, 0, roi.size};

  std::unique_ptr<Predictor> pred;
  if (!learned) {
    pred = std::make_unique<ClassicalPredictor>(a.est.get(), inner);
  } else if (pretrained) {
    pred = std::make_unique<PretrainedPredictor>(pretrained, inner);
  } else {
    const TrainConfig tc = a.model.train_config();
    const ModelArgs margs = a.model;
    const CameraGeometry g0 = data.front().geom;
    const int size = roi.size;
    pred = std::make_unique<ModelPredictor>([margs, g0, size] { return margs.make(g0, size); }, tc, inner);
  }
  const ProtocolReport rep = transfer ? run_protocol(*pred, data[0], data[1], spec) : run_protocol(*pred, data[0], spec);

  const fs::path out = prepare_out(a.out);
  nlohmann::json j = rep.to_json();
  j["config"] = ctx.config_echo;
  write_text(out / "report.json", j.dump(2) + "\n");
  std::vector<PredictionCsvRow> rows;
  for (const auto& r : rep.pooled_predictions()) rows.push_back({r.minute_timestamp_us, r.truth, r.pred});
  write_text(out / "predictions.csv", predictions_csv(rows));
  if (a.plot && !rows.empty()) write_text(out / "plot.svg", chart(rows, rep.predictor + " (" + a.protocol + ")", rep.predictor));
  write_echo(out, ctx);

  for (const auto& f : rep.folds)
    if (!f.error.empty()) ctx.err << "warning: fold " << f.index << ": " << f.error << '\n';
  ctx.out << rep.predictor << " " << to_string(spec.kind) << ": " << rows.size() << " test minute(s)";
  if (rep.pooled_linear)
    ctx.out << ", MAE " << fmt(rep.pooled_linear->mae) << ", R2 " << rep.pooled_linear->r2;
  if (rep.pooled_log10) ctx.out << ", log10 R2 " << rep.pooled_log10->r2;
  ctx.out << (rep.partial ? " (partial)" : "") << '\n';
  if (rows.empty()) fail(ErrorKind::EmptyInput, "no test minute produced a prediction");
  return 0;
}

// ---- report --------------------------------------------------------------

struct ReportArgs {
  std::string predictions;
  std::string out;
  std::string title = "Cn2 truth vs prediction";
};

inline int run_report(const ReportArgs& a, const Context& ctx) {
  const auto rows = read_predictions_csv(a.predictions);
  if (rows.empty()) fail(ErrorKind::EmptyInput, "no predictions in '" + a.predictions + "'");
  const fs::path out = prepare_out(a.out);
  write_text(out / "plot.svg", chart(rows, a.title, "prediction"));
  write_text(out / "metrics.json", metrics_json(rows).dump(2) + "\n");
  write_echo(out, ctx);
  ctx.out << "report for " << rows.size() << " minute(s) -> " << (out / "plot.svg").string() << '\n';
  return 0;
}

// ---- ingest --------------------------------------------------------------

struct ConvertArgs {
  std::string images, scint, out;
  ingest::ConvertOptions opt;
  GeometryArgs geom;
};

inline int run_convert(const ConvertArgs& a, const Context& ctx) {
  ingest::ConvertOptions opt = a.opt;
  opt.geometry = a.geom.apply({});
  const auto rep = ingest::convert_raw(a.images, a.scint, prepare_out(a.out), opt);
  for (const auto& w : rep.warnings) ctx.err << "warning: " << w << '\n';
  write_echo(a.out, ctx);
  ctx.out << "converted " << rep.frames << " frames, " << rep.scint_records << " scintillometer minutes -> "
          << rep.manifest_path.string() << '\n';
  return 0;
}

struct CacheArgs {
  std::string manifest, out;
  RoiArg roi;
};

inline int run_cache(const CacheArgs& a, const Context& ctx) {
  const fs::path mp(a.manifest);
  const auto m = ingest::read_manifest(mp);
  const Roi roi = resolve_roi(a.roi.get(), m, mp.parent_path());
  const auto rep = ingest::cache_crops(m, mp.parent_path(), roi, prepare_out(a.out));
  for (const auto& s : rep.skipped) ctx.err << "warning: skipped " << s << '\n';
  write_echo(rep.manifest_path.parent_path(), ctx);
  ctx.out << "cached " << rep.manifest.frames.size() << " frames (" << rep.written << " written, " << rep.reused
          << " reused) -> " << rep.manifest_path.string() << '\n';
  return 0;
}

// ---- entry point ---------------------------------------------------------

inline std::string echo_for(CLI::App* sub, const std::string& section) {
  std::string words = section;
  std::replace(words.begin(), words.end(), '.', ' ');
  return "# cn2 run configuration; replay with: cn2 --config <this file> " + words + "\n[" + section + "]\n" +
         sub->config_to_str(true, false);
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Cn2 turbulence estimation from image sequences"};
  app.name("cn2");
  app.set_config("--config", "", "replay a config.toml echo")->check(CLI::ExistingFile);
  app.require_subcommand(1);
  int verbose = 0;
  app.add_flag("-v,--verbose", verbose, "progress messages on stderr");

  SimulateArgs sim_a;
  auto* sim = app.add_subcommand("simulate", "synthesize turbulent sequences with known Cn2");
  sim->add_option("--cn2", sim_a.cn2, "Cn2 per minute (comma list, cycled)")->delimiter(',')->capture_default_str();
  sim->add_option("--cn2-range", sim_a.cn2_range, "lo,hi: log-uniform Cn2 per minute")->delimiter(',')->expected(2);
  sim->add_option("--minutes", sim_a.minutes, "minutes to simulate (default: one per --cn2 value)");
  sim->add_option("--frames", sim_a.frames, "frames per minute")->capture_default_str();
  sim->add_option("--size", sim_a.size, "frame side, px")->capture_default_str();
  sim->add_option("--motion", sim_a.motion, "camera shake disc radius, px")->capture_default_str();
  sim->add_option("--corr-length", sim_a.correlation_length, "tilt correlation length, px")->capture_default_str();
  sim->add_option("--fps", sim_a.fps)->capture_default_str();
  sim->add_option("--seed", sim_a.seed)->capture_default_str();
  sim->add_option("--scene-seed", sim_a.scene_seed, "scene seed (default: --seed)");
  sim->add_flag("--scene-per-minute", sim_a.scene_per_minute, "new scene every minute");
  sim->add_flag("--random-style", sim_a.random_style, "randomize scene texture and contrast");
  sim->add_option("--start", sim_a.start, "first minute, ISO-8601")->capture_default_str();
  sim->add_option("--dataset-id", sim_a.dataset_id)->capture_default_str();
  sim->add_option("--out", sim_a.out, "output directory")->required();
  sim_a.geom.add(sim);

  StabilizeArgs stab_a;
  auto* stab = app.add_subcommand("stabilize", "remove platform motion minute by minute");
  stab->add_option("--manifest", stab_a.manifest)->required()->check(CLI::ExistingFile);
  stab->add_option("--out", stab_a.out)->required();
  stab->add_flag("--no-coarse", stab_a.no_coarse, "skip anchor-patch alignment");
  stab->add_flag("--no-fine", stab_a.no_fine, "skip sub-pixel phase correlation");
  stab->add_option("--max-shift", stab_a.max_shift, "search radius, px")->capture_default_str();
  stab->add_option("--min-correlation", stab_a.min_correlation)->capture_default_str();
  stab->add_option("--anchor", stab_a.anchor.values, "anchor patch x0,y0,size")->delimiter(',')->expected(3);

  EstimateArgs est_a;
  auto* est = app.add_subcommand("estimate", "gradient-method (or trained model) Cn2 per minute");
  est->add_option("--manifest", est_a.manifest)->required()->check(CLI::ExistingFile);
  est->add_option("--out", est_a.out)->required();
  est->add_option("--weights", est_a.weights, "use a trained model instead of the gradient method");
  est->add_option("--group-size", est_a.group_size, "frames per estimate (default 3 or the model's)");
  est_a.roi.add(est);
  est_a.est.add(est);
  est_a.geom.add(est);

  TrainArgs tr_a;
  auto* tr = app.add_subcommand("train", "train a learned estimator");
  tr->add_option("--manifest", tr_a.manifests, "training manifest(s)")->required()->check(CLI::ExistingFile);
  tr->add_option("--out", tr_a.out)->required();
  tr_a.roi.add(tr);
  tr_a.model.add(tr, false);
  tr_a.geom.add(tr);

  EvaluateArgs ev_a;
  auto* ev = app.add_subcommand("evaluate", "run an evaluation protocol");
  ev->add_option("--protocol", ev_a.protocol, "interpolation | kfold | transfer")->capture_default_str();
  ev->add_option("--manifest", ev_a.manifest, "dataset (interpolation, kfold)");
  ev->add_option("--train", ev_a.train_manifest, "training dataset (transfer)");
  ev->add_option("--test", ev_a.test_manifest, "test dataset (transfer)");
  ev->add_option("--out", ev_a.out)->required();
  ev->add_option("--weights", ev_a.weights, "evaluate a trained model without retraining");
  ev->add_option("--group-size", ev_a.group_size, "frames per group (default: --frames)");
  ev->add_option("--train-fraction", ev_a.train_fraction)->capture_default_str();
  ev->add_option("--block-minutes", ev_a.block_minutes)->capture_default_str();
  ev->add_option("--k", ev_a.k, "folds")->capture_default_str();
  ev->add_flag("--plot", ev_a.plot, "write plot.svg");
  ev_a.roi.add(ev);
  ev_a.est.add(ev);
  ev_a.model.model = "gradient";
  ev_a.model.add(ev, true);

  ReportArgs rp_a;
  auto* rp = app.add_subcommand("report", "chart and metrics from a predictions CSV");
  rp->add_option("--predictions", rp_a.predictions)->required()->check(CLI::ExistingFile);
  rp->add_option("--out", rp_a.out)->required();
  rp->add_option("--title", rp_a.title)->capture_default_str();

  auto* ing = app.add_subcommand("ingest", "dataset preparation");
  ing->require_subcommand(1);
  ConvertArgs cv_a;
  auto* cv = ing->add_subcommand("convert", "raw capture directory + scintillometer CSV -> manifest");
  cv->add_option("--images", cv_a.images)->required()->check(CLI::ExistingDirectory);
  cv->add_option("--scint", cv_a.scint)->required()->check(CLI::ExistingFile);
  cv->add_option("--out", cv_a.out)->required();
  cv->add_option("--dataset-id", cv_a.opt.dataset_id)->capture_default_str();
  cv->add_option("--timestamp-regex", cv_a.opt.timestamp_regex, "file-name capture time, groups Y M D h m s [frac]")
      ->capture_default_str();
  cv->add_option("--fps", cv_a.opt.fps)->capture_default_str();
  cv->add_option("--time-col", cv_a.opt.time_column)->capture_default_str();
  cv->add_option("--cn2-col", cv_a.opt.cn2_column)->capture_default_str();
  cv->add_option("--min-col", cv_a.opt.min_column)->capture_default_str();
  cv->add_option("--max-col", cv_a.opt.max_column)->capture_default_str();
  cv->add_option("--std-col", cv_a.opt.std_column)->capture_default_str();
  cv_a.geom.add(cv);
  CacheArgs ca_a;
  auto* ca = ing->add_subcommand("cache", "crop frames to an ROI into a content-keyed cache");
  ca->add_option("--manifest", ca_a.manifest)->required()->check(CLI::ExistingFile);
  ca->add_option("--out", ca_a.out, "cache root")->required();
  ca_a.roi.add(ca);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    CLI::App* ctx_app = &app;
    for (auto* s : app.get_subcommands()) {
      ctx_app = s;
      for (auto* s2 : s->get_subcommands()) ctx_app = s2;
    }
    err << ctx_app->help();
    return 1;
  }

  Context ctx{out, err, verbose, {}};
  try {
    if (sim->parsed()) {
      ctx.config_echo = echo_for(sim, "simulate");
      return run_simulate(sim_a, ctx);
    }
    if (stab->parsed()) {
      ctx.config_echo = echo_for(stab, "stabilize");
      return run_stabilize(stab_a, ctx);
    }
    if (est->parsed()) {
      ctx.config_echo = echo_for(est, "estimate");
      return run_estimate(est_a, ctx);
    }
    if (tr->parsed()) {
      ctx.config_echo = echo_for(tr, "train");
      return run_train(tr_a, ctx);
    }
    if (ev->parsed()) {
      ctx.config_echo = echo_for(ev, "evaluate");
      return run_evaluate(ev_a, ctx);
    }
    if (rp->parsed()) {
      ctx.config_echo = echo_for(rp, "report");
      return run_report(rp_a, ctx);
    }
    if (cv->parsed()) {
      ctx.config_echo = echo_for(cv, "ingest.convert");
      return run_convert(cv_a, ctx);
    }
    if (ca->parsed()) {
      ctx.config_echo = echo_for(ca, "ingest.cache");
      return run_cache(ca_a, ctx);
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
  err << app.help();
  return 1;
}

}  // namespace cn2::cli
