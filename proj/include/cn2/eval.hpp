#pragma once
// Error metrics, time-ordered split protocols and scenario runners.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cn2/dataset.hpp"
#include "cn2/error.hpp"
#include "cn2/gradient_estimator.hpp"
#include "cn2/models.hpp"
#include "cn2/stabilize.hpp"
#include "cn2/stats.hpp"
#include "cn2/turbsim.hpp"

namespace cn2 {

// ---- metrics -------------------------------------------------------------

enum class MetricDomain { Linear, Log10 };

inline std::string to_string(MetricDomain d) { return d == MetricDomain::Linear ? "linear" : "log10"; }

inline MetricDomain parse_metric_domain(const std::string& s) {
  if (s == "linear") return MetricDomain::Linear;
  if (s == "log10") return MetricDomain::Log10;
  fail(ErrorKind::Config, "unknown metric domain '" + s + "' (expected linear or log10)");
}

struct MetricReport {
  double mae = 0.0;
  double rmse = 0.0;
  double mape = 0.0;   // percent
  double mase = 0.0;
  double r2 = 0.0;     // squared Pearson correlation
  double stdev_error = 0.0;
  std::size_t n = 0;
  MetricDomain domain = MetricDomain::Linear;

  nlohmann::json to_json() const {
    return {{"domain", to_string(domain)}, {"n", n},       {"mae", mae},   {"rmse", rmse},
            {"mape", mape},                {"mase", mase}, {"r2", r2},     {"stdev_error", stdev_error}};
  }
};

/// Squared Pearson correlation; a constant prediction has no linear association (0).
inline double squared_pearson(std::span<const double> x, std::span<const double> y) {
  const double mx = mean(x), my = mean(y);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (syy == 0.0) fail(ErrorKind::Undefined, "R^2 is undefined for a constant truth series");
  if (sxx == 0.0) return 0.0;
  return std::clamp(sxy * sxy / (sxx * syy), 0.0, 1.0);
}

/// Errors e = pred - truth in the chosen domain. Truth order is time order (MASE).
inline MetricReport metrics(std::span<const double> pred, std::span<const double> truth,
                            MetricDomain domain = MetricDomain::Linear) {
  if (pred.size() != truth.size())
    fail(ErrorKind::Shape, "prediction and truth lengths differ (" + std::to_string(pred.size()) + " vs " +
                               std::to_string(truth.size()) + ")");
  if (truth.size() < 2) fail(ErrorKind::InsufficientFrames, "metrics need at least 2 points");
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (!(truth[i] > 0) || !std::isfinite(truth[i])) fail(ErrorKind::Validation, "truth values must be finite and > 0");
    if (!std::isfinite(pred[i])) fail(ErrorKind::Validation, "predictions must be finite");
    if (domain == MetricDomain::Log10 && !(pred[i] > 0))
      fail(ErrorKind::Validation, "log10 metrics need positive predictions");
  }
  auto tr = [&](double v) { return domain == MetricDomain::Log10 ? std::log10(v) : v; };
  std::vector<double> p(pred.size()), t(truth.size()), e(truth.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    p[i] = tr(pred[i]);
    t[i] = tr(truth[i]);
    e[i] = p[i] - t[i];
  }

  MetricReport r;
  r.n = t.size();
  r.domain = domain;
  double abs_sum = 0.0, sq_sum = 0.0, pct_sum = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    abs_sum += std::abs(e[i]);
    sq_sum += e[i] * e[i];
    if (t[i] == 0.0) fail(ErrorKind::Undefined, "MAPE is undefined for a zero truth value");
    pct_sum += std::abs(e[i] / t[i]);
  }
  const double n = static_cast<double>(t.size());
  r.mae = abs_sum / n;
  r.rmse = std::sqrt(sq_sum / n);
  r.mape = 100.0 * pct_sum / n;

  double naive = 0.0;
  for (std::size_t i = 1; i < t.size(); ++i) naive += std::abs(t[i] - t[i - 1]);
  naive /= n - 1.0;
  if (naive == 0.0) fail(ErrorKind::Undefined, "MASE is undefined: the naive forecast error is zero");
  r.mase = r.mae / naive;
  r.r2 = squared_pearson(p, t);
  r.stdev_error = std::sqrt(sample_variance(e));
  return r;
}

// ---- splits --------------------------------------------------------------

enum class SplitKind { Interpolation, KFold, Transfer };

inline std::string to_string(SplitKind k) {
  switch (k) {
    case SplitKind::Interpolation: return "interpolation";
    case SplitKind::KFold: return "kfold";
    case SplitKind::Transfer: return "transfer";
  }
  return "?";
}

inline SplitKind parse_split_kind(const std::string& s) {
  if (s == "interpolation") return SplitKind::Interpolation;
  if (s == "kfold" || s == "extrapolation") return SplitKind::KFold;
  if (s == "transfer") return SplitKind::Transfer;
  fail(ErrorKind::Config, "unknown protocol '" + s + "' (expected interpolation, kfold or transfer)");
}

struct SplitSpec {
  SplitKind kind = SplitKind::Interpolation;
  double train_fraction = 0.66;  // interpolation: train share of each block
  int block_minutes = 3;         // interpolation: block length (2 train : 1 test)
  int k = 6;                     // kfold
  std::string train_dataset;     // transfer
  std::string test_dataset;

  int train_per_block() const { return static_cast<int>(std::lround(train_fraction * block_minutes)); }

  void validate() const {
    if (kind == SplitKind::Interpolation) {
      if (block_minutes < 2) fail(ErrorKind::Split, "block_minutes must be >= 2");
      const int tr = train_per_block();
      if (tr < 1 || tr >= block_minutes)
        fail(ErrorKind::Split, "train_fraction must leave at least one train and one test minute per block");
    }
    if (kind == SplitKind::KFold && k < 2) fail(ErrorKind::Split, "kfold needs k >= 2, got " + std::to_string(k));
  }

  nlohmann::json to_json() const {
    nlohmann::json j{{"kind", to_string(kind)}};
    if (kind == SplitKind::Interpolation) {
      j["train_fraction"] = train_fraction;
      j["block_minutes"] = block_minutes;
    }
    if (kind == SplitKind::KFold) j["k"] = k;
    if (kind == SplitKind::Transfer) {
      j["train_dataset"] = train_dataset;
      j["test_dataset"] = test_dataset;
    }
    return j;
  }
};

struct Fold {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

/// Index folds over a time-ordered series of n minutes.
inline std::vector<Fold> split_indices(std::size_t n, const SplitSpec& spec) {
  spec.validate();
  if (spec.kind == SplitKind::Transfer)
    fail(ErrorKind::Split, "transfer uses two datasets as given; there is nothing to split");
  if (spec.kind == SplitKind::Interpolation) {
    const std::size_t block = static_cast<std::size_t>(spec.block_minutes);
    const std::size_t tr = static_cast<std::size_t>(spec.train_per_block());
    if (n <= tr) fail(ErrorKind::Split, "interpolation needs more than " + std::to_string(tr) + " minutes");
    Fold f;
    for (std::size_t i = 0; i < n; ++i) (i % block < tr ? f.train : f.test).push_back(i);
    return {f};
  }
  const std::size_t k = static_cast<std::size_t>(spec.k);
  if (n < k) fail(ErrorKind::Split, std::to_string(n) + " minutes cannot form " + std::to_string(k) + " folds");
  std::vector<Fold> folds(k);
  std::size_t start = 0;
  for (std::size_t f = 0; f < k; ++f) {
    const std::size_t len = n / k + (f < n % k ? 1 : 0);
    for (std::size_t i = 0; i < n; ++i) (i >= start && i < start + len ? folds[f].test : folds[f].train).push_back(i);
    start += len;
  }
  return folds;
}

// ---- predictors ----------------------------------------------------------

/// Anything that maps a frame group to Cn2, optionally after fitting on minutes.
class Predictor {
 public:
  virtual ~Predictor() = default;
  virtual std::string name() const = 0;
  virtual bool trainable() const { return false; }
  virtual void fit(std::span<const MinuteData* const> /*train*/, const CameraGeometry& /*geom*/) {}
  virtual double predict(const ImageSequence& group, const CameraGeometry& geom) const = 0;
};

/// Stateless gradient-method estimator.
class ClassicalPredictor : public Predictor {
 public:
  explicit ClassicalPredictor(EstimatorOptions opt = {}, std::optional<Roi> roi = std::nullopt)
      : opt_(std::move(opt)), roi_(roi) {}

  std::string name() const override { return "gradient_" + to_string(opt_.kernel.variant); }

  double predict(const ImageSequence& group, const CameraGeometry& geom) const override {
    const Roi roi = roi_.value_or(Roi::centered(group.width(), group.height()));
    return estimate_cn2(group, roi, geom, opt_).value;
  }

 private:
  EstimatorOptions opt_;
  std::optional<Roi> roi_;
};

/// Median over the model-sized sub-groups of `group`, each cropped to `roi`
/// (default: the centred 256 px square). Physics models use `geom`.
inline double predict_group(const Cn2Model& model, const ImageSequence& group, const CameraGeometry& geom,
                            const std::optional<Roi>& roi = std::nullopt) {
  const Roi r = roi.value_or(Roi::centered(group.width(), group.height()));
  std::vector<double> vals;
  for (const auto& s : make_samples(group, 1.0, model.n_input_frames(), r)) {
    if (const auto* p = dynamic_cast<const PhysicsGradNet*>(&model))
      vals.push_back(p->predict(s.frames, geom));
    else
      vals.push_back(model.predict(s.frames));
  }
  if (vals.empty()) fail(ErrorKind::InsufficientFrames, "group shorter than the model's frame count");
  return median(vals);
}

/// A learned model, re-created from the factory and trained on each fold.
class ModelPredictor : public Predictor {
 public:
  using Factory = std::function<std::unique_ptr<Cn2Model>()>;

  ModelPredictor(Factory factory, TrainConfig train_cfg, std::optional<Roi> roi = std::nullopt)
      : factory_(std::move(factory)), train_cfg_(train_cfg), roi_(roi) {
    model_ = factory_();
  }

  std::string name() const override { return model_->kind(); }
  bool trainable() const override { return true; }
  Cn2Model& model() { return *model_; }
  const TrainResult& last_training() const { return last_; }

  void fit(std::span<const MinuteData* const> train_minutes, const CameraGeometry& geom) override {
    model_ = factory_();
    if (auto* p = dynamic_cast<PhysicsGradNet*>(model_.get())) p->set_geometry(geom);
    std::vector<Sample> samples;
    for (const MinuteData* m : train_minutes)
      for (const auto& g : m->groups) {
        const Roi r = roi_.value_or(Roi::centered(g.width(), g.height()));
        for (auto& s : make_samples(g, m->truth, model_->n_input_frames(), r)) samples.push_back(std::move(s));
      }
    if (samples.empty()) fail(ErrorKind::EmptyInput, "no training groups for " + name());
    last_ = train(*model_, samples, train_cfg_);
  }

  double predict(const ImageSequence& group, const CameraGeometry& geom) const override {
    return predict_group(*model_, group, geom, roi_);
  }

 private:
  Factory factory_;
  TrainConfig train_cfg_;
  std::optional<Roi> roi_;
  std::unique_ptr<Cn2Model> model_;
  TrainResult last_;
};

/// An already trained model; fitting is a no-op.
class PretrainedPredictor : public Predictor {
 public:
  explicit PretrainedPredictor(std::shared_ptr<const Cn2Model> model, std::optional<Roi> roi = std::nullopt)
      : model_(std::move(model)), roi_(roi) {}

  std::string name() const override { return model_->kind() + "_pretrained"; }

  double predict(const ImageSequence& group, const CameraGeometry& geom) const override {
    return predict_group(*model_, group, geom, roi_);
  }

 private:
  std::shared_ptr<const Cn2Model> model_;
  std::optional<Roi> roi_;
};

// ---- protocols -----------------------------------------------------------

struct PredictionRow {
  std::int64_t minute_timestamp_us = 0;
  double truth = 0.0;
  double pred = 0.0;
};

struct FoldReport {
  std::size_t index = 0;
  std::size_t n_train_minutes = 0;
  std::size_t n_test_minutes = 0;
  std::size_t gaps = 0;  // test minutes without any successful group
  std::vector<PredictionRow> predictions;
  std::optional<MetricReport> linear;
  std::optional<MetricReport> log10;
  std::string error;
};

struct ProtocolReport {
  std::string predictor;
  SplitSpec spec;
  std::vector<FoldReport> folds;
  std::optional<MetricReport> pooled_linear;
  std::optional<MetricReport> pooled_log10;
  bool partial = false;

  /// All test predictions in time order.
  std::vector<PredictionRow> pooled_predictions() const {
    std::vector<PredictionRow> all;
    for (const auto& f : folds) all.insert(all.end(), f.predictions.begin(), f.predictions.end());
    std::stable_sort(all.begin(), all.end(),
                     [](const auto& a, const auto& b) { return a.minute_timestamp_us < b.minute_timestamp_us; });
    return all;
  }

  nlohmann::json to_json() const {
    auto opt = [](const std::optional<MetricReport>& m) { return m ? m->to_json() : nlohmann::json(nullptr); };
    nlohmann::json j{{"predictor", predictor}, {"split", spec.to_json()}, {"partial", partial}};
    j["pooled"] = {{"linear", opt(pooled_linear)}, {"log10", opt(pooled_log10)}};
    j["folds"] = nlohmann::json::array();
    for (const auto& f : folds) {
      nlohmann::json fj{{"index", f.index},     {"train_minutes", f.n_train_minutes}, {"test_minutes", f.n_test_minutes},
                        {"gaps", f.gaps},       {"linear", opt(f.linear)},           {"log10", opt(f.log10)}};
      if (!f.error.empty()) fj["error"] = f.error;
      j["folds"].push_back(std::move(fj));
    }
    return j;
  }
};

namespace detail {

/// Per-minute median prediction; minutes whose groups all fail are gaps.
inline std::vector<PredictionRow> predict_minutes(const Predictor& pred, std::span<const MinuteData* const> minutes,
                                                  const CameraGeometry& geom, std::size_t& gaps) {
  std::vector<PredictionRow> rows;
  for (const MinuteData* m : minutes) {
    std::vector<double> vals;
    for (const auto& g : m->groups) {
      try {
        const double v = pred.predict(g, geom);
        if (std::isfinite(v)) vals.push_back(v);
      } catch (const Error&) {
      }
    }
    if (vals.empty()) {
      ++gaps;
      continue;
    }
    rows.push_back({m->minute_timestamp_us, m->truth, median(vals)});
  }
  return rows;
}

inline void fill_metrics(std::span<const PredictionRow> rows, std::optional<MetricReport>& lin,
                         std::optional<MetricReport>& lg, std::string& error) {
  std::vector<double> p, t;
  for (const auto& r : rows) {
    p.push_back(r.pred);
    t.push_back(r.truth);
  }
  try {
    lin = metrics(p, t, MetricDomain::Linear);
  } catch (const Error& e) {
    error = e.what();
  }
  try {
    lg = metrics(p, t, MetricDomain::Log10);
  } catch (const Error& e) {
    if (error.empty()) error = e.what();
  }
}

inline std::vector<const MinuteData*> pointers(const Dataset& d, std::span<const std::size_t> idx) {
  std::vector<const MinuteData*> out;
  for (std::size_t i : idx) out.push_back(&d.minutes[i]);
  return out;
}

inline FoldReport run_fold(Predictor& pred, std::size_t index, std::span<const MinuteData* const> train_minutes,
                           const CameraGeometry& train_geom, std::span<const MinuteData* const> test_minutes,
                           const CameraGeometry& test_geom) {
  FoldReport f;
  f.index = index;
  f.n_train_minutes = train_minutes.size();
  f.n_test_minutes = test_minutes.size();
  try {
    if (pred.trainable()) pred.fit(train_minutes, train_geom);
    f.predictions = predict_minutes(pred, test_minutes, test_geom, f.gaps);
    fill_metrics(f.predictions, f.linear, f.log10, f.error);
  } catch (const Error& e) {
    f.error = e.what();
  }
  return f;
}

inline void finish(ProtocolReport& r) {
  for (const auto& f : r.folds)
    if (!f.error.empty() || f.gaps > 0) r.partial = true;
  std::string pooled_error;
  const auto rows = r.pooled_predictions();
  fill_metrics(rows, r.pooled_linear, r.pooled_log10, pooled_error);
  if (!pooled_error.empty()) r.partial = true;
}

}  // namespace detail

/// Interpolation or k-fold protocol on one time-ordered dataset. Fold
/// failures are recorded and the protocol continues.
inline ProtocolReport run_protocol(Predictor& pred, const Dataset& data, const SplitSpec& spec) {
  data.validate();
  ProtocolReport r;
  r.predictor = pred.name();
  r.spec = spec;
  const auto folds = split_indices(data.minutes.size(), spec);
  for (std::size_t i = 0; i < folds.size(); ++i) {
    const auto tr = detail::pointers(data, folds[i].train), te = detail::pointers(data, folds[i].test);
    r.folds.push_back(detail::run_fold(pred, i, tr, data.geom, te, data.geom));
  }
  detail::finish(r);
  return r;
}

/// Model transfer: fit on all of `train_set`, test on all of `test_set`,
/// each with its own geometry.
inline ProtocolReport run_protocol(Predictor& pred, const Dataset& train_set, const Dataset& test_set,
                                   SplitSpec spec) {
  if (spec.kind != SplitKind::Transfer) fail(ErrorKind::Split, "two datasets need the transfer protocol");
  train_set.validate();
  test_set.validate();
  spec.train_dataset = train_set.id;
  spec.test_dataset = test_set.id;
  ProtocolReport r;
  r.predictor = pred.name();
  r.spec = spec;
  std::vector<std::size_t> all_tr(train_set.minutes.size()), all_te(test_set.minutes.size());
  std::iota(all_tr.begin(), all_tr.end(), std::size_t{0});
  std::iota(all_te.begin(), all_te.end(), std::size_t{0});
  const auto tr = detail::pointers(train_set, all_tr), te = detail::pointers(test_set, all_te);
  r.folds.push_back(detail::run_fold(pred, 0, tr, train_set.geom, te, test_set.geom));
  detail::finish(r);
  return r;
}

// ---- scenario runners ----------------------------------------------------

struct ScenarioRunOptions {
  std::optional<Roi> roi;  // defaults to a centred 256 px patch
  EstimatorOptions estimator{};
  bool stabilize = false;
  StabilizeOptions stabilization{};
};

struct ScenarioResult {
  std::string label;
  double truth = 0.0;
  double estimate = 0.0;
  double motion_px = 0.0;
  double aperture_multiplier = 1.0;
  double residual_motion_px = 0.0;  // RMS of applied shake after correction
  std::string error;
};

/// Simulates every manifest entry on `clean` and runs the gradient estimator,
/// optionally after stabilization. Failed entries carry the error text.
inline std::vector<ScenarioResult> run_scenarios(const sim::ScenarioManifest& manifest, const ImageFrame& clean,
                                                 const ScenarioRunOptions& opt = {}) {
  std::vector<ScenarioResult> out;
  for (const auto& entry : manifest.entries) {
    ScenarioResult r{entry.label, entry.ground_truth, 0.0, entry.config.motion_px, entry.aperture_multiplier, 0.0, {}};
    try {
      sim::SimResult s = sim::simulate(clean, entry);
      ImageSequence seq = std::move(s.sequence);
      std::vector<RigidShift> residual = s.shake;
      if (opt.stabilize) {
        AlignResult a = stabilize(seq, opt.stabilization);
        for (std::size_t i = 0; i < residual.size(); ++i) {
          residual[i].dx += a.shifts[i].dx;
          residual[i].dy += a.shifts[i].dy;
        }
        seq = std::move(a.sequence);
      }
      if (!residual.empty()) {
        // Relative to the mean, a common offset does not disturb the estimate.
        RigidShift m{};
        for (const auto& v : residual) {
          m.dx += v.dx / residual.size();
          m.dy += v.dy / residual.size();
        }
        for (auto& v : residual) v = {v.dx - m.dx, v.dy - m.dy};
        r.residual_motion_px = residual_motion(residual);
      }
      const Roi roi = opt.roi.value_or(Roi::centered(seq.width(), seq.height()));
      r.estimate = estimate_cn2(seq, roi, entry.config.geom, opt.estimator).value;
    } catch (const Error& e) {
      r.error = e.what();
    }
    out.push_back(std::move(r));
  }
  return out;
}

/// Metrics of successful scenario estimates against their truths.
inline MetricReport scenario_metrics(std::span<const ScenarioResult> results, MetricDomain domain) {
  std::vector<double> p, t;
  for (const auto& r : results)
    if (r.error.empty()) {
      p.push_back(r.estimate);
      t.push_back(r.truth);
    }
  return metrics(p, t, domain);
}

}  // namespace cn2
