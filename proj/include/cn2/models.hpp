#pragma once
// Learned Cn2 estimators built on the autodiff engine.
//
// PhysicsGradNet: Cn2 = M * Var(I) / Conv^n(I). The temporal variance is a
// fixed op; the convolution stack learns the gradient-energy denominator.
// BaselineCnn: a small fused-conv regressor on 3 stacked frames that outputs
// log10 Cn2 directly.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <memory>
#include <numbers>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cn2/autodiff.hpp"
#include "cn2/error.hpp"
#include "cn2/gradient_estimator.hpp"
#include "cn2/imaging.hpp"

namespace cn2 {

using FTensor = ad::Tensor<float>;

enum class LossDomain { Log10, Linear };

inline std::string to_string(LossDomain d) { return d == LossDomain::Log10 ? "log10" : "linear"; }

inline LossDomain parse_loss_domain(const std::string& s) {
  if (s == "log10") return LossDomain::Log10;
  if (s == "linear") return LossDomain::Linear;
  fail(ErrorKind::Config, "unknown loss domain '" + s + "' (expected log10 or linear)");
}

struct NamedParam {
  std::string name;
  FTensor tensor;
};

/// Stacks frames into an [n,H,W] tensor.
inline FTensor frames_tensor(std::span<const ImageFrame> frames) {
  if (frames.empty()) fail(ErrorKind::EmptyInput, "no frames");
  const int w = frames[0].width(), h = frames[0].height();
  std::vector<float> data;
  data.reserve(frames.size() * static_cast<std::size_t>(w) * h);
  for (const auto& f : frames) {
    if (f.width() != w || f.height() != h) fail(ErrorKind::Shape, "frames differ in size");
    data.insert(data.end(), f.pixels().begin(), f.pixels().end());
  }
  return FTensor::from({static_cast<int>(frames.size()), h, w}, std::move(data));
}

/// Common interface of the learned estimators.
class Cn2Model {
 public:
  virtual ~Cn2Model() = default;

  virtual std::string kind() const = 0;
  virtual int n_input_frames() const = 0;
  /// Differentiable log10 Cn2 prediction.
  virtual FTensor forward_log10(const ImageSequence& frames) const = 0;
  /// Cn2 in m^(-2/3); no graph is kept.
  virtual double predict(const ImageSequence& frames) const = 0;
  virtual std::vector<NamedParam> parameters() const = 0;
  virtual nlohmann::json config_json() const = 0;

  LossDomain loss_domain = LossDomain::Log10;

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.tensor.numel();
    return n;
  }
};

namespace detail {

inline FTensor param(ad::Shape shape, std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> n(0.0, stddev);
  std::vector<float> v(ad::numel_of(shape));
  for (auto& x : v) x = static_cast<float>(n(rng));
  return FTensor::from(std::move(shape), std::move(v), true);
}

inline FTensor zeros_param(ad::Shape shape) { return FTensor::zeros(std::move(shape), true); }

inline void require_frames(const ImageSequence& seq, int n, const std::string& who) {
  if (static_cast<int>(seq.size()) != n)
    fail(ErrorKind::Shape, who + " expects " + std::to_string(n) + " frames, got " + std::to_string(seq.size()));
}

}  // namespace detail

// ---- PhysicsGradNet ------------------------------------------------------

enum class Activation { Square, Relu };

inline std::string to_string(Activation a) { return a == Activation::Square ? "square" : "relu"; }

inline Activation parse_activation(const std::string& s) {
  if (s == "square") return Activation::Square;
  if (s == "relu") return Activation::Relu;
  fail(ErrorKind::Config, "unknown activation '" + s + "' (expected square or relu)");
}

enum class PhysicsInit { Gradient, Random };

struct PhysicsConfig {
  int n_input_frames = 3;
  int tail_depth = 2;                              // "blue" 5x5 layers, last one single-channel
  Activation front_activation = Activation::Square;
  Activation tail_activation = Activation::Relu;
  double softplus_beta = 1e6;                      // sharpness of the positive denominator
  double denominator_eps = 1e-8;
  int interior_margin = 6;                         // px dropped before spatial means
  PhysicsInit init = PhysicsInit::Gradient;
  double init_noise = 0.05;
  bool bias = false;                               // bias-free convs keep the output intensity-scale invariant
  std::uint64_t seed = 0;
  CameraGeometry geom{};

  void validate() const {
    if (n_input_frames < 2 || n_input_frames > 20) fail(ErrorKind::Config, "n_input_frames must be in [2, 20]");
    if (tail_depth < 1) fail(ErrorKind::Config, "tail_depth must be >= 1");
    if (!(softplus_beta > 0)) fail(ErrorKind::Config, "softplus_beta must be positive");
    if (!(denominator_eps > 0)) fail(ErrorKind::Config, "denominator_eps must be positive");
    if (interior_margin < 0) fail(ErrorKind::Config, "interior_margin must be >= 0");
    geom.validate();
  }
};

class PhysicsGradNet : public Cn2Model {
 public:
  static constexpr int kKernel = 5;
  static constexpr int kFrontChannels = 3;

  explicit PhysicsGradNet(PhysicsConfig cfg = {}) : cfg_(std::move(cfg)) {
    cfg_.validate();
    std::mt19937_64 rng(cfg_.seed);
    const int n = cfg_.n_input_frames, k = kKernel;
    front_w_ = detail::param({kFrontChannels, n, k, k}, rng, 1.0 / (k * std::sqrt(static_cast<double>(n))));
    front_b_ = detail::zeros_param({kFrontChannels});
    for (int i = 0; i < cfg_.tail_depth; ++i) {
      const int in = i == 0 ? kFrontChannels : 1;
      tail_w_.push_back(detail::zeros_param({1, in, k, k}));
      tail_b_.push_back(detail::zeros_param({1}));
    }
    if (cfg_.init == PhysicsInit::Gradient) {
      init_gradient(rng);
    } else {
      // Zero-mean front filters and positive tail weights keep the initial denominator positive.
      zero_mean_front();
      std::uniform_real_distribution<double> u(0.5, 1.5);
      for (auto& w : tail_w_)
        for (auto& x : w.mutable_data()) x = static_cast<float>(u(rng) / (k * k * w.dim(1)));
    }
  }

  std::string kind() const override { return "physics_gradnet"; }
  int n_input_frames() const override { return cfg_.n_input_frames; }
  const PhysicsConfig& config() const { return cfg_; }
  void set_geometry(const CameraGeometry& g) {
    g.validate();
    cfg_.geom = g;
  }

  /// Mean temporal variance over the interior (the fixed numerator).
  double numerator(const ImageSequence& seq) const {
    detail::require_frames(seq, cfg_.n_input_frames, "PhysicsGradNet");
    const Map2D var = temporal_variance_map(seq);
    const InteriorWindow win = interior(seq.width(), seq.height());
    return window_mean(var, win);
  }

  /// Learned gradient-energy denominator: softplus(mean of the tail output) + eps.
  FTensor denominator(const ImageSequence& seq) const {
    detail::require_frames(seq, cfg_.n_input_frames, "PhysicsGradNet");
    auto b = [&](const FTensor& t) { return cfg_.bias ? std::optional<FTensor>(t) : std::nullopt; };
    FTensor h = activate(ad::conv2d(frames_tensor(seq.frames()), front_w_, b(front_b_)), cfg_.front_activation);
    for (std::size_t i = 0; i < tail_w_.size(); ++i) {
      h = ad::conv2d(h, tail_w_[i], b(tail_b_[i]));
      if (i + 1 < tail_w_.size()) h = activate(h, cfg_.tail_activation);
    }
    if (cfg_.interior_margin > 0) h = ad::crop2d(h, cfg_.interior_margin);
    return ad::add_scalar(ad::softplus(ad::mean(h), cfg_.softplus_beta), cfg_.denominator_eps);
  }

  /// M * Var(I) / Conv^n(I) as a graph node, for an explicit geometry.
  FTensor forward_linear(const ImageSequence& seq, const CameraGeometry& geom) const {
    const double num = numerator(seq);
    const FTensor den = denominator(seq);
    return ad::scale(ad::div(FTensor::scalar(static_cast<float>(num)), den), geometry_scalar(geom));
  }

  FTensor forward_log10(const ImageSequence& seq) const override {
    return ad::log10(forward_linear(seq, cfg_.geom));
  }

  double predict(const ImageSequence& seq, const CameraGeometry& geom) const {
    return forward_linear(seq, geom).item();
  }
  double predict(const ImageSequence& seq) const override { return predict(seq, cfg_.geom); }

  std::vector<NamedParam> parameters() const override {
    std::vector<NamedParam> out{{"front.weight", front_w_}};
    if (cfg_.bias) out.push_back({"front.bias", front_b_});
    for (std::size_t i = 0; i < tail_w_.size(); ++i) {
      out.push_back({"tail" + std::to_string(i) + ".weight", tail_w_[i]});
      if (cfg_.bias) out.push_back({"tail" + std::to_string(i) + ".bias", tail_b_[i]});
    }
    return out;
  }

  nlohmann::json config_json() const override {
    return {{"n_input_frames", cfg_.n_input_frames},
            {"tail_depth", cfg_.tail_depth},
            {"front_activation", to_string(cfg_.front_activation)},
            {"tail_activation", to_string(cfg_.tail_activation)},
            {"softplus_beta", cfg_.softplus_beta},
            {"denominator_eps", cfg_.denominator_eps},
            {"interior_margin", cfg_.interior_margin},
            {"bias", cfg_.bias},
            {"geometry",
             {{"pfov", cfg_.geom.pfov},
              {"aperture_d", cfg_.geom.aperture_d},
              {"path_length_l", cfg_.geom.path_length_l},
              {"turbulence_p", cfg_.geom.turbulence_p}}}};
  }

  static PhysicsConfig config_from_json(const nlohmann::json& j) {
    PhysicsConfig c;
    c.n_input_frames = j.at("n_input_frames").get<int>();
    c.tail_depth = j.at("tail_depth").get<int>();
    c.front_activation = parse_activation(j.at("front_activation").get<std::string>());
    c.tail_activation = parse_activation(j.at("tail_activation").get<std::string>());
    c.softplus_beta = j.at("softplus_beta").get<double>();
    c.denominator_eps = j.at("denominator_eps").get<double>();
    c.interior_margin = j.at("interior_margin").get<int>();
    c.bias = j.at("bias").get<bool>();
    const auto& g = j.at("geometry");
    c.geom = {g.at("pfov").get<double>(), g.at("aperture_d").get<double>(), g.at("path_length_l").get<double>(),
              g.at("turbulence_p").get<double>()};
    return c;
  }

  /// Weights that reproduce the classical central-difference estimator: the
  /// front takes x/y central differences of the frame average, squared, and
  /// the tail sums them.
  void set_classical_weights() {
    if (cfg_.front_activation != Activation::Square)
      fail(ErrorKind::Config, "classical weights need the square front activation");
    auto& fw = front_w_.mutable_data();
    std::fill(fw.begin(), fw.end(), 0.0f);
    std::fill(front_b_.mutable_data().begin(), front_b_.mutable_data().end(), 0.0f);
    const int n = cfg_.n_input_frames, k = kKernel, c = k / 2;
    auto at = [&](int o, int i, int y, int x) -> float& { return fw[((static_cast<std::size_t>(o) * n + i) * k + y) * k + x]; };
    for (int i = 0; i < n; ++i) {
      const float a = 0.5f / static_cast<float>(n);
      at(0, i, c, c - 1) = -a;
      at(0, i, c, c + 1) = a;
      at(1, i, c - 1, c) = -a;
      at(1, i, c + 1, c) = a;
    }
    for (std::size_t l = 0; l < tail_w_.size(); ++l) {
      auto& w = tail_w_[l].mutable_data();
      std::fill(w.begin(), w.end(), 0.0f);
      tail_b_[l].mutable_data()[0] = 0.0f;
      const int in = tail_w_[l].dim(1);
      for (int i = 0; i < std::min(in, 2); ++i) w[(static_cast<std::size_t>(i) * k + c) * k + c] = 1.0f;
    }
  }

 private:
  static FTensor activate(const FTensor& x, Activation a) {
    return a == Activation::Square ? ad::square(x) : ad::relu(x);
  }

  InteriorWindow interior(int w, int h) const {
    const int m = cfg_.interior_margin;
    if (2 * m >= w || 2 * m >= h) fail(ErrorKind::Shape, "frames too small for the interior margin");
    return InteriorWindow{m, w - m, m, h - m};
  }

  void zero_mean_front() {
    auto& fw = front_w_.mutable_data();
    const std::size_t per = static_cast<std::size_t>(cfg_.n_input_frames) * kKernel * kKernel;
    for (int o = 0; o < kFrontChannels; ++o) {
      const auto b = fw.begin() + o * per;
      const double m = std::accumulate(b, b + per, 0.0) / static_cast<double>(per);
      std::for_each(b, b + per, [m](float& v) { v = static_cast<float>(v - m); });
    }
  }

  /// Classical weights plus zero-mean noise on every filter.
  void init_gradient(std::mt19937_64& rng) {
    set_classical_weights_unchecked();
    std::normal_distribution<double> n01(0.0, 1.0);
    auto& fw = front_w_.mutable_data();
    const double amp = cfg_.init_noise * 0.5 / cfg_.n_input_frames;
    for (std::size_t i = 0; i < fw.size(); ++i) fw[i] += static_cast<float>(amp * n01(rng));
    zero_mean_front();
    for (auto& w : tail_w_)
      for (auto& x : w.mutable_data()) x += static_cast<float>(cfg_.init_noise * std::abs(n01(rng)) / (kKernel * kKernel));
  }

  void set_classical_weights_unchecked() {
    const Activation keep = cfg_.front_activation;
    cfg_.front_activation = Activation::Square;
    set_classical_weights();
    cfg_.front_activation = keep;
  }

  PhysicsConfig cfg_;
  FTensor front_w_, front_b_;
  std::vector<FTensor> tail_w_, tail_b_;
};

// ---- Baseline CNN --------------------------------------------------------

struct BaselineConfig {
  int n_input_frames = 3;
  int input_size = 256;
  std::vector<int> widths{8, 16, 24, 30};
  int expansion = 4;
  int stem_width = 8;
  int stem_pools = 2;
  double output_bias = -13.5;  // initial log10 Cn2
  std::uint64_t seed = 0;

  void validate() const {
    if (n_input_frames < 1) fail(ErrorKind::Config, "n_input_frames must be >= 1");
    if (widths.empty()) fail(ErrorKind::Config, "baseline needs at least one stage");
    if (expansion < 1 || stem_width < 1 || stem_pools < 0) fail(ErrorKind::Config, "invalid baseline widths");
    int s = input_size;
    for (int i = 0; i < stem_pools + static_cast<int>(widths.size()) - 1; ++i) s /= 2;
    if (s < 1) fail(ErrorKind::Config, "input_size too small for the pooling schedule");
  }
};

/// conv3x3 (expand) -> ReLU -> squeeze-excitation gate -> conv1x1 (project) + skip.
struct FusedBlock {
  FTensor expand_w, expand_b, se1_w, se1_b, se2_w, se2_b, project_w, project_b;

  FusedBlock() = default;
  FusedBlock(int width, int expansion, std::mt19937_64& rng) {
    const int e = width * expansion, r = std::max(1, e / 4);
    expand_w = detail::param({e, width, 3, 3}, rng, std::sqrt(2.0 / (9.0 * width)));
    expand_b = detail::zeros_param({e});
    se1_w = detail::param({r, e}, rng, std::sqrt(2.0 / e));
    se1_b = detail::zeros_param({r});
    se2_w = detail::param({e, r}, rng, std::sqrt(1.0 / r));
    se2_b = detail::zeros_param({e});
    project_w = detail::param({width, e, 1, 1}, rng, std::sqrt(1.0 / e));
    project_b = detail::zeros_param({width});
  }

  /// Channel attention: features scaled by sigmoid(W2 relu(W1 mean(features))).
  FTensor gate(const FTensor& features) const {
    const int c = features.dim(0);
    const FTensor squeezed = ad::mean_axis(ad::reshape(features, {c, features.dim(1) * features.dim(2)}), 1);
    const FTensor g = ad::sigmoid(ad::linear(ad::relu(ad::linear(squeezed, se1_w, se1_b)), se2_w, se2_b));
    return ad::mul(features, ad::reshape(g, {c, 1, 1}));
  }

  FTensor operator()(const FTensor& x) const {
    const FTensor h = gate(ad::relu(ad::conv2d(x, expand_w, expand_b)));
    return ad::add(x, ad::conv2d(h, project_w, project_b));
  }

  void collect(const std::string& prefix, std::vector<NamedParam>& out) const {
    out.push_back({prefix + ".expand.weight", expand_w});
    out.push_back({prefix + ".expand.bias", expand_b});
    out.push_back({prefix + ".se1.weight", se1_w});
    out.push_back({prefix + ".se1.bias", se1_b});
    out.push_back({prefix + ".se2.weight", se2_w});
    out.push_back({prefix + ".se2.bias", se2_b});
    out.push_back({prefix + ".project.weight", project_w});
    out.push_back({prefix + ".project.bias", project_b});
  }
};

class BaselineCnn : public Cn2Model {
 public:
  explicit BaselineCnn(BaselineConfig cfg = {}) : cfg_(std::move(cfg)) {
    cfg_.validate();
    std::mt19937_64 rng(cfg_.seed);
    const int n = cfg_.n_input_frames;
    stem_w_ = detail::param({cfg_.stem_width, n, 3, 3}, rng, std::sqrt(2.0 / (9.0 * n)));
    stem_b_ = detail::zeros_param({cfg_.stem_width});
    int prev = cfg_.stem_width;
    for (int w : cfg_.widths) {
      Stage s;
      if (w != prev) {
        s.proj_w = detail::param({w, prev, 1, 1}, rng, std::sqrt(1.0 / prev));
        s.proj_b = detail::zeros_param({w});
      }
      s.block = FusedBlock(w, cfg_.expansion, rng);
      stages_.push_back(std::move(s));
      prev = w;
    }
    head_w_ = detail::param({1, prev}, rng, 0.1 / std::sqrt(prev));
    head_b_ = FTensor::from({1}, {static_cast<float>(cfg_.output_bias)}, true);
  }

  std::string kind() const override { return "baseline_cnn"; }
  int n_input_frames() const override { return cfg_.n_input_frames; }
  const BaselineConfig& config() const { return cfg_; }
  std::vector<FusedBlock*> blocks() {
    std::vector<FusedBlock*> out;
    for (auto& s : stages_) out.push_back(&s.block);
    return out;
  }

  FTensor forward_log10(const ImageSequence& seq) const override {
    detail::require_frames(seq, cfg_.n_input_frames, "BaselineCnn");
    if (seq.width() != cfg_.input_size || seq.height() != cfg_.input_size)
      fail(ErrorKind::Shape, "BaselineCnn expects " + std::to_string(cfg_.input_size) + "x" +
                                 std::to_string(cfg_.input_size) + " frames, got " + std::to_string(seq.width()) + "x" +
                                 std::to_string(seq.height()));
    FTensor h = ad::relu(ad::conv2d(frames_tensor(seq.frames()), stem_w_, stem_b_));
    for (int i = 0; i < cfg_.stem_pools; ++i) h = ad::avg_pool2(h);
    for (std::size_t i = 0; i < stages_.size(); ++i) {
      const auto& s = stages_[i];
      if (s.proj_w.defined()) h = ad::conv2d(h, s.proj_w, s.proj_b);
      h = s.block(h);
      if (i + 1 < stages_.size()) h = ad::avg_pool2(h);
    }
    const int c = h.dim(0);
    const FTensor pooled = ad::mean_axis(ad::reshape(h, {c, h.dim(1) * h.dim(2)}), 1);
    return ad::linear(pooled, head_w_, head_b_);
  }

  double predict(const ImageSequence& seq) const override { return std::pow(10.0, forward_log10(seq).item()); }

  std::vector<NamedParam> parameters() const override {
    std::vector<NamedParam> out{{"stem.weight", stem_w_}, {"stem.bias", stem_b_}};
    for (std::size_t i = 0; i < stages_.size(); ++i) {
      const std::string p = "stage" + std::to_string(i);
      if (stages_[i].proj_w.defined()) {
        out.push_back({p + ".proj.weight", stages_[i].proj_w});
        out.push_back({p + ".proj.bias", stages_[i].proj_b});
      }
      stages_[i].block.collect(p + ".block", out);
    }
    out.push_back({"head.weight", head_w_});
    out.push_back({"head.bias", head_b_});
    return out;
  }

  nlohmann::json config_json() const override {
    return {{"n_input_frames", cfg_.n_input_frames}, {"input_size", cfg_.input_size}, {"widths", cfg_.widths},
            {"expansion", cfg_.expansion},           {"stem_width", cfg_.stem_width}, {"stem_pools", cfg_.stem_pools}};
  }

  static BaselineConfig config_from_json(const nlohmann::json& j) {
    BaselineConfig c;
    c.n_input_frames = j.at("n_input_frames").get<int>();
    c.input_size = j.at("input_size").get<int>();
    c.widths = j.at("widths").get<std::vector<int>>();
    c.expansion = j.at("expansion").get<int>();
    c.stem_width = j.at("stem_width").get<int>();
    c.stem_pools = j.at("stem_pools").get<int>();
    return c;
  }

 private:
  struct Stage {
    FTensor proj_w, proj_b;
    FusedBlock block;
  };

  BaselineConfig cfg_;
  FTensor stem_w_, stem_b_;
  std::vector<Stage> stages_;
  FTensor head_w_, head_b_;
};

// ---- training ------------------------------------------------------------

struct Sample {
  ImageSequence frames;
  double truth = 0.0;  // m^(-2/3)
};

/// Consecutive non-overlapping groups of `n` frames, each cropped to `roi`.
inline std::vector<Sample> make_samples(const ImageSequence& seq, double truth, int n, const Roi& roi) {
  if (n < 1) fail(ErrorKind::Config, "group size must be >= 1");
  require_roi(roi, seq.width(), seq.height());
  std::vector<Sample> out;
  for (std::size_t s = 0; s + static_cast<std::size_t>(n) <= seq.size(); s += static_cast<std::size_t>(n)) {
    std::vector<ImageFrame> g;
    for (int i = 0; i < n; ++i) g.push_back(crop(seq[s + i], roi));
    out.push_back({ImageSequence(std::move(g), seq.source_id()), truth});
  }
  return out;
}

enum class OptimizerKind { Adam, Sgd };

inline OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "adam") return OptimizerKind::Adam;
  if (s == "sgd") return OptimizerKind::Sgd;
  fail(ErrorKind::Config, "unknown optimizer '" + s + "' (expected adam or sgd)");
}

struct TrainConfig {
  double lr = 1e-3;
  int epochs = 30;
  int batch_size = 3;
  std::uint64_t seed = 0;
  LossDomain loss_domain = LossDomain::Log10;
  OptimizerKind optimizer = OptimizerKind::Adam;
  double momentum = 0.9;  // sgd only

  void validate() const {
    if (epochs < 1) fail(ErrorKind::Config, "epochs must be >= 1");
    if (batch_size < 1) fail(ErrorKind::Config, "batch_size must be >= 1");
    if (!(lr >= 0) || !std::isfinite(lr)) fail(ErrorKind::Config, "learning rate must be finite and >= 0");
  }
};

struct TrainResult {
  std::vector<double> loss_history;      // mean loss per epoch
  std::vector<double> smoothed_history;  // running minimum of loss_history
  bool aborted = false;
  std::string abort_reason;
};

/// Linear-domain losses are measured in units of this value to stay well inside float range.
inline constexpr double kLinearLossUnit = 1e-14;

/// Squared error of one sample in the configured domain, as a graph node.
inline FTensor sample_loss(const Cn2Model& model, const Sample& s, LossDomain domain) {
  const FTensor pred = model.forward_log10(s.frames);
  if (domain == LossDomain::Log10) return ad::square(ad::add_scalar(pred, -std::log10(s.truth)));
  const double shift = -std::log10(kLinearLossUnit);
  const FTensor lin = ad::exp(ad::scale(ad::add_scalar(pred, shift), std::numbers::ln10));
  return ad::square(ad::add_scalar(lin, -s.truth / kLinearLossUnit));
}

/// Minibatch training of MSE in the configured domain. With lr = 0 the
/// parameters are left untouched and only losses are recorded. A non-finite
/// loss or guarded op restores the last good parameters and stops.
inline TrainResult train(Cn2Model& model, std::span<const Sample> data, const TrainConfig& cfg) {
  cfg.validate();
  if (data.empty()) fail(ErrorKind::EmptyInput, "training dataset is empty");
  for (const auto& s : data)
    if (!(s.truth > 0) || !std::isfinite(s.truth)) fail(ErrorKind::Validation, "ground truth must be finite and > 0");

  auto named = model.parameters();
  std::vector<FTensor> params;
  for (auto& p : named) params.push_back(p.tensor);
  std::unique_ptr<ad::Adam<float>> adam;
  std::unique_ptr<ad::Sgd<float>> sgd;
  if (cfg.lr > 0) {
    if (cfg.optimizer == OptimizerKind::Adam)
      adam = std::make_unique<ad::Adam<float>>(params, cfg.lr);
    else
      sgd = std::make_unique<ad::Sgd<float>>(params, cfg.lr, cfg.momentum);
  }
  model.loss_domain = cfg.loss_domain;

  auto snapshot = [&] {
    std::vector<std::vector<float>> s;
    for (auto& p : params) s.push_back(p.data());
    return s;
  };
  auto checkpoint = snapshot();

  TrainResult result;
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    try {
      for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(cfg.batch_size)) {
        const std::size_t e = std::min(order.size(), b + static_cast<std::size_t>(cfg.batch_size));
        for (auto& p : params) p.zero_grad();
        for (std::size_t i = b; i < e; ++i) {
          const FTensor loss = sample_loss(model, data[order[i]], cfg.loss_domain);
          const double l = loss.item();
          if (!std::isfinite(l)) fail(ErrorKind::NumericalGuard, "non-finite training loss");
          epoch_loss += l;
          ad::scale(loss, 1.0 / static_cast<double>(e - b)).backward();
        }
        for (auto& p : params)
          for (float g : p.grad())
            if (!std::isfinite(g)) fail(ErrorKind::NumericalGuard, "non-finite gradient");
        if (adam) adam->step();
        if (sgd) sgd->step();
        for (auto& p : params)
          for (float v : p.data())
            if (!std::isfinite(v)) fail(ErrorKind::NumericalGuard, "non-finite parameter after update");
        checkpoint = snapshot();
      }
    } catch (const Error& err) {
      if (err.kind() != ErrorKind::NumericalGuard) throw;
      for (std::size_t i = 0; i < params.size(); ++i) params[i].mutable_data() = checkpoint[i];
      result.aborted = true;
      result.abort_reason = "epoch " + std::to_string(epoch) + ": " + err.what();
      break;
    }
    const double mean_loss = epoch_loss / static_cast<double>(data.size());
    result.loss_history.push_back(mean_loss);
    result.smoothed_history.push_back(
        result.smoothed_history.empty() ? mean_loss : std::min(result.smoothed_history.back(), mean_loss));
  }
  for (auto& p : params) p.zero_grad();
  return result;
}

/// One prediction per group, then the per-minute median. Failing groups are gaps.
inline std::vector<SeriesEntry> predict_series(const Cn2Model& model, std::span<const ImageSequence> groups) {
  std::vector<SeriesEntry> out(groups.size());
  for (std::size_t i = 0; i < groups.size(); ++i) {
    try {
      Cn2Estimate e;
      e.value = model.predict(groups[i]);
      e.timestamp_us = groups[i].middle_timestamp_us();
      e.n_frames = groups[i].size();
      if (!std::isfinite(e.value)) fail(ErrorKind::NumericalGuard, "non-finite prediction");
      out[i].estimate = e;
    } catch (const Error& err) {
      out[i].error = err.what();
    }
  }
  return out;
}

inline std::vector<MinuteValue> predict_minutes(const Cn2Model& model, std::span<const ImageSequence> groups) {
  const auto series = predict_series(model, groups);
  return minute_median(series);
}

// ---- weight files --------------------------------------------------------
//
// One line of JSON (format_version, model_kind, n_input_frames, loss_domain,
// config, layers[{name, shape}]) terminated by '\n', followed by each layer's
// values as little-endian float32 in declaration order.

inline constexpr int kWeightFormatVersion = 1;

inline void save_weights(const Cn2Model& model, const std::string& path) {
  nlohmann::json header;
  header["format_version"] = kWeightFormatVersion;
  header["model_kind"] = model.kind();
  header["n_input_frames"] = model.n_input_frames();
  header["loss_domain"] = to_string(model.loss_domain);
  header["config"] = model.config_json();
  header["layers"] = nlohmann::json::array();
  for (const auto& p : model.parameters()) header["layers"].push_back({{"name", p.name}, {"shape", p.tensor.shape()}});

  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::Io, "cannot write weights to " + path);
  out << header.dump() << '\n';
  for (const auto& p : model.parameters())
    for (float v : p.tensor.data()) {
      std::uint32_t bits = std::bit_cast<std::uint32_t>(v);
      unsigned char b[4] = {static_cast<unsigned char>(bits), static_cast<unsigned char>(bits >> 8),
                            static_cast<unsigned char>(bits >> 16), static_cast<unsigned char>(bits >> 24)};
      out.write(reinterpret_cast<const char*>(b), 4);
    }
  if (!out) fail(ErrorKind::Io, "failed writing weights to " + path);
}

struct WeightFile {
  nlohmann::json header;
  std::vector<std::vector<float>> blobs;
};

inline WeightFile read_weight_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Load, "cannot open weight file " + path);
  std::string line;
  if (!std::getline(in, line)) fail(ErrorKind::Load, "weight file has no header: " + path);
  WeightFile wf;
  try {
    wf.header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Load, std::string("malformed weight header: ") + e.what());
  }
  if (wf.header.value("format_version", -1) != kWeightFormatVersion)
    fail(ErrorKind::Load, "unsupported weight format version " + wf.header.value("format_version", nlohmann::json()).dump() +
                              ", expected " + std::to_string(kWeightFormatVersion));
  for (const auto& layer : wf.header.at("layers")) {
    const auto shape = layer.at("shape").get<std::vector<int>>();
    std::vector<float> blob(ad::numel_of(shape));
    for (auto& v : blob) {
      unsigned char b[4];
      if (!in.read(reinterpret_cast<char*>(b), 4))
        fail(ErrorKind::Load, "weight file truncated in layer " + layer.at("name").get<std::string>());
      const std::uint32_t bits = b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
      v = std::bit_cast<float>(bits);
      if (!std::isfinite(v)) fail(ErrorKind::Load, "non-finite weight in layer " + layer.at("name").get<std::string>());
    }
    wf.blobs.push_back(std::move(blob));
  }
  if (in.peek() != std::char_traits<char>::eof()) fail(ErrorKind::Load, "trailing bytes after the last layer");
  return wf;
}

/// Loads weights into an existing model, checking kind, frame count and every shape.
inline void load_weights_into(Cn2Model& model, const std::string& path) {
  const WeightFile wf = read_weight_file(path);
  const auto kind = wf.header.at("model_kind").get<std::string>();
  if (kind != model.kind()) fail(ErrorKind::Load, "weight file holds " + kind + ", expected " + model.kind());
  const int n = wf.header.at("n_input_frames").get<int>();
  if (n != model.n_input_frames())
    fail(ErrorKind::Load, "n_input_frames mismatch: expected " + std::to_string(model.n_input_frames()) + ", found " +
                              std::to_string(n));
  auto params = model.parameters();
  const auto& layers = wf.header.at("layers");
  if (layers.size() != params.size())
    fail(ErrorKind::Load, "expected " + std::to_string(params.size()) + " layers, found " + std::to_string(layers.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto name = layers[i].at("name").get<std::string>();
    const auto shape = layers[i].at("shape").get<ad::Shape>();
    if (name != params[i].name || shape != params[i].tensor.shape())
      fail(ErrorKind::Load, "layer " + std::to_string(i) + ": expected " + params[i].name + " " +
                                ad::shape_str(params[i].tensor.shape()) + ", found " + name + " " + ad::shape_str(shape));
  }
  for (std::size_t i = 0; i < params.size(); ++i) params[i].tensor.mutable_data() = wf.blobs[i];
  model.loss_domain = parse_loss_domain(wf.header.at("loss_domain").get<std::string>());
}

/// Builds the model described by the header, then loads its weights.
inline std::unique_ptr<Cn2Model> load_model(const std::string& path) {
  const WeightFile wf = read_weight_file(path);
  const auto kind = wf.header.at("model_kind").get<std::string>();
  std::unique_ptr<Cn2Model> model;
  try {
    if (kind == "physics_gradnet")
      model = std::make_unique<PhysicsGradNet>(PhysicsGradNet::config_from_json(wf.header.at("config")));
    else if (kind == "baseline_cnn")
      model = std::make_unique<BaselineCnn>(BaselineCnn::config_from_json(wf.header.at("config")));
    else
      fail(ErrorKind::Load, "unknown model kind '" + kind + "'");
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Load, std::string("malformed model config: ") + e.what());
  }
  load_weights_into(*model, path);
  return model;
}

}  // namespace cn2
