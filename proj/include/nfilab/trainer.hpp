#pragma once

// Training loop with the emulated-precision loss path, mitigations,
// per-interval instrumentation and online spike detection.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "nfilab/adam.hpp"
#include "nfilab/dataset.hpp"
#include "nfilab/errors.hpp"
#include "nfilab/model.hpp"
#include "nfilab/nc_geometry.hpp"
#include "nfilab/precision.hpp"

namespace nfilab {

struct MitigationConfig {
  bool zero_sum_projection = false;
  PrecisionMode loss_precision = PrecisionMode::fp32();
  std::optional<double> eps_adam_override = {};
  bool batch_center_features = false;
  bool feature_layer_norm = false;
  double label_smoothing = 0.0;
  bool switch_to_gd_at_zero_loss = false;
  double gd_lr = 1e5;
  std::optional<double> logit_clamp_margin = {};
  bool classifier_bias = false;

  void validate() const {
    try {
      nfilab::validate(loss_precision);
    } catch (const InvalidMode& e) {
      throw ConfigError("mitigations.loss_precision", e.what());
    }
    if (batch_center_features && feature_layer_norm)
      throw ConfigError("mitigations.feature_layer_norm",
                        "batch_center_features and feature_layer_norm are mutually exclusive");
    if (!(label_smoothing >= 0.0 && label_smoothing < 1.0))
      throw ConfigError("mitigations.label_smoothing", "must lie in [0, 1)");
    if (eps_adam_override && !(*eps_adam_override > 0.0))
      throw ConfigError("mitigations.eps_adam_override", "must be positive");
    if (switch_to_gd_at_zero_loss && !(gd_lr > 0.0))
      throw ConfigError("mitigations.gd_lr", "must be positive");
    if (logit_clamp_margin && !(*logit_clamp_margin > 0.0))
      throw ConfigError("mitigations.logit_clamp_margin", "must be positive");
  }

  LossOptions loss_options() const {
    LossOptions o;
    o.mode = loss_precision;
    o.label_smoothing = label_smoothing;
    o.zero_sum_projection = zero_sum_projection;
    o.feature_norm = batch_center_features ? FeatureNorm::BatchCenter
                     : feature_layer_norm  ? FeatureNorm::LayerNorm
                                           : FeatureNorm::None;
    o.logit_clamp_margin = logit_clamp_margin;
    return o;
  }
};

enum class OptimizerKind { Adam, GD };

struct TrainConfig {
  long steps = 1000;
  long log_every = 100;
  OptimizerKind optimizer = OptimizerKind::Adam;
  AdamState adam;          // lr, betas, eps, bias_correction
  double gd_lr = 1e-3;     // step size when optimizer == GD
  int batch_size = 0;      // 0: full batch
  std::uint64_t seed = 0;  // mini-batch order
  // Called with the pre-update model at steps that are multiples of
  // probe_every.
  long probe_every = 0;
  std::function<void(long, const Model&)> probe = {};
};

/// Classifier-layer update magnitudes for one step. The histograms bin
/// log10|delta| separately for positive and negative entries.
struct UpdateStats {
  static constexpr double kHistLo = -14.0;
  static constexpr double kHistWidth = 0.5;
  static constexpr int kHistBins = 28;

  double max = 0.0;
  double mean = 0.0;
  double median = 0.0;
  double bias_mean = std::numeric_limits<double>::quiet_NaN();
  std::vector<int> hist_pos = std::vector<int>(kHistBins, 0);
  std::vector<int> hist_neg = std::vector<int>(kHistBins, 0);

  static int bin(double magnitude) {
    if (!(magnitude > 0.0)) return 0;
    const int b = static_cast<int>(std::floor((std::log10(magnitude) - kHistLo) / kHistWidth));
    return std::clamp(b, 0, kHistBins - 1);
  }
};

inline UpdateStats update_stats(const Eigen::Ref<const Eigen::VectorXd>& delta) {
  UpdateStats s;
  if (delta.size() == 0) return s;
  std::vector<double> mags(static_cast<std::size_t>(delta.size()));
  for (Eigen::Index i = 0; i < delta.size(); ++i) {
    const double x = delta(i);
    mags[i] = std::abs(x);
    if (x > 0.0) ++s.hist_pos[UpdateStats::bin(x)];
    else if (x < 0.0) ++s.hist_neg[UpdateStats::bin(-x)];
  }
  s.max = *std::max_element(mags.begin(), mags.end());
  s.mean = std::accumulate(mags.begin(), mags.end(), 0.0) / static_cast<double>(mags.size());
  auto mid = mags.begin() + static_cast<std::ptrdiff_t>(mags.size() / 2);
  std::nth_element(mags.begin(), mid, mags.end());
  s.median = *mid;
  return s;
}

struct TraceRecord {
  long step = 0;
  double train_loss = 0.0;
  double sc_fraction = 0.0;
  double w_g_norm = 0.0;
  double mu_g_norm = 0.0;
  double cosine = 0.0;        // cos(W_G, mu_G)
  double residual_eps = 0.0;  // batch-mean residual mass
  double min_margin = 0.0;
  UpdateStats update;         // update applied at this step
  double test_accuracy = std::numeric_limits<double>::quiet_NaN();
};

/// A return of the loss above 0.5 ln K within 50 steps of the end of a
/// stretch of at least 100 exactly-zero losses.
struct SpikeEvent {
  long zero_run_start = 0;
  long zero_run_length = 0;
  long reemerge_step = 0;  // first nonzero loss after the zero stretch
  long spike_step = 0;     // first step above the threshold
  double spike_loss = 0.0;
  double pre_update_mean = 0.0;  // classifier mean|delta| over the 100 steps before reemergence
  double peak_update_median = 0.0;  // largest classifier median|delta| in [reemerge, spike]
  double update_ratio() const {
    return pre_update_mean > 0.0 ? peak_update_median / pre_update_mean
                                 : std::numeric_limits<double>::infinity();
  }
};

struct TrainResult {
  std::vector<TraceRecord> records;
  std::vector<float> step_loss;  // loss at every step, before that step's update
  std::vector<SpikeEvent> spikes;
  long steps_run = 0;
  long first_zero_loss_step = -1;
  long gd_switch_step = -1;
  bool diverged = false;
  std::string divergence;

  void throw_if_diverged() const {
    if (diverged) throw DivergedNonFinite(divergence);
  }
};

inline constexpr long kSpikeZeroRun = 100;
inline constexpr long kSpikeWindow = 50;

/// Online detector for the spike definition above.
class SpikeDetector {
 public:
  explicit SpikeDetector(int num_classes)
      : threshold_(0.5 * std::log(static_cast<double>(num_classes))) {}

  double threshold() const { return threshold_; }

  /// Feeds the loss at `step` and the classifier update magnitudes of that
  /// step's update. Returns the spike when this step completes one.
  std::optional<SpikeEvent> push(long step, double loss, double update_mean, double update_median) {
    history_.push_back({update_mean, update_median});
    if (history_.size() > kHistory) history_.pop_front();

    std::optional<SpikeEvent> done;
    if (loss == 0.0) {
      if (zero_run_ == 0) zero_start_ = step;
      ++zero_run_;
    } else {
      if (zero_run_ >= kSpikeZeroRun && !watch_) {
        watch_ = SpikeEvent{};
        watch_->zero_run_start = zero_start_;
        watch_->zero_run_length = zero_run_;
        watch_->reemerge_step = step;
        double pre = 0.0;
        const std::size_t n = history_.size() - 1;  // entries before this step
        const std::size_t take = std::min<std::size_t>(n, kSpikeZeroRun);
        for (std::size_t i = n - take; i < n; ++i) pre += history_[i].first;
        watch_->pre_update_mean = take ? pre / static_cast<double>(take) : 0.0;
      }
      zero_run_ = 0;
    }
    if (watch_) {
      watch_->peak_update_median = std::max(watch_->peak_update_median, update_median);
      if (loss > threshold_) {
        watch_->spike_step = step;
        watch_->spike_loss = loss;
        done = watch_;
        watch_.reset();
      } else if (step - watch_->reemerge_step >= kSpikeWindow - 1) {
        watch_.reset();
      }
    }
    return done;
  }

  bool watching() const { return watch_.has_value(); }

 private:
  static constexpr std::size_t kHistory = 2 * kSpikeZeroRun;
  double threshold_;
  long zero_run_ = 0;
  long zero_start_ = 0;
  std::optional<SpikeEvent> watch_;
  std::deque<std::pair<double, double>> history_;
};

/// Offline spike scan over a per-step loss series (no update statistics).
inline std::vector<SpikeEvent> detect_spikes(const std::vector<float>& losses, int num_classes) {
  SpikeDetector det(num_classes);
  std::vector<SpikeEvent> out;
  for (std::size_t t = 0; t < losses.size(); ++t)
    if (auto s = det.push(static_cast<long>(t), losses[t], 0.0, 0.0)) out.push_back(*s);
  return out;
}

namespace detail {

inline void fill_geometry(TraceRecord& rec, const Model& model, const BatchEval& ev) {
  const RowMatrix W = model.classifier();
  const Eigen::VectorXd w_g = W.colwise().mean().transpose();
  const Eigen::VectorXd mu_g = ev.samples ? Eigen::VectorXd(ev.features.colwise().mean().transpose())
                                          : Eigen::VectorXd::Zero(W.cols());
  rec.w_g_norm = w_g.norm();
  rec.mu_g_norm = mu_g.norm();
  const double denom = rec.w_g_norm * rec.mu_g_norm;
  rec.cosine = denom > 0.0 ? w_g.dot(mu_g) / denom : 0.0;
  rec.train_loss = ev.loss;
  rec.sc_fraction = ev.sc_fraction();
  rec.residual_eps = ev.residual_mean;
  rec.min_margin = ev.min_margin;
}

inline double test_accuracy(const Model& model, const Dataset& data, LossOptions opt,
                            const std::optional<Eigen::RowVectorXd>& center) {
  if (data.test_idx.empty()) return std::numeric_limits<double>::quiet_NaN();
  if (opt.feature_norm == FeatureNorm::BatchCenter) opt.frozen_center = center;
  return evaluate(model, data, data.test_idx, opt).accuracy;
}

}  // namespace detail

/// Every TraceRecord field from the current parameters over the training
/// samples. Update statistics are left empty.
inline TraceRecord instrument(const Model& model, const Dataset& data, const LossOptions& opt) {
  const BatchEval ev = evaluate(model, data, data.train_idx, opt);
  TraceRecord rec;
  detail::fill_geometry(rec, model, ev);
  rec.test_accuracy = detail::test_accuracy(model, data, opt, std::nullopt);
  return rec;
}

inline TraceRecord instrument(const Model& model, const Dataset& data, const PrecisionMode& mode) {
  LossOptions opt;
  opt.mode = mode;
  return instrument(model, data, opt);
}

inline TrainResult train(const Dataset& data, Model& model, const TrainConfig& cfg,
                         const MitigationConfig& mit) {
  mit.validate();
  if (cfg.steps < 0) throw ConfigError("steps", "must be >= 0");
  if (cfg.log_every < 1) throw ConfigError("log_every", "must be >= 1");
  if (cfg.batch_size < 0) throw ConfigError("batch_size", "must be >= 0");
  if (model.config().classifier_bias != mit.classifier_bias)
    throw ConfigError("mitigations.classifier_bias", "model was built with a different bias setting");
  if (data.num_classes != model.num_classes())
    throw ConfigError("model.num_classes", "does not match the dataset");
  if (model.kind() == ModelKind::UFM && data.size() != model.config().samples)
    throw ConfigError("model.samples", "UFM needs one feature row per sample");
  if (data.train_idx.empty()) throw ConfigError("dataset", "no training samples");

  const LossOptions opt = mit.loss_options();
  AdamState adam = cfg.adam;
  if (mit.eps_adam_override) adam.eps = *mit.eps_adam_override;
  adam.reset(model.theta().size());

  const int cls = model.classifier_block();
  const ParamBlock& cls_block = model.blocks()[cls];
  const int bias = model.bias_block();

  TrainResult result;
  result.step_loss.reserve(static_cast<std::size_t>(cfg.steps));
  SpikeDetector detector(model.num_classes());

  std::vector<int> order = data.train_idx;
  std::mt19937_64 rng(cfg.seed);
  const bool full_batch =
      cfg.batch_size == 0 || cfg.batch_size >= static_cast<int>(data.train_idx.size());
  std::size_t cursor = order.size();

  bool use_gd = cfg.optimizer == OptimizerKind::GD;
  double gd_lr = cfg.gd_lr;
  Eigen::VectorXd grad, delta;
  std::optional<Eigen::RowVectorXd> last_center;

  for (long t = 0; t < cfg.steps; ++t) {
    std::span<const int> idx;
    if (full_batch) {
      idx = data.train_idx;
    } else {
      if (cursor + cfg.batch_size > order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      idx = std::span<const int>(order.data() + cursor, static_cast<std::size_t>(cfg.batch_size));
      cursor += cfg.batch_size;
    }

    BatchEval ev;
    try {
      ev = evaluate(model, data, idx, opt, &grad);
    } catch (const NonFiniteLogit& e) {
      result.diverged = true;
      result.divergence = "step " + std::to_string(t) + ": " + e.what();
      break;
    }
    if (opt.feature_norm == FeatureNorm::BatchCenter)
      last_center = Eigen::RowVectorXd(ev.features.colwise().mean());
    result.step_loss.push_back(static_cast<float>(ev.loss));
    if (cfg.probe && cfg.probe_every > 0 && t % cfg.probe_every == 0) cfg.probe(t, model);

    if (ev.loss == 0.0 && result.first_zero_loss_step < 0) {
      result.first_zero_loss_step = t;
      if (mit.switch_to_gd_at_zero_loss && !use_gd) {
        use_gd = true;
        gd_lr = mit.gd_lr;
        result.gd_switch_step = t;
      }
    }

    if (use_gd) {
      delta = gd_lr * grad;
      model.theta() -= delta;
    } else {
      delta = adam_step(model.theta(), grad, adam);
    }

    const auto cls_delta = delta.segment(cls_block.offset, cls_block.size());
    const double cls_mean = cls_delta.cwiseAbs().mean();
    std::vector<double> mags(static_cast<std::size_t>(cls_delta.size()));
    for (Eigen::Index i = 0; i < cls_delta.size(); ++i) mags[i] = std::abs(cls_delta(i));
    auto mid = mags.begin() + static_cast<std::ptrdiff_t>(mags.size() / 2);
    std::nth_element(mags.begin(), mid, mags.end());
    const bool was_watching = detector.watching();
    const auto spike = detector.push(t, ev.loss, cls_mean, *mid);
    if (spike) result.spikes.push_back(*spike);

    result.steps_run = t + 1;
    const bool log_now = t % cfg.log_every == 0 || t + 1 == cfg.steps || spike ||
                         (!was_watching && detector.watching());
    if (log_now) {
      TraceRecord rec;
      rec.step = t;
      detail::fill_geometry(rec, model, ev);
      rec.update = update_stats(cls_delta);
      if (bias >= 0) {
        const auto& b = model.blocks()[bias];
        rec.update.bias_mean = delta.segment(b.offset, b.size()).cwiseAbs().mean();
      }
      rec.test_accuracy = detail::test_accuracy(model, data, opt, last_center);
      result.records.push_back(std::move(rec));
    }

    if (!model.theta().allFinite()) {
      result.diverged = true;
      result.divergence = "step " + std::to_string(t) + ": non-finite parameters";
      break;
    }
  }
  return result;
}

// Output

inline nlohmann::json to_json(const UpdateStats& u) {
  nlohmann::json j = {{"max", u.max},
                      {"mean", u.mean},
                      {"median", u.median},
                      {"hist_lo", UpdateStats::kHistLo},
                      {"hist_width", UpdateStats::kHistWidth},
                      {"hist_pos", u.hist_pos},
                      {"hist_neg", u.hist_neg}};
  if (!std::isnan(u.bias_mean)) j["bias_mean"] = u.bias_mean;
  return j;
}

namespace detail {
// JSON has no NaN; unavailable values are written as null.
inline nlohmann::json number_or_null(double x) {
  return std::isfinite(x) ? nlohmann::json(x) : nlohmann::json(nullptr);
}
}  // namespace detail

inline nlohmann::json to_json(const TraceRecord& r) {
  return {{"step", r.step},
          {"train_loss", r.train_loss},
          {"sc_fraction", r.sc_fraction},
          {"w_g_norm", r.w_g_norm},
          {"mu_g_norm", r.mu_g_norm},
          {"cosine", r.cosine},
          {"residual_eps", r.residual_eps},
          {"min_margin", detail::number_or_null(r.min_margin)},
          {"update", to_json(r.update)},
          {"test_accuracy", detail::number_or_null(r.test_accuracy)}};
}

inline nlohmann::json to_json(const SpikeEvent& s) {
  return {{"zero_run_start", s.zero_run_start},
          {"zero_run_length", s.zero_run_length},
          {"reemerge_step", s.reemerge_step},
          {"spike_step", s.spike_step},
          {"spike_loss", s.spike_loss},
          {"pre_update_mean", s.pre_update_mean},
          {"peak_update_median", s.peak_update_median},
          {"update_ratio", detail::number_or_null(s.update_ratio())}};
}

inline void write_trace_jsonl(std::ostream& os, const std::vector<TraceRecord>& records) {
  for (const auto& r : records) os << to_json(r).dump() << '\n';
}

inline void write_trace_csv(std::ostream& os, const std::vector<TraceRecord>& records) {
  os << "step,train_loss,sc_fraction,w_g_norm,mu_g_norm,cosine,residual_eps,min_margin,"
        "update_max,update_mean,update_median,test_accuracy\n";
  os.precision(17);
  for (const auto& r : records)
    os << r.step << ',' << r.train_loss << ',' << r.sc_fraction << ',' << r.w_g_norm << ','
       << r.mu_g_norm << ',' << r.cosine << ',' << r.residual_eps << ',' << r.min_margin << ','
       << r.update.max << ',' << r.update.mean << ',' << r.update.median << ','
       << r.test_accuracy << '\n';
}

inline void write_step_loss_csv(std::ostream& os, const std::vector<float>& losses) {
  os << "step,loss\n";
  os.precision(9);
  for (std::size_t t = 0; t < losses.size(); ++t) os << t << ',' << losses[t] << '\n';
}

/// Class means over the training samples and classifier rows.
inline NCState nc_state_of(const Model& model, const Dataset& data) {
  const int K = model.num_classes();
  const RowMatrix h = model.features(data, data.train_idx);
  Matrix means = Matrix::Zero(K, model.feature_dim());
  std::vector<int> count(K, 0);
  for (std::size_t i = 0; i < data.train_idx.size(); ++i) {
    const int y = data.labels[data.train_idx[i]];
    means.row(y) += h.row(static_cast<Eigen::Index>(i));
    ++count[y];
  }
  for (int k = 0; k < K; ++k)
    if (count[k]) means.row(k) /= count[k];
  return NCState::from(std::move(means), Matrix(model.classifier()));
}

/// NC state plus the raw parameter arrays.
inline nlohmann::json snapshot_json(const Model& model, const Dataset& data, long step) {
  nlohmann::json j = to_json(nc_state_of(model, data));
  j["step"] = step;
  nlohmann::json blocks = nlohmann::json::array();
  for (std::size_t i = 0; i < model.blocks().size(); ++i) {
    const auto& b = model.blocks()[i];
    blocks.push_back({{"name", b.name},
                      {"rows", b.rows},
                      {"cols", b.cols},
                      {"values", matrix_to_json(Matrix(model.block(static_cast<int>(i))))}});
  }
  j["parameters"] = std::move(blocks);
  return j;
}

}  // namespace nfilab
