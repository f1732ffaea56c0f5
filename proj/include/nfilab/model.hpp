#pragma once

// Unconstrained feature model and ReLU MLP over a single flat parameter
// vector, with the emulated-precision cross-entropy on the loss path and
// hand-written backpropagation.

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "nfilab/dataset.hpp"
#include "nfilab/errors.hpp"
#include "nfilab/precision.hpp"
#include "nfilab/softmax_ce.hpp"

namespace nfilab {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMap = Eigen::Map<RowMatrix>;
using ConstRowMap = Eigen::Map<const RowMatrix>;

enum class ModelKind { UFM, MLP };

/// Transform applied to penultimate features right before the classifier.
enum class FeatureNorm { None, BatchCenter, LayerNorm };

struct ModelConfig {
  ModelKind kind = ModelKind::UFM;
  int num_classes = 10;
  int feature_dim = 32;      // d
  int samples = 500;         // UFM: number of free feature rows
  int input_dim = 0;         // MLP
  int hidden_layers = 3;     // MLP: the last hidden layer is the feature layer
  bool classifier_bias = false;
  double feature_init_std = 1.0;
};

struct ParamBlock {
  std::string name;
  Eigen::Index offset = 0;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  Eigen::Index size() const { return rows * cols; }
};

class Model {
 public:
  static Model make(const ModelConfig& cfg, std::uint64_t seed) {
    Model m;
    m.cfg_ = cfg;
    if (cfg.num_classes < 2) throw DimensionTooSmall("need at least two classes");
    if (cfg.feature_dim < 1) throw DimensionTooSmall("feature_dim must be >= 1");
    if (cfg.kind == ModelKind::UFM) {
      if (cfg.samples < 1) throw DimensionTooSmall("UFM needs samples >= 1");
      m.features_ = m.add("features", cfg.samples, cfg.feature_dim);
    } else {
      if (cfg.input_dim < 1 || cfg.hidden_layers < 1)
        throw DimensionTooSmall("MLP needs input_dim >= 1 and hidden_layers >= 1");
      int fan_in = cfg.input_dim;
      for (int l = 0; l < cfg.hidden_layers; ++l) {
        m.hidden_.push_back({m.add("hidden" + std::to_string(l) + ".weight", cfg.feature_dim, fan_in),
                             m.add("hidden" + std::to_string(l) + ".bias", 1, cfg.feature_dim)});
        fan_in = cfg.feature_dim;
      }
    }
    m.classifier_ = m.add("classifier.weight", cfg.num_classes, cfg.feature_dim);
    if (cfg.classifier_bias) m.bias_ = m.add("classifier.bias", 1, cfg.num_classes);

    m.theta_ = Eigen::VectorXd::Zero(m.total_);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal;
    auto fill = [&](int block, double std_dev) {
      auto b = m.block(block);
      for (Eigen::Index i = 0; i < b.rows(); ++i)
        for (Eigen::Index j = 0; j < b.cols(); ++j) b(i, j) = std_dev * normal(rng);
    };
    if (cfg.kind == ModelKind::UFM) fill(m.features_, cfg.feature_init_std);
    for (const auto& layer : m.hidden_)
      fill(layer.weight, 1.0 / std::sqrt(static_cast<double>(m.blocks_[layer.weight].cols)));
    fill(m.classifier_, 1.0 / std::sqrt(static_cast<double>(cfg.feature_dim)));
    return m;
  }

  const ModelConfig& config() const { return cfg_; }
  ModelKind kind() const { return cfg_.kind; }
  int num_classes() const { return cfg_.num_classes; }
  int feature_dim() const { return cfg_.feature_dim; }

  Eigen::VectorXd& theta() { return theta_; }
  const Eigen::VectorXd& theta() const { return theta_; }
  const std::vector<ParamBlock>& blocks() const { return blocks_; }

  RowMap block(int i) { return view(theta_, i); }
  ConstRowMap block(int i) const { return view(theta_, i); }

  RowMap view(Eigen::VectorXd& flat, int i) const {
    const auto& b = blocks_.at(i);
    return RowMap(flat.data() + b.offset, b.rows, b.cols);
  }
  ConstRowMap view(const Eigen::VectorXd& flat, int i) const {
    const auto& b = blocks_.at(i);
    return ConstRowMap(flat.data() + b.offset, b.rows, b.cols);
  }

  int features_block() const { return features_; }
  int classifier_block() const { return classifier_; }
  int bias_block() const { return bias_; }
  struct Layer { int weight; int bias; };
  const std::vector<Layer>& hidden() const { return hidden_; }

  /// Raw penultimate features for the given sample ids (n x d).
  RowMatrix features(const Dataset& data, std::span<const int> idx) const {
    return features_at(theta_, data, idx, nullptr);
  }

  /// Features with per-layer pre-activations recorded for backprop.
  RowMatrix features_at(const Eigen::VectorXd& theta, const Dataset& data, std::span<const int> idx,
                        std::vector<RowMatrix>* preacts) const {
    const Eigen::Index n = static_cast<Eigen::Index>(idx.size());
    if (cfg_.kind == ModelKind::UFM) {
      const auto h = view(theta, features_);
      RowMatrix out(n, cfg_.feature_dim);
      for (Eigen::Index i = 0; i < n; ++i) out.row(i) = h.row(idx[i]);
      return out;
    }
    RowMatrix act(n, data.inputs.cols());
    for (Eigen::Index i = 0; i < n; ++i) act.row(i) = data.inputs.row(idx[i]);
    if (act.cols() != cfg_.input_dim)
      throw std::invalid_argument("dataset input width does not match the MLP input_dim");
    for (const auto& layer : hidden_) {
      RowMatrix pre = act * view(theta, layer.weight).transpose();
      pre.rowwise() += view(theta, layer.bias).row(0);
      act = pre.cwiseMax(0.0);
      if (preacts) preacts->push_back(std::move(pre));
    }
    return act;
  }

  /// Classifier rows W (K x d).
  RowMatrix classifier() const { return block(classifier_); }

 private:
  int add(std::string name, Eigen::Index rows, Eigen::Index cols) {
    blocks_.push_back({std::move(name), total_, rows, cols});
    total_ += rows * cols;
    return static_cast<int>(blocks_.size()) - 1;
  }

  ModelConfig cfg_;
  Eigen::VectorXd theta_;
  std::vector<ParamBlock> blocks_;
  Eigen::Index total_ = 0;
  int features_ = -1;
  int classifier_ = -1;
  int bias_ = -1;
  std::vector<Layer> hidden_;
};

struct LossOptions {
  PrecisionMode mode = PrecisionMode::fp32();
  double label_smoothing = 0.0;
  bool zero_sum_projection = false;
  FeatureNorm feature_norm = FeatureNorm::None;
  std::optional<double> logit_clamp_margin = {};
  double layer_norm_eps = 1e-5;
  // Batch centering subtracts this instead of the batch mean when set
  // (frozen training statistics at evaluation time).
  std::optional<Eigen::RowVectorXd> frozen_center = {};
};

/// Loss and per-sample statistics over one batch.
struct BatchEval {
  double loss = 0.0;          // mean over the batch
  int samples = 0;
  int collapsed = 0;
  double residual_mean = 0.0; // mean residual mass
  double min_margin = std::numeric_limits<double>::infinity();
  double accuracy = 0.0;
  RowMatrix logits;           // n x K, as fed to the loss
  RowMatrix logit_grad;       // n x K, per-sample dL_i/dz (before 1/n)
  RowMatrix features;         // n x d, raw penultimate features
  RowMatrix fed;              // n x d, classifier input
  std::vector<int> labels;

  double sc_fraction() const { return samples ? static_cast<double>(collapsed) / samples : 0.0; }
};

namespace detail {

inline RowMatrix apply_feature_norm(const RowMatrix& f, const LossOptions& o) {
  switch (o.feature_norm) {
    case FeatureNorm::None:
      return f;
    case FeatureNorm::BatchCenter: {
      RowMatrix out = f;
      if (o.frozen_center) out.rowwise() -= *o.frozen_center;
      else out.rowwise() -= f.colwise().mean();
      return out;
    }
    case FeatureNorm::LayerNorm: {
      RowMatrix out(f.rows(), f.cols());
      for (Eigen::Index i = 0; i < f.rows(); ++i) {
        const double mean = f.row(i).mean();
        const double var = (f.row(i).array() - mean).square().mean();
        out.row(i) = (f.row(i).array() - mean) / std::sqrt(var + o.layer_norm_eps);
      }
      return out;
    }
  }
  return f;
}

inline RowMatrix feature_norm_backward(const RowMatrix& raw, const RowMatrix& normed,
                                       const RowMatrix& d_normed, const LossOptions& o) {
  switch (o.feature_norm) {
    case FeatureNorm::None:
      return d_normed;
    case FeatureNorm::BatchCenter: {
      RowMatrix out = d_normed;
      out.rowwise() -= d_normed.colwise().mean();
      return out;
    }
    case FeatureNorm::LayerNorm: {
      RowMatrix out(raw.rows(), raw.cols());
      for (Eigen::Index i = 0; i < raw.rows(); ++i) {
        const double mean = raw.row(i).mean();
        const double var = (raw.row(i).array() - mean).square().mean();
        const double inv_std = 1.0 / std::sqrt(var + o.layer_norm_eps);
        const double g_mean = d_normed.row(i).mean();
        const double gy_mean = d_normed.row(i).dot(normed.row(i)) / static_cast<double>(raw.cols());
        out.row(i) = inv_std * (d_normed.row(i).array() - g_mean - normed.row(i).array() * gy_mean);
      }
      return out;
    }
  }
  return d_normed;
}

}  // namespace detail

/// Forward pass and cross-entropy under `opt`. When `grad` is given it
/// receives dL/dtheta of the batch-mean loss (same layout as theta).
inline BatchEval evaluate(const Model& model, const Eigen::VectorXd& theta, const Dataset& data,
                          std::span<const int> idx, const LossOptions& opt,
                          Eigen::VectorXd* grad = nullptr) {
  const int K = model.num_classes();
  const Eigen::Index n = static_cast<Eigen::Index>(idx.size());
  BatchEval ev;
  ev.samples = static_cast<int>(n);
  if (n == 0) return ev;

  std::vector<RowMatrix> preacts;
  ev.features = model.features_at(theta, data, idx, grad ? &preacts : nullptr);
  const RowMatrix& raw = ev.features;
  ev.fed = detail::apply_feature_norm(raw, opt);

  const auto W = model.view(theta, model.classifier_block());
  ev.logits = ev.fed * W.transpose();
  if (model.bias_block() >= 0) ev.logits.rowwise() += model.view(theta, model.bias_block()).row(0);

  ev.logit_grad.resize(n, K);
  ev.labels.resize(n);
  std::vector<double> row(K);
  std::vector<char> clamped(K);
  double loss_sum = 0.0, residual_sum = 0.0;
  int correct = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const int label = data.labels[idx[i]];
    ev.labels[i] = label;
    for (int k = 0; k < K; ++k) row[k] = ev.logits(i, k);
    std::fill(clamped.begin(), clamped.end(), 0);
    if (opt.logit_clamp_margin) {
      const double floor = *std::max_element(row.begin(), row.end()) - *opt.logit_clamp_margin;
      for (int k = 0; k < K; ++k)
        if (row[k] < floor) {
          row[k] = floor;
          clamped[k] = 1;
        }
      for (int k = 0; k < K; ++k) ev.logits(i, k) = row[k];
    }
    std::span<double> g(ev.logit_grad.row(i).data(), static_cast<std::size_t>(K));
    const CEStats st = stable_ce_into(row, label, opt.mode, g, opt.label_smoothing);
    if (opt.zero_sum_projection) project_zero_sum_inplace(g);
    if (opt.logit_clamp_margin)
      for (int k = 0; k < K; ++k)
        if (clamped[k]) g[k] = 0.0;
    loss_sum += st.loss;
    residual_sum += st.residual_mass;
    ev.collapsed += st.collapsed ? 1 : 0;
    ev.min_margin = std::min(ev.min_margin, logit_margin(row, label));
    correct += argmax_lowest(row) == label ? 1 : 0;
  }
  ev.loss = loss_sum / static_cast<double>(n);
  ev.residual_mean = residual_sum / static_cast<double>(n);
  ev.accuracy = static_cast<double>(correct) / static_cast<double>(n);

  if (!grad) return ev;

  grad->setZero(theta.size());
  const RowMatrix G = ev.logit_grad / static_cast<double>(n);
  model.view(*grad, model.classifier_block()) = G.transpose() * ev.fed;
  if (model.bias_block() >= 0) model.view(*grad, model.bias_block()) = G.colwise().sum();

  RowMatrix d_feat = detail::feature_norm_backward(raw, ev.fed, G * W, opt);

  if (model.kind() == ModelKind::UFM) {
    auto dH = model.view(*grad, model.features_block());
    for (Eigen::Index i = 0; i < n; ++i) dH.row(idx[i]) += d_feat.row(i);
    return ev;
  }

  const auto& layers = model.hidden();
  for (int l = static_cast<int>(layers.size()) - 1; l >= 0; --l) {
    const RowMatrix dz = d_feat.cwiseProduct((preacts[l].array() > 0.0).cast<double>().matrix());
    RowMatrix below;
    if (l > 0) {
      below = preacts[l - 1].cwiseMax(0.0);
    } else {
      below.resize(n, data.inputs.cols());
      for (Eigen::Index i = 0; i < n; ++i) below.row(i) = data.inputs.row(idx[i]);
    }
    model.view(*grad, layers[l].weight) = dz.transpose() * below;
    model.view(*grad, layers[l].bias) = dz.colwise().sum();
    if (l > 0) d_feat = dz * model.view(theta, layers[l].weight);
  }
  return ev;
}

inline BatchEval evaluate(const Model& model, const Dataset& data, std::span<const int> idx,
                          const LossOptions& opt, Eigen::VectorXd* grad = nullptr) {
  return evaluate(model, model.theta(), data, idx, opt, grad);
}

}  // namespace nfilab
