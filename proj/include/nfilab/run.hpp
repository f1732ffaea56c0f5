#pragma once

// Run configuration documents and the experiment drivers behind the CLI.
// Every driver writes its artifacts plus manifest.json into the output
// directory and returns a process exit code.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nfilab/adam.hpp"
#include "nfilab/audit.hpp"
#include "nfilab/dataset.hpp"
#include "nfilab/errors.hpp"
#include "nfilab/hessian.hpp"
#include "nfilab/model.hpp"
#include "nfilab/nfi_dynamics.hpp"
#include "nfilab/precision.hpp"
#include "nfilab/trainer.hpp"

#ifndef NFILAB_VERSION
#define NFILAB_VERSION "0.1.0"
#endif

namespace nfilab {

inline constexpr const char* kVersion = NFILAB_VERSION;

enum ExitCode : int { kExitOk = 0, kExitFailure = 1, kExitConfig = 2, kExitDiverged = 3 };

enum class ExperimentKind { Train, SimulateNFI, HessianTrace, SpikeEstimate, AuditLogits, MakeDataset };

inline const std::vector<std::pair<ExperimentKind, std::string>>& experiment_names() {
  static const std::vector<std::pair<ExperimentKind, std::string>> names{
      {ExperimentKind::Train, "train"},
      {ExperimentKind::SimulateNFI, "simulate-nfi"},
      {ExperimentKind::HessianTrace, "hessian-trace"},
      {ExperimentKind::SpikeEstimate, "spike-estimate"},
      {ExperimentKind::AuditLogits, "audit-logits"},
      {ExperimentKind::MakeDataset, "make-dataset"}};
  return names;
}

inline std::string to_string(ExperimentKind k) {
  for (const auto& [kind, name] : experiment_names())
    if (kind == k) return name;
  return "?";
}

inline ExperimentKind parse_experiment(const std::string& s, const std::string& field) {
  for (const auto& [kind, name] : experiment_names())
    if (name == s) return kind;
  throw ConfigError(field, "unknown experiment '" + s + "'");
}

struct DatasetConfig {
  std::string kind = "ufm-balanced";  // or "moddiv"
  int p = 23;
  double train_frac = 1.0;
};

struct TrainSpec {
  DatasetConfig dataset;
  ModelConfig model;
  TrainConfig train;
  MitigationConfig mitigations;
  TrainSpec() {
    train.steps = 200000;
    train.log_every = 1000;
  }
};

struct NFISpec {
  double eta = 0.1;
  double eps = 0.5;
  int num_classes = 10;
  int dim = 16;
  long steps = 2000;
  double init_scale = 1.0;
};

struct HessianSpec {
  int num_classes = 4;
  int feature_dim = 4;
  int samples = 8;
  double feature_init_std = 1.0;
  double lr = 1e-2;
  long steps = 20000;
  long probe_every = 500;
  double label_smoothing = 0.0;
  PrecisionMode mode = PrecisionMode::fp64();
};

struct SpikeSpec {
  double g_pre = 3e-9;
  double g_re = 1.19e-7;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eta = 1e-3;
  double eps_adam = 1e-8;
};

struct AuditSpec {
  std::string path;
  PrecisionMode mode = PrecisionMode::fp32();
};

struct RunConfig {
  ExperimentKind experiment = ExperimentKind::Train;
  std::uint64_t seed = 0;
  std::string out = "nfilab-out";
  TrainSpec train;
  NFISpec simulate_nfi;
  HessianSpec hessian_trace;
  SpikeSpec spike_estimate;
  AuditSpec audit_logits;
  DatasetConfig make_dataset;
};

// JSON reading with field paths in every error.

namespace detail {

class Reader {
 public:
  Reader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  bool has(const std::string& key) const { return j_.contains(key); }

  template <class T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    const auto& v = j_.at(key);
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw ConfigError(field(key), "expected a boolean");
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) throw ConfigError(field(key), "expected an integer");
        if constexpr (std::is_unsigned_v<T>)
          if (v.get<long long>() < 0) throw ConfigError(field(key), "expected a non-negative integer");
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw ConfigError(field(key), "expected a number");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw ConfigError(field(key), "expected a string");
      }
      out = v.get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(field(key), e.what());
    }
  }

  void get_mode(const std::string& key, PrecisionMode& out) {
    std::string s;
    get(key, s);
    if (!j_.contains(key)) return;
    try {
      out = PrecisionMode::parse(s);
    } catch (const InvalidMode& e) {
      throw ConfigError(field(key), e.what());
    }
  }

  void get_optional(const std::string& key, std::optional<double>& out) {
    seen_.insert(key);
    if (!j_.contains(key) || j_.at(key).is_null()) return;
    double v = 0.0;
    get(key, v);
    out = v;
  }

  Reader child(const std::string& key) {
    seen_.insert(key);
    static const nlohmann::json empty = nlohmann::json::object();
    return Reader(j_.contains(key) ? j_.at(key) : empty, field(key));
  }

  /// Rejects keys nobody asked for, which are almost always typos.
  void finish() const {
    for (const auto& [key, value] : j_.items())
      if (!seen_.count(key)) throw ConfigError(field(key), "unknown key");
  }

 private:
  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline void require(bool ok, const std::string& field, const std::string& what) {
  if (!ok) throw ConfigError(field, what);
}

inline void read_dataset(Reader r, DatasetConfig& d) {
  r.get("kind", d.kind);
  r.get("p", d.p);
  r.get("train_frac", d.train_frac);
  r.finish();
  require(d.kind == "ufm-balanced" || d.kind == "moddiv", r.field("kind"),
          "expected 'ufm-balanced' or 'moddiv'");
  require(d.train_frac > 0.0 && d.train_frac <= 1.0, r.field("train_frac"), "must lie in (0, 1]");
  if (d.kind == "moddiv") require(is_prime(d.p), r.field("p"), std::to_string(d.p) + " is not prime");
}

inline void read_train(Reader r, TrainSpec& s) {
  read_dataset(r.child("dataset"), s.dataset);

  auto m = r.child("model");
  std::string kind = s.model.kind == ModelKind::UFM ? "ufm" : "mlp";
  m.get("kind", kind);
  require(kind == "ufm" || kind == "mlp", m.field("kind"), "expected 'ufm' or 'mlp'");
  s.model.kind = kind == "ufm" ? ModelKind::UFM : ModelKind::MLP;
  m.get("num_classes", s.model.num_classes);
  m.get("feature_dim", s.model.feature_dim);
  m.get("samples", s.model.samples);
  m.get("hidden_layers", s.model.hidden_layers);
  m.get("feature_init_std", s.model.feature_init_std);
  m.finish();
  require(s.model.num_classes >= 2, m.field("num_classes"), "must be >= 2");
  require(s.model.feature_dim >= 1, m.field("feature_dim"), "must be >= 1");
  require(s.model.samples >= s.model.num_classes, m.field("samples"), "need one sample per class");
  require(s.model.hidden_layers >= 1, m.field("hidden_layers"), "must be >= 1");
  require(s.model.feature_init_std > 0.0, m.field("feature_init_std"), "must be positive");
  if (s.model.kind == ModelKind::MLP)
    require(s.dataset.kind == "moddiv", r.field("dataset.kind"), "the MLP trains on 'moddiv'");

  auto o = r.child("optimizer");
  std::string opt = s.train.optimizer == OptimizerKind::Adam ? "adam" : "gd";
  o.get("kind", opt);
  require(opt == "adam" || opt == "gd", o.field("kind"), "expected 'adam' or 'gd'");
  s.train.optimizer = opt == "adam" ? OptimizerKind::Adam : OptimizerKind::GD;
  o.get("lr", s.train.adam.lr);
  o.get("beta1", s.train.adam.beta1);
  o.get("beta2", s.train.adam.beta2);
  o.get("eps", s.train.adam.eps);
  o.get("bias_correction", s.train.adam.bias_correction);
  o.get("gd_lr", s.train.gd_lr);
  o.finish();
  require(s.train.adam.lr > 0.0, o.field("lr"), "must be positive");
  require(s.train.adam.beta1 >= 0.0 && s.train.adam.beta1 < 1.0, o.field("beta1"), "must lie in [0, 1)");
  require(s.train.adam.beta2 >= 0.0 && s.train.adam.beta2 < 1.0, o.field("beta2"), "must lie in [0, 1)");
  require(s.train.adam.eps > 0.0, o.field("eps"), "must be positive");
  require(s.train.gd_lr > 0.0, o.field("gd_lr"), "must be positive");

  r.get("steps", s.train.steps);
  r.get("log_every", s.train.log_every);
  r.get("batch_size", s.train.batch_size);
  require(s.train.steps >= 1, r.field("steps"), "must be >= 1");
  require(s.train.log_every >= 1, r.field("log_every"), "must be >= 1");
  require(s.train.batch_size >= 0, r.field("batch_size"), "must be >= 0");

  auto g = r.child("mitigations");
  auto& mit = s.mitigations;
  g.get("zero_sum_projection", mit.zero_sum_projection);
  g.get_mode("loss_precision", mit.loss_precision);
  g.get_optional("eps_adam_override", mit.eps_adam_override);
  g.get("batch_center_features", mit.batch_center_features);
  g.get("feature_layer_norm", mit.feature_layer_norm);
  g.get("label_smoothing", mit.label_smoothing);
  g.get("switch_to_gd_at_zero_loss", mit.switch_to_gd_at_zero_loss);
  g.get("gd_lr", mit.gd_lr);
  g.get_optional("logit_clamp_margin", mit.logit_clamp_margin);
  g.get("classifier_bias", mit.classifier_bias);
  g.finish();
  r.finish();
  mit.validate();
}

}  // namespace detail

/// Parses a run configuration. A run manifest is accepted too: its echoed
/// "config" member is used.
inline RunConfig parse_run_config(const nlohmann::json& doc) {
  if (doc.is_object() && doc.contains("config") && doc.contains("version"))
    return parse_run_config(doc.at("config"));
  detail::Reader r(doc, "");
  RunConfig c;
  std::string kind = to_string(c.experiment);
  r.get("experiment", kind);
  c.experiment = parse_experiment(kind, "experiment");
  r.get("seed", c.seed);
  r.get("out", c.out);
  detail::require(!c.out.empty(), "out", "must not be empty");

  detail::read_train(r.child("train"), c.train);

  auto n = r.child("simulate_nfi");
  n.get("eta", c.simulate_nfi.eta);
  n.get("eps", c.simulate_nfi.eps);
  n.get("num_classes", c.simulate_nfi.num_classes);
  n.get("dim", c.simulate_nfi.dim);
  n.get("steps", c.simulate_nfi.steps);
  n.get("init_scale", c.simulate_nfi.init_scale);
  n.finish();
  detail::require(c.simulate_nfi.eta > 0.0, n.field("eta"), "must be positive");
  detail::require(c.simulate_nfi.eps > 0.0, n.field("eps"), "must be positive");
  detail::require(c.simulate_nfi.num_classes >= 2, n.field("num_classes"), "must be >= 2");
  detail::require(c.simulate_nfi.dim >= 1, n.field("dim"), "must be >= 1");
  detail::require(c.simulate_nfi.steps >= 1, n.field("steps"), "must be >= 1");
  detail::require(c.simulate_nfi.init_scale > 0.0, n.field("init_scale"), "must be positive");

  auto h = r.child("hessian_trace");
  auto& hs = c.hessian_trace;
  h.get("num_classes", hs.num_classes);
  h.get("feature_dim", hs.feature_dim);
  h.get("samples", hs.samples);
  h.get("feature_init_std", hs.feature_init_std);
  h.get("lr", hs.lr);
  h.get("steps", hs.steps);
  h.get("probe_every", hs.probe_every);
  h.get("label_smoothing", hs.label_smoothing);
  h.get_mode("mode", hs.mode);
  h.finish();
  detail::require(hs.num_classes >= 2, h.field("num_classes"), "must be >= 2");
  detail::require(hs.feature_dim >= 1, h.field("feature_dim"), "must be >= 1");
  detail::require(hs.samples >= hs.num_classes, h.field("samples"), "need one sample per class");
  detail::require(hs.lr > 0.0, h.field("lr"), "must be positive");
  detail::require(hs.steps >= 1, h.field("steps"), "must be >= 1");
  detail::require(hs.probe_every >= 1, h.field("probe_every"), "must be >= 1");
  detail::require(hs.label_smoothing >= 0.0 && hs.label_smoothing < 1.0, h.field("label_smoothing"),
                  "must lie in [0, 1)");

  auto s = r.child("spike_estimate");
  auto& ss = c.spike_estimate;
  s.get("g_pre", ss.g_pre);
  s.get("g_re", ss.g_re);
  s.get("beta1", ss.beta1);
  s.get("beta2", ss.beta2);
  s.get("eta", ss.eta);
  s.get("eps_adam", ss.eps_adam);
  s.finish();
  detail::require(ss.g_pre >= 0.0, s.field("g_pre"), "must be non-negative");
  detail::require(ss.g_re >= 0.0, s.field("g_re"), "must be non-negative");
  detail::require(ss.eta > 0.0, s.field("eta"), "must be positive");
  detail::require(ss.eps_adam > 0.0, s.field("eps_adam"), "must be positive");

  auto a = r.child("audit_logits");
  a.get("path", c.audit_logits.path);
  a.get_mode("mode", c.audit_logits.mode);
  a.finish();

  detail::read_dataset(r.child("make_dataset"), c.make_dataset);
  r.finish();
  return c;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("--config", "cannot open '" + path + "'");
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("--config", std::string("invalid JSON: ") + e.what());
  }
  return parse_run_config(doc);
}

inline nlohmann::json mode_json(const PrecisionMode& m) { return m.name(); }

inline nlohmann::json to_json(const DatasetConfig& d) {
  return {{"kind", d.kind}, {"p", d.p}, {"train_frac", d.train_frac}};
}

/// The complete resolved configuration; parse_run_config(to_json(c)) == c.
inline nlohmann::json to_json(const RunConfig& c) {
  const auto& t = c.train;
  const auto& mit = t.mitigations;
  nlohmann::json j;
  j["experiment"] = to_string(c.experiment);
  j["seed"] = c.seed;
  j["out"] = c.out;
  j["train"] = {
      {"dataset", to_json(t.dataset)},
      {"model",
       {{"kind", t.model.kind == ModelKind::UFM ? "ufm" : "mlp"},
        {"num_classes", t.model.num_classes},
        {"feature_dim", t.model.feature_dim},
        {"samples", t.model.samples},
        {"hidden_layers", t.model.hidden_layers},
        {"feature_init_std", t.model.feature_init_std}}},
      {"optimizer",
       {{"kind", t.train.optimizer == OptimizerKind::Adam ? "adam" : "gd"},
        {"lr", t.train.adam.lr},
        {"beta1", t.train.adam.beta1},
        {"beta2", t.train.adam.beta2},
        {"eps", t.train.adam.eps},
        {"bias_correction", t.train.adam.bias_correction},
        {"gd_lr", t.train.gd_lr}}},
      {"steps", t.train.steps},
      {"log_every", t.train.log_every},
      {"batch_size", t.train.batch_size},
      {"mitigations",
       {{"zero_sum_projection", mit.zero_sum_projection},
        {"loss_precision", mode_json(mit.loss_precision)},
        {"eps_adam_override", mit.eps_adam_override ? nlohmann::json(*mit.eps_adam_override) : nlohmann::json(nullptr)},
        {"batch_center_features", mit.batch_center_features},
        {"feature_layer_norm", mit.feature_layer_norm},
        {"label_smoothing", mit.label_smoothing},
        {"switch_to_gd_at_zero_loss", mit.switch_to_gd_at_zero_loss},
        {"gd_lr", mit.gd_lr},
        {"logit_clamp_margin", mit.logit_clamp_margin ? nlohmann::json(*mit.logit_clamp_margin) : nlohmann::json(nullptr)},
        {"classifier_bias", mit.classifier_bias}}}};
  const auto& n = c.simulate_nfi;
  j["simulate_nfi"] = {{"eta", n.eta}, {"eps", n.eps}, {"num_classes", n.num_classes},
                       {"dim", n.dim}, {"steps", n.steps}, {"init_scale", n.init_scale}};
  const auto& h = c.hessian_trace;
  j["hessian_trace"] = {{"num_classes", h.num_classes}, {"feature_dim", h.feature_dim},
                        {"samples", h.samples},         {"feature_init_std", h.feature_init_std},
                        {"lr", h.lr},                   {"steps", h.steps},
                        {"probe_every", h.probe_every}, {"label_smoothing", h.label_smoothing},
                        {"mode", mode_json(h.mode)}};
  const auto& s = c.spike_estimate;
  j["spike_estimate"] = {{"g_pre", s.g_pre}, {"g_re", s.g_re}, {"beta1", s.beta1},
                         {"beta2", s.beta2}, {"eta", s.eta},   {"eps_adam", s.eps_adam}};
  j["audit_logits"] = {{"path", c.audit_logits.path}, {"mode", mode_json(c.audit_logits.mode)}};
  j["make_dataset"] = to_json(c.make_dataset);
  return j;
}

/// Named mitigation presets for --mitigation.
inline void apply_mitigation(const std::string& name, MitigationConfig& mit) {
  if (name == "none" || name.empty()) return;
  if (name == "fp64") mit.loss_precision = PrecisionMode::fp64();
  else if (name == "zero-sum") mit.zero_sum_projection = true;
  else if (name == "eps-adam") mit.eps_adam_override = 1e-5;
  else if (name == "batch-center") mit.batch_center_features = true;
  else if (name == "layer-norm") mit.feature_layer_norm = true;
  else if (name == "label-smoothing") mit.label_smoothing = 0.1;
  else if (name == "gd-switch") mit.switch_to_gd_at_zero_loss = true, mit.gd_lr = 1e5;
  else if (name == "logit-clamp") mit.logit_clamp_margin = 100.0;
  else if (name == "bias") mit.classifier_bias = true;
  else throw ConfigError("--mitigation", "unknown mitigation '" + name + "'");
}

inline const std::vector<std::string>& mitigation_names() {
  static const std::vector<std::string> names{"none",        "fp64",            "zero-sum",
                                              "eps-adam",    "batch-center",    "layer-norm",
                                              "label-smoothing", "gd-switch",   "logit-clamp",
                                              "bias"};
  return names;
}

// Drivers

struct RunOutcome {
  int exit_code = kExitOk;
  nlohmann::json result;                 // experiment summary, also stored in the manifest
  std::vector<std::string> artifacts;    // file names inside the output directory
  std::string message;                   // one-line human summary
};

namespace detail {

inline std::ofstream open_out(const std::filesystem::path& dir, const std::string& name,
                              std::vector<std::string>& artifacts) {
  std::ofstream os(dir / name, std::ios::binary);
  if (!os) throw ConfigError("out", "cannot write '" + (dir / name).string() + "'");
  artifacts.push_back(name);
  return os;
}

inline Dataset build_dataset(const DatasetConfig& d, const ModelConfig& model, std::uint64_t seed) {
  if (d.kind == "moddiv") return make_moddiv_dataset(d.p, d.train_frac, seed);
  return make_balanced_ufm_dataset(model.num_classes, model.samples);
}

inline RunOutcome run_train(const RunConfig& c, const std::filesystem::path& dir) {
  RunOutcome out;
  TrainSpec spec = c.train;
  spec.model.classifier_bias = spec.mitigations.classifier_bias;
  const Dataset data = build_dataset(spec.dataset, spec.model, c.seed);
  if (spec.model.kind == ModelKind::MLP) {
    spec.model.num_classes = data.num_classes;
    spec.model.input_dim = static_cast<int>(data.inputs.cols());
  }
  Model model = Model::make(spec.model, c.seed);
  TrainConfig tc = spec.train;
  tc.seed = c.seed;
  const TrainResult r = train(data, model, tc, spec.mitigations);

  { auto os = open_out(dir, "trace.jsonl", out.artifacts); write_trace_jsonl(os, r.records); }
  { auto os = open_out(dir, "trace.csv", out.artifacts); write_trace_csv(os, r.records); }
  { auto os = open_out(dir, "loss.csv", out.artifacts); write_step_loss_csv(os, r.step_loss); }
  nlohmann::json spikes = nlohmann::json::array();
  for (const auto& s : r.spikes) spikes.push_back(to_json(s));
  { auto os = open_out(dir, "spikes.json", out.artifacts); os << spikes.dump(2) << '\n'; }
  { auto os = open_out(dir, "snapshot.json", out.artifacts); os << snapshot_json(model, data, r.steps_run).dump() << '\n'; }

  out.result = {{"steps_run", r.steps_run},
                {"first_zero_loss_step", r.first_zero_loss_step},
                {"gd_switch_step", r.gd_switch_step},
                {"spikes", r.spikes.size()},
                {"diverged", r.diverged},
                {"final_loss", r.step_loss.empty() ? 0.0 : static_cast<double>(r.step_loss.back())}};
  if (r.diverged) out.result["divergence"] = r.divergence;
  if (!r.spikes.empty()) {
    out.result["first_spike_step"] = r.spikes.front().spike_step;
    out.result["first_spike_update_ratio"] = detail::number_or_null(r.spikes.front().update_ratio());
  }
  out.exit_code = r.diverged ? kExitDiverged : kExitOk;
  out.message = "train: " + std::to_string(r.steps_run) + " steps, " + std::to_string(r.spikes.size()) +
                " spike(s)" + (r.diverged ? ", diverged (" + r.divergence + ")" : "");
  return out;
}

/// exp of the least-squares slope of log|u_t| over the second half of the trace.
inline double fitted_growth(const std::vector<NFITraceRow>& trace) {
  const std::size_t start = trace.size() / 2;
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  double n = 0;
  for (std::size_t i = start; i < trace.size(); ++i) {
    const double x = static_cast<double>(trace[i].step);
    const double y = std::log(std::hypot(trace[i].w_norm, trace[i].mu_norm));
    sx += x, sy += y, sxx += x * x, sxy += x * y, n += 1;
  }
  if (n < 2) return trace.empty() ? 1.0 : trace.back().growth;
  return std::exp((n * sxy - sx * sy) / (n * sxx - sx * sx));
}

inline RunOutcome run_simulate_nfi(const RunConfig& c, const std::filesystem::path& dir) {
  RunOutcome out;
  const auto& s = c.simulate_nfi;
  std::mt19937_64 rng(c.seed);
  std::normal_distribution<double> normal(0.0, s.init_scale);
  Eigen::VectorXd w(s.dim), mu(s.dim);
  for (int i = 0; i < s.dim; ++i) w(i) = normal(rng);
  for (int i = 0; i < s.dim; ++i) mu(i) = normal(rng);
  const auto trace = nfi_simulate(NFIState::make(w, mu, s.eta, s.eps, s.num_classes), s.steps);
  { auto os = open_out(dir, "nfi.csv", out.artifacts); write_nfi_csv(os, trace); }
  const auto eig = nfi_eigen(s.eta, s.eps, s.num_classes);
  const double fit = fitted_growth(trace);
  out.result = {{"lambda_plus", eig.lambda_plus},
                {"lambda_minus", eig.lambda_minus},
                {"fitted_growth", fit},
                {"final_cosine", trace.back().cosine},
                {"final_ratio_to_lambda1", trace.back().ratio_to_lambda1}};
  char buf[160];
  std::snprintf(buf, sizeof buf, "simulate-nfi: lambda_1 %.12g, fitted growth %.12g, final cos %.9f",
                eig.lambda_plus, fit, trace.back().cosine);
  out.message = buf;
  return out;
}

inline RunOutcome run_hessian_trace(const RunConfig& c, const std::filesystem::path& dir) {
  RunOutcome out;
  const auto& h = c.hessian_trace;
  ModelConfig mc;
  mc.num_classes = h.num_classes;
  mc.feature_dim = h.feature_dim;
  mc.samples = h.samples;
  mc.feature_init_std = h.feature_init_std;
  const Dataset data = make_balanced_ufm_dataset(h.num_classes, h.samples);
  Model model = Model::make(mc, c.seed);
  std::vector<HessianProbeRow> rows;
  TrainConfig tc;
  tc.steps = h.steps;
  tc.log_every = h.probe_every;
  tc.adam.lr = h.lr;
  tc.seed = c.seed;
  tc.probe_every = h.probe_every;
  tc.probe = [&](long t, const Model& m) { rows.push_back(probe_hessian(m, data, t, h.label_smoothing)); };
  MitigationConfig mit;
  mit.loss_precision = h.mode;
  mit.label_smoothing = h.label_smoothing;
  const TrainResult r = train(data, model, tc, mit);
  rows.push_back(probe_hessian(model, data, r.steps_run, h.label_smoothing));
  { auto os = open_out(dir, "hessian.csv", out.artifacts); write_hessian_csv(os, rows); }
  { auto os = open_out(dir, "trace.csv", out.artifacts); write_trace_csv(os, r.records); }
  out.result = {{"probes", rows.size()},
                {"final_lambda_max", rows.back().lambda_max},
                {"final_trace_Hz", rows.back().trace_hz},
                {"final_lambda_max_Hz", rows.back().lambda_max_hz},
                {"final_min_margin", rows.back().min_margin},
                {"ls_trace_limit", ls_trace_limit(h.label_smoothing, h.num_classes)}};
  if (r.diverged) out.result["divergence"] = r.divergence;
  out.exit_code = r.diverged ? kExitDiverged : kExitOk;
  char buf[160];
  std::snprintf(buf, sizeof buf, "hessian-trace: %zu probes, final lambda_max %.6g, trace(H_z) %.6g",
                rows.size(), rows.back().lambda_max, rows.back().trace_hz);
  out.message = buf;
  return out;
}

inline RunOutcome run_spike_estimate(const RunConfig& c, const std::filesystem::path& dir) {
  RunOutcome out;
  const auto& s = c.spike_estimate;
  const double value = spike_estimate(s.g_pre, s.g_re, s.beta1, s.beta2, s.eta, s.eps_adam);
  const double steady = spike_estimate(s.g_pre, s.g_pre, s.beta1, s.beta2, s.eta, s.eps_adam);
  out.result = {{"update", value},
                {"steady_update", steady},
                {"amplification", steady > 0.0 ? nlohmann::json(value / steady) : nlohmann::json(nullptr)}};
  { auto os = open_out(dir, "spike_estimate.json", out.artifacts); os << out.result.dump(2) << '\n'; }
  char buf[96];
  std::snprintf(buf, sizeof buf, "%.6g", value);
  out.message = buf;
  return out;
}

inline RunOutcome run_audit(const RunConfig& c, const std::filesystem::path& dir) {
  RunOutcome out;
  if (c.audit_logits.path.empty()) throw ConfigError("audit_logits.path", "no input file given");
  const AuditReport rep = audit_logits(c.audit_logits.path, c.audit_logits.mode);
  const auto j = to_json(rep);
  { auto os = open_out(dir, "audit.json", out.artifacts); os << j.dump(2) << '\n'; }
  out.result = {{"rows", rep.count()}, {"collapsed", rep.collapsed}, {"sc_fraction", j["sc_fraction"]}};
  out.message = summary(rep);
  return out;
}

inline RunOutcome run_make_dataset(const RunConfig& c, const std::filesystem::path& dir) {
  RunOutcome out;
  const auto& d = c.make_dataset;
  auto os = open_out(dir, "dataset.csv", out.artifacts);
  if (d.kind == "moddiv") {
    const auto ds = make_moddiv_dataset(d.p, d.train_frac, c.seed);
    std::vector<char> train(ds.size(), 0);
    for (int i : ds.train_idx) train[i] = 1;
    os << "index,a,b,label,split\n";
    for (int i = 0; i < ds.size(); ++i)
      os << i << ',' << ds.a[i] << ',' << ds.b[i] << ',' << ds.labels[i] << ','
         << (train[i] ? "train" : "test") << '\n';
    out.result = {{"samples", ds.size()}, {"train", ds.train_idx.size()}, {"classes", ds.num_classes}};
  } else {
    const auto& m = c.train.model;
    const auto ds = make_balanced_ufm_dataset(m.num_classes, m.samples);
    os << "index,label\n";
    for (int i = 0; i < ds.size(); ++i) os << i << ',' << ds.labels[i] << '\n';
    out.result = {{"samples", ds.size()}, {"classes", ds.num_classes}};
  }
  out.message = "make-dataset: " + out.result["samples"].dump() + " samples";
  return out;
}

}  // namespace detail

/// Runs one experiment into c.out and writes manifest.json. Library errors
/// propagate; the caller maps them to exit codes.
inline RunOutcome run(const RunConfig& c) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::filesystem::path dir(c.out);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw ConfigError("out", "cannot create '" + c.out + "': " + ec.message());

  RunOutcome out;
  switch (c.experiment) {
    case ExperimentKind::Train: out = detail::run_train(c, dir); break;
    case ExperimentKind::SimulateNFI: out = detail::run_simulate_nfi(c, dir); break;
    case ExperimentKind::HessianTrace: out = detail::run_hessian_trace(c, dir); break;
    case ExperimentKind::SpikeEstimate: out = detail::run_spike_estimate(c, dir); break;
    case ExperimentKind::AuditLogits: out = detail::run_audit(c, dir); break;
    case ExperimentKind::MakeDataset: out = detail::run_make_dataset(c, dir); break;
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  nlohmann::json manifest = {{"tool", "nfilab"},
                             {"version", kVersion},
                             {"experiment", to_string(c.experiment)},
                             {"config", to_json(c)},
                             {"wall_time_seconds", secs},
                             {"exit_code", out.exit_code},
                             {"artifacts", out.artifacts},
                             {"result", out.result}};
  std::ofstream os(dir / "manifest.json", std::ios::binary);
  if (!os) throw ConfigError("out", "cannot write manifest in '" + c.out + "'");
  os << manifest.dump(2) << '\n';
  return out;
}

}  // namespace nfilab
