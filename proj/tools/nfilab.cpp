// nfilab: command-line front end. Each subcommand resolves a RunConfig from
// --config plus flag overrides and hands it to nfilab::run.

#include <CLI11.hpp>

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

#include "nfilab/run.hpp"

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> mode;
  std::optional<long> steps;
  std::vector<std::string> mitigations;
  std::optional<long> log_every;
};

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep))
    if (!item.empty()) parts.push_back(item);
  return parts;
}

nfilab::PrecisionMode parse_mode_flag(const std::string& s) {
  try {
    return nfilab::PrecisionMode::parse(s);
  } catch (const nfilab::InvalidMode& e) {
    throw nfilab::ConfigError("--mode", e.what());
  }
}

nfilab::RunConfig resolve(nfilab::ExperimentKind kind, const Common& f) {
  nfilab::RunConfig c = f.config.empty() ? nfilab::RunConfig{} : nfilab::load_run_config(f.config);
  c.experiment = kind;
  if (f.seed) c.seed = *f.seed;
  if (f.out) c.out = *f.out;
  using K = nfilab::ExperimentKind;
  if (f.mode) {
    const auto m = parse_mode_flag(*f.mode);
    switch (kind) {
      case K::Train: c.train.mitigations.loss_precision = m; break;
      case K::HessianTrace: c.hessian_trace.mode = m; break;
      case K::AuditLogits: c.audit_logits.mode = m; break;
      default: throw nfilab::ConfigError("--mode", "not used by " + nfilab::to_string(kind));
    }
  }
  if (f.steps) {
    if (*f.steps < 1) throw nfilab::ConfigError("--steps", "must be >= 1");
    switch (kind) {
      case K::Train: c.train.train.steps = *f.steps; break;
      case K::SimulateNFI: c.simulate_nfi.steps = *f.steps; break;
      case K::HessianTrace: c.hessian_trace.steps = *f.steps; break;
      default: throw nfilab::ConfigError("--steps", "not used by " + nfilab::to_string(kind));
    }
  }
  if (f.log_every) {
    if (*f.log_every < 1) throw nfilab::ConfigError("--log-every", "must be >= 1");
    if (kind == K::Train) c.train.train.log_every = *f.log_every;
    else if (kind == K::HessianTrace) c.hessian_trace.probe_every = *f.log_every;
    else throw nfilab::ConfigError("--log-every", "not used by " + nfilab::to_string(kind));
  }
  if (!f.mitigations.empty() && kind != K::Train)
    throw nfilab::ConfigError("--mitigation", "only train accepts mitigations");
  for (const auto& m : f.mitigations)
    for (const auto& name : split(m, ',')) nfilab::apply_mitigation(name, c.train.mitigations);
  c.train.mitigations.validate();
  return c;
}

int report(const nfilab::RunOutcome& r) {
  std::cout << r.message << '\n';
  return r.exit_code;
}

template <class F>
int guarded(F&& body) {
  try {
    return body();
  } catch (const nfilab::ConfigError& e) {
    std::cerr << "nfilab: config error: " << e.what() << '\n';
    return nfilab::kExitConfig;
  } catch (const nfilab::ParseError& e) {
    std::cerr << "nfilab: parse error: " << e.what() << '\n';
    return nfilab::kExitConfig;
  } catch (const nfilab::InconsistentK& e) {
    std::cerr << "nfilab: parse error: " << e.what() << '\n';
    return nfilab::kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "nfilab: " << e.what() << '\n';
    return nfilab::kExitFailure;
  }
}

void add_common(CLI::App* sub, Common& f, bool with_mitigation) {
  sub->add_option("--config", f.config, "JSON run config (a manifest.json also works)");
  sub->add_option("--seed", f.seed, "Seed for init, split and batch order");
  sub->add_option("--out", f.out, "Output directory");
  sub->add_option("--mode", f.mode, "Precision mode: fp32, fp64, bf16 or custom:p,E");
  sub->add_option("--steps", f.steps, "Number of steps");
  sub->add_option("--log-every", f.log_every, "Trace or probe interval");
  if (with_mitigation)
    sub->add_option("--mitigation", f.mitigations, "Comma-separated mitigations")
        ->description("Comma-separated mitigations: none, fp64, zero-sum, eps-adam, batch-center, "
                      "layer-norm, label-smoothing, gd-switch, logit-clamp, bias");
}

/// Runs one training per variant (a '+'-joined mitigation set) on a small
/// thread pool, each into <out>/<variant>.
int run_sweep(const Common& f, const std::vector<std::string>& variants) {
  if (variants.empty()) throw nfilab::ConfigError("--variants", "no variants given");
  const nfilab::RunConfig base = resolve(nfilab::ExperimentKind::Train, f);
  std::vector<nfilab::RunConfig> jobs;
  for (const auto& v : variants) {
    nfilab::RunConfig c = base;
    for (const auto& name : split(v, '+')) nfilab::apply_mitigation(name, c.train.mitigations);
    c.train.mitigations.validate();
    c.out = (std::filesystem::path(base.out) / v).string();
    jobs.push_back(c);
  }
  unsigned threads = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("NFI_LAB_THREADS")) {
    const long n = std::strtol(env, nullptr, 10);
    if (n >= 1) threads = static_cast<unsigned>(n);
  }
  threads = std::min<unsigned>(threads, static_cast<unsigned>(jobs.size()));

  std::atomic<std::size_t> next{0};
  std::vector<int> codes(jobs.size(), 0);
  std::vector<std::string> lines(jobs.size());
  std::mutex err_mu;
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      try {
        const auto r = nfilab::run(jobs[i]);
        codes[i] = r.exit_code;
        lines[i] = variants[i] + ": " + r.message;
      } catch (const std::exception& e) {
        std::lock_guard lock(err_mu);
        std::cerr << "nfilab: " << variants[i] << ": " << e.what() << '\n';
        codes[i] = nfilab::kExitFailure;
        lines[i] = variants[i] + ": failed";
      }
    }
  };
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < threads; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  for (const auto& l : lines) std::cout << l << '\n';
  return *std::max_element(codes.begin(), codes.end());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Finite-precision training-dynamics lab"};
  app.set_version_flag("--version", std::string(nfilab::kVersion));
  app.require_subcommand(1);

  Common train_f, nfi_f, hess_f, spike_f, audit_f, data_f, sweep_f;
  auto* train = app.add_subcommand("train", "Train a UFM or MLP and record the trace");
  add_common(train, train_f, true);
  auto* nfi = app.add_subcommand("simulate-nfi", "Iterate the linearized feature-inflation map");
  add_common(nfi, nfi_f, false);
  auto* hess = app.add_subcommand("hessian-trace", "Probe Hessian sharpness along a small UFM run");
  add_common(hess, hess_f, false);
  auto* spike = app.add_subcommand("spike-estimate", "Adam update size after a gradient re-emerges");
  add_common(spike, spike_f, false);
  auto* audit = app.add_subcommand("audit-logits", "Softmax Collapse audit of a logit dump");
  add_common(audit, audit_f, false);
  std::string audit_path;
  audit->add_option("input", audit_path, "CSV (label,z0,...) or JSONL ({\"logits\":[...],\"label\":r})");
  auto* data = app.add_subcommand("make-dataset", "Write the dataset and split as CSV");
  add_common(data, data_f, false);
  auto* sweep = app.add_subcommand("sweep", "Train one run per mitigation variant in parallel");
  add_common(sweep, sweep_f, true);
  std::string variants = "none,fp64,zero-sum,eps-adam,batch-center,layer-norm,label-smoothing,logit-clamp,bias";
  sweep->add_option("--variants", variants, "Comma-separated variants; '+' combines mitigations")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : nfilab::kExitConfig;
  }

  using K = nfilab::ExperimentKind;
  return guarded([&] {
    if (*train) return report(nfilab::run(resolve(K::Train, train_f)));
    if (*nfi) return report(nfilab::run(resolve(K::SimulateNFI, nfi_f)));
    if (*hess) return report(nfilab::run(resolve(K::HessianTrace, hess_f)));
    if (*spike) return report(nfilab::run(resolve(K::SpikeEstimate, spike_f)));
    if (*data) return report(nfilab::run(resolve(K::MakeDataset, data_f)));
    if (*audit) {
      auto c = resolve(K::AuditLogits, audit_f);
      if (!audit_path.empty()) c.audit_logits.path = audit_path;
      return report(nfilab::run(c));
    }
    return run_sweep(sweep_f, split(variants, ','));
  });
}
