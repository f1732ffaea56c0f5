#pragma once

#include <cmath>
#include <stdexcept>

#include <Eigen/Dense>

namespace nfilab {

struct AdamState {
  Eigen::VectorXd m;  // first moment
  Eigen::VectorXd v;  // second moment
  long t = 0;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double lr = 1e-3;
  bool bias_correction = true;

  void reset(Eigen::Index n) {
    m = Eigen::VectorXd::Zero(n);
    v = Eigen::VectorXd::Zero(n);
    t = 0;
  }
};

/// One Adam update. Returns the applied step Delta (params -= Delta).
inline Eigen::VectorXd adam_step(Eigen::Ref<Eigen::VectorXd> params,
                                 const Eigen::Ref<const Eigen::VectorXd>& grads, AdamState& s) {
  if (params.size() != grads.size()) throw std::invalid_argument("params/grads size mismatch");
  if (s.m.size() != params.size()) s.reset(params.size());

  ++s.t;
  s.m = s.beta1 * s.m + (1.0 - s.beta1) * grads;
  s.v = s.beta2 * s.v + (1.0 - s.beta2) * grads.cwiseAbs2();

  double c1 = 1.0, c2 = 1.0;
  if (s.bias_correction) {
    c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.t));
    c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.t));
  }
  Eigen::VectorXd delta =
      s.lr * (s.m.array() / c1) / ((s.v.array() / c2).sqrt() + s.eps);
  params -= delta;
  return delta;
}

/// Closed-form size of the Adam step when a gradient g_re re-emerges after
/// a long stretch of gradients g_pre, with no bias correction:
///   m = b1 g_pre + (1 - b1) g_re,  sqrt(v) = sqrt(b2 g_pre^2 + (1 - b2) g_re^2),
///   step = eta m / (sqrt(v) + eps_adam).
inline double spike_estimate(double g_pre, double g_re, double beta1, double beta2, double eta,
                             double eps_adam) {
  if (g_pre < 0.0 || g_re < 0.0 || !(eta > 0.0) || !(eps_adam > 0.0))
    throw std::invalid_argument("spike_estimate expects non-negative gradients and positive eta, eps");
  const double m = beta1 * g_pre + (1.0 - beta1) * g_re;
  const double root_v = std::sqrt(beta2 * g_pre * g_pre + (1.0 - beta2) * g_re * g_re);
  return eta * m / (root_v + eps_adam);
}

}  // namespace nfilab
