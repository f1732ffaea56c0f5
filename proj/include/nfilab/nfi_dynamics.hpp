#pragma once

// The coupled (W_G, mu_G) linear system driven by Softmax Collapse:
//   W_G'  = W_G  - alpha * mu_G,   alpha = eta * eps / K
//   mu_G' = mu_G - beta  * W_G,    beta  = eta * eps
// Both updates read the pre-step state.

#include <cmath>
#include <functional>
#include <ostream>
#include <vector>

#include <Eigen/Dense>

#include "nfilab/errors.hpp"

namespace nfilab {

struct NFIState {
  Eigen::VectorXd w_g;
  Eigen::VectorXd mu_g;
  double alpha = 0.0;
  double beta = 0.0;
  long step = 0;

  /// alpha = eta*eps/K, beta = eta*eps.
  static NFIState make(Eigen::VectorXd w_g, Eigen::VectorXd mu_g, double eta, double eps, int K) {
    if (K < 2) throw DimensionTooSmall("NFI dynamics need K >= 2");
    if (!(eta > 0.0) || !(eps > 0.0)) throw std::invalid_argument("eta and eps must be positive");
    if (w_g.size() != mu_g.size()) throw std::invalid_argument("w_g and mu_g dimensions differ");
    return {std::move(w_g), std::move(mu_g), eta * eps / K, eta * eps, 0};
  }
};

struct EigenSolution {
  double lambda_plus = 1.0;
  double lambda_minus = 1.0;
  double ratio = 0.0;  // W_G = -ratio * mu_G on the growing mode
};

inline NFIState nfi_step(const NFIState& s) {
  NFIState next = s;
  next.w_g = s.w_g - s.alpha * s.mu_g;
  next.mu_g = s.mu_g - s.beta * s.w_g;
  ++next.step;
  return next;
}

/// Eigenvalues 1 +- sqrt(alpha*beta) of the block matrix [[I, -aI], [-bI, I]].
inline EigenSolution nfi_eigen(double alpha, double beta) {
  if (!(alpha > 0.0) || !(beta > 0.0)) throw std::invalid_argument("alpha and beta must be positive");
  const double root = std::sqrt(alpha * beta);
  return {1.0 + root, 1.0 - root, std::sqrt(alpha / beta)};
}

inline EigenSolution nfi_eigen(double eta, double eps, int K) {
  if (K < 2) throw DimensionTooSmall("NFI dynamics need K >= 2");
  if (!(eta > 0.0) || !(eps > 0.0)) throw std::invalid_argument("eta and eps must be positive");
  const double root = eta * eps / std::sqrt(static_cast<double>(K));
  return {1.0 + root, 1.0 - root, 1.0 / std::sqrt(static_cast<double>(K))};
}

/// Dense 2d x 2d update matrix acting on [W_G; mu_G].
inline Eigen::MatrixXd nfi_block_matrix(double alpha, double beta, int d) {
  Eigen::MatrixXd M = Eigen::MatrixXd::Identity(2 * d, 2 * d);
  M.topRightCorner(d, d) = -alpha * Eigen::MatrixXd::Identity(d, d);
  M.bottomLeftCorner(d, d) = -beta * Eigen::MatrixXd::Identity(d, d);
  return M;
}

struct NFITraceRow {
  long step = 0;
  double w_norm = 0.0;
  double mu_norm = 0.0;
  double cosine = 0.0;
  double growth = 0.0;            // |u_t| / |u_{t-1}| for the stacked state
  double ratio_to_lambda1 = 0.0;  // growth / lambda_plus
};

namespace detail {
inline NFITraceRow nfi_row(const NFIState& s, double prev_norm, double lambda1) {
  NFITraceRow row;
  row.step = s.step;
  row.w_norm = s.w_g.norm();
  row.mu_norm = s.mu_g.norm();
  const double denom = row.w_norm * row.mu_norm;
  row.cosine = denom > 0.0 ? s.w_g.dot(s.mu_g) / denom : 0.0;
  const double norm = std::hypot(row.w_norm, row.mu_norm);
  row.growth = prev_norm > 0.0 ? norm / prev_norm : 0.0;
  row.ratio_to_lambda1 = row.growth / lambda1;
  return row;
}
}  // namespace detail

/// Runs `steps` updates with constant alpha and beta; row t describes the
/// state after update t.
inline std::vector<NFITraceRow> nfi_simulate(NFIState state, long steps) {
  if (steps < 1) throw std::invalid_argument("steps must be >= 1");
  const double lambda1 = nfi_eigen(state.alpha, state.beta).lambda_plus;
  std::vector<NFITraceRow> trace;
  trace.reserve(static_cast<std::size_t>(steps));
  double prev = std::hypot(state.w_g.norm(), state.mu_g.norm());
  for (long t = 0; t < steps; ++t) {
    state = nfi_step(state);
    trace.push_back(detail::nfi_row(state, prev, lambda1));
    prev = std::hypot(trace.back().w_norm, trace.back().mu_norm);
  }
  return trace;
}

/// Variant with a time-varying residual mass eps(t); alpha and beta are
/// recomputed from eta, K and eps(t) before each update. ratio_to_lambda1
/// is taken against the instantaneous lambda_plus.
inline std::vector<NFITraceRow> nfi_simulate_schedule(Eigen::VectorXd w_g, Eigen::VectorXd mu_g,
                                                      double eta, int K,
                                                      const std::function<double(long)>& eps_at,
                                                      long steps) {
  if (steps < 1) throw std::invalid_argument("steps must be >= 1");
  NFIState state = NFIState::make(std::move(w_g), std::move(mu_g), eta, eps_at(0), K);
  std::vector<NFITraceRow> trace;
  trace.reserve(static_cast<std::size_t>(steps));
  double prev = std::hypot(state.w_g.norm(), state.mu_g.norm());
  for (long t = 0; t < steps; ++t) {
    const double eps = eps_at(t);
    state.alpha = eta * eps / K;
    state.beta = eta * eps;
    const double lambda1 = nfi_eigen(eta, eps, K).lambda_plus;
    state = nfi_step(state);
    trace.push_back(detail::nfi_row(state, prev, lambda1));
    prev = std::hypot(trace.back().w_norm, trace.back().mu_norm);
  }
  return trace;
}

/// |dh_parallel| / |dh_perp| for a collapsed sample: the drift step
/// eta*eps*|W_G| against the residual interference of K - 1 simplex rows
/// weighted by eps/(K-1) each, sqrt(K-1) * eta*eps/(K-1) * |W*|.
/// `parallel_step` is the eta*eps factor; it cancels in the ratio.
inline double condensation_ratio(double parallel_step, double w_g_norm, double w_star_norm, int K) {
  if (K < 2) throw DimensionTooSmall("condensation ratio needs K >= 2");
  if (!(parallel_step > 0.0) || !(w_star_norm > 0.0) || w_g_norm < 0.0)
    throw std::invalid_argument("condensation ratio needs positive inputs");
  const double parallel = parallel_step * w_g_norm;
  const double perp = std::sqrt(static_cast<double>(K - 1)) * (parallel_step / (K - 1)) * w_star_norm;
  return parallel / perp;
}

inline bool in_condensation_regime(double ratio) { return ratio > 1.0; }

inline void write_nfi_csv(std::ostream& os, const std::vector<NFITraceRow>& trace) {
  os << "step,w_norm,mu_norm,cosine,ratio_to_lambda1\n";
  os.precision(17);
  for (const auto& r : trace)
    os << r.step << ',' << r.w_norm << ',' << r.mu_norm << ',' << r.cosine << ','
       << r.ratio_to_lambda1 << '\n';
}

}  // namespace nfilab
