#pragma once

// Logit Hessian of softmax cross-entropy and the full parameter Hessian of
// the unconstrained feature model, H = J^T H_z J + sum_k g_k d2z_k.

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "nfilab/dataset.hpp"
#include "nfilab/errors.hpp"
#include "nfilab/model.hpp"

namespace nfilab {

inline constexpr Eigen::Index kDenseHessianLimit = 2000;

/// diag(yhat) - yhat yhat^T.
inline Eigen::MatrixXd logit_hessian(const Eigen::Ref<const Eigen::VectorXd>& yhat) {
  if (yhat.size() < 1) throw NotAProbabilityVector("empty vector");
  for (Eigen::Index k = 0; k < yhat.size(); ++k)
    if (!std::isfinite(yhat(k)) || yhat(k) < 0.0)
      throw NotAProbabilityVector("entry " + std::to_string(k) + " is negative or not finite");
  if (std::abs(yhat.sum() - 1.0) > 1e-10)
    throw NotAProbabilityVector("entries sum to " + std::to_string(yhat.sum()));
  Eigen::MatrixXd h = -yhat * yhat.transpose();
  h.diagonal() += yhat;
  return h;
}

/// Limiting trace of H_z at the label-smoothing optimum.
inline double ls_trace_limit(double alpha, int K) {
  if (K < 2) throw DimensionTooSmall("label smoothing needs K >= 2");
  if (!(alpha >= 0.0 && alpha < 1.0)) throw std::invalid_argument("alpha must lie in [0, 1)");
  return alpha * (2.0 - alpha * (1.0 + 1.0 / (K - 1)));
}

/// Soft target: 1 - alpha on the label, alpha / (K - 1) elsewhere.
inline Eigen::VectorXd smoothed_target(int label, int K, double alpha) {
  Eigen::VectorXd y = Eigen::VectorXd::Constant(K, alpha / (K - 1));
  y(label) = 1.0 - alpha;
  return y;
}

/// Softmax in double via the max shift.
inline Eigen::VectorXd softmax(const Eigen::Ref<const Eigen::VectorXd>& z) {
  Eigen::VectorXd e = (z.array() - z.maxCoeff()).exp();
  return e / e.sum();
}

/// Largest algebraic eigenvalue by power iteration from a fixed start.
/// When the dominant eigenvalue is negative the matrix is shifted by it
/// and iterated again.
inline double lambda_max(const Eigen::Ref<const Eigen::MatrixXd>& a, double tol = 1e-10,
                         int max_iter = 200000) {
  if (a.rows() != a.cols()) throw std::invalid_argument("lambda_max needs a square matrix");
  const Eigen::Index n = a.rows();
  if (n == 0) throw DimensionTooSmall("empty matrix");

  auto power = [&](double shift) {
    std::mt19937_64 rng(0x5eed);
    std::normal_distribution<double> normal;
    Eigen::VectorXd v(n);
    for (Eigen::Index i = 0; i < n; ++i) v(i) = normal(rng);
    v.normalize();
    double rho = 0.0;
    int stable = 0;
    for (int it = 0; it < max_iter; ++it) {
      Eigen::VectorXd w = a * v - shift * v;
      const double next = v.dot(w);
      const double norm = w.norm();
      if (norm == 0.0) return 0.0;
      v = w / norm;
      const double scale = std::max(std::abs(next), std::numeric_limits<double>::min());
      stable = std::abs(next - rho) <= tol * scale ? stable + 1 : 0;
      rho = next;
      if (stable >= 3) return rho;
    }
    throw NoConvergence("power iteration did not converge in " + std::to_string(max_iter) +
                        " iterations");
  };

  const double dominant = power(0.0);
  if (dominant >= 0.0) return dominant;
  return power(dominant) + dominant;
}

/// Dense symmetric eigensolve; reference for lambda_max.
inline double lambda_max_dense(const Eigen::Ref<const Eigen::MatrixXd>& a) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(a, Eigen::EigenvaluesOnly);
  return es.eigenvalues().maxCoeff();
}

struct AssembledHessian {
  Eigen::MatrixXd full;  // GGN + residual, parameter order of Model::theta
  Eigen::MatrixXd ggn;   // J^T H_z J
  Eigen::MatrixXd residual;  // sum_k g_k d2 z_k
};

/// Hessian of the batch-mean cross-entropy of a UFM over its training
/// samples, computed in double. `yhat_override` (n x K, one row per
/// training sample) replaces the softmax output in both terms;
/// `smoothing` selects the soft target for the gradient term.
inline AssembledHessian assemble_ufm_hessian(const Model& model, const Dataset& data,
                                             const Eigen::MatrixXd* yhat_override = nullptr,
                                             double smoothing = 0.0) {
  if (model.kind() != ModelKind::UFM) throw std::invalid_argument("Hessian assembly needs a UFM");
  const Eigen::Index P = model.theta().size();
  if (P > kDenseHessianLimit)
    throw TooLarge("UFM has " + std::to_string(P) + " parameters, dense limit is " +
                   std::to_string(kDenseHessianLimit));
  const int K = model.num_classes();
  const int d = model.feature_dim();
  const auto& idx = data.train_idx;
  const Eigen::Index n = static_cast<Eigen::Index>(idx.size());
  if (yhat_override && (yhat_override->rows() != n || yhat_override->cols() != K))
    throw std::invalid_argument("yhat_override must be n x K");

  const ConstRowMap H = model.block(model.features_block());
  const ConstRowMap W = model.block(model.classifier_block());
  const auto& fb = model.blocks()[model.features_block()];
  const auto& cb = model.blocks()[model.classifier_block()];
  const int bias = model.bias_block();

  AssembledHessian out;
  out.ggn = Eigen::MatrixXd::Zero(P, P);
  out.residual = Eigen::MatrixXd::Zero(P, P);

  // Local parameter list per sample: h_i (d), W (K*d), b (K).
  const Eigen::Index L = d + K * d + (bias >= 0 ? K : 0);
  std::vector<Eigen::Index> cols(static_cast<std::size_t>(L));
  Eigen::MatrixXd J(K, L);
  const double inv_n = 1.0 / static_cast<double>(n);

  for (Eigen::Index i = 0; i < n; ++i) {
    const int s = idx[i];
    const int label = data.labels[s];
    const Eigen::VectorXd h = H.row(s).transpose();
    Eigen::VectorXd z = W * h;
    if (bias >= 0) z += model.block(bias).row(0).transpose();
    const Eigen::VectorXd yhat = yhat_override ? Eigen::VectorXd(yhat_override->row(i).transpose())
                                               : softmax(z);
    const Eigen::VectorXd g = yhat - smoothed_target(label, K, smoothing);

    Eigen::Index c = 0;
    for (int j = 0; j < d; ++j) cols[c++] = fb.offset + static_cast<Eigen::Index>(s) * d + j;
    for (int k = 0; k < K; ++k)
      for (int j = 0; j < d; ++j) cols[c++] = cb.offset + static_cast<Eigen::Index>(k) * d + j;
    if (bias >= 0)
      for (int k = 0; k < K; ++k) cols[c++] = model.blocks()[bias].offset + k;

    J.setZero();
    J.leftCols(d) = Eigen::MatrixXd(W);
    for (int k = 0; k < K; ++k) J.block(k, d + k * d, 1, d) = h.transpose();
    if (bias >= 0) J.rightCols(K).setIdentity();

    // logit_hessian validates the row only when it is user supplied.
    Eigen::MatrixXd hz = -yhat * yhat.transpose();
    hz.diagonal() += yhat;
    if (yhat_override) hz = logit_hessian(yhat);
    const Eigen::MatrixXd local = J.transpose() * hz * J;
    for (Eigen::Index p = 0; p < L; ++p)
      for (Eigen::Index q = 0; q < L; ++q) out.ggn(cols[p], cols[q]) += inv_n * local(p, q);

    // d2 z_k / dW_kj dh_j = 1.
    for (int k = 0; k < K; ++k)
      for (int j = 0; j < d; ++j) {
        const Eigen::Index wp = cols[d + k * d + j];
        const Eigen::Index hp = cols[j];
        out.residual(wp, hp) += inv_n * g(k);
        out.residual(hp, wp) += inv_n * g(k);
      }
  }
  out.full = out.ggn + out.residual;
  return out;
}

struct HessianProbeRow {
  long step = 0;
  double lambda_max = 0.0;     // of the assembled parameter Hessian
  double trace_hz = 0.0;       // mean over samples of trace(H_z) = 1 - |yhat|^2
  double lambda_max_hz = 0.0;  // mean over samples of lambda_max(H_z)
  double min_margin = 0.0;
};

/// Logit-Hessian statistics and the assembled Hessian's top eigenvalue at
/// the current parameters, all in double.
inline HessianProbeRow probe_hessian(const Model& model, const Dataset& data, long step,
                                     double smoothing = 0.0) {
  HessianProbeRow row;
  row.step = step;
  const int K = model.num_classes();
  const RowMatrix h = model.features(data, data.train_idx);
  RowMatrix z = h * model.classifier().transpose();
  if (model.bias_block() >= 0) z.rowwise() += model.block(model.bias_block()).row(0);
  row.min_margin = std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const Eigen::VectorXd zi = z.row(i).transpose();
    const Eigen::VectorXd yhat = softmax(zi);
    row.trace_hz += 1.0 - yhat.squaredNorm();
    row.lambda_max_hz += lambda_max_dense(logit_hessian(yhat));
    const std::vector<double> zv(zi.data(), zi.data() + K);
    row.min_margin = std::min(row.min_margin, logit_margin(zv, data.labels[data.train_idx[i]]));
  }
  row.trace_hz /= static_cast<double>(z.rows());
  row.lambda_max_hz /= static_cast<double>(z.rows());
  row.lambda_max = lambda_max_dense(assemble_ufm_hessian(model, data, nullptr, smoothing).full);
  return row;
}

inline void write_hessian_csv(std::ostream& os, const std::vector<HessianProbeRow>& rows) {
  os << "step,lambda_max,trace_Hz,min_margin,lambda_max_Hz\n";
  os.precision(17);
  for (const auto& r : rows)
    os << r.step << ',' << r.lambda_max << ',' << r.trace_hz << ',' << r.min_margin << ','
       << r.lambda_max_hz << '\n';
}

}  // namespace nfilab
