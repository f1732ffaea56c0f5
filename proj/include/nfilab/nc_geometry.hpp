#pragma once

// Neural Collapse configurations: simplex ETFs, orthogonal (ReLU-style)
// class means with self-dual classifiers, and their verification.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "nfilab/errors.hpp"

namespace nfilab {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// K vectors (rows) of equal norm `scale` with pairwise inner products
/// -scale^2 / (K - 1), summing to zero.
struct ETFFrame {
  Matrix vectors;  // K x d
  double scale = 1.0;
};

inline ETFFrame build_simplex_etf(int K, int d, double scale) {
  if (K < 2) throw DimensionTooSmall("a simplex ETF needs K >= 2");
  if (d < K - 1)
    throw DimensionTooSmall("simplex ETF with K=" + std::to_string(K) + " needs d >= " +
                            std::to_string(K - 1) + ", got " + std::to_string(d));
  if (!(scale > 0.0)) throw std::invalid_argument("ETF scale must be positive");

  // Centered standard basis e_k - 1/K, expressed in the Helmert basis of
  // the hyperplane orthogonal to the all-ones vector.
  ETFFrame frame;
  frame.scale = scale;
  frame.vectors = Matrix::Zero(K, d);
  for (int j = 1; j < K; ++j) {
    const double norm = std::sqrt(static_cast<double>(j) * (j + 1));
    for (int k = 0; k < K; ++k) {
      double coord = 0.0;
      if (k < j) coord = 1.0 / norm;
      else if (k == j) coord = -static_cast<double>(j) / norm;
      frame.vectors(k, j - 1) = coord;
    }
  }
  const double raw_norm = std::sqrt(static_cast<double>(K - 1) / K);
  frame.vectors *= scale / raw_norm;
  return frame;
}

/// Class means, classifier rows and their global means and centered parts.
struct NCState {
  Matrix class_means;     // K x d, uncentered mu_k
  Vector global_mean;     // mu_G
  Matrix centered_means;  // mu_k* = mu_k - mu_G
  Matrix classifier;      // K x d, W_k
  Vector classifier_mean; // W_G
  Matrix centered_rows;   // W_k* = W_k - W_G

  int K() const { return static_cast<int>(class_means.rows()); }
  int d() const { return static_cast<int>(class_means.cols()); }

  static NCState from(Matrix means, Matrix classifier) {
    if (means.rows() != classifier.rows() || means.cols() != classifier.cols())
      throw std::invalid_argument("class means and classifier must both be K x d");
    NCState s;
    s.class_means = std::move(means);
    s.classifier = std::move(classifier);
    s.refresh();
    return s;
  }

  /// Recompute the derived members from class_means and classifier.
  void refresh() {
    global_mean = class_means.colwise().mean().transpose();
    centered_means = class_means.rowwise() - global_mean.transpose();
    classifier_mean = classifier.colwise().mean().transpose();
    centered_rows = classifier.rowwise() - classifier_mean.transpose();
  }

  /// Moves every classifier row by v, i.e. W_G <- W_G + v.
  void shift_classifier_mean(const Vector& v) {
    classifier.rowwise() += v.transpose();
    refresh();
  }
};

/// Haar-distributed orthogonal d x d matrix.
inline Matrix random_orthogonal(int d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  Matrix g(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) g(i, j) = normal(rng);
  Eigen::HouseholderQR<Matrix> qr(g);
  Matrix q = qr.householderQ();
  // Sign fix so the distribution is uniform over O(d).
  const Matrix r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (int j = 0; j < d; ++j)
    if (r(j, j) < 0) q.col(j) *= -1.0;
  return q;
}

/// Mutually orthogonal class means of norm R on the first K standard axes,
/// classifier rows aligned with the centered means at norm `w_scale`, and
/// W_G = 0. A rotation seed applies one orthogonal map to the whole state.
inline NCState build_orthogonal_nc_state(int K, int d, double R, double w_scale,
                                         std::optional<std::uint64_t> rotation_seed = {}) {
  if (K < 2) throw DimensionTooSmall("need K >= 2 classes");
  if (d < K)
    throw DimensionTooSmall("orthogonal class means need d >= K, got d=" + std::to_string(d) +
                            " K=" + std::to_string(K));
  if (!(R > 0.0) || !(w_scale > 0.0)) throw std::invalid_argument("norms must be positive");

  Matrix means = Matrix::Zero(K, d);
  for (int k = 0; k < K; ++k) means(k, k) = R;

  // mu_k* = R (e_k - 1/K), with norm R sqrt((K-1)/K) for every k.
  const Vector mu_g = means.colwise().mean().transpose();
  const double centered_norm = R * std::sqrt(static_cast<double>(K - 1) / K);
  Matrix classifier = (means.rowwise() - mu_g.transpose()) * (w_scale / centered_norm);

  if (rotation_seed) {
    const Matrix q = random_orthogonal(d, *rotation_seed);
    means = means * q.transpose();
    classifier = classifier * q.transpose();
  }
  return NCState::from(std::move(means), std::move(classifier));
}

struct NCReport {
  double centering = 0.0;       // |mean identities| for mu and W
  double etf_gram = 0.0;        // centered means vs simplex ETF Gram
  double self_duality = 0.0;    // NC3': 1 - cos(W_k*, mu_k*)
  double self_duality_uncentered = 0.0;  // NC3: 1 - cos(W_k, mu_k*)
  double mu_g_orthogonality = 0.0;       // |cos(mu_G, mu_k*)|
  std::optional<double> within_class = {};  // NC1, only with sample features
  double tol = 0.0;

  /// Centering, ETF Gram, NC3' and mu_G orthogonality (and NC1 when
  /// present) all within tolerance.
  bool passes() const {
    bool ok = centering <= tol && etf_gram <= tol && self_duality <= tol &&
              mu_g_orthogonality <= tol;
    if (within_class) ok = ok && *within_class <= tol;
    return ok;
  }
  bool passes_uncentered_nc3() const { return self_duality_uncentered <= tol; }
};

namespace detail {
inline double cosine(const Vector& a, const Vector& b) {
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return a.dot(b) / (na * nb);
}
}  // namespace detail

/// Measures how far `state` is from Neural Collapse. `features` (n x d)
/// with `labels` enables the NC1 within-class variability check, reported
/// as trace(Sigma_W) / trace(Sigma_B).
inline NCReport verify_nc(const NCState& state, double tol, const Matrix* features = nullptr,
                          const std::vector<int>* labels = nullptr) {
  NCReport rep;
  rep.tol = tol;
  const int K = state.K();
  const double scale_mu = std::max(1.0, state.class_means.norm());
  const double scale_w = std::max(1.0, state.classifier.norm());

  const Vector mu_g = state.class_means.colwise().mean().transpose();
  const Vector w_g = state.classifier.colwise().mean().transpose();
  rep.centering = std::max({(mu_g - state.global_mean).norm() / scale_mu,
                            state.centered_means.colwise().sum().norm() / scale_mu,
                            (w_g - state.classifier_mean).norm() / scale_w,
                            state.centered_rows.colwise().sum().norm() / scale_w});

  const Matrix gram = state.centered_means * state.centered_means.transpose();
  const double mean_sq = gram.diagonal().mean();
  if (mean_sq > 0.0) {
    for (int p = 0; p < K; ++p)
      for (int q = 0; q < K; ++q) {
        const double target = p == q ? 1.0 : -1.0 / (K - 1);
        rep.etf_gram = std::max(rep.etf_gram, std::abs(gram(p, q) / mean_sq - target));
      }
  } else {
    rep.etf_gram = std::numeric_limits<double>::infinity();
  }

  for (int k = 0; k < K; ++k) {
    const Vector mu_star = state.centered_means.row(k).transpose();
    rep.self_duality = std::max(
        rep.self_duality, 1.0 - detail::cosine(state.centered_rows.row(k).transpose(), mu_star));
    rep.self_duality_uncentered = std::max(
        rep.self_duality_uncentered, 1.0 - detail::cosine(state.classifier.row(k).transpose(), mu_star));
    rep.mu_g_orthogonality =
        std::max(rep.mu_g_orthogonality, std::abs(detail::cosine(state.global_mean, mu_star)));
  }

  if (features && labels) {
    double within = 0.0;
    for (Eigen::Index i = 0; i < features->rows(); ++i)
      within += (features->row(i) - state.class_means.row((*labels)[i])).squaredNorm();
    within /= static_cast<double>(features->rows());
    const double between = state.centered_means.rowwise().squaredNorm().mean();
    rep.within_class = between > 0.0 ? within / between : std::numeric_limits<double>::infinity();
  }
  return rep;
}

/// Residual probability on the K - 1 incorrect classes of an NC sample:
/// (K - 1) exp(-K/(K-1) * |W*| |mu*|).
inline double residual_mass(double w_star_norm, double mu_star_norm, int K) {
  if (K < 2) throw DimensionTooSmall("residual mass needs K >= 2");
  if (w_star_norm < 0.0 || mu_star_norm < 0.0) throw std::invalid_argument("norms must be >= 0");
  return (K - 1) * std::exp(-(static_cast<double>(K) / (K - 1)) * w_star_norm * mu_star_norm);
}

// JSON: {"K", "d", "class_means": [[...]], "classifier": [[...]], plus the
// derived means for readers that do not recompute them}.

inline nlohmann::json matrix_to_json(const Matrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline Matrix matrix_from_json(const nlohmann::json& j, Eigen::Index rows, Eigen::Index cols,
                               const std::string& field) {
  if (!j.is_array() || static_cast<Eigen::Index>(j.size()) != rows)
    throw ConfigError(field, "expected " + std::to_string(rows) + " rows");
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const auto& row = j[i];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols)
      throw ConfigError(field + "[" + std::to_string(i) + "]",
                        "expected " + std::to_string(cols) + " entries");
    for (Eigen::Index c = 0; c < cols; ++c) m(i, c) = row[c].get<double>();
  }
  return m;
}

inline nlohmann::json vector_to_json(const Vector& v) {
  nlohmann::json out = nlohmann::json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v(i));
  return out;
}

inline nlohmann::json to_json(const NCState& s) {
  return {{"K", s.K()},
          {"d", s.d()},
          {"class_means", matrix_to_json(s.class_means)},
          {"classifier", matrix_to_json(s.classifier)},
          {"global_mean", vector_to_json(s.global_mean)},
          {"classifier_mean", vector_to_json(s.classifier_mean)}};
}

inline NCState nc_state_from_json(const nlohmann::json& j) {
  if (!j.contains("K") || !j.contains("d")) throw ConfigError("K", "NC state must declare K and d");
  const int K = j.at("K").get<int>();
  const int d = j.at("d").get<int>();
  return NCState::from(matrix_from_json(j.at("class_means"), K, d, "class_means"),
                       matrix_from_json(j.at("classifier"), K, d, "classifier"));
}

}  // namespace nfilab
