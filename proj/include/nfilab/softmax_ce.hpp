#pragma once

// Softmax cross-entropy evaluated under an emulated precision, with
// Softmax Collapse detection and zero-sum accounting.

#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "nfilab/errors.hpp"
#include "nfilab/precision.hpp"

namespace nfilab {

struct LogitRow {
  std::vector<double> values;
  int label = 0;
};

struct CEOutcome {
  double loss = 0.0;
  std::vector<double> grad;  // dL/dz_k
  bool collapsed = false;
  double residual_mass = 0.0;
};

/// Scalar part of a cross-entropy evaluation; the gradient goes to a
/// caller-owned buffer.
struct CEStats {
  double loss = 0.0;
  bool collapsed = false;
  double residual_mass = 0.0;
};

inline int argmax_lowest(std::span<const double> z) {
  int best = 0;
  for (int k = 1; k < static_cast<int>(z.size()); ++k)
    if (z[k] > z[best]) best = k;
  return best;
}

/// z_r - max_{k != r} z_k.
inline double logit_margin(std::span<const double> z, int label) {
  double rival = -std::numeric_limits<double>::infinity();
  for (int k = 0; k < static_cast<int>(z.size()); ++k)
    if (k != label) rival = std::max(rival, z[k]);
  return z[label] - rival;
}

/// Log-sum-exp cross-entropy with every primitive rounded to `mode`.
///
/// The normalizer is carried relative to the max logit z_m: the
/// accumulator starts at exp(0) = 1 and adds exp(z_k - z_m) for the other
/// classes in ascending index order. When every addend is absorbed the
/// accumulator stays exactly 1, log-normalizer and loss are exactly 0 and
/// the correct-class gradient vanishes (collapse). Outside collapse the
/// correct-class gradient is booked as minus the sum of the others, so the
/// zero-sum identity holds at reference precision.
///
/// `smoothing` > 0 replaces the one-hot target by 1 - a on the label and
/// a / (K - 1) elsewhere.
inline CEStats stable_ce_into(std::span<const double> z, int label, const PrecisionMode& mode,
                              std::span<double> grad, double smoothing = 0.0) {
  const int K = static_cast<int>(z.size());
  if (K < 2) throw DimensionTooSmall("cross-entropy needs at least two classes");
  if (label < 0 || label >= K)
    throw std::out_of_range("label " + std::to_string(label) + " outside [0, " +
                            std::to_string(K) + ")");
  for (int k = 0; k < K; ++k)
    if (!std::isfinite(z[k])) throw NonFiniteLogit("logit " + std::to_string(k) + " is not finite");

  const int m = argmax_lowest(z);
  const double zm = z[m];

  // grad[] temporarily holds the shifted logits d_k = z_k - z_m.
  double sum = 1.0;
  for (int k = 0; k < K; ++k) {
    if (k == m) {
      grad[k] = 0.0;
      continue;
    }
    grad[k] = fp_sub(z[k], zm, mode);
    sum = fp_add(sum, fp_exp(grad[k], mode), mode);
  }
  const double log_norm = sum == 1.0 ? 0.0 : fp_log(sum, mode);

  const double off_target = smoothing / (K - 1);
  const double on_target = 1.0 - smoothing;

  CEStats out;
  // With a soft target the label gradient -a stays finite, so the loss
  // never collapses even when the normalizer does.
  out.collapsed = sum == 1.0 && label == m && smoothing == 0.0;

  if (smoothing == 0.0) {
    out.loss = fp_sub(log_norm, grad[label], mode);
  } else {
    double weighted = 0.0;
    for (int k = 0; k < K; ++k)
      weighted = fp_add(weighted, fp_mul(k == label ? on_target : off_target, grad[k], mode), mode);
    out.loss = fp_sub(log_norm, weighted, mode);
  }

  double others = 0.0;
  for (int k = 0; k < K; ++k) {
    const double prob = fp_exp(fp_sub(grad[k], log_norm, mode), mode);
    const double target = k == label ? on_target : off_target;
    grad[k] = fp_sub(prob, target, mode);
    if (k != label) {
      others += grad[k];
      out.residual_mass += std::max(grad[k], 0.0);
    }
  }
  if (!out.collapsed) grad[label] = -others;
  return out;
}

inline CEOutcome stable_ce(const LogitRow& row, const PrecisionMode& mode, double smoothing = 0.0) {
  CEOutcome out;
  out.grad.resize(row.values.size());
  const auto stats = stable_ce_into(row.values, row.label, mode, out.grad, smoothing);
  out.loss = stats.loss;
  out.collapsed = stats.collapsed;
  out.residual_mass = stats.residual_mass;
  return out;
}

/// Sum of the logit gradient: zero in exact arithmetic, the residual mass
/// under collapse.
inline double zero_sum_defect(std::span<const double> grad) {
  return std::accumulate(grad.begin(), grad.end(), 0.0);
}
inline double zero_sum_defect(const CEOutcome& out) { return zero_sum_defect(out.grad); }

/// g - mean(g) * 1.
inline std::vector<double> project_zero_sum(std::span<const double> grad) {
  std::vector<double> out(grad.begin(), grad.end());
  if (out.empty()) return out;
  const double mean = zero_sum_defect(grad) / static_cast<double>(out.size());
  for (double& g : out) g -= mean;
  return out;
}

inline void project_zero_sum_inplace(std::span<double> grad) {
  if (grad.empty()) return;
  const double mean = zero_sum_defect(grad) / static_cast<double>(grad.size());
  for (double& g : grad) g -= mean;
}

}  // namespace nfilab
