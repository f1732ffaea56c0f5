#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "nfilab/errors.hpp"

namespace nfilab {

/// Samples of a classification task. `inputs` is empty for the
/// unconstrained feature model, whose features are the parameters.
struct Dataset {
  Eigen::MatrixXd inputs;  // n x input_dim, row per sample
  std::vector<int> labels;
  std::vector<int> train_idx;
  std::vector<int> test_idx;
  int num_classes = 0;

  int size() const { return static_cast<int>(labels.size()); }
  bool has_inputs() const { return inputs.size() > 0; }
};

inline bool is_prime(int p) {
  if (p < 2) return false;
  for (int q = 2; q * q <= p; ++q)
    if (p % q == 0) return false;
  return true;
}

/// Modular inverse via Fermat, p prime and b in [1, p).
inline int mod_inverse(int b, int p) {
  std::int64_t result = 1, base = b % p;
  for (int e = p - 2; e > 0; e >>= 1) {
    if (e & 1) result = result * base % p;
    base = base * base % p;
  }
  return static_cast<int>(result);
}

/// Modular division c = a * b^{-1} mod p over every (a, b), a in [0, p),
/// b in [1, p). Inputs are flattened one-hot encodings of the token
/// sequence [a, OP, b, =] over a vocabulary of p + 2 symbols.
struct ModDivDataset : Dataset {
  int p = 0;
  std::vector<int> a, b;
  double train_frac = 1.0;
};

inline ModDivDataset make_moddiv_dataset(int p, double train_frac, std::uint64_t seed) {
  if (!is_prime(p)) throw NotPrime(std::to_string(p) + " is not prime");
  if (!(train_frac > 0.0 && train_frac <= 1.0))
    throw std::invalid_argument("train_frac must lie in (0, 1]");

  ModDivDataset ds;
  ds.p = p;
  ds.train_frac = train_frac;
  ds.num_classes = p;
  const int vocab = p + 2;
  const int op = p, eq = p + 1;
  const int n = p * (p - 1);
  ds.inputs = Eigen::MatrixXd::Zero(n, 4 * vocab);
  ds.labels.reserve(n);
  int row = 0;
  for (int a = 0; a < p; ++a) {
    for (int b = 1; b < p; ++b) {
      ds.a.push_back(a);
      ds.b.push_back(b);
      ds.labels.push_back(static_cast<int>(static_cast<std::int64_t>(a) * mod_inverse(b, p) % p));
      ds.inputs(row, 0 * vocab + a) = 1.0;
      ds.inputs(row, 1 * vocab + op) = 1.0;
      ds.inputs(row, 2 * vocab + b) = 1.0;
      ds.inputs(row, 3 * vocab + eq) = 1.0;
      ++row;
    }
  }

  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const int n_train = std::max(1, static_cast<int>(std::lround(train_frac * n)));
  ds.train_idx.assign(order.begin(), order.begin() + n_train);
  ds.test_idx.assign(order.begin() + n_train, order.end());
  std::sort(ds.train_idx.begin(), ds.train_idx.end());
  std::sort(ds.test_idx.begin(), ds.test_idx.end());
  return ds;
}

/// Class-balanced labels i mod K for an unconstrained feature model with
/// `samples` free feature vectors; every sample is a training sample.
inline Dataset make_balanced_ufm_dataset(int num_classes, int samples) {
  if (num_classes < 2) throw DimensionTooSmall("need at least two classes");
  if (samples < num_classes) throw DimensionTooSmall("need at least one sample per class");
  Dataset ds;
  ds.num_classes = num_classes;
  ds.labels.resize(samples);
  ds.train_idx.resize(samples);
  for (int i = 0; i < samples; ++i) {
    ds.labels[i] = i % num_classes;
    ds.train_idx[i] = i;
  }
  return ds;
}

}  // namespace nfilab
