#pragma once

// Independent reference computations used by the tests. Nothing here calls
// into the library's arithmetic.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include <Eigen/Dense>

namespace oracle {

/// Cross-entropy and its gradient in long double (64-bit mantissa).
struct CE {
  long double loss;
  std::vector<long double> grad;
};

inline CE cross_entropy(const std::vector<double>& z, int label, double smoothing = 0.0) {
  const int K = static_cast<int>(z.size());
  long double mx = z[0];
  for (double v : z) mx = std::max<long double>(mx, v);
  long double sum = 0.0L;
  for (double v : z) sum += std::exp(static_cast<long double>(v) - mx);
  const long double lse = mx + std::log(sum);
  CE out;
  out.loss = 0.0L;
  out.grad.resize(K);
  for (int k = 0; k < K; ++k) {
    const long double t = k == label ? 1.0L - smoothing : static_cast<long double>(smoothing) / (K - 1);
    out.loss += t * (lse - z[k]);
    out.grad[k] = std::exp(static_cast<long double>(z[k]) - lse) - t;
  }
  return out;
}

/// Every non-negative finite value of a binary format with p-bit
/// significands and E-bit exponents, ascending; the index is the bit code.
inline std::vector<double> format_values(int p, int E) {
  const int emax = (1 << (E - 1)) - 1;
  const int emin = 1 - emax;
  const long long m = 1LL << (p - 1);
  std::vector<double> out;
  for (long long k = 0; k < m; ++k) out.push_back(std::ldexp(static_cast<double>(k), emin - (p - 1)));
  for (int e = emin; e <= emax; ++e)
    for (long long k = 0; k < m; ++k)
      out.push_back(std::ldexp(static_cast<double>(m + k), e - (p - 1)));
  return out;
}

/// Round to nearest, ties to the even code, by search over the value table.
/// Values past the largest finite one by at least half a spacing overflow.
inline double round_by_table(double x, const std::vector<double>& table) {
  const double a = std::fabs(x);
  const double top = table.back();
  const double spacing = top - table[table.size() - 2];
  if (a >= top + spacing / 2) return std::copysign(INFINITY, x);
  if (a >= top) return std::copysign(top, x);
  const auto hi = std::upper_bound(table.begin(), table.end(), a);
  const auto lo = hi - 1;
  const double dl = a - *lo, dh = *hi - a;
  double r;
  if (dl < dh) r = *lo;
  else if (dh < dl) r = *hi;
  else r = ((lo - table.begin()) % 2 == 0) ? *lo : *hi;
  return std::copysign(r, x);
}

/// Central finite-difference gradient of f at x.
inline Eigen::VectorXd fd_gradient(const std::function<double(const Eigen::VectorXd&)>& f,
                                   Eigen::VectorXd x, double h) {
  Eigen::VectorXd g(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double keep = x(i);
    x(i) = keep + h;
    const double fp = f(x);
    x(i) = keep - h;
    const double fm = f(x);
    x(i) = keep;
    g(i) = (fp - fm) / (2 * h);
  }
  return g;
}

/// Brute-force modular inverse.
inline int mod_inverse(int b, int p) {
  for (int x = 1; x < p; ++x)
    if ((static_cast<long long>(b) * x) % p == 1) return x;
  return -1;
}

/// Logit row with a prescribed margin z_r - max_{k != r} z_k.
inline std::vector<double> row_with_margin(std::mt19937_64& rng, int K, int label, double margin,
                                           double spread = 5.0, double offset_scale = 50.0) {
  std::uniform_real_distribution<double> u(-spread, 0.0);
  std::uniform_real_distribution<double> off(-offset_scale, offset_scale);
  std::vector<double> z(K);
  for (int k = 0; k < K; ++k) z[k] = u(rng);
  int second = label == 0 ? 1 : 0;
  z[second] = 0.0;
  const double base = off(rng);
  for (auto& v : z) v += base;
  z[label] = base + margin;
  return z;
}

}  // namespace oracle
