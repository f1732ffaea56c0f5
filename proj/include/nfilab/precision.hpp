#pragma once

// Emulated IEEE-754 binary formats. Values are carried as doubles and
// rounded onto the grid of a narrower format after every primitive.

#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <string>
#include <string_view>

#include "nfilab/errors.hpp"

namespace nfilab {

/// A binary floating-point format: `mantissa_bits` counts the implicit
/// leading bit (24 for binary32, 53 for binary64).
struct PrecisionMode {
  int mantissa_bits = 53;
  int exponent_bits = 11;
  bool subnormals = true;

  static constexpr PrecisionMode fp32() { return {24, 8, true}; }
  static constexpr PrecisionMode fp64() { return {53, 11, true}; }
  static constexpr PrecisionMode bf16() { return {8, 8, true}; }

  /// Accepts "fp32", "fp64", "bf16" or "custom:p,E".
  static PrecisionMode parse(std::string_view text);

  constexpr int max_exponent() const { return (1 << (exponent_bits - 1)) - 1; }
  constexpr int min_exponent() const { return 1 - max_exponent(); }

  constexpr bool is_native_double() const {
    return mantissa_bits == 53 && exponent_bits == 11 && subnormals;
  }
  constexpr bool is_native_float() const {
    return mantissa_bits == 24 && exponent_bits == 8 && subnormals;
  }

  std::string name() const;

  friend constexpr bool operator==(const PrecisionMode&, const PrecisionMode&) = default;
};

inline void validate(const PrecisionMode& m) {
  // Emulation runs inside binary64, so no format may exceed it.
  if (m.mantissa_bits < 2 || m.mantissa_bits > 53)
    throw InvalidMode("mantissa bits must lie in [2, 53], got " +
                      std::to_string(m.mantissa_bits));
  if (m.exponent_bits < 2 || m.exponent_bits > 11)
    throw InvalidMode("exponent bits must lie in [2, 11], got " +
                      std::to_string(m.exponent_bits));
}

inline PrecisionMode PrecisionMode::parse(std::string_view text) {
  if (text == "fp32") return fp32();
  if (text == "fp64") return fp64();
  if (text == "bf16") return bf16();
  constexpr std::string_view prefix = "custom:";
  if (text.substr(0, prefix.size()) == prefix) {
    const std::string body(text.substr(prefix.size()));
    const auto comma = body.find(',');
    if (comma == std::string::npos)
      throw InvalidMode("custom mode must look like custom:p,E, got '" + std::string(text) + "'");
    PrecisionMode m;
    try {
      std::size_t used = 0;
      m.mantissa_bits = std::stoi(body.substr(0, comma), &used);
      if (used != comma) throw std::invalid_argument("trailing");
      const std::string tail = body.substr(comma + 1);
      m.exponent_bits = std::stoi(tail, &used);
      if (used != tail.size()) throw std::invalid_argument("trailing");
    } catch (const std::logic_error&) {
      throw InvalidMode("custom mode must look like custom:p,E, got '" + std::string(text) + "'");
    }
    validate(m);
    return m;
  }
  throw InvalidMode("unknown precision mode '" + std::string(text) + "'");
}

inline std::string PrecisionMode::name() const {
  if (*this == fp32()) return "fp32";
  if (*this == fp64()) return "fp64";
  if (*this == bf16()) return "bf16";
  return "custom:" + std::to_string(mantissa_bits) + "," + std::to_string(exponent_bits);
}

/// Logit margin above which every competing exp(z_k - z_max) is absorbed
/// into the leading 1 of the log-sum-exp accumulator: (p - 1) ln 2.
inline double absorption_threshold(const PrecisionMode& m) {
  return (m.mantissa_bits - 1) * std::numbers::ln2;
}

/// Logit gap beyond which exp(z_min - z_max) drops below the smallest
/// subnormal: (p - 1 + 2^(E-1) - 2) ln 2.
inline double underflow_threshold(const PrecisionMode& m) {
  return (m.mantissa_bits - 1 + (1 << (m.exponent_bits - 1)) - 2) * std::numbers::ln2;
}

/// Largest finite value of the format.
inline double max_finite(const PrecisionMode& m) {
  return std::ldexp(2.0 - std::ldexp(1.0, 1 - m.mantissa_bits), m.max_exponent());
}

struct RoundResult {
  double value;
  bool overflow = false;
  bool underflow = false;  // nonzero input rounded to zero
};

namespace detail {

// 2^e, exact; bit assembly for the normal range, ldexp outside it.
inline double pow2(int e) {
  if (e >= -1022 && e <= 1023)
    return std::bit_cast<double>(static_cast<std::uint64_t>(e + 1023) << 52);
  return std::ldexp(1.0, e);
}

// Round-half-even of a double whose magnitude is below 2^53.
inline double rint_even(double s) {
  const double f = std::floor(s);
  const double frac = s - f;
  if (frac > 0.5) return f + 1.0;
  if (frac < 0.5) return f;
  return std::fmod(f, 2.0) == 0.0 ? f : f + 1.0;
}

// Exponent of the quantum (spacing) of the format around x, x finite nonzero.
inline int quantum_exponent(double x, const PrecisionMode& m) {
  int e = 0;
  std::frexp(x, &e);  // |x| = f * 2^e, f in [0.5, 1)
  const int q = std::max(e - 1, m.min_exponent());
  return q - (m.mantissa_bits - 1);
}

}  // namespace detail

/// Round-to-nearest-even onto the format, reporting overflow and underflow.
inline RoundResult round_checked(double x, const PrecisionMode& m) {
  if (!std::isfinite(x) || x == 0.0) return {x};
  if (m.is_native_double()) return {x};

  const int shift = detail::quantum_exponent(x, m);
  double y = shift >= -1022 && shift <= 1022
                 ? detail::rint_even(x * detail::pow2(-shift)) * detail::pow2(shift)
                 : std::ldexp(detail::rint_even(std::ldexp(x, -shift)), shift);

  RoundResult out{y};
  if (std::fabs(y) > max_finite(m)) {
    out.value = std::copysign(std::numeric_limits<double>::infinity(), x);
    out.overflow = true;
    return out;
  }
  if (!m.subnormals && std::fabs(y) < std::ldexp(1.0, m.min_exponent())) {
    out.value = std::copysign(0.0, x);
  }
  out.underflow = out.value == 0.0;
  return out;
}

/// Nearest representable value of the format (ties to even). Idempotent.
inline double round_to_mode(double x, const PrecisionMode& m) {
  if (m.is_native_double()) return x;
  if (m.is_native_float()) return static_cast<double>(static_cast<float>(x));
  return round_checked(x, m).value;
}

/// Emulated addition. An addend whose magnitude relative to the other
/// falls below 2^-(p-1) is shifted entirely out of the mantissa during
/// exponent alignment and vanishes, so `a + b == a` exactly. Otherwise the
/// exact sum is rounded to nearest even.
inline double fp_add(double a, double b, const PrecisionMode& m) {
  const double tiny = detail::pow2(1 - m.mantissa_bits);
  if (a != 0.0 && b != 0.0) {
    if (std::fabs(b) < std::fabs(a) * tiny) return round_to_mode(a, m);
    if (std::fabs(a) < std::fabs(b) * tiny) return round_to_mode(b, m);
  }
  const double s = a + b;
  if (m.is_native_double()) return s;
  // Two-sum residual breaks ties the double sum may have manufactured.
  const double bb = s - a;
  const double err = (a - (s - bb)) + (b - bb);
  const double r = round_to_mode(s, m);
  if (err == 0.0 || !std::isfinite(r) || s == 0.0) return r;
  if (m.is_native_float()) {
    // Only a double sitting exactly halfway between two normal floats
    // (low 29 mantissa bits 1000...0) can be a manufactured tie.
    const double mag = std::fabs(s);
    const auto bits = std::bit_cast<std::uint64_t>(s);
    if (mag >= 0x1p-126 && (bits & 0x1FFFFFFFull) != 0x10000000ull) return r;
  }
  const double half = detail::pow2(detail::quantum_exponent(s, m) - 1);
  if (std::fabs(s - r) != half) return r;
  // s sits exactly on a midpoint: the true sum lies on err's side of it.
  const double other = r + 2.0 * (s - r);
  const bool toward_other = (other > r) == (err > 0.0);
  return toward_other ? round_to_mode(other, m) : r;
}

inline double fp_sub(double a, double b, const PrecisionMode& m) { return fp_add(a, -b, m); }
inline double fp_mul(double a, double b, const PrecisionMode& m) { return round_to_mode(a * b, m); }
inline double fp_exp(double x, const PrecisionMode& m) { return round_to_mode(std::exp(x), m); }
inline double fp_log(double x, const PrecisionMode& m) { return round_to_mode(std::log(x), m); }

/// Unit in the last place of x in the format.
inline double ulp(double x, const PrecisionMode& m) {
  if (x == 0.0) return std::ldexp(1.0, m.min_exponent() - (m.mantissa_bits - 1));
  return std::ldexp(1.0, detail::quantum_exponent(x, m));
}

}  // namespace nfilab
