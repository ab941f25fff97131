#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace mpgelu {

/// Per-thread tallies of the transcendental calls made by forward moment ops.
///
/// Only the forward (inference) path is counted. Adjoint code calls the
/// uncounted helpers so the tallies describe a single prediction pass.
struct OpCounters {
  std::uint64_t erf = 0;
  std::uint64_t exp = 0;
  std::uint64_t sqrt = 0;

  void reset() { *this = OpCounters{}; }
  std::uint64_t transcendental() const { return erf + exp + sqrt; }
};

inline OpCounters& op_counters() {
  thread_local OpCounters counters;
  return counters;
}

inline constexpr double kInvSqrt2 = std::numbers::sqrt2 / 2.0;
inline constexpr double kInvSqrt2Pi = std::numbers::inv_sqrtpi * kInvSqrt2;
inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;

/// Standard normal CDF. erfc keeps the lower tail accurate (Phi(-10) ~ 7.6e-24).
inline double normal_cdf(double x) { return 0.5 * std::erfc(-x * kInvSqrt2); }

inline double normal_pdf(double x) { return kInvSqrt2Pi * std::exp(-0.5 * x * x); }

namespace counted {

inline double normal_cdf(double x) {
  ++op_counters().erf;
  return mpgelu::normal_cdf(x);
}

inline double normal_pdf(double x) {
  ++op_counters().exp;
  return mpgelu::normal_pdf(x);
}

inline double sqrt(double x) {
  ++op_counters().sqrt;
  return std::sqrt(x);
}

}  // namespace counted

}  // namespace mpgelu
