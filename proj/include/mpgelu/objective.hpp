#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "mpgelu/moment_adjoints.hpp"
#include "mpgelu/moments.hpp"
#include "mpgelu/normal.hpp"

namespace mpgelu {

/// Two outputs (h1, h2) model p(y|h) = N(y | h1, exp(h2)); one output models
/// the mean only and relies on the propagated variance.
enum class HeadType { Heteroscedastic2, Homoscedastic1 };

inline Index head_dim(HeadType head) { return head == HeadType::Heteroscedastic2 ? 2 : 1; }

inline const char* to_string(HeadType head) {
  return head == HeadType::Heteroscedastic2 ? "2" : "1";
}

inline HeadType parse_head(const std::string& s) {
  if (s == "2") return HeadType::Heteroscedastic2;
  if (s == "1") return HeadType::Homoscedastic1;
  throw std::invalid_argument("unknown head '" + s + "' (expected 2|1)");
}

inline constexpr double kVarianceFloor = 1e-12;

struct PredictiveMoments {
  double mean = 0.0;
  double variance = 1.0;
};

namespace detail {

inline void require_head(const MomentVector& head, Index dim, const char* op) {
  if (head.size() != dim) {
    throw std::invalid_argument(std::string(op) + ": expected a " + std::to_string(dim) +
                                "-output head, got " + std::to_string(head.size()));
  }
}

inline double require_finite(double v, const char* op) {
  if (!std::isfinite(v)) throw std::domain_error(std::string(op) + ": non-finite result");
  return v;
}

}  // namespace detail

/// E_{h ~ N(m, S)}[log N(y | h1, exp(h2))]
///   = -1/2 [log 2pi + m2 + (S11 + (m1 - S12 - y)^2) / exp(m2 - S22 / 2)].
/// Diagonal-mode heads use S12 = 0.
inline double expected_log_likelihood(const MomentVector& head, double y) {
  detail::require_head(head, 2, "expected_log_likelihood");
  const double m1 = head.mean()(0);
  const double m2 = head.mean()(1);
  const double s11 = head.variance(0);
  const double s22 = head.variance(1);
  const double s12 = head.is_full() ? head.cov()(0, 1) : 0.0;
  const double r = m1 - s12 - y;
  const double ll = -0.5 * (kLog2Pi + m2 + (s11 + r * r) * std::exp(-m2 + 0.5 * s22));
  return detail::require_finite(ll, "expected_log_likelihood");
}

/// log N(y | m1, S11 + floor): the one-output head carries epistemic variance only.
inline double expected_log_likelihood_1out(const MomentVector& head, double y) {
  detail::require_head(head, 1, "expected_log_likelihood_1out");
  const double v = clamp_variance(head.variance(0), "expected_log_likelihood_1out") + kVarianceFloor;
  const double r = y - head.mean()(0);
  const double ll = -0.5 * (kLog2Pi + std::log(v) + r * r / v);
  return detail::require_finite(ll, "expected_log_likelihood_1out");
}

inline double head_log_likelihood(const MomentVector& head, double y, HeadType type) {
  return type == HeadType::Heteroscedastic2 ? expected_log_likelihood(head, y)
                                            : expected_log_likelihood_1out(head, y);
}

struct HeadLikelihood {
  double value = 0.0;
  MomentGradient grad;  // d value / d head moments
};

inline HeadLikelihood head_log_likelihood_with_gradient(const MomentVector& head, double y,
                                                        HeadType type) {
  HeadLikelihood out;
  out.grad = MomentGradient::zeros(head.size(), head.mode());
  if (type == HeadType::Heteroscedastic2) {
    out.value = expected_log_likelihood(head, y);
    const double m1 = head.mean()(0);
    const double m2 = head.mean()(1);
    const double s11 = head.variance(0);
    const double s22 = head.variance(1);
    const double s12 = head.is_full() ? head.cov()(0, 1) : 0.0;
    const double r = m1 - s12 - y;
    const double inv_scale = std::exp(-m2 + 0.5 * s22);
    const double quad = (s11 + r * r) * inv_scale;
    out.grad.mean(0) = -r * inv_scale;
    out.grad.mean(1) = -0.5 * (1.0 - quad);
    if (head.is_full()) {
      out.grad.cov(0, 0) = -0.5 * inv_scale;
      out.grad.cov(1, 1) = -0.25 * quad;
      out.grad.cov(0, 1) = r * inv_scale;
    } else {
      out.grad.var(0) = -0.5 * inv_scale;
      out.grad.var(1) = -0.25 * quad;
    }
  } else {
    out.value = expected_log_likelihood_1out(head, y);
    const double v = clamp_variance(head.variance(0), "expected_log_likelihood_1out") + kVarianceFloor;
    const double r = y - head.mean()(0);
    out.grad.mean(0) = r / v;
    const double d_var = -0.5 * (1.0 / v - r * r / (v * v));
    if (head.is_full()) {
      out.grad.cov(0, 0) = d_var;
    } else {
      out.grad.var(0) = d_var;
    }
  }
  if (!out.grad.all_finite()) throw std::domain_error("head_log_likelihood: non-finite gradient");
  return out;
}

/// Moment-matched Gaussian predictive. For the two-output head the aleatoric
/// term E[exp(h2)] = exp(m2 + S22 / 2) is added to the epistemic S11.
inline PredictiveMoments predictive_moments(const MomentVector& head, HeadType type) {
  detail::require_head(head, head_dim(type), "predictive_moments");
  const double s11 = clamp_variance(head.variance(0), "predictive_moments");
  if (type == HeadType::Heteroscedastic2) {
    const double aleatoric = std::exp(head.mean()(1) + 0.5 * head.variance(1));
    return {head.mean()(0), std::max(s11 + aleatoric, kVarianceFloor)};
  }
  return {head.mean()(0), s11 + kVarianceFloor};
}

inline double nll_metric(const PredictiveMoments& pm, double y) {
  if (!(pm.variance > 0.0)) throw std::domain_error("nll_metric: variance must be positive");
  const double r = y - pm.mean;
  return 0.5 * (kLog2Pi + std::log(pm.variance) + r * r / pm.variance);
}

inline double rmse(const VectorXd& preds, const VectorXd& ys) {
  if (preds.size() != ys.size()) {
    throw std::invalid_argument("rmse: " + std::to_string(preds.size()) + " predictions vs " +
                                std::to_string(ys.size()) + " labels");
  }
  if (preds.size() == 0) throw std::invalid_argument("rmse: empty input");
  return std::sqrt((preds - ys).squaredNorm() / static_cast<double>(preds.size()));
}

}  // namespace mpgelu
