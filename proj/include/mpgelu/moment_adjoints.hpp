#pragma once

// Reverse-mode adjoints of the moment propagation ops in moments.hpp.
//
// A covariance gradient holds dL/dCov_ij for every entry treated as an
// independent input; forward ops read Cov_ii for variances and Cov_ij (i != j)
// for cross terms, so no symmetry of the gradient is assumed.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

#include "mpgelu/moments.hpp"
#include "mpgelu/normal.hpp"

namespace mpgelu {

struct MomentGradient {
  CovarianceMode mode = CovarianceMode::Full;
  VectorXd mean;
  MatrixXd cov;  // Full mode
  VectorXd var;  // Diagonal mode

  static MomentGradient zeros(Index n, CovarianceMode mode) {
    MomentGradient g;
    g.mode = mode;
    g.mean = VectorXd::Zero(n);
    if (mode == CovarianceMode::Full) {
      g.cov = MatrixXd::Zero(n, n);
    } else {
      g.var = VectorXd::Zero(n);
    }
    return g;
  }

  Index size() const { return mean.size(); }
  bool is_full() const { return mode == CovarianceMode::Full; }
  double variance(Index i) const { return is_full() ? cov(i, i) : var(i); }

  bool all_finite() const {
    return mean.allFinite() && (is_full() ? cov.allFinite() : var.allFinite());
  }
};

namespace detail {

inline void require_same_shape(const MomentVector& in, const MomentGradient& g, const char* op) {
  if (g.mode != in.mode()) {
    throw std::logic_error(std::string(op) + ": gradient and input covariance modes differ");
  }
  if (g.size() != in.size()) {
    throw std::invalid_argument(std::string(op) + ": gradient length " + std::to_string(g.size()) +
                                " does not match input length " + std::to_string(in.size()));
  }
}

// Local derivatives of one unit of an elementwise gated op:
//   out mean a(mu, v), out variance b(mu, v), cross-covariance gain g(mu, v).
struct UnitPartials {
  double a_mu = 0.0, a_v = 0.0;
  double b_mu = 0.0, b_v = 0.0;
  double g = 0.0, g_mu = 0.0, g_v = 0.0;
};

template <class PartialsFn>
MomentGradient elementwise_backward(const MomentVector& in, const MomentGradient& gout,
                                    PartialsFn&& partials_at, const char* op) {
  require_same_shape(in, gout, op);
  const Index n = in.size();
  MomentGradient gin = MomentGradient::zeros(n, in.mode());

  VectorXd gain(n), g_mu(n), g_v(n), a_mu(n), a_v(n), b_mu(n), b_v(n);
  for (Index i = 0; i < n; ++i) {
    const UnitPartials u = partials_at(in.mean()(i), clamp_variance(in.variance(i), op), i);
    gain(i) = u.g;
    g_mu(i) = u.g_mu;
    g_v(i) = u.g_v;
    a_mu(i) = u.a_mu;
    a_v(i) = u.a_v;
    b_mu(i) = u.b_mu;
    b_v(i) = u.b_v;
  }

  VectorXd grad_gain = VectorXd::Zero(n);
  if (in.is_full()) {
    MatrixXd weighted = gout.cov.cwiseProduct(in.cov());
    weighted.diagonal().setZero();
    grad_gain.noalias() = (weighted + weighted.transpose()) * gain;
    gin.cov = gain.asDiagonal() * gout.cov * gain.asDiagonal();
  }

  for (Index i = 0; i < n; ++i) {
    const double gm = gout.mean(i);
    const double gv = gout.variance(i);
    gin.mean(i) = gm * a_mu(i) + gv * b_mu(i) + grad_gain(i) * g_mu(i);
    const double d_var = gm * a_v(i) + gv * b_v(i) + grad_gain(i) * g_v(i);
    if (in.is_full()) {
      gin.cov(i, i) = d_var;
    } else {
      gin.var(i) = d_var;
    }
  }
  return gin;
}

// Partials of the gated-product algebra for a keep probability q(mu, v) with
// derivatives q_mu, q_v:
//   a = q mu,  b = q v + q (1 - q) mu^2,  g = q.
inline UnitPartials gated_partials(double mu, double v, double q, double q_mu, double q_v) {
  UnitPartials u;
  const double spread = 1.0 - 2.0 * q;
  u.a_mu = q + mu * q_mu;
  u.a_v = mu * q_v;
  u.b_mu = q_mu * v + spread * q_mu * mu * mu + 2.0 * q * (1.0 - q) * mu;
  u.b_v = q + q_v * v + spread * q_v * mu * mu;
  u.g = q;
  u.g_mu = q_mu;
  u.g_v = q_v;
  return u;
}

}  // namespace detail

/// Accumulates dL/dW and dL/db into weight_grad / bias_grad and returns dL/d(input).
inline MomentGradient dense_backward(const MomentVector& in, const MatrixXd& weight,
                                     const MomentGradient& gout, MatrixXd& weight_grad,
                                     VectorXd& bias_grad) {
  if (gout.mode != in.mode()) throw std::logic_error("dense_backward: covariance modes differ");
  if (gout.size() != weight.rows() || weight.cols() != in.size()) {
    throw std::invalid_argument("dense_backward: shape mismatch");
  }
  MomentGradient gin;
  gin.mode = in.mode();
  bias_grad += gout.mean;
  weight_grad.noalias() += gout.mean * in.mean().transpose();
  gin.mean.noalias() = weight.transpose() * gout.mean;

  if (in.is_full()) {
    // Forward symmetrizes (A + A^T) / 2, so only the symmetric part flows back.
    const MatrixXd sym = 0.5 * (gout.cov + gout.cov.transpose());
    const MatrixXd sym_w = sym * weight;
    weight_grad.noalias() += 2.0 * sym_w * in.cov();
    gin.cov.noalias() = weight.transpose() * sym_w;
  } else {
    const auto v = in.var();
    weight_grad.array() += 2.0 * weight.array() * (gout.var * v.transpose()).array();
    gin.var.noalias() = weight.cwiseAbs2().transpose() * gout.var;
  }
  return gin;
}

inline MomentGradient dropout_backward(const MomentVector& in, double rate,
                                       const MomentGradient& gout) {
  const double q = 1.0 - rate;
  return detail::elementwise_backward(
      in, gout,
      [q](double mu, double v, Index) { return detail::gated_partials(mu, v, q, 0.0, 0.0); },
      "dropout_backward");
}

inline MomentGradient mp_gelu_backward(const MomentVector& in, const MomentGradient& gout) {
  return detail::elementwise_backward(
      in, gout,
      [](double mu, double v, Index) {
        const double sigma = std::sqrt(v);
        if (sigma < kSigmaFloor) {
          const double q = mu > 0.0 ? 1.0 : (mu < 0.0 ? 0.0 : 0.5);
          return detail::gated_partials(mu, v, q, 0.0, 0.0);
        }
        const double alpha = mu / sigma;
        const double q = normal_cdf(alpha);
        const double pdf = normal_pdf(alpha);
        return detail::gated_partials(mu, v, q, pdf / sigma, -alpha * pdf / (2.0 * v));
      },
      "mp_gelu_backward");
}

inline MomentGradient relu_backward(const MomentVector& in, const MomentGradient& gout,
                                    ReluCovariance rule = ReluCovariance::Series) {
  const bool series = in.is_full() && rule == ReluCovariance::Series;
  MomentGradient gin = detail::elementwise_backward(
      in, gout,
      [series](double mu, double v, Index) {
        detail::UnitPartials u;
        const double sigma = std::sqrt(v);
        if (sigma < kSigmaFloor) {
          u.a_mu = mu > 0.0 ? 1.0 : 0.0;
          u.b_v = mu > 0.0 ? 1.0 : (mu < 0.0 ? 0.0 : 0.5 - 0.5 / std::numbers::pi);
          u.g = series ? 0.0 : (mu > 0.0 ? 1.0 : (mu < 0.0 ? 0.0 : 0.5));
          return u;
        }
        const double alpha = mu / sigma;
        const double cdf = normal_cdf(alpha);
        const double pdf = normal_pdf(alpha);
        const double mean = sigma * (alpha * cdf + pdf);
        u.a_mu = cdf;
        u.a_v = pdf / (2.0 * sigma);
        u.b_mu = 2.0 * mean * (1.0 - cdf);
        u.b_v = cdf - mean * pdf / sigma;
        if (!series) {
          u.g = cdf;
          u.g_mu = pdf / sigma;
          u.g_v = -alpha * pdf / (2.0 * v);
        }
        return u;
      },
      "relu_backward");
  if (!series) return gin;

  // out_ij = s_i s_j S(rho, a_i, a_j),  S = sum_k rho^k / k! g_k(a_i) g_k(a_j)
  constexpr int K = kReluSeriesTerms;
  const Index n = in.size();
  VectorXd sd(n), alpha(n);
  MatrixXd coef = MatrixXd::Zero(K + 2, n);
  for (Index i = 0; i < n; ++i) {
    sd(i) = std::sqrt(clamp_variance(in.variance(i), "relu_backward"));
    if (sd(i) < kSigmaFloor) continue;
    alpha(i) = in.mean()(i) / sd(i);
    detail::relu_series_coefficients(alpha(i), normal_cdf(alpha(i)), normal_pdf(alpha(i)), K, coef.col(i).data());
  }
  for (Index j = 0; j < n; ++j) {
    for (Index i = j + 1; i < n; ++i) {
      if (sd(i) < kSigmaFloor || sd(j) < kSigmaFloor) continue;
      const double w = gout.cov(i, j) + gout.cov(j, i);
      const double raw = in.cov()(i, j) / (sd(i) * sd(j));
      const double rho = std::clamp(raw, -1.0, 1.0);
      double s = 0.0, s_rho = 0.0, s_ai = 0.0, s_aj = 0.0;
      double power_prev = 1.0, inv_fact = 1.0;  // rho^(k-1), 1/k!
      for (int k = 1; k <= K; ++k) {
        const double power = power_prev * rho;
        const double inv_fact_prev = inv_fact;  // 1/(k-1)!
        inv_fact /= k;
        s += power * inv_fact * coef(k, i) * coef(k, j);
        s_rho += power_prev * inv_fact_prev * coef(k, i) * coef(k, j);
        s_ai += power * inv_fact * coef(k + 1, i) * coef(k, j);
        s_aj += power * inv_fact * coef(k, i) * coef(k + 1, j);
        power_prev = power;
      }
      const double d_rho = std::abs(raw) <= 1.0 ? s_rho : 0.0;
      gin.cov(i, j) += gout.cov(i, j) * d_rho;
      gin.cov(j, i) += gout.cov(j, i) * d_rho;
      gin.mean(i) += w * sd(j) * s_ai;
      gin.mean(j) += w * sd(i) * s_aj;
      gin.cov(i, i) += w * sd(j) * (s - rho * d_rho - alpha(i) * s_ai) / (2.0 * sd(i));
      gin.cov(j, j) += w * sd(i) * (s - rho * d_rho - alpha(j) * s_aj) / (2.0 * sd(j));
    }
  }
  return gin;
}

}  // namespace mpgelu
