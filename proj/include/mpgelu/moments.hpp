#pragma once

// Analytic first/second moment propagation of Gaussian activations through
// dense, dropout, MP-GELU and ReLU layers.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>

#include "mpgelu/normal.hpp"

namespace mpgelu {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

enum class CovarianceMode { Full, Diagonal };

inline const char* to_string(CovarianceMode mode) {
  return mode == CovarianceMode::Full ? "full" : "diag";
}

inline CovarianceMode parse_covariance_mode(const std::string& s) {
  if (s == "full") return CovarianceMode::Full;
  if (s == "diag" || s == "diagonal") return CovarianceMode::Diagonal;
  throw std::invalid_argument("unknown covariance mode '" + s + "' (expected full|diag)");
}

/// Standard deviations below this are treated as exactly zero.
inline constexpr double kSigmaFloor = 1e-12;
/// Negative variances in (-kVarianceClamp, 0) are rounding noise and become 0.
inline constexpr double kVarianceClamp = 1e-10;

inline double clamp_variance(double v, const char* where) {
  if (v >= 0.0) return v;
  if (v > -kVarianceClamp) return 0.0;
  throw std::domain_error(std::string(where) + ": negative variance " + std::to_string(v));
}

/// Mean and covariance of an activation vector.
///
/// Full mode stores a dense symmetric n x n matrix, Diagonal mode stores the
/// n variances only. The mode is fixed once constructed.
class MomentVector {
 public:
  static MomentVector full(VectorXd mean, MatrixXd cov) {
    if (cov.rows() != mean.size() || cov.cols() != mean.size()) {
      throw std::invalid_argument("MomentVector: covariance is " + std::to_string(cov.rows()) + "x" +
                                  std::to_string(cov.cols()) + " but mean has length " +
                                  std::to_string(mean.size()));
    }
    return MomentVector(CovarianceMode::Full, std::move(mean), std::move(cov), VectorXd());
  }

  static MomentVector diagonal(VectorXd mean, VectorXd var) {
    if (var.size() != mean.size()) {
      throw std::invalid_argument("MomentVector: " + std::to_string(var.size()) +
                                  " variances for a mean of length " + std::to_string(mean.size()));
    }
    return MomentVector(CovarianceMode::Diagonal, std::move(mean), MatrixXd(), std::move(var));
  }

  static MomentVector zero_covariance(VectorXd mean, CovarianceMode mode) {
    const Index n = mean.size();
    if (mode == CovarianceMode::Full) return full(std::move(mean), MatrixXd::Zero(n, n));
    return diagonal(std::move(mean), VectorXd::Zero(n));
  }

  Index size() const { return mean_.size(); }
  CovarianceMode mode() const { return mode_; }
  bool is_full() const { return mode_ == CovarianceMode::Full; }
  const VectorXd& mean() const { return mean_; }

  double variance(Index i) const { return is_full() ? cov_(i, i) : var_(i); }
  VectorXd variances() const { return is_full() ? VectorXd(cov_.diagonal()) : var_; }

  const MatrixXd& cov() const {
    if (!is_full()) throw std::logic_error("MomentVector::cov() on a diagonal-mode value");
    return cov_;
  }
  const VectorXd& var() const {
    if (is_full()) throw std::logic_error("MomentVector::var() on a full-mode value");
    return var_;
  }

  /// Covariance as a dense matrix in either mode.
  MatrixXd cov_matrix() const { return is_full() ? cov_ : MatrixXd(var_.asDiagonal()); }

  /// Throws if any stored invariant is violated (finite entries, non-negative
  /// variances, symmetry to 1e-9 relative in Full mode).
  void validate() const {
    if (!mean_.allFinite()) throw std::domain_error("MomentVector: non-finite mean");
    if (is_full()) {
      if (!cov_.allFinite()) throw std::domain_error("MomentVector: non-finite covariance");
      const double scale = std::max(1.0, cov_.cwiseAbs().maxCoeff());
      const double asym = (cov_ - cov_.transpose()).cwiseAbs().maxCoeff();
      if (asym > 1e-9 * scale) {
        throw std::domain_error("MomentVector: covariance asymmetric by " + std::to_string(asym));
      }
      for (Index i = 0; i < size(); ++i) clamp_variance(cov_(i, i), "MomentVector");
    } else {
      if (!var_.allFinite()) throw std::domain_error("MomentVector: non-finite variance");
      for (Index i = 0; i < size(); ++i) clamp_variance(var_(i), "MomentVector");
    }
  }

 private:
  MomentVector(CovarianceMode mode, VectorXd mean, MatrixXd cov, VectorXd var)
      : mode_(mode), mean_(std::move(mean)), cov_(std::move(cov)), var_(std::move(var)) {}

  CovarianceMode mode_;
  VectorXd mean_;
  MatrixXd cov_;
  VectorXd var_;
};

/// Per-unit drop probabilities p_i in [0, 1].
struct GateRates {
  VectorXd rates;

  explicit GateRates(VectorXd r) : rates(std::move(r)) {
    for (Index i = 0; i < rates.size(); ++i) {
      if (!(rates(i) >= 0.0 && rates(i) <= 1.0)) {
        throw std::domain_error("GateRates: rate " + std::to_string(rates(i)) + " outside [0, 1]");
      }
    }
  }

  Index size() const { return rates.size(); }
};

inline MomentVector lift_deterministic(const VectorXd& x, CovarianceMode mode) {
  if (x.size() == 0) throw std::invalid_argument("lift_deterministic: empty input");
  if (!x.allFinite()) throw std::domain_error("lift_deterministic: non-finite input");
  return MomentVector::zero_covariance(x, mode);
}

inline MomentVector dense_propagate(const MomentVector& in, const MatrixXd& weight,
                                    const VectorXd& bias) {
  if (weight.cols() != in.size() || bias.size() != weight.rows()) {
    throw std::invalid_argument("dense_propagate: weight " + std::to_string(weight.rows()) + "x" +
                                std::to_string(weight.cols()) + ", bias " +
                                std::to_string(bias.size()) + ", input " +
                                std::to_string(in.size()));
  }
  VectorXd mean = weight * in.mean() + bias;
  if (in.is_full()) {
    MatrixXd tmp = weight * in.cov();
    MatrixXd cov(weight.rows(), weight.rows());
    cov.noalias() = tmp * weight.transpose();
    cov = 0.5 * (cov + cov.transpose()).eval();
    for (Index k = 0; k < cov.rows(); ++k) cov(k, k) = clamp_variance(cov(k, k), "dense_propagate");
    return MomentVector::full(std::move(mean), std::move(cov));
  }
  VectorXd var = weight.cwiseAbs2() * in.var();
  return MomentVector::diagonal(std::move(mean), std::move(var));
}

namespace detail {

// h' = diag(eps) h with eps_i ~ Bernoulli(keep_i) independent of h.
inline MomentVector gated_propagate(const MomentVector& in, const VectorXd& keep) {
  const auto q = keep.array();
  const auto mu = in.mean().array();
  VectorXd mean = (q * mu).matrix();
  VectorXd var = (q * in.variances().array() + (1.0 - q) * q * mu.square()).matrix();
  if (in.is_full()) {
    MatrixXd cov = keep.asDiagonal() * in.cov() * keep.asDiagonal();
    cov.diagonal() = var;
    return MomentVector::full(std::move(mean), std::move(cov));
  }
  return MomentVector::diagonal(std::move(mean), std::move(var));
}

}  // namespace detail

/// No inverted-dropout rescaling: the output is the raw gated product.
inline MomentVector dropout_propagate(const MomentVector& in, double rate) {
  if (!(rate >= 0.0 && rate <= 1.0)) {
    throw std::domain_error("dropout_propagate: rate " + std::to_string(rate) + " outside [0, 1]");
  }
  return detail::gated_propagate(in, VectorXd::Constant(in.size(), 1.0 - rate));
}

/// p_i = Phi(-mu_i / sigma_i); below the sigma floor the ReLU limit is used.
inline GateRates mp_gelu_rates(const MomentVector& in) {
  VectorXd p(in.size());
  for (Index i = 0; i < in.size(); ++i) {
    const double mu = in.mean()(i);
    const double sigma = counted::sqrt(clamp_variance(in.variance(i), "mp_gelu_rates"));
    if (sigma < kSigmaFloor) {
      p(i) = mu < 0.0 ? 1.0 : (mu > 0.0 ? 0.0 : 0.5);
    } else {
      p(i) = counted::normal_cdf(-mu / sigma);
    }
  }
  return GateRates(std::move(p));
}

inline MomentVector mp_gelu_propagate(const MomentVector& in) {
  const GateRates rates = mp_gelu_rates(in);
  VectorXd keep = (1.0 - rates.rates.array()).matrix();
#ifdef MPGELU_INJECT_VARIANCE_SIGN_BUG
  // Mutation-test build only: flips the sign of the gate-spread term.
  MomentVector out = detail::gated_propagate(in, keep);
  VectorXd var = out.variances();
  for (Index i = 0; i < var.size(); ++i) {
    var(i) -= 2.0 * rates.rates(i) * keep(i) * in.mean()(i) * in.mean()(i);
  }
  if (out.is_full()) {
    MatrixXd cov = out.cov();
    cov.diagonal() = var;
    return MomentVector::full(out.mean(), std::move(cov));
  }
  return MomentVector::diagonal(out.mean(), std::move(var));
#else
  return detail::gated_propagate(in, keep);
#endif
}

/// Cross-covariance rule of relu_propagate in Full mode.
///   Series:     sigma_i sigma_j sum_{k=1..K} rho^k / k! g_k(a_i) g_k(a_j), the
///               Hermite (Mehler) expansion of Cov(max(0,x_i), max(0,x_j))
///               truncated at K terms, with g_k = d^(k-1) Phi / da^(k-1).
///   FirstOrder: Phi(a_i) Phi(a_j) Cov_ij, the k = 1 term alone.
enum class ReluCovariance { Series, FirstOrder };

inline constexpr int kReluSeriesTerms = 12;

namespace detail {

/// g[k] = d^(k-1) Phi / da^(k-1) at alpha for k = 1..terms + 1, divided by k!
/// when `scaled`; g[0] is unused.
inline void relu_series_coefficients(double alpha, double cdf, double pdf, int terms, double* g) {
  g[1] = cdf;
  double he_prev = 0.0, he = 1.0;  // He_{m-1}, He_m with m = k - 2
  for (int k = 2; k <= terms + 1; ++k) {
    const int m = k - 2;
    if (m >= 1) {
      const double next = alpha * he - static_cast<double>(m - 1) * he_prev;
      he_prev = he;
      he = next;
    }
    g[k] = ((k % 2 == 0) ? 1.0 : -1.0) * he * pdf;
  }
}

inline double clamp_correlation(double c, double si, double sj) {
  return std::clamp(c / (si * sj), -1.0, 1.0);
}

}  // namespace detail

/// Rectified-Gaussian moments per unit. Full-mode cross covariances follow
/// `rule`.
inline MomentVector relu_propagate(const MomentVector& in, ReluCovariance rule = ReluCovariance::Series) {
  const Index n = in.size();
  constexpr int K = kReluSeriesTerms;
  VectorXd mean(n), var(n), gain(n), sd(n);
  const bool series = in.is_full() && rule == ReluCovariance::Series;
  MatrixXd coef;
  if (series) coef = MatrixXd::Zero(K + 2, n);
  for (Index i = 0; i < n; ++i) {
    const double mu = in.mean()(i);
    const double v = clamp_variance(in.variance(i), "relu_propagate");
    const double sigma = counted::sqrt(v);
    sd(i) = sigma;
    if (sigma < kSigmaFloor) {
      mean(i) = mu > 0.0 ? mu : 0.0;
      var(i) = 0.0;
      gain(i) = mu > 0.0 ? 1.0 : (mu < 0.0 ? 0.0 : 0.5);
      continue;
    }
    const double alpha = mu / sigma;
    const double cdf = counted::normal_cdf(alpha);
    const double pdf = counted::normal_pdf(alpha);
    const double m = alpha * cdf + pdf;  // mean / sigma
    mean(i) = sigma * m;
    var(i) = clamp_variance(v * ((alpha * alpha + 1.0) * cdf + alpha * pdf - m * m), "relu_propagate");
    gain(i) = cdf;
    if (series) {
      detail::relu_series_coefficients(alpha, cdf, pdf, K, coef.col(i).data());
      double fact = 1.0;
      for (int k = 1; k <= K; ++k) {
        fact *= k;
        coef(k, i) /= std::sqrt(fact);
      }
    }
  }
  if (!in.is_full()) return MomentVector::diagonal(std::move(mean), std::move(var));
  MatrixXd cov;
  if (series) {
    cov.resize(n, n);
    for (Index j = 0; j < n; ++j) {
      for (Index i = j + 1; i < n; ++i) {
        double value = 0.0;
        if (sd(i) >= kSigmaFloor && sd(j) >= kSigmaFloor) {
          const double rho = detail::clamp_correlation(in.cov()(i, j), sd(i), sd(j));
          double power = 1.0, s = 0.0;
          for (int k = 1; k <= K; ++k) {
            power *= rho;
            s += power * coef(k, i) * coef(k, j);
          }
          value = sd(i) * sd(j) * s;
        }
        cov(i, j) = cov(j, i) = value;
      }
    }
  } else {
    cov = gain.asDiagonal() * in.cov() * gain.asDiagonal();
  }
  cov.diagonal() = var;
  return MomentVector::full(std::move(mean), std::move(cov));
}

}  // namespace mpgelu
