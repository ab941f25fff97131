#pragma once

// Brute-force Monte-Carlo reference for the analytic moment formulas. Used by
// tests and the self-check command; never on the prediction path.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <variant>

#include "mpgelu/moments.hpp"
#include "mpgelu/network.hpp"
#include "mpgelu/normal.hpp"

namespace mpgelu {

struct McEstimate {
  VectorXd mean;
  MatrixXd cov;           // unbiased sample covariance
  VectorXd se_mean;       // standard error of each mean entry
  MatrixXd se_cov;        // standard error of each covariance entry
  std::int64_t samples = 0;
};

/// Draws from N(mean, cov) through a symmetric PSD square root.
class GaussianSampler {
 public:
  explicit GaussianSampler(const MomentVector& moments) : mean_(moments.mean()) {
    const Index n = moments.size();
    if (!moments.is_full()) {
      VectorXd sd(n);
      for (Index i = 0; i < n; ++i) sd(i) = std::sqrt(clamp_variance(moments.variance(i), "GaussianSampler"));
      factor_ = sd.asDiagonal();
      return;
    }
    Eigen::SelfAdjointEigenSolver<MatrixXd> eig(moments.cov());
    if (eig.info() != Eigen::Success) throw std::runtime_error("GaussianSampler: eigendecomposition failed");
    VectorXd lambda = eig.eigenvalues();
    for (Index i = 0; i < n; ++i) {
      if (lambda(i) < 0.0) {
        if (lambda(i) > -kVarianceClamp) {
          lambda(i) = 0.0;
        } else {
          throw std::domain_error("GaussianSampler: covariance is not PSD (eigenvalue " +
                                  std::to_string(lambda(i)) + ")");
        }
      }
    }
    factor_ = eig.eigenvectors() * lambda.cwiseSqrt().asDiagonal();
  }

  const MatrixXd& factor() const { return factor_; }

  template <class Rng>
  void draw(Rng& rng, VectorXd& out) {
    z_.resize(mean_.size());
    for (Index i = 0; i < z_.size(); ++i) z_(i) = normal_(rng);
    out.noalias() = factor_ * z_;
    out += mean_;
  }

 private:
  VectorXd mean_;
  MatrixXd factor_;
  VectorXd z_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

/// Streaming accumulator of sample moments and their standard errors. Keeps
/// the samples so the covariance standard errors use exact centering.
class MomentAccumulator {
 public:
  MomentAccumulator(Index dim, std::int64_t samples) : data_(samples, dim) {}

  void set(std::int64_t k, const VectorXd& v) { data_.row(k) = v.transpose(); }

  McEstimate finish() const {
    const auto n = static_cast<double>(data_.rows());
    const Index d = data_.cols();
    McEstimate est;
    est.samples = data_.rows();
    est.mean = data_.colwise().mean().transpose();
    const MatrixXd centered = data_.rowwise() - est.mean.transpose();
    est.cov = (centered.transpose() * centered) / (n - 1.0);
    est.se_mean = (centered.colwise().squaredNorm().transpose() / (n - 1.0)).cwiseSqrt() / std::sqrt(n);
    est.se_cov.resize(d, d);
    for (Index i = 0; i < d; ++i) {
      for (Index j = i; j < d; ++j) {
        const VectorXd prod = centered.col(i).cwiseProduct(centered.col(j));
        const double m = prod.mean();
        const double var = (prod.array() - m).square().sum() / (n - 1.0);
        est.se_cov(i, j) = est.se_cov(j, i) = std::sqrt(var / n);
      }
    }
    return est;
  }

 private:
  MatrixXd data_;
};

namespace detail {

inline double unit_uniform(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline void apply_mask(std::mt19937_64& rng, const VectorXd& keep, VectorXd& h) {
  for (Index i = 0; i < h.size(); ++i) {
    if (unit_uniform(rng) >= keep(i)) h(i) = 0.0;
  }
}

}  // namespace detail

/// Sampling semantics of one layer applied to draws from N(input). MP-GELU
/// gate rates come from the analytic input moments, not from the draw.
inline McEstimate mc_layer_moments(const LayerSpec& layer, const MomentVector& input,
                                   std::int64_t samples, std::uint64_t seed,
                                   const DenseBlock* dense = nullptr) {
  if (samples < 1000) throw std::invalid_argument("mc_layer_moments: need at least 1000 samples");
  if (std::holds_alternative<DenseLayer>(layer) && dense == nullptr) {
    throw std::invalid_argument("mc_layer_moments: Dense layer needs weights");
  }
  GaussianSampler sampler(input);
  std::mt19937_64 rng(seed);
  VectorXd keep;
  if (const auto* d = std::get_if<DropoutLayer>(&layer)) {
    keep = VectorXd::Constant(input.size(), 1.0 - d->rate);
  } else if (std::holds_alternative<MpGeluLayer>(layer)) {
    keep = (1.0 - mp_gelu_rates(input).rates.array()).matrix();
  }
  const Index out_dim = dense ? dense->weight.rows() : input.size();
  MomentAccumulator acc(out_dim, samples);
  VectorXd h(input.size()), out(out_dim);
  for (std::int64_t k = 0; k < samples; ++k) {
    sampler.draw(rng, h);
    if (std::holds_alternative<DenseLayer>(layer)) {
      out.noalias() = dense->weight * h;
      out += dense->bias;
    } else if (std::holds_alternative<ReluLayer>(layer)) {
      out = h.cwiseMax(0.0);
    } else {
      detail::apply_mask(rng, keep, h);
      out = h;
    }
    acc.set(k, out);
  }
  return acc.finish();
}

/// Samples whole-network outputs for a deterministic input. Dropout masks are
/// drawn per layer; MP-GELU keep probabilities come from the analytic moments
/// of that layer's input under the same model.
inline McEstimate mc_forward(const ModelConfig& config, const ParameterSet& params,
                             const VectorXd& x, std::int64_t samples, std::uint64_t seed) {
  if (samples < 2) throw std::invalid_argument("mc_forward: need at least 2 samples");
  const ForwardTrace trace = forward_traced(config, params, x);
  std::vector<VectorXd> keep(config.layers.size());
  for (std::size_t k = 0; k < config.layers.size(); ++k) {
    if (std::holds_alternative<MpGeluLayer>(config.layers[k])) {
      keep[k] = (1.0 - mp_gelu_rates(trace.inputs[k]).rates.array()).matrix();
    } else if (const auto* d = std::get_if<DropoutLayer>(&config.layers[k])) {
      keep[k] = VectorXd::Constant(trace.inputs[k].size(), 1.0 - d->rate);
    }
  }
  std::mt19937_64 rng(seed);
  MomentAccumulator acc(config.output_dim(), samples);
  VectorXd h;
  for (std::int64_t s = 0; s < samples; ++s) {
    h = x;
    std::size_t dense_index = 0;
    for (std::size_t k = 0; k < config.layers.size(); ++k) {
      const LayerSpec& layer = config.layers[k];
      if (std::holds_alternative<DenseLayer>(layer)) {
        const DenseBlock& b = params.values[dense_index++];
        h = b.weight * h + b.bias;
      } else if (std::holds_alternative<ReluLayer>(layer)) {
        h = h.cwiseMax(0.0);
      } else {
        detail::apply_mask(rng, keep[k], h);
      }
    }
    acc.set(s, h);
  }
  return acc.finish();
}

struct McScalar {
  double estimate = 0.0;
  double se = 0.0;
};

/// MC estimate of E_{h ~ N(head)}[log N(y | h1, exp(h2))].
inline McScalar mc_expected_ll(const MomentVector& head, double y, std::int64_t samples,
                               std::uint64_t seed) {
  if (head.size() != 2) throw std::invalid_argument("mc_expected_ll: head must have 2 outputs");
  if (samples < 2) throw std::invalid_argument("mc_expected_ll: need at least 2 samples");
  const GaussianSampler sampler(head);
  const Eigen::Matrix2d f = sampler.factor();
  const double mu1 = head.mean()(0), mu2 = head.mean()(1);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  // Welford
  double mean = 0.0, m2 = 0.0;
  for (std::int64_t k = 0; k < samples; ++k) {
    const double z1 = normal(rng), z2 = normal(rng);
    const double h1 = mu1 + f(0, 0) * z1 + f(0, 1) * z2;
    const double h2 = mu2 + f(1, 0) * z1 + f(1, 1) * z2;
    const double r = y - h1;
    const double v = -0.5 * (kLog2Pi + h2 + r * r * std::exp(-h2));
    const double delta = v - mean;
    mean += delta / static_cast<double>(k + 1);
    m2 += delta * (v - mean);
  }
  const auto n = static_cast<double>(samples);
  return {mean, std::sqrt(std::max(m2, 0.0) / (n - 1.0) / n)};
}

}  // namespace mpgelu
