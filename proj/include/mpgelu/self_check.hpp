#pragma once

// Property suites shared by the `check` command and the acceptance tests:
// analytic moments vs. the Monte-Carlo oracle, analytic gradients vs. central
// finite differences, and the closed-form objective vs. sampling.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "mpgelu/mc_oracle.hpp"
#include "mpgelu/moments.hpp"
#include "mpgelu/network.hpp"
#include "mpgelu/objective.hpp"
#include "mpgelu/training.hpp"

namespace mpgelu {

struct CheckOutcome {
  std::string name;
  bool passed = false;
  std::string detail;
};

enum class LayerKind { Dense, Dropout, MpGelu, Relu };

inline const char* to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::Dense: return "dense";
    case LayerKind::Dropout: return "dropout";
    case LayerKind::MpGelu: return "mp_gelu";
    case LayerKind::Relu: return "relu";
  }
  return "?";
}

/// Random "well-conditioned" Gaussian moments: standard deviations
/// ~ exp(N(0, 0.5^2)), means = sd * t with t ~ N(0, 1) truncated to
/// |t| <= max_ratio, and in Full mode a correlation matrix with every
/// |rho| <= max_corr (rejection sampled from A A^T + n I).
inline MomentVector random_moments(std::mt19937_64& rng, Index n, CovarianceMode mode,
                                   double max_corr = 0.4, double max_ratio = 2.5) {
  std::normal_distribution<double> z(0.0, 1.0);
  VectorXd mean(n), sd(n);
  for (Index i = 0; i < n; ++i) {
    sd(i) = std::exp(0.5 * z(rng));
    double t = z(rng);
    while (std::abs(t) > max_ratio) t = z(rng);
    mean(i) = sd(i) * t;
  }
  if (mode == CovarianceMode::Diagonal) return MomentVector::diagonal(mean, sd.cwiseAbs2());
  MatrixXd corr;
  for (int attempt = 0;; ++attempt) {
    MatrixXd a(n, n);
    for (Index i = 0; i < n; ++i) {
      for (Index j = 0; j < n; ++j) a(i, j) = z(rng);
    }
    MatrixXd m = a * a.transpose() + static_cast<double>(n) * MatrixXd::Identity(n, n);
    const VectorXd inv = m.diagonal().cwiseSqrt().cwiseInverse();
    corr = inv.asDiagonal() * m * inv.asDiagonal();
    MatrixXd off = corr;
    off.diagonal().setZero();
    if (n == 1 || off.cwiseAbs().maxCoeff() <= max_corr || attempt > 1000) break;
  }
  MatrixXd cov = sd.asDiagonal() * corr * sd.asDiagonal();
  cov = 0.5 * (cov + cov.transpose()).eval();
  return MomentVector::full(mean, cov);
}

/// Entries ~ N(0, 1 / n).
inline MatrixXd random_weights(std::mt19937_64& rng, Index rows, Index cols) {
  std::normal_distribution<double> z(0.0, 1.0 / std::sqrt(static_cast<double>(cols)));
  MatrixXd w(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    for (Index j = 0; j < cols; ++j) w(i, j) = z(rng);
  }
  return w;
}

struct OracleComparison {
  bool passed = true;
  double worst_ratio = 0.0;  // |analytic - mc| / allowed, max over entries
  std::string worst_entry;
  int entries = 0;
};

/// Compares every mean entry and every covariance entry (variances only in
/// Diagonal mode) with `z` oracle standard errors. When `offdiag_relative` is
/// positive, off-diagonal entries may instead lie within that fraction of the
/// oracle value.
inline OracleComparison compare_with_oracle(const MomentVector& analytic, const McEstimate& mc,
                                            double z, double offdiag_relative = 0.0) {
  OracleComparison out;
  const auto consider = [&](double a, double b, double allowed, const std::string& what) {
    allowed += 1e-12 * std::max(1.0, std::abs(b));
    const double ratio = std::abs(a - b) / allowed;
    ++out.entries;
    if (ratio > out.worst_ratio) {
      out.worst_ratio = ratio;
      std::ostringstream s;
      s << what << " analytic=" << a << " mc=" << b;
      out.worst_entry = s.str();
    }
    if (ratio > 1.0) out.passed = false;
  };
  const Index n = analytic.size();
  for (Index i = 0; i < n; ++i) {
    consider(analytic.mean()(i), mc.mean(i), z * mc.se_mean(i), "mean[" + std::to_string(i) + "]");
  }
  for (Index i = 0; i < n; ++i) {
    for (Index j = i; j < n; ++j) {
      if (i != j && !analytic.is_full()) continue;
      double allowed = z * mc.se_cov(i, j);
      if (i != j && offdiag_relative > 0.0) allowed = std::max(allowed, offdiag_relative * std::abs(mc.cov(i, j)));
      const double a = analytic.is_full() ? analytic.cov()(i, j) : analytic.var()(i);
      consider(a, mc.cov(i, j), allowed, "cov[" + std::to_string(i) + "," + std::to_string(j) + "]");
    }
  }
  return out;
}

/// Randomized oracle comparison for one layer type in one covariance mode.
inline CheckOutcome check_layer_oracle(LayerKind kind, CovarianceMode mode, int cases,
                                       std::int64_t samples, std::uint64_t seed, double z = 4.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> rate_dist(0.05, 0.5);
  const double rel = (kind == LayerKind::Relu && mode == CovarianceMode::Full) ? 0.15 : 0.0;
  int failures = 0, entries = 0;
  double worst = 0.0;
  std::string worst_entry;
  // Keeps a few hundred expected draws on each side of every rectifier.
  const double max_ratio = samples >= 100'000 ? 2.5 : 2.0;
  for (int c = 0; c < cases; ++c) {
    const Index n = 2 + c % 3;
    const MomentVector in = random_moments(rng, n, mode, 0.4, max_ratio);
    MomentVector analytic = in;
    McEstimate mc;
    const std::uint64_t case_seed = derive_seed(seed, static_cast<std::uint64_t>(c));
    switch (kind) {
      case LayerKind::Dense: {
        const Index m = 2 + (c / 3) % 3;
        DenseBlock block{random_weights(rng, m, n), random_weights(rng, m, 1).col(0)};
        analytic = dense_propagate(in, block.weight, block.bias);
        mc = mc_layer_moments(DenseLayer{n, m}, in, samples, case_seed, &block);
        break;
      }
      case LayerKind::Dropout: {
        const double rate = rate_dist(rng);
        analytic = dropout_propagate(in, rate);
        mc = mc_layer_moments(DropoutLayer{rate}, in, samples, case_seed);
        break;
      }
      case LayerKind::MpGelu:
        analytic = mp_gelu_propagate(in);
        mc = mc_layer_moments(MpGeluLayer{}, in, samples, case_seed);
        break;
      case LayerKind::Relu:
        analytic = relu_propagate(in);
        mc = mc_layer_moments(ReluLayer{}, in, samples, case_seed);
        break;
    }
    const OracleComparison cmp = compare_with_oracle(analytic, mc, z, rel);
    entries += cmp.entries;
    if (!cmp.passed) ++failures;
    if (cmp.worst_ratio > worst) {
      worst = cmp.worst_ratio;
      worst_entry = "case " + std::to_string(c) + " " + cmp.worst_entry;
    }
  }
  std::ostringstream detail;
  detail << cases << " cases, " << entries << " entries, " << samples << " samples; worst |diff|/tol="
         << std::setprecision(3) << worst << " (" << worst_entry << ")";
  return {std::string("oracle/") + to_string(kind) + "/" + to_string(mode), failures == 0, detail.str()};
}

struct GradientCheckResult {
  int parameters = 0;
  int failures = 0;
  double worst_relative = 0.0;
  double worst_absolute_small = 0.0;
};

/// Central finite differences (step h) on every Dense parameter of the mean
/// loss over a fixed random batch.
inline GradientCheckResult finite_difference_check(const ModelConfig& config, ParameterSet params,
                                                   const MatrixXd& x, const VectorXd& y,
                                                   double step = 1e-5, double rel_tol = 1e-4,
                                                   double abs_tol = 1e-7, double small = 1e-3) {
  GradientCheckResult r;
  loss_and_gradients(config, params, x, y);
  const std::vector<DenseBlock> analytic = params.grads;
  const auto probe = [&](double& slot, double grad) {
    const double saved = slot;
    slot = saved + step;
    const double up = mean_loss(config, params, x, y);
    slot = saved - step;
    const double down = mean_loss(config, params, x, y);
    slot = saved;
    const double fd = (up - down) / (2.0 * step);
    ++r.parameters;
    const double scale = std::max(std::abs(grad), std::abs(fd));
    bool ok;
    if (scale < small) {
      const double a = std::abs(grad - fd);
      r.worst_absolute_small = std::max(r.worst_absolute_small, a);
      ok = a < abs_tol || std::abs(grad - fd) / scale < rel_tol;
    } else {
      const double rel = std::abs(grad - fd) / scale;
      r.worst_relative = std::max(r.worst_relative, rel);
      ok = rel < rel_tol;
    }
    if (!ok) ++r.failures;
  };
  for (std::size_t k = 0; k < params.values.size(); ++k) {
    DenseBlock& b = params.values[k];
    for (Index i = 0; i < b.weight.rows(); ++i) {
      for (Index j = 0; j < b.weight.cols(); ++j) probe(b.weight(i, j), analytic[k].weight(i, j));
    }
    for (Index i = 0; i < b.bias.size(); ++i) probe(b.bias(i), analytic[k].bias(i));
  }
  return r;
}

inline CheckOutcome check_gradients(Architecture arch, CovarianceMode mode, HeadType head,
                                    Index width, std::uint64_t seed, Index input_dim = 4,
                                    Index batch = 8) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> z(0.0, 1.0);
  const ModelConfig config = build_model(arch, input_dim, width, 0.1, mode, head);
  ParameterSet params = init_parameters(config, seed);
  for (auto& b : params.values) {
    for (Index i = 0; i < b.bias.size(); ++i) b.bias(i) = 0.1 * z(rng);
  }
  MatrixXd x(batch, input_dim);
  VectorXd y(batch);
  for (Index r = 0; r < batch; ++r) {
    for (Index c = 0; c < input_dim; ++c) x(r, c) = z(rng);
    y(r) = z(rng);
  }
  const GradientCheckResult res = finite_difference_check(config, params, x, y);
  std::ostringstream detail;
  detail << res.parameters << " parameters, " << res.failures << " failures; worst rel="
         << std::setprecision(3) << res.worst_relative << ", worst abs(small)=" << res.worst_absolute_small;
  std::ostringstream name;
  name << "gradient/" << to_string(arch) << "/" << to_string(mode) << "/head" << to_string(head)
       << "/w" << width;
  return {name.str(), res.failures == 0 && res.parameters > 0, detail.str()};
}

/// Random two-output heads: m1 ~ N(0,1), m2 ~ N(0, 0.5^2), variances in
/// [0.01, 0.5] with |corr| <= 0.8, y = m1 + N(0, 1).
inline CheckOutcome check_expected_ll(int cases, std::int64_t samples, std::uint64_t seed,
                                      double z_tol = 4.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> z(0.0, 1.0);
  std::uniform_real_distribution<double> var_dist(0.01, 0.5), corr_dist(-0.8, 0.8);
  int failures = 0;
  double worst = 0.0;
  for (int c = 0; c < cases; ++c) {
    VectorXd m(2);
    m << z(rng), 0.5 * z(rng);
    const double v1 = var_dist(rng), v2 = var_dist(rng), rho = corr_dist(rng);
    MatrixXd s(2, 2);
    s << v1, rho * std::sqrt(v1 * v2), rho * std::sqrt(v1 * v2), v2;
    const double y = m(0) + z(rng);
    const MomentVector head = MomentVector::full(m, s);
    const double analytic = expected_log_likelihood(head, y);
    const McScalar mc = mc_expected_ll(head, y, samples, derive_seed(seed, static_cast<std::uint64_t>(c)));
    const double ratio = std::abs(analytic - mc.estimate) / (z_tol * mc.se);
    worst = std::max(worst, ratio);
    if (!(ratio <= 1.0)) ++failures;
  }
  std::ostringstream detail;
  detail << cases << " cases, " << samples << " samples, " << failures << " outside " << z_tol
         << " se; worst |diff|/tol=" << std::setprecision(3) << worst;
  return {"objective/expected_log_likelihood", failures == 0, detail.str()};
}

/// Suite used by the `check` command. Quick: 1e4 samples, full: 1e6.
inline std::vector<CheckOutcome> run_self_check(bool full, std::uint64_t seed = 0) {
  const std::int64_t samples = full ? 1'000'000 : 10'000;
  const int cases = full ? 100 : 20;
  std::vector<CheckOutcome> out;
  std::uint64_t stream = 0;
  for (auto mode : {CovarianceMode::Full, CovarianceMode::Diagonal}) {
    for (auto kind : {LayerKind::Dense, LayerKind::Dropout, LayerKind::MpGelu, LayerKind::Relu}) {
      try {
        out.push_back(check_layer_oracle(kind, mode, cases, samples, derive_seed(seed, stream++)));
      } catch (const std::exception& e) {
        out.push_back({std::string("oracle/") + to_string(kind) + "/" + to_string(mode), false, e.what()});
      }
    }
  }
  for (auto arch : {Architecture::MpGelu, Architecture::Relu}) {
    for (auto mode : {CovarianceMode::Full, CovarianceMode::Diagonal}) {
      for (auto head : {HeadType::Heteroscedastic2, HeadType::Homoscedastic1}) {
        try {
          out.push_back(check_gradients(arch, mode, head, full ? 20 : 8, derive_seed(seed, stream++)));
        } catch (const std::exception& e) {
          out.push_back({"gradient/" + std::string(to_string(arch)), false, e.what()});
        }
      }
    }
  }
  try {
    out.push_back(check_expected_ll(full ? 200 : 50, samples, derive_seed(seed, stream++)));
  } catch (const std::exception& e) {
    out.push_back({"objective/expected_log_likelihood", false, e.what()});
  }
  return out;
}

}  // namespace mpgelu
