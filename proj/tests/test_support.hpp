#pragma once

#include <gtest/gtest.h>

#include <random>

#include "mpgelu/mc_oracle.hpp"
#include "mpgelu/moments.hpp"
#include "mpgelu/self_check.hpp"

namespace testing_support {

using mpgelu::Index;
using mpgelu::MatrixXd;

inline mpgelu::MomentVector random_full_moments(std::mt19937_64& rng, Index n, double max_corr) {
  return mpgelu::random_moments(rng, n, mpgelu::CovarianceMode::Full, max_corr);
}

inline MatrixXd random_matrix(std::mt19937_64& rng, Index rows, Index cols) {
  return mpgelu::random_weights(rng, rows, cols);
}

inline void expect_moments_within(const mpgelu::MomentVector& analytic, const mpgelu::McEstimate& mc,
                                  double k_se) {
  const mpgelu::OracleComparison cmp = mpgelu::compare_with_oracle(analytic, mc, k_se);
  EXPECT_TRUE(cmp.passed) << "worst entry: " << cmp.worst_entry << " ratio " << cmp.worst_ratio;
}

}  // namespace testing_support
