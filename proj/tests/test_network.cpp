#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "mpgelu/mc_oracle.hpp"
#include "mpgelu/network.hpp"
#include "test_support.hpp"

using namespace mpgelu;

namespace {

ModelConfig mp(Index q, HeadType head = HeadType::Heteroscedastic2, CovarianceMode mode = CovarianceMode::Full) {
  return build_mp_gelu_model(q, 20, 0.05, mode, head);
}

ModelConfig relu(Index q, HeadType head = HeadType::Heteroscedastic2, CovarianceMode mode = CovarianceMode::Full) {
  return build_relu_model(q, 20, 0.05, mode, head);
}

VectorXd random_input(std::mt19937_64& rng, Index q) {
  std::normal_distribution<double> z(0.0, 1.0);
  VectorXd x(q);
  for (Index i = 0; i < q; ++i) x(i) = z(rng);
  return x;
}

}  // namespace

TEST(ModelStructure, MpGeluLayerSequence) {
  const ModelConfig c = mp(13);
  EXPECT_EQ(c.describe(), "Dropout Dense MP-GELU Dense MP-GELU Dense");
  EXPECT_EQ(c.layers.size(), 6u);
  EXPECT_EQ(c.dropout_count(), 1u);
  const auto widths = [&] {
    std::vector<Index> w;
    for (const auto& l : c.layers) {
      if (const auto* d = std::get_if<DenseLayer>(&l)) w.push_back(d->out);
    }
    return w;
  }();
  EXPECT_EQ(widths, (std::vector<Index>{20, 20, 2}));
  EXPECT_EQ(std::get<DenseLayer>(c.layers[1]).in, 13);
}

TEST(ModelStructure, ReluLayerSequence) {
  const ModelConfig c = relu(13);
  EXPECT_EQ(c.describe(), "Dropout Dense ReLU Dropout Dense ReLU Dropout Dense");
  EXPECT_EQ(c.layers.size(), 8u);
  EXPECT_EQ(c.dropout_count(), 3u);
  const ModelConfig q8 = relu(8);
  const auto& last = std::get<DenseLayer>(q8.layers.back());
  EXPECT_EQ(last.in, 20);
  EXPECT_EQ(last.out, 2);
}

TEST(ModelStructure, MpGeluHasFewerLayersThanRelu) {
  EXPECT_LT(mp(13).layers.size(), relu(13).layers.size());
}

TEST(ModelStructure, OneOutputHead) {
  EXPECT_EQ(std::get<DenseLayer>(mp(1, HeadType::Homoscedastic1).layers.back()).out, 1);
  EXPECT_EQ(std::get<DenseLayer>(relu(1, HeadType::Homoscedastic1).layers.back()).out, 1);
}

TEST(ModelStructure, DegenerateArgumentsAreErrors) {
  EXPECT_THROW(build_mp_gelu_model(13, 0, 0.1, CovarianceMode::Full, HeadType::Heteroscedastic2),
               std::invalid_argument);
  EXPECT_THROW(build_relu_model(0, 20, 0.1, CovarianceMode::Full, HeadType::Heteroscedastic2),
               std::invalid_argument);
  EXPECT_THROW(build_relu_model(3, 20, 1.5, CovarianceMode::Full, HeadType::Heteroscedastic2),
               std::invalid_argument);
}

TEST(ModelStructure, ValidateRejectsBrokenChains) {
  ModelConfig c = mp(4);
  std::get<DenseLayer>(c.layers[3]).in = 7;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(InitParameters, DeterministicPerSeed) {
  const ModelConfig c = mp(13);
  const ParameterSet a = init_parameters(c, 5), b = init_parameters(c, 5), d = init_parameters(c, 6);
  for (std::size_t k = 0; k < a.values.size(); ++k) {
    EXPECT_EQ(a.values[k].weight, b.values[k].weight);
    EXPECT_EQ(a.values[k].bias, b.values[k].bias);
  }
  EXPECT_NE(a.values[0].weight, d.values[0].weight);
}

TEST(InitParameters, FanBasedBoundAndZeroBias) {
  const ParameterSet p = init_parameters(mp(13), 1);
  EXPECT_LE(p.values[0].weight.cwiseAbs().maxCoeff(), std::sqrt(6.0 / 33.0));
  EXPECT_LE(std::sqrt(6.0 / 33.0), 0.4265);
  for (const auto& b : p.values) EXPECT_TRUE(b.bias.isZero(0.0));
}

TEST(InitParameters, SharedAcrossArchitecturesWithEqualDenseShapes) {
  const ParameterSet a = init_parameters(mp(13), 9), b = init_parameters(relu(13), 9);
  ASSERT_EQ(a.values.size(), b.values.size());
  for (std::size_t k = 0; k < a.values.size(); ++k) EXPECT_EQ(a.values[k].weight, b.values[k].weight);
}

TEST(Forward, ZeroNetworkGivesZeroMoments) {
  const ModelConfig c = build_mp_gelu_model(3, 20, 0.0, CovarianceMode::Full, HeadType::Heteroscedastic2);
  ParameterSet p = init_parameters(c, 0);
  for (auto& b : p.values) b.weight.setZero();
  const MomentVector h = forward(c, p, VectorXd::Constant(3, 0.7));
  EXPECT_TRUE(h.mean().isZero(0.0));
  EXPECT_TRUE(h.cov().isZero(0.0));
}

TEST(Forward, DiagonalModeStaysDiagonalAndHeadShape) {
  std::mt19937_64 rng(2);
  for (const auto arch : {Architecture::MpGelu, Architecture::Relu}) {
    const ModelConfig c = build_model(arch, 5, 20, 0.1, CovarianceMode::Diagonal, HeadType::Heteroscedastic2);
    const MomentVector h = forward(c, init_parameters(c, 1), random_input(rng, 5));
    EXPECT_FALSE(h.is_full());
    EXPECT_EQ(h.var().size(), 2);
    const ModelConfig f = build_model(arch, 5, 20, 0.1, CovarianceMode::Full, HeadType::Heteroscedastic2);
    const MomentVector hf = forward(f, init_parameters(f, 1), random_input(rng, 5));
    EXPECT_EQ(hf.cov().rows(), 2);
    EXPECT_EQ(hf.cov().cols(), 2);
  }
}

TEST(Forward, BitIdenticalRepeatedCalls) {
  std::mt19937_64 rng(3);
  const ModelConfig c = relu(4);
  const ParameterSet p = init_parameters(c, 3);
  const VectorXd x = random_input(rng, 4);
  const MomentVector a = forward(c, p, x), b = forward(c, p, x);
  EXPECT_EQ(a.mean(), b.mean());
  EXPECT_EQ(a.cov(), b.cov());
}

TEST(Forward, WrongInputLengthIsAnError) {
  const ModelConfig c = mp(4);
  EXPECT_THROW(forward(c, init_parameters(c, 0), VectorXd::Zero(3)), std::invalid_argument);
}

// MP-GELU moment propagation is exact for the gated sampling semantics, so the
// whole network agrees with sampling at the usual 4 standard errors.
TEST(ForwardVsMonteCarlo, MpGeluNetworkFullMode) {
  std::mt19937_64 rng(4);
  const ModelConfig c = build_mp_gelu_model(3, 5, 0.2, CovarianceMode::Full, HeadType::Heteroscedastic2);
  const ParameterSet p = init_parameters(c, 4);
  const VectorXd x = random_input(rng, 3);
  testing_support::expect_moments_within(forward(c, p, x), mc_forward(c, p, x, 100'000, 8), 4.0);
}

TEST(ForwardVsMonteCarlo, MpGeluNetworkDiagonalModeVariances) {
  std::mt19937_64 rng(5);
  // One hidden unit per layer: no cross covariances are dropped, so the
  // diagonal propagation is exact as well.
  const ModelConfig c = build_mp_gelu_model(2, 1, 0.2, CovarianceMode::Diagonal, HeadType::Homoscedastic1);
  const ParameterSet p = init_parameters(c, 5);
  const VectorXd x = random_input(rng, 2);
  const McEstimate mc = mc_forward(c, p, x, 100'000, 9);
  const MomentVector h = forward(c, p, x);
  EXPECT_NEAR(h.mean()(0), mc.mean(0), 4.0 * mc.se_mean(0));
}

// Rectified, dropped-out activations are mixtures rather than Gaussians, so a
// ReLU network only approximately matches sampling: means within 25% of the
// output standard deviation, variances within 25%.
TEST(ForwardVsMonteCarlo, ReluNetworkApproximatelyMatches) {
  std::mt19937_64 rng(6);
  const ModelConfig c = build_relu_model(3, 8, 0.1, CovarianceMode::Full, HeadType::Heteroscedastic2);
  const ParameterSet p = init_parameters(c, 6);
  const VectorXd x = random_input(rng, 3);
  const MomentVector h = forward(c, p, x);
  const McEstimate mc = mc_forward(c, p, x, 200'000, 10);
  for (Index i = 0; i < 2; ++i) {
    EXPECT_NEAR(h.mean()(i), mc.mean(i), 0.25 * std::sqrt(mc.cov(i, i)) + 4.0 * mc.se_mean(i));
    EXPECT_NEAR(h.cov()(i, i), mc.cov(i, i), 0.25 * mc.cov(i, i) + 4.0 * mc.se_cov(i, i));
  }
}

TEST(ModelFile, JsonRoundTripIsExact) {
  const ModelConfig c = relu(4, HeadType::Homoscedastic1, CovarianceMode::Diagonal);
  const ParameterSet p = init_parameters(c, 12);
  const auto path = std::filesystem::temp_directory_path() / "mpgelu_model_roundtrip.json";
  save_model(path.string(), c, p);
  const auto [c2, p2] = load_model(path.string());
  std::filesystem::remove(path);
  EXPECT_EQ(c2.describe(), c.describe());
  EXPECT_EQ(c2.mode, c.mode);
  EXPECT_EQ(c2.head, c.head);
  ASSERT_EQ(p2.values.size(), p.values.size());
  for (std::size_t k = 0; k < p.values.size(); ++k) {
    EXPECT_EQ(p2.values[k].weight, p.values[k].weight);
    EXPECT_EQ(p2.values[k].bias, p.values[k].bias);
  }
}

TEST(ModelFile, RejectsForeignDocuments) {
  EXPECT_THROW(model_from_json(nlohmann::json{{"format", "other"}}), std::invalid_argument);
}
