#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mpgelu/network.hpp"
#include "mpgelu/objective.hpp"

namespace mpgelu {

/// splitmix64 finalizer; derives independent seeds for sub-streams.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

struct TrainConfig {
  double learning_rate = 0.001;
  int epochs = 500;
  int batch_size = 256;
  std::uint64_t seed = 0;

  /// Toy regression settings.
  static TrainConfig toy() { return {0.1, 1000, 100, 0}; }
  /// UCI benchmark settings.
  static TrainConfig uci() { return {0.001, 500, 256, 0}; }

  void validate() const {
    if (!(learning_rate > 0.0)) throw std::invalid_argument("TrainConfig: learning rate must be > 0");
    if (epochs < 0) throw std::invalid_argument("TrainConfig: epochs must be >= 0");
    if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch size must be >= 1");
  }
};

/// Mean negative expected log-likelihood over the selected rows. Parameter
/// gradients of that loss overwrite params.grads.
inline double loss_and_gradients(const ModelConfig& config, ParameterSet& params,
                                 const MatrixXd& features, const VectorXd& labels,
                                 std::span<const Index> rows) {
  if (rows.empty()) throw std::invalid_argument("loss_and_gradients: empty batch");
  if (features.rows() != labels.size()) {
    throw std::invalid_argument("loss_and_gradients: feature/label row counts differ");
  }
  params.zero_grads();
  const double scale = -1.0 / static_cast<double>(rows.size());
  double total = 0.0;
  VectorXd x(features.cols());
  for (const Index r : rows) {
    x = features.row(r).transpose();
    const ForwardTrace trace = forward_traced(config, params, x);
    HeadLikelihood ll = head_log_likelihood_with_gradient(trace.output, labels(r), config.head);
    total += ll.value;
    backward(config, params, trace, std::move(ll.grad), scale);
  }
  const double loss = -total / static_cast<double>(rows.size());
  if (!std::isfinite(loss)) throw std::domain_error("loss_and_gradients: non-finite loss");
  return loss;
}

inline double loss_and_gradients(const ModelConfig& config, ParameterSet& params,
                                 const MatrixXd& features, const VectorXd& labels) {
  std::vector<Index> rows(static_cast<std::size_t>(features.rows()));
  std::iota(rows.begin(), rows.end(), Index{0});
  return loss_and_gradients(config, params, features, labels, rows);
}

/// Mean negative expected log-likelihood without gradients.
inline double mean_loss(const ModelConfig& config, const ParameterSet& params,
                        const MatrixXd& features, const VectorXd& labels) {
  double total = 0.0;
  for (Index r = 0; r < features.rows(); ++r) {
    total += head_log_likelihood(forward(config, params, features.row(r).transpose()), labels(r),
                                 config.head);
  }
  return -total / static_cast<double>(features.rows());
}

/// Plain SGD: w <- w - lr * g.
inline void sgd_step(ParameterSet& params, double learning_rate) {
  if (params.grads.size() != params.values.size()) {
    throw std::invalid_argument("sgd_step: gradient accumulators missing");
  }
  for (std::size_t k = 0; k < params.values.size(); ++k) {
    params.values[k].weight -= learning_rate * params.grads[k].weight;
    params.values[k].bias -= learning_rate * params.grads[k].bias;
  }
}

struct TrainResult {
  ParameterSet params;
  std::vector<double> loss_trace;  // per-epoch mean loss
};

/// Mini-batch SGD from the given parameters. Rows are reshuffled each epoch
/// with a generator seeded from config.seed; the last batch may be short.
inline TrainResult train_from(const ModelConfig& config, ParameterSet params,
                              const TrainConfig& train_config, const MatrixXd& features,
                              const VectorXd& labels) {
  train_config.validate();
  config.validate();
  if (features.rows() == 0) throw std::invalid_argument("train: empty dataset");
  if (features.cols() != config.input_dim) {
    throw std::invalid_argument("train: feature width " + std::to_string(features.cols()) +
                                " does not match model input " + std::to_string(config.input_dim));
  }
  TrainResult result;
  std::mt19937_64 shuffle_rng(derive_seed(train_config.seed, 1));
  std::vector<Index> order(static_cast<std::size_t>(features.rows()));
  std::iota(order.begin(), order.end(), Index{0});
  const std::size_t batch = static_cast<std::size_t>(train_config.batch_size);
  result.loss_trace.reserve(static_cast<std::size_t>(train_config.epochs));
  for (int epoch = 0; epoch < train_config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double epoch_total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t len = std::min(batch, order.size() - start);
      std::span<const Index> rows(order.data() + start, len);
      epoch_total += loss_and_gradients(config, params, features, labels, rows) * static_cast<double>(len);
      sgd_step(params, train_config.learning_rate);
    }
    result.loss_trace.push_back(epoch_total / static_cast<double>(order.size()));
  }
  result.params = std::move(params);
  return result;
}

inline TrainResult train(const ModelConfig& config, const TrainConfig& train_config,
                         const MatrixXd& features, const VectorXd& labels) {
  return train_from(config, init_parameters(config, derive_seed(train_config.seed, 0)),
                    train_config, features, labels);
}

}  // namespace mpgelu
