// Build a small MP-GELU network, train it on the toy data and print the
// predictive mean and standard deviation at a few inputs.

#include <cmath>
#include <cstdio>

#include "mpgelu/data.hpp"
#include "mpgelu/network.hpp"
#include "mpgelu/objective.hpp"
#include "mpgelu/training.hpp"

int main() {
  using namespace mpgelu;
  const Dataset data = toy_generate(100, 1);
  const ModelConfig model = build_mp_gelu_model(1, 20, 0.001, CovarianceMode::Full, HeadType::Heteroscedastic2);
  TrainConfig tc = TrainConfig::toy();
  tc.epochs = 300;
  const TrainResult fit = train(model, tc, data.features, data.labels);
  std::printf("final loss %.4f\n", fit.loss_trace.back());
  for (const double x : {-1.0, -0.5, 0.0, 0.5, 1.0}) {
    const PredictiveMoments pm =
        predictive_moments(forward(model, fit.params, VectorXd::Constant(1, x)), model.head);
    std::printf("x=%5.2f  mean=%8.4f  std=%.4f\n", x, pm.mean, std::sqrt(pm.variance));
  }
}
