#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdint>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "mpgelu/moment_adjoints.hpp"
#include "mpgelu/moments.hpp"
#include "mpgelu/objective.hpp"

namespace mpgelu {

struct DenseLayer {
  Index in = 0;
  Index out = 0;
};
struct DropoutLayer {
  double rate = 0.0;
};
struct MpGeluLayer {};
struct ReluLayer {};

using LayerSpec = std::variant<DenseLayer, DropoutLayer, MpGeluLayer, ReluLayer>;

enum class Architecture { MpGelu, Relu };

inline const char* to_string(Architecture arch) {
  return arch == Architecture::MpGelu ? "mp_gelu" : "relu";
}

inline Architecture parse_architecture(const std::string& s) {
  if (s == "mp_gelu" || s == "mpgelu") return Architecture::MpGelu;
  if (s == "relu") return Architecture::Relu;
  throw std::invalid_argument("unknown architecture '" + s + "' (expected mp_gelu|relu)");
}

inline std::string layer_name(const LayerSpec& layer) {
  return std::visit(
      [](const auto& l) -> std::string {
        using T = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<T, DenseLayer>) return "Dense";
        if constexpr (std::is_same_v<T, DropoutLayer>) return "Dropout";
        if constexpr (std::is_same_v<T, MpGeluLayer>) return "MP-GELU";
        return "ReLU";
      },
      layer);
}

struct ModelConfig {
  Architecture arch = Architecture::MpGelu;
  std::vector<LayerSpec> layers;
  CovarianceMode mode = CovarianceMode::Full;
  HeadType head = HeadType::Heteroscedastic2;
  Index input_dim = 0;
  Index hidden_width = 20;

  Index output_dim() const { return head_dim(head); }

  std::size_t dense_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += std::holds_alternative<DenseLayer>(l) ? 1 : 0;
    return n;
  }

  std::size_t dropout_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += std::holds_alternative<DropoutLayer>(l) ? 1 : 0;
    return n;
  }

  /// Space-separated layer names, e.g. "Dropout Dense MP-GELU Dense MP-GELU Dense".
  std::string describe() const {
    std::string s;
    for (const auto& l : layers) {
      if (!s.empty()) s += ' ';
      s += layer_name(l);
    }
    return s;
  }

  void validate() const {
    if (input_dim < 1) throw std::invalid_argument("ModelConfig: input dimension must be >= 1");
    if (layers.empty()) throw std::invalid_argument("ModelConfig: no layers");
    Index width = input_dim;
    for (std::size_t k = 0; k < layers.size(); ++k) {
      if (const auto* d = std::get_if<DenseLayer>(&layers[k])) {
        if (d->in != width || d->out < 1) {
          throw std::invalid_argument("ModelConfig: layer " + std::to_string(k) + " Dense(" +
                                      std::to_string(d->in) + "->" + std::to_string(d->out) +
                                      ") does not chain from width " + std::to_string(width));
        }
        width = d->out;
      } else if (const auto* p = std::get_if<DropoutLayer>(&layers[k])) {
        if (!(p->rate >= 0.0 && p->rate <= 1.0)) {
          throw std::invalid_argument("ModelConfig: dropout rate " + std::to_string(p->rate) +
                                      " outside [0, 1]");
        }
      }
    }
    if (!std::holds_alternative<DenseLayer>(layers.back())) {
      throw std::invalid_argument("ModelConfig: last layer must be Dense");
    }
    if (width != output_dim()) {
      throw std::invalid_argument("ModelConfig: final width " + std::to_string(width) +
                                  " does not match head dimension " + std::to_string(output_dim()));
    }
  }
};

namespace detail {

inline void require_builder_args(Index q, Index width, double rate) {
  if (q < 1) throw std::invalid_argument("model builder: input dimension must be >= 1");
  if (width < 1) throw std::invalid_argument("model builder: width must be >= 1");
  if (!(rate >= 0.0 && rate <= 1.0)) {
    throw std::invalid_argument("model builder: dropout rate " + std::to_string(rate) +
                                " outside [0, 1]");
  }
}

}  // namespace detail

/// Input -> Dropout -> Dense -> MP-GELU -> Dense -> MP-GELU -> Dense(head).
inline ModelConfig build_mp_gelu_model(Index q, Index width, double dropout_rate,
                                       CovarianceMode mode, HeadType head) {
  detail::require_builder_args(q, width, dropout_rate);
  ModelConfig c;
  c.arch = Architecture::MpGelu;
  c.mode = mode;
  c.head = head;
  c.input_dim = q;
  c.hidden_width = width;
  c.layers = {DropoutLayer{dropout_rate}, DenseLayer{q, width},     MpGeluLayer{},
              DenseLayer{width, width},   MpGeluLayer{},            DenseLayer{width, head_dim(head)}};
  c.validate();
  return c;
}

/// Input -> [Dropout -> Dense -> ReLU] x 2 -> Dropout -> Dense(head); all
/// dropout layers share one rate.
inline ModelConfig build_relu_model(Index q, Index width, double dropout_rate, CovarianceMode mode,
                                    HeadType head) {
  detail::require_builder_args(q, width, dropout_rate);
  ModelConfig c;
  c.arch = Architecture::Relu;
  c.mode = mode;
  c.head = head;
  c.input_dim = q;
  c.hidden_width = width;
  c.layers = {DropoutLayer{dropout_rate}, DenseLayer{q, width},         ReluLayer{},
              DropoutLayer{dropout_rate}, DenseLayer{width, width},     ReluLayer{},
              DropoutLayer{dropout_rate}, DenseLayer{width, head_dim(head)}};
  c.validate();
  return c;
}

inline ModelConfig build_model(Architecture arch, Index q, Index width, double dropout_rate,
                               CovarianceMode mode, HeadType head) {
  return arch == Architecture::MpGelu ? build_mp_gelu_model(q, width, dropout_rate, mode, head)
                                      : build_relu_model(q, width, dropout_rate, mode, head);
}

struct DenseBlock {
  MatrixXd weight;  // out x in
  VectorXd bias;
};

/// Dense weights and biases, one block per Dense layer in order, with
/// gradient accumulators of identical shape.
struct ParameterSet {
  std::vector<DenseBlock> values;
  std::vector<DenseBlock> grads;

  void zero_grads() {
    grads.resize(values.size());
    for (std::size_t k = 0; k < values.size(); ++k) {
      grads[k].weight = MatrixXd::Zero(values[k].weight.rows(), values[k].weight.cols());
      grads[k].bias = VectorXd::Zero(values[k].bias.size());
    }
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& b : values) n += static_cast<std::size_t>(b.weight.size() + b.bias.size());
    return n;
  }

  bool all_finite() const {
    for (const auto& b : values) {
      if (!b.weight.allFinite() || !b.bias.allFinite()) return false;
    }
    return true;
  }
};

/// Uniform(-sqrt(6 / (fan_in + fan_out)), +sqrt(...)) weights, zero biases.
/// Draws depend only on the Dense shapes in order, so architectures with equal
/// Dense shapes get identical parameters for the same seed.
inline ParameterSet init_parameters(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  ParameterSet params;
  for (const auto& layer : config.layers) {
    const auto* d = std::get_if<DenseLayer>(&layer);
    if (!d) continue;
    const double limit = std::sqrt(6.0 / static_cast<double>(d->in + d->out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    DenseBlock block;
    block.weight.resize(d->out, d->in);
    for (Index r = 0; r < d->out; ++r) {
      for (Index c = 0; c < d->in; ++c) block.weight(r, c) = dist(rng);
    }
    block.bias = VectorXd::Zero(d->out);
    params.values.push_back(std::move(block));
  }
  params.zero_grads();
  return params;
}

namespace detail {

inline void require_params(const ModelConfig& config, const ParameterSet& params) {
  if (params.values.size() != config.dense_count()) {
    throw std::invalid_argument("parameter set has " + std::to_string(params.values.size()) +
                                " dense blocks, model has " +
                                std::to_string(config.dense_count()));
  }
}

}  // namespace detail

/// One layer of the forward pass, dispatched on its kind.
inline MomentVector propagate_layer(const LayerSpec& layer, const MomentVector& in,
                                    const DenseBlock* dense) {
  return std::visit(
      [&](const auto& l) -> MomentVector {
        using T = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<T, DenseLayer>) {
          return dense_propagate(in, dense->weight, dense->bias);
        } else if constexpr (std::is_same_v<T, DropoutLayer>) {
          return dropout_propagate(in, l.rate);
        } else if constexpr (std::is_same_v<T, MpGeluLayer>) {
          return mp_gelu_propagate(in);
        } else {
          return relu_propagate(in);
        }
      },
      layer);
}

/// Head moments for a deterministic feature vector.
inline MomentVector forward(const ModelConfig& config, const ParameterSet& params,
                            const VectorXd& x) {
  detail::require_params(config, params);
  if (x.size() != config.input_dim) {
    throw std::invalid_argument("forward: input length " + std::to_string(x.size()) +
                                ", model expects " + std::to_string(config.input_dim));
  }
  MomentVector h = lift_deterministic(x, config.mode);
  std::size_t dense_index = 0;
  for (const auto& layer : config.layers) {
    const bool is_dense = std::holds_alternative<DenseLayer>(layer);
    h = propagate_layer(layer, h, is_dense ? &params.values[dense_index] : nullptr);
    dense_index += is_dense ? 1 : 0;
  }
  return h;
}

/// Layer inputs recorded during a forward pass, consumed by backward().
struct ForwardTrace {
  std::vector<MomentVector> inputs;
  MomentVector output = MomentVector::diagonal(VectorXd(), VectorXd());
};

inline ForwardTrace forward_traced(const ModelConfig& config, const ParameterSet& params,
                                   const VectorXd& x) {
  detail::require_params(config, params);
  if (x.size() != config.input_dim) {
    throw std::invalid_argument("forward: input length " + std::to_string(x.size()) +
                                ", model expects " + std::to_string(config.input_dim));
  }
  ForwardTrace trace;
  trace.inputs.reserve(config.layers.size());
  MomentVector h = lift_deterministic(x, config.mode);
  std::size_t dense_index = 0;
  for (const auto& layer : config.layers) {
    const bool is_dense = std::holds_alternative<DenseLayer>(layer);
    trace.inputs.push_back(h);
    h = propagate_layer(layer, h, is_dense ? &params.values[dense_index] : nullptr);
    dense_index += is_dense ? 1 : 0;
  }
  trace.output = std::move(h);
  return trace;
}

/// Back-propagates d(objective)/d(head moments) through the traced pass and
/// accumulates parameter gradients, scaled by `scale`, into params.grads.
inline void backward(const ModelConfig& config, ParameterSet& params, const ForwardTrace& trace,
                     MomentGradient head_grad, double scale = 1.0) {
  if (params.grads.size() != params.values.size()) params.zero_grads();
  MomentGradient g = std::move(head_grad);
  g.mean *= scale;
  if (g.is_full()) {
    g.cov *= scale;
  } else {
    g.var *= scale;
  }
  std::size_t dense_index = config.dense_count();
  for (std::size_t k = config.layers.size(); k-- > 0;) {
    const LayerSpec& layer = config.layers[k];
    const MomentVector& in = trace.inputs[k];
    if (std::holds_alternative<DenseLayer>(layer)) {
      --dense_index;
      DenseBlock& grad = params.grads[dense_index];
      if (k == 0) {
        // Input moments are constants; only parameter gradients are needed.
        MomentGradient unused = dense_backward(in, params.values[dense_index].weight, g,
                                               grad.weight, grad.bias);
        (void)unused;
      } else {
        g = dense_backward(in, params.values[dense_index].weight, g, grad.weight, grad.bias);
      }
      if (!grad.weight.allFinite() || !grad.bias.allFinite()) {
        throw std::domain_error("non-finite gradient in layer " + std::to_string(k) + " (Dense)");
      }
    } else {
      g = std::visit(
          [&](const auto& l) -> MomentGradient {
            using T = std::decay_t<decltype(l)>;
            if constexpr (std::is_same_v<T, DropoutLayer>) return dropout_backward(in, l.rate, g);
            else if constexpr (std::is_same_v<T, MpGeluLayer>) return mp_gelu_backward(in, g);
            else if constexpr (std::is_same_v<T, ReluLayer>) return relu_backward(in, g);
            else return g;
          },
          layer);
      if (!g.all_finite()) {
        throw std::domain_error("non-finite gradient in layer " + std::to_string(k) + " (" +
                                layer_name(layer) + ")");
      }
    }
  }
}

// Model files: a flat JSON document
//   {"format": "mpgelu-model", "version": 1, "arch": "mp_gelu", "covariance": "full",
//    "head": 2, "input_dim": Q, "hidden_width": 20,
//    "layers": [{"type": "dropout", "rate": r},
//               {"type": "dense", "in": n, "out": m, "weight": [m*n row-major], "bias": [m]},
//               {"type": "mp_gelu"}, {"type": "relu"}, ...]}

inline nlohmann::json model_to_json(const ModelConfig& config, const ParameterSet& params) {
  detail::require_params(config, params);
  nlohmann::json j;
  j["format"] = "mpgelu-model";
  j["version"] = 1;
  j["arch"] = to_string(config.arch);
  j["covariance"] = to_string(config.mode);
  j["head"] = static_cast<int>(head_dim(config.head));
  j["input_dim"] = config.input_dim;
  j["hidden_width"] = config.hidden_width;
  nlohmann::json layers = nlohmann::json::array();
  std::size_t dense_index = 0;
  for (const auto& layer : config.layers) {
    nlohmann::json l;
    if (const auto* d = std::get_if<DenseLayer>(&layer)) {
      const DenseBlock& b = params.values[dense_index++];
      l["type"] = "dense";
      l["in"] = d->in;
      l["out"] = d->out;
      std::vector<double> w;
      w.reserve(static_cast<std::size_t>(b.weight.size()));
      for (Index r = 0; r < b.weight.rows(); ++r) {
        for (Index c = 0; c < b.weight.cols(); ++c) w.push_back(b.weight(r, c));
      }
      l["weight"] = w;
      l["bias"] = std::vector<double>(b.bias.data(), b.bias.data() + b.bias.size());
    } else if (const auto* p = std::get_if<DropoutLayer>(&layer)) {
      l["type"] = "dropout";
      l["rate"] = p->rate;
    } else if (std::holds_alternative<MpGeluLayer>(layer)) {
      l["type"] = "mp_gelu";
    } else {
      l["type"] = "relu";
    }
    layers.push_back(std::move(l));
  }
  j["layers"] = std::move(layers);
  return j;
}

inline std::pair<ModelConfig, ParameterSet> model_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "mpgelu-model") {
    throw std::invalid_argument("model file: missing or wrong \"format\" field");
  }
  ModelConfig config;
  config.arch = parse_architecture(j.at("arch").get<std::string>());
  config.mode = parse_covariance_mode(j.at("covariance").get<std::string>());
  config.head = parse_head(std::to_string(j.at("head").get<int>()));
  config.input_dim = j.at("input_dim").get<Index>();
  config.hidden_width = j.at("hidden_width").get<Index>();
  ParameterSet params;
  for (const auto& l : j.at("layers")) {
    const std::string type = l.at("type").get<std::string>();
    if (type == "dense") {
      DenseLayer d{l.at("in").get<Index>(), l.at("out").get<Index>()};
      const auto w = l.at("weight").get<std::vector<double>>();
      const auto b = l.at("bias").get<std::vector<double>>();
      if (static_cast<Index>(w.size()) != d.in * d.out || static_cast<Index>(b.size()) != d.out) {
        throw std::invalid_argument("model file: dense layer array sizes do not match in/out");
      }
      DenseBlock block;
      block.weight.resize(d.out, d.in);
      for (Index r = 0; r < d.out; ++r) {
        for (Index c = 0; c < d.in; ++c) block.weight(r, c) = w[static_cast<std::size_t>(r * d.in + c)];
      }
      block.bias = Eigen::Map<const VectorXd>(b.data(), d.out);
      params.values.push_back(std::move(block));
      config.layers.emplace_back(d);
    } else if (type == "dropout") {
      config.layers.emplace_back(DropoutLayer{l.at("rate").get<double>()});
    } else if (type == "mp_gelu") {
      config.layers.emplace_back(MpGeluLayer{});
    } else if (type == "relu") {
      config.layers.emplace_back(ReluLayer{});
    } else {
      throw std::invalid_argument("model file: unknown layer type '" + type + "'");
    }
  }
  config.validate();
  params.zero_grads();
  return {std::move(config), std::move(params)};
}

inline void save_model(const std::string& path, const ModelConfig& config,
                       const ParameterSet& params) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write model file " + path);
  out << model_to_json(config, params).dump(1) << '\n';
}

inline std::pair<ModelConfig, ParameterSet> load_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read model file " + path);
  return model_from_json(nlohmann::json::parse(in));
}

}  // namespace mpgelu
