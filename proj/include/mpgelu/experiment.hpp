#pragma once

// Experiment protocols: evaluation metrics over a dataset, dropout-rate grid
// search, the repeated train/test protocol, the toy regression run and the
// forward-pass benchmark.

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <exception>
#include <fstream>
#include <functional>
#include <iomanip>
#include <mutex>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "mpgelu/data.hpp"
#include "mpgelu/network.hpp"
#include "mpgelu/normal.hpp"
#include "mpgelu/objective.hpp"
#include "mpgelu/training.hpp"

namespace mpgelu {

/// Runs fn(0..count-1) on up to `jobs` threads. The first exception is
/// rethrown after all workers stop.
inline void parallel_for(std::size_t count, int jobs, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min<std::size_t>(count, static_cast<std::size_t>(std::max(jobs, 1)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!error) error = std::current_exception();
          next = count;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

struct Metrics {
  double nll = 0.0;
  double rmse = 0.0;
};

/// Mean moment-matched NLL and RMSE of the predictive mean, in the label
/// space of `labels`.
inline Metrics evaluate(const ModelConfig& config, const ParameterSet& params, const MatrixXd& features,
                        const VectorXd& labels) {
  if (features.rows() == 0) throw std::invalid_argument("evaluate: empty dataset");
  VectorXd preds(features.rows());
  double nll = 0.0;
  for (Index r = 0; r < features.rows(); ++r) {
    const PredictiveMoments pm = predictive_moments(forward(config, params, features.row(r).transpose()), config.head);
    preds(r) = pm.mean;
    nll += nll_metric(pm, labels(r));
  }
  return {nll / static_cast<double>(features.rows()), rmse(preds, labels)};
}

/// Predictive moments for every row; the unit of work timed as "test pass".
inline std::vector<PredictiveMoments> predict_all(const ModelConfig& config, const ParameterSet& params,
                                                  const MatrixXd& features) {
  std::vector<PredictiveMoments> out;
  out.reserve(static_cast<std::size_t>(features.rows()));
  for (Index r = 0; r < features.rows(); ++r) {
    out.push_back(predictive_moments(forward(config, params, features.row(r).transpose()), config.head));
  }
  return out;
}

/// Median wall time in seconds of `repetitions` calls after `warmup` calls.
inline double median_seconds(const std::function<void()>& fn, int repetitions = 5, int warmup = 1) {
  for (int i = 0; i < warmup; ++i) fn();
  std::vector<double> t;
  t.reserve(static_cast<std::size_t>(repetitions));
  for (int i = 0; i < repetitions; ++i) {
    const auto start = std::chrono::steady_clock::now();
    fn();
    t.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
  }
  std::sort(t.begin(), t.end());
  const std::size_t m = t.size() / 2;
  return t.size() % 2 ? t[m] : 0.5 * (t[m - 1] + t[m]);
}

struct MeanSe {
  double mean = 0.0;
  double se = 0.0;
};

/// Mean and standard error (sample std / sqrt(n)).
inline MeanSe mean_se(const std::vector<double>& v) {
  if (v.empty()) throw std::invalid_argument("mean_se: empty sample");
  const auto n = static_cast<double>(v.size());
  const double m = std::accumulate(v.begin(), v.end(), 0.0) / n;
  if (v.size() < 2) return {m, 0.0};
  double ss = 0.0;
  for (const double x : v) ss += (x - m) * (x - m);
  return {m, std::sqrt(ss / (n - 1.0) / n)};
}

struct ProtocolConfig {
  Architecture arch = Architecture::MpGelu;
  CovarianceMode mode = CovarianceMode::Full;
  HeadType head = HeadType::Heteroscedastic2;
  Index hidden_width = 20;
  TrainConfig train = TrainConfig::uci();
  std::vector<double> dropout_grid{0.005, 0.01, 0.05, 0.1};
  double fixed_dropout = -1.0;  // >= 0 skips the grid search
  int repeats = 20;
  double test_frac = 0.1;
  double val_frac = 0.2;
  int runtime_repetitions = 5;
  int jobs = 1;
  std::uint64_t seed = 0;
};

struct GridSearchResult {
  double best_rate = 0.0;
  std::vector<double> rates;
  std::vector<double> mean_val_nll;
  std::size_t training_runs = 0;
};

/// For each rate: train on the training part of every split and average the
/// validation NLL. Returns the argmin; ties go to the smaller rate.
inline GridSearchResult grid_search_dropout(const Dataset& ds, const ProtocolConfig& pc) {
  if (pc.dropout_grid.empty()) throw std::invalid_argument("grid_search_dropout: empty search space");
  GridSearchResult res;
  res.rates = pc.dropout_grid;
  if (res.rates.size() == 1) {
    res.best_rate = res.rates.front();
    return res;
  }
  const std::vector<DatasetSplit> splits = make_splits(ds, pc.repeats, pc.test_frac, pc.val_frac, pc.seed);
  const std::size_t n_rates = res.rates.size(), n_splits = splits.size();
  std::vector<double> val_nll(n_rates * n_splits);
  parallel_for(n_rates * n_splits, pc.jobs, [&](std::size_t task) {
    const std::size_t i = task / n_splits, k = task % n_splits;
    const StandardizedData d = standardize(ds, splits[k]);
    const ModelConfig config = build_model(pc.arch, ds.cols(), pc.hidden_width, res.rates[i], pc.mode, pc.head);
    TrainConfig tc = pc.train;
    tc.seed = derive_seed(derive_seed(pc.seed, 100 + i), k);
    const TrainResult tr = train(config, tc, d.train_x, d.train_y);
    val_nll[task] = evaluate(config, tr.params, d.val_x, d.val_y).nll;
  });
  res.training_runs = val_nll.size();
  res.mean_val_nll.assign(n_rates, 0.0);
  for (std::size_t i = 0; i < n_rates; ++i) {
    for (std::size_t k = 0; k < n_splits; ++k) res.mean_val_nll[i] += val_nll[i * n_splits + k];
    res.mean_val_nll[i] /= static_cast<double>(n_splits);
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < n_rates; ++i) {
    const bool better = res.mean_val_nll[i] < res.mean_val_nll[best] ||
                        (res.mean_val_nll[i] == res.mean_val_nll[best] && res.rates[i] < res.rates[best]);
    if (better) best = i;
  }
  res.best_rate = res.rates[best];
  return res;
}

struct ExperimentResult {
  std::string dataset;
  Index n = 0;
  Index q = 0;
  Architecture arch = Architecture::MpGelu;
  CovarianceMode mode = CovarianceMode::Full;
  HeadType head = HeadType::Heteroscedastic2;
  double dropout_rate = 0.0;
  GridSearchResult grid;
  std::vector<double> nll, rmse, runtime_s;
  MeanSe nll_agg, rmse_agg, runtime_agg;
};

/// Grid search (unless a rate is fixed), then train/test on every split.
/// Runtime is timed afterwards on one thread for each split's test set.
inline ExperimentResult run_protocol(const Dataset& ds, const ProtocolConfig& pc) {
  ExperimentResult r;
  r.dataset = ds.name;
  r.n = ds.rows();
  r.q = ds.cols();
  r.arch = pc.arch;
  r.mode = pc.mode;
  r.head = pc.head;
  if (pc.fixed_dropout >= 0.0) {
    r.grid.rates = {pc.fixed_dropout};
    r.grid.best_rate = pc.fixed_dropout;
  } else {
    r.grid = grid_search_dropout(ds, pc);
  }
  r.dropout_rate = r.grid.best_rate;
  const std::vector<DatasetSplit> splits = make_splits(ds, pc.repeats, pc.test_frac, 0.0, pc.seed);
  const ModelConfig config = build_model(pc.arch, ds.cols(), pc.hidden_width, r.dropout_rate, pc.mode, pc.head);
  std::vector<ParameterSet> trained(splits.size());
  r.nll.assign(splits.size(), 0.0);
  r.rmse.assign(splits.size(), 0.0);
  parallel_for(splits.size(), pc.jobs, [&](std::size_t k) {
    const StandardizedData d = standardize(ds, splits[k]);
    TrainConfig tc = pc.train;
    tc.seed = derive_seed(derive_seed(pc.seed, 200), k);
    trained[k] = train(config, tc, d.train_x, d.train_y).params;
    const Metrics m = evaluate(config, trained[k], d.test_x, d.test_y);
    r.nll[k] = m.nll;
    r.rmse[k] = m.rmse;
  });
  r.runtime_s.assign(splits.size(), 0.0);
  for (std::size_t k = 0; k < splits.size(); ++k) {
    const StandardizedData d = standardize(ds, splits[k]);
    r.runtime_s[k] = median_seconds([&] { (void)predict_all(config, trained[k], d.test_x); },
                                    pc.runtime_repetitions, 1);
  }
  r.nll_agg = mean_se(r.nll);
  r.rmse_agg = mean_se(r.rmse);
  r.runtime_agg = mean_se(r.runtime_s);
  return r;
}

inline nlohmann::json result_to_json(const ExperimentResult& r) {
  nlohmann::json j;
  j["dataset"] = r.dataset;
  j["N"] = r.n;
  j["Q"] = r.q;
  j["arch"] = to_string(r.arch);
  j["covariance"] = to_string(r.mode);
  j["head"] = to_string(r.head);
  j["dropout_rate"] = r.dropout_rate;
  j["grid"] = {{"rates", r.grid.rates}, {"mean_val_nll", r.grid.mean_val_nll}};
  j["splits"] = {{"nll", r.nll}, {"rmse", r.rmse}, {"runtime_s", r.runtime_s}};
  j["nll"] = {{"mean", r.nll_agg.mean}, {"se", r.nll_agg.se}};
  j["rmse"] = {{"mean", r.rmse_agg.mean}, {"se", r.rmse_agg.se}};
  j["runtime_s"] = {{"mean", r.runtime_agg.mean}, {"se", r.runtime_agg.se}};
  return j;
}

inline const char* table_header() { return "dataset,N,Q,nll_mean,nll_se,rmse_mean,rmse_se,runtime_s\n"; }

inline std::string table_row(const ExperimentResult& r) {
  std::ostringstream s;
  s << std::setprecision(6) << r.dataset << ',' << r.n << ',' << r.q << ',' << r.nll_agg.mean << ','
    << r.nll_agg.se << ',' << r.rmse_agg.mean << ',' << r.rmse_agg.se << ',' << r.runtime_agg.mean << '\n';
  return s.str();
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << text;
  if (!f) throw std::runtime_error("write failed: " + path);
}

// ---------------------------------------------------------------------------
// Toy regression

struct ToyCurve {
  Architecture arch = Architecture::MpGelu;
  VectorXd x, mean, std, aleatoric_std;
  std::vector<double> loss_trace;
};

struct ToySettings {
  TrainConfig train = TrainConfig::toy();
  double dropout = 0.001;
  Index hidden_width = 20;
  Index grid_points = 200;
  Index n = 100;
  CovarianceMode mode = CovarianceMode::Full;
};

/// Trains on raw (unstandardized) toy data and evaluates the predictive
/// distribution on an even grid over [-1, 1].
inline ToyCurve run_toy(Architecture arch, const Dataset& data, const ToySettings& s, std::uint64_t seed) {
  const ModelConfig config = build_model(arch, 1, s.hidden_width, s.dropout, s.mode, HeadType::Heteroscedastic2);
  TrainConfig tc = s.train;
  tc.seed = seed;
  const TrainResult tr = train(config, tc, data.features, data.labels);
  ToyCurve c;
  c.arch = arch;
  c.loss_trace = tr.loss_trace;
  c.x = VectorXd::LinSpaced(s.grid_points, -1.0, 1.0);
  c.mean.resize(s.grid_points);
  c.std.resize(s.grid_points);
  c.aleatoric_std.resize(s.grid_points);
  for (Index i = 0; i < s.grid_points; ++i) {
    const MomentVector head = forward(config, tr.params, VectorXd::Constant(1, c.x(i)));
    const PredictiveMoments pm = predictive_moments(head, HeadType::Heteroscedastic2);
    c.mean(i) = pm.mean;
    c.std(i) = std::sqrt(pm.variance);
    c.aleatoric_std(i) = std::sqrt(std::exp(head.mean()(1) + 0.5 * head.variance(1)));
  }
  return c;
}

inline std::string format_double(double v) {
  std::ostringstream s;
  s << std::setprecision(17) << v;
  return s.str();
}

inline std::string toy_curve_csv(const ToyCurve& c) {
  std::string out = "x,pred_mean,pred_std,aleatoric_std\n";
  for (Index i = 0; i < c.x.size(); ++i) {
    out += format_double(c.x(i)) + ',' + format_double(c.mean(i)) + ',' + format_double(c.std(i)) + ',' +
           format_double(c.aleatoric_std(i)) + '\n';
  }
  return out;
}

inline std::string dataset_csv(const Dataset& ds) {
  std::string out;
  for (Index c = 0; c < ds.cols(); ++c) out += (ds.cols() == 1 ? std::string("x") : "x" + std::to_string(c)) + ',';
  out += "y\n";
  for (Index r = 0; r < ds.rows(); ++r) {
    for (Index c = 0; c < ds.cols(); ++c) out += format_double(ds.features(r, c)) + ',';
    out += format_double(ds.labels(r)) + '\n';
  }
  return out;
}

inline double pearson(const VectorXd& a, const VectorXd& b) {
  const VectorXd da = a.array() - a.mean(), db = b.array() - b.mean();
  const double denom = std::sqrt(da.squaredNorm() * db.squaredNorm());
  return denom > 0.0 ? da.dot(db) / denom : 0.0;
}

struct ToySummary {
  double outer_std = 0.0;  // mean pred_std over 0.6 <= |x| <= 1
  double inner_std = 0.0;  // mean pred_std over |x| <= 0.4
  double aleatoric_corr = 0.0;  // Pearson(aleatoric std, |sin x|) on |x| <= 0.5
};

inline ToySummary summarize_toy(const ToyCurve& c) {
  ToySummary s;
  double outer = 0.0, inner = 0.0;
  int n_outer = 0, n_inner = 0;
  std::vector<double> al, target;
  for (Index i = 0; i < c.x.size(); ++i) {
    const double ax = std::abs(c.x(i));
    if (ax >= 0.6 && ax <= 1.0) {
      outer += c.std(i);
      ++n_outer;
    }
    if (ax <= 0.4) {
      inner += c.std(i);
      ++n_inner;
    }
    if (ax <= 0.5) {
      al.push_back(c.aleatoric_std(i));
      target.push_back(std::abs(std::sin(c.x(i))));
    }
  }
  s.outer_std = n_outer ? outer / n_outer : 0.0;
  s.inner_std = n_inner ? inner / n_inner : 0.0;
  s.aleatoric_corr = pearson(Eigen::Map<VectorXd>(al.data(), static_cast<Index>(al.size())),
                             Eigen::Map<VectorXd>(target.data(), static_cast<Index>(target.size())));
  return s;
}

// ---------------------------------------------------------------------------
// Forward-pass benchmark

struct BenchmarkRow {
  Index width = 0;
  CovarianceMode mode = CovarianceMode::Full;
  Architecture arch = Architecture::MpGelu;
  std::size_t layers = 0;
  double ns_per_pass = 0.0;
  std::uint64_t erf = 0, exp = 0, sqrt = 0;  // per pass
};

struct BenchmarkSettings {
  std::vector<Index> widths{20, 64, 256, 1024};
  CovarianceMode mode = CovarianceMode::Full;
  Index input_dim = 8;
  Index inputs = 64;
  int repetitions = 5;
  double dropout = 0.05;
  std::uint64_t seed = 0;
};

/// Median ns per forward + predictive pass on random inputs for one model.
inline BenchmarkRow benchmark_model(Architecture arch, Index width, const BenchmarkSettings& s) {
  const ModelConfig config = build_model(arch, s.input_dim, width, s.dropout, s.mode, HeadType::Heteroscedastic2);
  const ParameterSet params = init_parameters(config, s.seed);
  std::mt19937_64 rng(derive_seed(s.seed, 7));
  std::normal_distribution<double> z(0.0, 1.0);
  MatrixXd x(s.inputs, s.input_dim);
  for (Index r = 0; r < x.rows(); ++r) {
    for (Index c = 0; c < x.cols(); ++c) x(r, c) = z(rng);
  }
  BenchmarkRow row;
  row.width = width;
  row.mode = s.mode;
  row.arch = arch;
  row.layers = config.layers.size();
  op_counters().reset();
  (void)predictive_moments(forward(config, params, x.row(0).transpose()), config.head);
  row.erf = op_counters().erf;
  row.exp = op_counters().exp;
  row.sqrt = op_counters().sqrt;
  const double seconds = median_seconds([&] { (void)predict_all(config, params, x); }, s.repetitions, 1);
  row.ns_per_pass = seconds * 1e9 / static_cast<double>(s.inputs);
  return row;
}

inline const char* benchmark_header() {
  return "width,covariance,arch,layers,ns_per_pass,erf_calls,exp_calls,sqrt_calls,speedup\n";
}

/// Rows for both architectures at every width; speedup = relu / mp_gelu time.
inline std::string run_benchmark(const BenchmarkSettings& s, std::vector<BenchmarkRow>* rows_out = nullptr) {
  std::ostringstream out;
  out << benchmark_header();
  for (const Index w : s.widths) {
    const BenchmarkRow mp = benchmark_model(Architecture::MpGelu, w, s);
    const BenchmarkRow relu = benchmark_model(Architecture::Relu, w, s);
    const double speedup = relu.ns_per_pass / mp.ns_per_pass;
    for (const BenchmarkRow* r : {&mp, &relu}) {
      out << r->width << ',' << to_string(r->mode) << ',' << to_string(r->arch) << ',' << r->layers << ','
          << std::setprecision(6) << r->ns_per_pass << ',' << r->erf << ',' << r->exp << ',' << r->sqrt << ','
          << speedup << '\n';
      if (rows_out) rows_out->push_back(*r);
    }
  }
  return out.str();
}

}  // namespace mpgelu
