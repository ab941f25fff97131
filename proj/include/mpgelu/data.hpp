#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "mpgelu/training.hpp"

namespace mpgelu {

struct Dataset {
  std::string name;
  MatrixXd features;  // N x Q
  VectorXd labels;    // N

  Index rows() const { return features.rows(); }
  Index cols() const { return features.cols(); }
};

/// Noise-free part of the toy generator.
inline double toy_function(double x) { return std::sin(2.0 * x) * std::cos(7.0 * x); }

/// x ~ U(-0.5, 0.5), y = sin(2x) cos(7x) + eps with eps ~ N(0, sin(x)^2).
inline Dataset toy_generate(Index n = 100, std::uint64_t seed = 0) {
  if (n < 1) throw std::invalid_argument("toy_generate: n must be >= 1");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> ux(-0.5, 0.5);
  std::normal_distribution<double> z(0.0, 1.0);
  Dataset ds;
  ds.name = "toy";
  ds.features.resize(n, 1);
  ds.labels.resize(n);
  for (Index i = 0; i < n; ++i) {
    const double x = ux(rng);
    ds.features(i, 0) = x;
    ds.labels(i) = toy_function(x) + std::sin(x) * z(rng);
  }
  return ds;
}

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

inline std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> cells;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    cells.push_back(trim(line.substr(start, comma == std::string_view::npos ? line.npos : comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return cells;
}

inline bool parse_number(std::string_view cell, double& out) {
  if (cell.empty()) return false;
  if (cell.front() == '+') cell.remove_prefix(1);
  const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), out);
  return ec == std::errc() && ptr == cell.data() + cell.size() && std::isfinite(out);
}

}  // namespace detail

/// Numeric CSV with an optional header row (detected when any cell of the first
/// non-empty row is not a number). `label_column` selects the label (negative
/// counts from the end); `drop_columns` are ignored entirely.
inline Dataset load_csv(const std::string& path, int label_column = -1,
                        const std::vector<int>& drop_columns = {}) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_csv: cannot open " + path);
  std::vector<std::vector<double>> rows;
  std::size_t width = 0;
  std::string line;
  std::size_t line_no = 0;
  bool first = true;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    const auto cells = detail::split_commas(line);
    std::vector<double> values(cells.size());
    std::size_t bad = cells.size();
    for (std::size_t c = 0; c < cells.size(); ++c) {
      if (!detail::parse_number(cells[c], values[c])) {
        bad = c;
        break;
      }
    }
    if (first) {
      first = false;
      width = cells.size();
      if (bad != cells.size()) continue;  // header
    }
    if (cells.size() != width) {
      throw std::runtime_error("load_csv: " + path + " row " + std::to_string(line_no) + " has " +
                               std::to_string(cells.size()) + " columns, expected " +
                               std::to_string(width));
    }
    if (bad != cells.size()) {
      throw std::runtime_error("load_csv: " + path + " row " + std::to_string(line_no) + " column " +
                               std::to_string(bad + 1) + ": '" + std::string(cells[bad]) +
                               "' is not a finite number");
    }
    rows.push_back(std::move(values));
  }
  if (rows.empty()) throw std::runtime_error("load_csv: " + path + " contains no data rows");
  if (width < 2) throw std::runtime_error("load_csv: " + path + " needs at least 2 columns");

  const int w = static_cast<int>(width);
  const int label = label_column < 0 ? w + label_column : label_column;
  if (label < 0 || label >= w) throw std::invalid_argument("load_csv: label column out of range");
  std::vector<int> keep;
  for (int c = 0; c < w; ++c) {
    if (c == label) continue;
    if (std::find(drop_columns.begin(), drop_columns.end(), c) != drop_columns.end() ||
        std::find(drop_columns.begin(), drop_columns.end(), c - w) != drop_columns.end()) {
      continue;
    }
    keep.push_back(c);
  }
  Dataset ds;
  ds.name = std::filesystem::path(path).stem().string();
  ds.features.resize(static_cast<Index>(rows.size()), static_cast<Index>(keep.size()));
  ds.labels.resize(static_cast<Index>(rows.size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t k = 0; k < keep.size(); ++k) {
      ds.features(static_cast<Index>(r), static_cast<Index>(k)) = rows[r][static_cast<std::size_t>(keep[k])];
    }
    ds.labels(static_cast<Index>(r)) = rows[r][static_cast<std::size_t>(label)];
  }
  return ds;
}

/// Index partition plus the standardization statistics of its training rows.
struct DatasetSplit {
  std::vector<Index> train;
  std::vector<Index> val;  // empty unless a validation fraction was requested
  std::vector<Index> test;
  VectorXd feature_mean;
  VectorXd feature_std;
  double label_mean = 0.0;
  double label_std = 1.0;

  double standardize_label(double y) const { return (y - label_mean) / label_std; }
  double destandardize_label(double z) const { return z * label_std + label_mean; }
};

/// Population mean/std over the given rows; constant columns get std 1.
inline void fit_standardization(const Dataset& ds, DatasetSplit& split) {
  const auto n = static_cast<double>(split.train.size());
  const Index q = ds.cols();
  split.feature_mean = VectorXd::Zero(q);
  split.feature_std = VectorXd::Zero(q);
  double ly = 0.0;
  for (const Index r : split.train) {
    split.feature_mean += ds.features.row(r).transpose();
    ly += ds.labels(r);
  }
  split.feature_mean /= n;
  split.label_mean = ly / n;
  double vy = 0.0;
  for (const Index r : split.train) {
    split.feature_std += (ds.features.row(r).transpose() - split.feature_mean).cwiseAbs2();
    vy += (ds.labels(r) - split.label_mean) * (ds.labels(r) - split.label_mean);
  }
  for (Index c = 0; c < q; ++c) {
    const double s = std::sqrt(split.feature_std(c) / n);
    split.feature_std(c) = s > 1e-12 * std::max(1.0, std::abs(split.feature_mean(c))) ? s : 1.0;
  }
  const double sy = std::sqrt(vy / n);
  split.label_std = sy > 1e-12 * std::max(1.0, std::abs(split.label_mean)) ? sy : 1.0;
}

/// `repeats` random partitions. The test set is round-half-up of test_frac * N
/// taken from a seeded permutation; when val_frac > 0, the last
/// round(val_frac * |train|) training rows become validation rows. The test
/// rows of repeat k do not depend on val_frac.
inline std::vector<DatasetSplit> make_splits(const Dataset& ds, int repeats = 20,
                                             double test_frac = 0.1, double val_frac = 0.0,
                                             std::uint64_t seed = 0) {
  const Index n = ds.rows();
  if (repeats < 1) throw std::invalid_argument("make_splits: repeats must be >= 1");
  if (!(test_frac > 0.0 && test_frac < 1.0) || !(val_frac >= 0.0 && val_frac < 1.0)) {
    throw std::invalid_argument("make_splits: fractions must lie in [0, 1)");
  }
  const auto n_train_all = static_cast<Index>(std::llround((1.0 - test_frac) * static_cast<double>(n)));
  const Index n_test = n - n_train_all;
  const auto n_val = static_cast<Index>(std::llround(val_frac * static_cast<double>(n_train_all)));
  const Index n_train = n_train_all - n_val;
  if (n_test < 1 || n_train < 2 || (val_frac > 0.0 && n_val < 1)) {
    throw std::invalid_argument("make_splits: " + std::to_string(n) +
                                " rows are too few for the requested partition");
  }
  std::vector<DatasetSplit> splits;
  splits.reserve(static_cast<std::size_t>(repeats));
  for (int k = 0; k < repeats; ++k) {
    std::vector<Index> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), Index{0});
    std::mt19937_64 rng(derive_seed(seed, static_cast<std::uint64_t>(k)));
    std::shuffle(perm.begin(), perm.end(), rng);
    DatasetSplit s;
    s.test.assign(perm.begin(), perm.begin() + n_test);
    s.train.assign(perm.begin() + n_test, perm.begin() + n_test + n_train);
    s.val.assign(perm.begin() + n_test + n_train, perm.end());
    fit_standardization(ds, s);
    splits.push_back(std::move(s));
  }
  return splits;
}

/// Standardized copies of the rows of one partition.
struct StandardizedData {
  MatrixXd train_x, val_x, test_x;
  VectorXd train_y, val_y, test_y;
};

inline StandardizedData standardize(const Dataset& ds, const DatasetSplit& split) {
  const auto take = [&](const std::vector<Index>& idx, MatrixXd& x, VectorXd& y) {
    x.resize(static_cast<Index>(idx.size()), ds.cols());
    y.resize(static_cast<Index>(idx.size()));
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const auto r = static_cast<Index>(i);
      x.row(r) = ((ds.features.row(idx[i]).transpose() - split.feature_mean).array() /
                  split.feature_std.array()).transpose();
      y(r) = split.standardize_label(ds.labels(idx[i]));
    }
  };
  StandardizedData out;
  take(split.train, out.train_x, out.train_y);
  take(split.val, out.val_x, out.val_y);
  take(split.test, out.test_x, out.test_y);
  return out;
}

/// Dataset manifest (JSON):
///   {"datasets": {"boston": {"path": "boston.csv", "label_column": -1,
///                             "drop_columns": [], "rows": 506, "cols": 13}}}
/// Relative paths resolve against the manifest's directory. rows/cols are the
/// expected N and Q after column selection.
struct ManifestEntry {
  std::string name;
  std::string path;
  int label_column = -1;
  std::vector<int> drop_columns;
  Index rows = 0;
  Index cols = 0;
};

inline std::map<std::string, ManifestEntry> load_manifest(const std::string& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw std::runtime_error("cannot read manifest " + manifest_path);
  const auto j = nlohmann::json::parse(in);
  const auto base = std::filesystem::path(manifest_path).parent_path();
  std::map<std::string, ManifestEntry> out;
  for (const auto& [name, e] : j.at("datasets").items()) {
    ManifestEntry m;
    m.name = name;
    std::filesystem::path p = e.at("path").get<std::string>();
    m.path = (p.is_absolute() ? p : base / p).string();
    m.label_column = e.value("label_column", -1);
    m.drop_columns = e.value("drop_columns", std::vector<int>{});
    m.rows = e.at("rows").get<Index>();
    m.cols = e.at("cols").get<Index>();
    out.emplace(name, std::move(m));
  }
  return out;
}

/// Loads a manifest dataset and verifies its shape against the manifest.
inline Dataset load_manifest_dataset(const ManifestEntry& entry) {
  if (!std::filesystem::exists(entry.path)) {
    throw std::runtime_error("dataset '" + entry.name + "' not found at " + entry.path);
  }
  Dataset ds = load_csv(entry.path, entry.label_column, entry.drop_columns);
  ds.name = entry.name;
  if (ds.rows() != entry.rows || ds.cols() != entry.cols) {
    throw std::runtime_error("dataset '" + entry.name + "' has N=" + std::to_string(ds.rows()) +
                             ", Q=" + std::to_string(ds.cols()) + "; manifest expects N=" +
                             std::to_string(entry.rows) + ", Q=" + std::to_string(entry.cols));
  }
  return ds;
}

}  // namespace mpgelu
