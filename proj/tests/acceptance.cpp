// Acceptance criteria c1..c8. Each run prints one PASS/FAIL line per criterion
// (detail lines are indented) and exits non-zero if any criterion failed.

#include <CLI11.hpp>

#include <array>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "mpgelu/data.hpp"
#include "mpgelu/experiment.hpp"
#include "mpgelu/self_check.hpp"

namespace fs = std::filesystem;
using namespace mpgelu;

namespace {

// c1
constexpr int kOracleCases = 100;
constexpr std::int64_t kOracleSamples = 100'000;
constexpr double kOracleZ = 4.0;
// c2
constexpr Index kGradWidth = 20;
// c3
constexpr int kLikelihoodCases = 1000;
constexpr std::int64_t kLikelihoodSamples = 1'000'000;
constexpr double kLikelihoodZ = 4.0;
// c4
constexpr double kMinAleatoricCorr = 0.3;
// c5
constexpr double kTableTolerance = 0.15;
constexpr int kMinNllWins = 4;
// c6
constexpr double kMinFullSpeedup = 1.10;
constexpr double kMinDiagSpeedup = 1.0;  // strictly greater
constexpr Index kBenchInputs = 512;
constexpr int kBenchRepetitions = 7;

constexpr std::uint64_t kSeed = 20240611;

struct Args {
  std::string cli;
  std::string manifest = "data/manifest.json";
  std::string workdir = "acceptance_out";
  int jobs = 0;
};

struct Verdict {
  bool passed = false;
  std::string detail;
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

Verdict c1_moment_oracle(const Args&) {
  Verdict v{true, ""};
  int n = 0;
  for (const LayerKind kind : {LayerKind::Dense, LayerKind::Dropout, LayerKind::MpGelu, LayerKind::Relu}) {
    for (const CovarianceMode mode : {CovarianceMode::Full, CovarianceMode::Diagonal}) {
      const CheckOutcome o = check_layer_oracle(kind, mode, kOracleCases, kOracleSamples,
                                                derive_seed(kSeed, 10 + static_cast<int>(kind)), kOracleZ);
      std::cout << "  " << (o.passed ? "ok   " : "FAIL ") << o.name << "  " << o.detail << '\n';
      v.passed = v.passed && o.passed;
      ++n;
    }
  }
  v.detail = std::to_string(n) + " layer/mode combinations, " + std::to_string(kOracleCases) +
             " cases each, " + std::to_string(kOracleSamples) + " samples";
  return v;
}

Verdict c2_gradients(const Args&) {
  Verdict v{true, ""};
  int n = 0;
  for (const Architecture arch : {Architecture::MpGelu, Architecture::Relu}) {
    for (const CovarianceMode mode : {CovarianceMode::Full, CovarianceMode::Diagonal}) {
      for (const HeadType head : {HeadType::Heteroscedastic2, HeadType::Homoscedastic1}) {
        const CheckOutcome o = check_gradients(arch, mode, head, kGradWidth, derive_seed(kSeed, 20 + n));
        std::cout << "  " << (o.passed ? "ok   " : "FAIL ") << o.name << "  " << o.detail << '\n';
        v.passed = v.passed && o.passed;
        ++n;
      }
    }
  }
  v.detail = std::to_string(n) + " width-20 variants, central differences step 1e-5";
  return v;
}

Verdict c3_expected_ll(const Args&) {
  const CheckOutcome o = check_expected_ll(kLikelihoodCases, kLikelihoodSamples, derive_seed(kSeed, 30), kLikelihoodZ);
  return {o.passed, o.detail};
}

Verdict c4_toy(const Args& a) {
  const ToySettings s;
  const Dataset data = toy_generate(s.n, derive_seed(kSeed, 40));
  Verdict v{true, ""};
  fs::create_directories(fs::path(a.workdir) / "c4");
  for (const Architecture arch : {Architecture::MpGelu, Architecture::Relu}) {
    const ToyCurve c = run_toy(arch, data, s, derive_seed(kSeed, 41));
    write_text((fs::path(a.workdir) / "c4" / (std::string("toy_") + to_string(arch) + ".csv")).string(),
               toy_curve_csv(c));
    const ToySummary t = summarize_toy(c);
    const bool ok = t.outer_std > t.inner_std && t.aleatoric_corr > kMinAleatoricCorr;
    std::cout << "  " << (ok ? "ok   " : "FAIL ") << to_string(arch) << "  std outer " << fmt(t.outer_std)
              << " vs inner " << fmt(t.inner_std) << ", r(aleatoric, |sin x|) " << fmt(t.aleatoric_corr) << '\n';
    v.passed = v.passed && ok;
  }
  v.detail = "predictive std grows off-support and aleatoric std tracks |sin x| (r > 0.3)";
  return v;
}

struct TableRef {
  double nll_mp, nll_relu, rmse_mp, rmse_relu;
};

Verdict c5_uci(const Args& a) {
  const std::vector<std::pair<std::string, TableRef>> table{
      {"boston", {1.204, 1.25, 0.786, 0.809}},   {"energy", {0.621, 0.649, 0.46, 0.464}},
      {"yacht", {1.307, 1.333, 0.879, 0.892}},   {"wine", {1.249, 1.252, 0.848, 0.849}},
      {"concrete", {1.118, 1.137, 0.742, 0.748}}};
  std::map<std::string, ManifestEntry> manifest;
  try {
    manifest = load_manifest(a.manifest);
  } catch (const std::exception& e) {
    return {false, e.what()};
  }
  const fs::path out = fs::path(a.workdir) / "c5";
  fs::create_directories(out);
  int wins = 0, within = 0, evaluated = 0;
  std::vector<std::string> missing;
  for (const auto& [name, ref] : table) {
    Dataset ds;
    try {
      ds = load_manifest_dataset(manifest.at(name));
    } catch (const std::exception& e) {
      missing.push_back(name);
      std::cout << "  FAIL " << name << "  unavailable: " << e.what() << '\n';
      continue;
    }
    std::map<Architecture, ExperimentResult> res;
    for (const Architecture arch : {Architecture::MpGelu, Architecture::Relu}) {
      ProtocolConfig pc;
      pc.arch = arch;
      pc.jobs = a.jobs;
      pc.seed = derive_seed(kSeed, 50);
      res[arch] = run_protocol(ds, pc);
      write_text((out / (name + "_" + to_string(arch) + ".json")).string(), result_to_json(res[arch]).dump(2) + "\n");
    }
    const ExperimentResult& mp = res.at(Architecture::MpGelu);
    const ExperimentResult& relu = res.at(Architecture::Relu);
    const bool win = mp.nll_agg.mean <= relu.nll_agg.mean;
    const std::array<std::pair<double, double>, 4> pairs{{{mp.nll_agg.mean, ref.nll_mp},
                                                          {relu.nll_agg.mean, ref.nll_relu},
                                                          {mp.rmse_agg.mean, ref.rmse_mp},
                                                          {relu.rmse_agg.mean, ref.rmse_relu}}};
    bool close = true;
    for (const auto& [got, want] : pairs) close = close && std::abs(got - want) <= kTableTolerance;
    wins += win ? 1 : 0;
    within += close ? 1 : 0;
    ++evaluated;
    std::cout << "  " << ((win && close) ? "ok   " : "FAIL ") << name << "  NLL mp " << fmt(mp.nll_agg.mean)
              << " (ref " << ref.nll_mp << ") relu " << fmt(relu.nll_agg.mean) << " (ref " << ref.nll_relu
              << "), RMSE mp " << fmt(mp.rmse_agg.mean) << " (ref " << ref.rmse_mp << ") relu "
              << fmt(relu.rmse_agg.mean) << " (ref " << ref.rmse_relu << "), dropout mp " << mp.dropout_rate
              << " relu " << relu.dropout_rate << '\n';
  }
  std::string detail = "MP-GELU NLL wins " + std::to_string(wins) + "/" + std::to_string(table.size()) +
                       " (need " + std::to_string(kMinNllWins) + "), within +-0.15 of reference " +
                       std::to_string(within) + "/" + std::to_string(table.size());
  if (!missing.empty()) {
    detail += ", missing datasets:";
    for (const auto& m : missing) detail += " " + m;
  }
  const bool passed = missing.empty() && wins >= kMinNllWins && within == static_cast<int>(table.size());
  return {passed && evaluated == static_cast<int>(table.size()), detail};
}

Verdict c6_runtime(const Args&) {
  Verdict v{true, ""};
  for (const CovarianceMode mode : {CovarianceMode::Full, CovarianceMode::Diagonal}) {
    BenchmarkSettings s;
    s.widths = {20};
    s.mode = mode;
    s.inputs = kBenchInputs;
    s.repetitions = kBenchRepetitions;
    s.seed = derive_seed(kSeed, 60);
    std::vector<BenchmarkRow> rows;
    (void)run_benchmark(s, &rows);
    double mp = 0.0, relu = 0.0;
    for (const auto& r : rows) (r.arch == Architecture::MpGelu ? mp : relu) = r.ns_per_pass;
    const double speedup = relu / mp;
    const bool ok = mode == CovarianceMode::Full ? speedup >= kMinFullSpeedup : speedup > kMinDiagSpeedup;
    std::cout << "  " << (ok ? "ok   " : "FAIL ") << to_string(mode) << "  mp_gelu " << fmt(mp, 6) << " ns, relu "
              << fmt(relu, 6) << " ns, speedup " << fmt(speedup, 3) << '\n';
    v.passed = v.passed && ok;
    v.detail += std::string(v.detail.empty() ? "" : ", ") + to_string(mode) + " speedup " + fmt(speedup, 3);
  }
  return v;
}

std::vector<Index> dense_widths(const ModelConfig& c) {
  std::vector<Index> w;
  for (const auto& l : c.layers) {
    if (const auto* d = std::get_if<DenseLayer>(&l)) w.push_back(d->out);
  }
  return w;
}

Verdict c7_structure(const Args& a) {
  Verdict v{true, ""};
  const auto expect = [&](bool cond, const std::string& what) {
    if (!cond) std::cout << "  FAIL " << what << '\n';
    v.passed = v.passed && cond;
  };
  for (const Index q : {1, 8, 13}) {
    const ModelConfig mp = build_model(Architecture::MpGelu, q, 20, 0.05, CovarianceMode::Full, HeadType::Heteroscedastic2);
    const ModelConfig relu = build_model(Architecture::Relu, q, 20, 0.05, CovarianceMode::Full, HeadType::Heteroscedastic2);
    expect(mp.describe() == "Dropout Dense MP-GELU Dense MP-GELU Dense", "MP-GELU sequence: " + mp.describe());
    expect(relu.describe() == "Dropout Dense ReLU Dropout Dense ReLU Dropout Dense", "ReLU sequence: " + relu.describe());
    expect(dense_widths(mp) == std::vector<Index>{20, 20, 2}, "MP-GELU dense widths");
    expect(dense_widths(relu) == std::vector<Index>{20, 20, 2}, "ReLU dense widths");
    expect(std::get<DenseLayer>(mp.layers[1]).in == q && std::get<DenseLayer>(relu.layers[1]).in == q, "input width");
  }

  const Dataset ds = toy_generate(60, derive_seed(kSeed, 70));
  const fs::path out = fs::path(a.workdir) / "c7";
  fs::create_directories(out);
  int tables = 0;
  for (const HeadType head : {HeadType::Heteroscedastic2, HeadType::Homoscedastic1}) {
    for (const CovarianceMode mode : {CovarianceMode::Full, CovarianceMode::Diagonal}) {
      for (const Architecture arch : {Architecture::MpGelu, Architecture::Relu}) {
        ProtocolConfig pc;
        pc.arch = arch;
        pc.mode = mode;
        pc.head = head;
        pc.train.epochs = 2;
        pc.repeats = 2;
        pc.dropout_grid = {0.005, 0.05};
        pc.runtime_repetitions = 1;
        pc.seed = derive_seed(kSeed, 71);
        const ModelConfig config = build_model(arch, 1, 20, 0.05, mode, head);
        expect(config.output_dim() == head_dim(head) && dense_widths(config).back() == head_dim(head),
               "head width for " + std::string(to_string(head)));
        const ExperimentResult r = run_protocol(ds, pc);
        const std::string tag = std::string(to_string(arch)) + "_" + to_string(mode) + "_head" + to_string(head);
        const fs::path path = out / ("table_" + tag + ".csv");
        write_text(path.string(), table_header() + table_row(r));
        std::ifstream in(path);
        std::string header, row;
        std::getline(in, header);
        std::getline(in, row);
        expect(header + "\n" == table_header(), tag + " header: " + header);
        std::stringstream fields(row);
        std::vector<std::string> cells;
        for (std::string cell; std::getline(fields, cell, ',');) cells.push_back(cell);
        bool numeric = cells.size() == 8;
        for (std::size_t i = 1; numeric && i < cells.size(); ++i) numeric = std::isfinite(std::stod(cells[i]));
        expect(numeric, tag + " row: " + row);
        ++tables;
      }
    }
  }
  v.detail = "layer sequences for Q in {1, 8, 13}; " + std::to_string(tables) +
             " results-table CSVs (2/1 outputs x full/diag x both architectures)";
  return v;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

// every file under a and b, compared byte for byte
bool same_tree(const fs::path& a, const fs::path& b, std::string& why) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (e.is_regular_file()) files.push_back(fs::relative(e.path(), a));
  }
  std::size_t count_b = 0;
  for (const auto& e : fs::recursive_directory_iterator(b)) count_b += e.is_regular_file() ? 1 : 0;
  if (files.empty() || files.size() != count_b) {
    why = "file sets differ";
    return false;
  }
  for (const auto& f : files) {
    if (!fs::exists(b / f) || slurp(a / f) != slurp(b / f)) {
      why = f.string() + " differs";
      return false;
    }
  }
  return true;
}

Verdict c8_determinism(const Args& a) {
  if (a.cli.empty()) return {false, "--cli not given"};
  const fs::path root = fs::absolute(fs::path(a.workdir) / "c8");
  fs::remove_all(root);
  Verdict v{true, ""};
  const std::vector<std::pair<std::string, std::string>> commands{
      {"toy", "toy --seed 11"},
      {"check", "check --level quick --seed 11"},
  };
  for (const auto& [name, args] : commands) {
    for (const char* run : {"run1", "run2"}) {
      const fs::path dir = root / name / run;
      fs::create_directories(dir / "out");
      const std::string cmd = "\"" + a.cli + "\" " + args + " --out \"" + (dir / "out").string() + "\" > \"" +
                              (dir / "out" / "stdout.txt").string() + "\"";
      const int rc = std::system(cmd.c_str());
      if (rc != 0) std::cout << "  note " << name << ' ' << run << " exited with status " << rc << '\n';
    }
    std::string why;
    const bool same = same_tree(root / name / "run1" / "out", root / name / "run2" / "out", why);
    std::cout << "  " << (same ? "ok   " : "FAIL ") << name << (same ? "  byte-identical" : "  " + why) << '\n';
    v.passed = v.passed && same;
  }
  v.detail = "toy and check --level quick outputs identical across two runs (seed 11)";
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  Args a;
  std::vector<std::string> which{"c1", "c2", "c3", "c4", "c5", "c6", "c7", "c8"};
  app.add_option("criteria", which, "Criteria to run (c1..c8)");
  app.add_option("--cli", a.cli, "Path to the mpgelu executable (c8)");
  app.add_option("--manifest", a.manifest, "Dataset manifest (c5)");
  app.add_option("--workdir", a.workdir, "Directory for generated outputs");
  app.add_option("--jobs", a.jobs, "Worker threads for c5 (0 = hardware threads)");
  CLI11_PARSE(app, argc, argv);
  if (a.jobs <= 0) a.jobs = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));

  const std::map<std::string, std::pair<std::string, std::function<Verdict(const Args&)>>> criteria{
      {"c1", {"moment oracle", c1_moment_oracle}},    {"c2", {"gradient check", c2_gradients}},
      {"c3", {"expected log-likelihood", c3_expected_ll}}, {"c4", {"toy experiment", c4_toy}},
      {"c5", {"uci reproduction", c5_uci}},            {"c6", {"runtime", c6_runtime}},
      {"c7", {"structural fidelity", c7_structure}},   {"c8", {"determinism", c8_determinism}},
  };
  int failed = 0;
  for (const std::string& id : which) {
    const auto it = criteria.find(id);
    if (it == criteria.end()) {
      std::cerr << "unknown criterion " << id << '\n';
      return 2;
    }
    Verdict v;
    try {
      v = it->second.second(a);
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    std::cout << (v.passed ? "PASS " : "FAIL ") << id << ' ' << it->second.first << ": " << v.detail << std::endl;
    failed += v.passed ? 0 : 1;
  }
  return failed == 0 ? 0 : 1;
}
