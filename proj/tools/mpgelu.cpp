#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "mpgelu/data.hpp"
#include "mpgelu/experiment.hpp"
#include "mpgelu/self_check.hpp"

namespace fs = std::filesystem;
using namespace mpgelu;

namespace {

struct Options {
  std::string config_path;
  std::uint64_t seed = 0;
  int jobs = 1;
  std::string out = "results";

  // uci
  std::string manifest = "data/manifest.json";
  std::vector<std::string> datasets;
  std::vector<std::string> archs{"mp_gelu", "relu"};
  std::string cov = "full";
  std::string head = "2";
  int epochs = 500;
  double lr = 0.001;
  int batch = 256;
  double dropout = -1.0;
  std::vector<double> grid{0.005, 0.01, 0.05, 0.1};
  int repeats = 20;
  int width = 20;

  // toy
  int toy_epochs = 1000;
  double toy_lr = 0.1;
  int toy_batch = 100;
  double toy_dropout = 0.001;

  // benchmark
  std::vector<Index> widths{20, 64, 256, 1024};
  int repetitions = 5;
  int inputs = 64;

  // check
  std::string level = "quick";
};

/// Fills every option not given on the command line from the JSON config.
template <class T>
void from_config(const nlohmann::json& cfg, const CLI::App& app, const std::string& flag,
                 const std::string& key, T& target) {
  if (!cfg.contains(key)) return;
  const CLI::Option* opt = app.get_option_no_throw(flag);
  if (opt != nullptr && opt->count() > 0) return;
  target = cfg.at(key).get<T>();
}

void apply_config(const Options& o, const CLI::App& app, Options& target) {
  if (o.config_path.empty()) return;
  std::ifstream in(o.config_path);
  if (!in) throw std::runtime_error("cannot read config " + o.config_path);
  const nlohmann::json cfg = nlohmann::json::parse(in);
  from_config(cfg, app, "--seed", "seed", target.seed);
  from_config(cfg, app, "--jobs", "jobs", target.jobs);
  from_config(cfg, app, "--out", "out", target.out);
  from_config(cfg, app, "--manifest", "manifest", target.manifest);
  from_config(cfg, app, "--dataset", "dataset", target.datasets);
  from_config(cfg, app, "--arch", "arch", target.archs);
  from_config(cfg, app, "--cov", "cov", target.cov);
  from_config(cfg, app, "--head", "head", target.head);
  const bool toy = app.get_name() == "toy";
  from_config(cfg, app, "--epochs", "epochs", toy ? target.toy_epochs : target.epochs);
  from_config(cfg, app, "--lr", "lr", toy ? target.toy_lr : target.lr);
  from_config(cfg, app, "--batch", "batch", toy ? target.toy_batch : target.batch);
  from_config(cfg, app, "--dropout", "dropout", toy ? target.toy_dropout : target.dropout);
  from_config(cfg, app, "--grid", "grid", target.grid);
  from_config(cfg, app, "--repeats", "repeats", target.repeats);
  from_config(cfg, app, "--width", "width", target.width);
  from_config(cfg, app, "--widths", "widths", target.widths);
  from_config(cfg, app, "--repetitions", "repetitions", target.repetitions);
  from_config(cfg, app, "--level", "level", target.level);
}

int cmd_toy(const Options& o) {
  fs::create_directories(o.out);
  ToySettings s;
  s.train.epochs = o.toy_epochs;
  s.train.learning_rate = o.toy_lr;
  s.train.batch_size = o.toy_batch;
  s.dropout = o.toy_dropout;
  const Dataset data = toy_generate(s.n, derive_seed(o.seed, 0));
  write_text((fs::path(o.out) / "toy_train.csv").string(), dataset_csv(data));
  bool ok = true;
  nlohmann::json summary;
  for (const Architecture arch : {Architecture::MpGelu, Architecture::Relu}) {
    const ToyCurve c = run_toy(arch, data, s, derive_seed(o.seed, 1));
    const std::string name = std::string("toy_") + to_string(arch) + ".csv";
    write_text((fs::path(o.out) / name).string(), toy_curve_csv(c));
    const ToySummary t = summarize_toy(c);
    summary[to_string(arch)] = {{"mean_std_outer", t.outer_std},
                                {"mean_std_inner", t.inner_std},
                                {"aleatoric_corr_abs_sin", t.aleatoric_corr},
                                {"final_loss", c.loss_trace.empty() ? 0.0 : c.loss_trace.back()}};
    std::cout << to_string(arch) << ": std |x|>=0.6 " << t.outer_std << ", std |x|<=0.4 " << t.inner_std
              << ", corr(aleatoric, |sin x|) " << t.aleatoric_corr << "  -> " << name << '\n';
    ok = ok && std::isfinite(t.outer_std);
  }
  write_text((fs::path(o.out) / "toy_summary.json").string(), summary.dump(2) + "\n");
  return ok ? 0 : 1;
}

int cmd_uci(const Options& o) {
  const auto manifest = load_manifest(o.manifest);
  std::vector<std::string> names = o.datasets;
  if (names.empty() || (names.size() == 1 && names[0] == "all")) {
    names.clear();
    for (const auto& [name, entry] : manifest) names.push_back(name);
  }
  fs::create_directories(o.out);
  const CovarianceMode mode = parse_covariance_mode(o.cov);
  const HeadType head = parse_head(o.head);
  for (const std::string& arch_name : o.archs) {
    ProtocolConfig pc;
    pc.arch = parse_architecture(arch_name);
    pc.mode = mode;
    pc.head = head;
    pc.hidden_width = o.width;
    pc.train = {o.lr, o.epochs, o.batch, 0};
    pc.dropout_grid = o.grid;
    pc.fixed_dropout = o.dropout;
    pc.repeats = o.repeats;
    pc.jobs = o.jobs;
    pc.seed = o.seed;
    const std::string tag = std::string(to_string(pc.arch)) + "_" + to_string(mode) + "_head" + to_string(head);
    std::string table = table_header();
    for (const std::string& name : names) {
      const auto it = manifest.find(name);
      if (it == manifest.end()) throw std::runtime_error("dataset '" + name + "' is not in " + o.manifest);
      const Dataset ds = load_manifest_dataset(it->second);
      std::cerr << "[" << tag << "] " << name << " N=" << ds.rows() << " Q=" << ds.cols() << '\n';
      const ExperimentResult r = run_protocol(ds, pc);
      write_text((fs::path(o.out) / (name + "_" + tag + ".json")).string(), result_to_json(r).dump(2) + "\n");
      table += table_row(r);
      std::cout << tag << ' ' << name << ": dropout " << r.dropout_rate << ", NLL " << r.nll_agg.mean << " +- "
                << r.nll_agg.se << ", RMSE " << r.rmse_agg.mean << " +- " << r.rmse_agg.se << ", runtime "
                << r.runtime_agg.mean << " s\n";
    }
    write_text((fs::path(o.out) / ("table_" + tag + ".csv")).string(), table);
  }
  return 0;
}

int cmd_benchmark(const Options& o) {
  BenchmarkSettings s;
  s.widths = o.widths;
  s.mode = parse_covariance_mode(o.cov);
  s.repetitions = o.repetitions;
  s.inputs = o.inputs;
  s.seed = o.seed;
  const std::string csv = run_benchmark(s);
  std::cout << csv;
  if (!o.out.empty() && o.out != "-") {
    fs::create_directories(o.out);
    write_text((fs::path(o.out) / ("benchmark_" + std::string(to_string(s.mode)) + ".csv")).string(), csv);
  }
  return 0;
}

int cmd_check(const Options& o) {
  if (o.level != "quick" && o.level != "full") throw std::invalid_argument("--level must be quick or full");
  const std::vector<CheckOutcome> results = run_self_check(o.level == "full", o.seed);
  int failed = 0;
  for (const CheckOutcome& r : results) {
    std::cout << (r.passed ? "PASS " : "FAIL ") << r.name << "  " << r.detail << '\n';
    failed += r.passed ? 0 : 1;
  }
  std::cout << (results.size() - static_cast<std::size_t>(failed)) << '/' << results.size() << " properties passed\n";
  return failed == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Moment-propagation Bayesian regression networks with MP-GELU"};
  app.require_subcommand(1);
  Options o;

  const auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config_path, "JSON config file (command-line flags take precedence)");
    sub->add_option("--seed", o.seed, "Random seed");
    sub->add_option("--out", o.out, "Output directory");
  };

  CLI::App* toy = app.add_subcommand("toy", "Train both architectures on the toy regression set");
  common(toy);
  toy->add_option("--epochs", o.toy_epochs, "Training epochs");
  toy->add_option("--lr", o.toy_lr, "Learning rate");
  toy->add_option("--batch", o.toy_batch, "Mini-batch size");
  toy->add_option("--dropout", o.toy_dropout, "Input/hidden dropout rate");

  CLI::App* uci = app.add_subcommand("uci", "Grid search plus repeated train/test protocol on tabular data");
  common(uci);
  uci->add_option("--manifest", o.manifest, "Dataset manifest (JSON)");
  uci->add_option("--dataset", o.datasets, "Dataset name(s) from the manifest, or 'all'");
  uci->add_option("--arch", o.archs, "Architecture(s)")->check(CLI::IsMember({"mp_gelu", "relu"}));
  uci->add_option("--cov", o.cov, "Covariance mode")->check(CLI::IsMember({"full", "diag"}));
  uci->add_option("--head", o.head, "Output units")->check(CLI::IsMember({"2", "1"}));
  uci->add_option("--jobs", o.jobs, "Worker threads for training");
  uci->add_option("--epochs", o.epochs, "Training epochs");
  uci->add_option("--lr", o.lr, "Learning rate");
  uci->add_option("--batch", o.batch, "Mini-batch size");
  uci->add_option("--dropout", o.dropout, "Fixed dropout rate (skips the grid search)");
  uci->add_option("--grid", o.grid, "Dropout rates searched");
  uci->add_option("--repeats", o.repeats, "Number of random splits");
  uci->add_option("--width", o.width, "Hidden width");

  CLI::App* bench = app.add_subcommand("benchmark", "Time forward passes of both architectures");
  common(bench);
  bench->add_option("--widths", o.widths, "Hidden widths");
  bench->add_option("--cov", o.cov, "Covariance mode")->check(CLI::IsMember({"full", "diag"}));
  bench->add_option("--repetitions", o.repetitions, "Timed repetitions (median reported)");
  bench->add_option("--inputs", o.inputs, "Inputs per timed pass");

  CLI::App* check = app.add_subcommand("check", "Monte-Carlo and finite-difference self-check");
  common(check);
  check->add_option("--level", o.level, "quick (1e4 samples) or full (1e6 samples)")
      ->check(CLI::IsMember({"quick", "full"}));

  CLI11_PARSE(app, argc, argv);

  try {
    CLI::App* sub = app.get_subcommands().front();
    apply_config(o, *sub, o);
    if (sub == toy) return cmd_toy(o);
    if (sub == uci) return cmd_uci(o);
    if (sub == bench) return cmd_benchmark(o);
    return cmd_check(o);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}
