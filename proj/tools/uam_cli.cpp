#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "uam/experiment.hpp"
#include "uam/probe.hpp"
#include "uam/verify.hpp"

namespace {

namespace fs = std::filesystem;
using namespace uam;

struct CommonFlags {
  std::string config_path;
  std::string data_dir;
  std::string variant;
  int n = -1;
  std::vector<std::uint64_t> seeds;
  int epochs = 0;
  std::string out;
  int workers = -1;
  std::string saliency;
  int window = 0;
};

void add_common(CLI::App* cmd, CommonFlags& flags) {
  cmd->add_option("--config", flags.config_path, "JSON config file");
  cmd->add_option("--data-dir", flags.data_dir,
                  "directory with the four MNIST IDX files (.gz accepted)");
  cmd->add_option("--variant", flags.variant,
                  "none|bn|ln|wn|rn|sn|rbn|rln|ln+rn");
  cmd->add_option("--n", flags.n, "imbalance degree (0-9)");
  cmd->add_option("--seed", flags.seeds, "run seed, repeatable");
  cmd->add_option("--epochs", flags.epochs, "training epochs");
  cmd->add_option("--out", flags.out, "output directory");
  cmd->add_option("--workers", flags.workers,
                  "parallel run workers (0 = logical cores)");
  cmd->add_option("--saliency", flags.saliency,
                  "uniform|class_frequency|inverse_class_frequency");
  cmd->add_option("--window", flags.window, "probe smoothing window");
}

exp::ExperimentConfig build_config(const CommonFlags& flags) {
  exp::ExperimentConfig cfg;
  if (!flags.config_path.empty()) {
    cfg = exp::load_config_file(flags.config_path);
  }
  if (!flags.data_dir.empty()) cfg.data_dir = flags.data_dir;
  if (cfg.data_dir.empty()) {
    if (const char* env = std::getenv("UAM_DATA_DIR")) cfg.data_dir = env;
  }
  if (!flags.variant.empty()) {
    cfg.variant = norm::variant_from_string(flags.variant);
  }
  if (flags.n >= 0) cfg.imbalance_n = flags.n;
  if (!flags.seeds.empty()) cfg.seeds = flags.seeds;
  if (flags.epochs > 0) cfg.epochs = flags.epochs;
  if (!flags.out.empty()) cfg.output_dir = flags.out;
  if (flags.workers >= 0) cfg.workers = flags.workers;
  if (!flags.saliency.empty()) {
    cfg.saliency_mode = exp::saliency_mode_from_string(flags.saliency);
  }
  if (flags.window > 0) cfg.probe.window = flags.window;
  cfg.validate();
  return cfg;
}

int cmd_train(const CommonFlags& flags) {
  const auto cfg = build_config(flags);
  const auto raw = exp::load_corpus(cfg.data_dir);
  std::map<std::uint64_t, data::Splits> splits;
  for (auto seed : cfg.seeds) {
    if (!splits.count(seed)) {
      splits.emplace(seed, exp::splits_for_seed(raw, seed));
    }
  }
  for (auto seed : cfg.seeds) {
    exp::RunSpec spec{cfg.variant, cfg.imbalance_n, seed};
    const auto result = exp::run_experiment(splits.at(seed), cfg, spec);
    const auto dir = exp::write_run_artifacts(result, cfg);
    std::printf("run %-24s test error %6.2f%%  val %6.2f%%  -> %s\n",
                exp::run_name(spec).c_str(), result.test_error,
                result.validation_error, dir.c_str());
  }
  return 0;
}

int cmd_sweep(const CommonFlags& flags,
              const std::vector<std::string>& variant_names,
              const std::vector<int>& ns) {
  auto cfg = build_config(flags);
  if (!variant_names.empty()) {
    cfg.variants.clear();
    for (const auto& v : variant_names) {
      cfg.variants.push_back(norm::variant_from_string(v));
    }
  }
  if (!ns.empty()) cfg.ns = ns;
  cfg.validate();

  const auto result = exp::run_sweep(cfg);
  std::printf("\n%s\n", exp::sweep_table_csv(result).c_str());
  std::printf("wrote %s/{results,summary,table1}.csv\n", cfg.output_dir.c_str());
  if (!result.error.empty()) {
    std::fprintf(stderr, "sweep aborted: %s (partial results preserved)\n",
                 result.error.c_str());
    return 1;
  }
  return 0;
}

int cmd_analyze(const std::string& trace_arg, std::string out_dir, int window) {
  fs::path trace_path(trace_arg);
  if (fs::is_directory(trace_path)) trace_path /= "trace.csv";
  if (!fs::exists(trace_path)) {
    throw std::runtime_error("no trace file at " + trace_path.string());
  }
  if (out_dir.empty()) out_dir = trace_path.parent_path().string();
  fs::create_directories(out_dir);

  auto traces = probe::read_trace_csv(trace_path.string());
  const auto report = probe::build_report(std::move(traces), window);

  const fs::path out(out_dir);
  probe::export_report(report, probe::ReportFormat::Json,
                       (out / "report.json").string());
  probe::export_report(report, probe::ReportFormat::Csv,
                       (out / "report.csv").string());

  probe::PlotOptions options;
  options.title = "COMP per layer";
  probe::emit_svg_lineplot(report, (out / "comp.svg").string(), options);

  if (!report.deltas.empty()) {
    std::vector<probe::CompTrace> delta_traces;
    for (const auto& d : report.deltas) {
      probe::CompTrace t(d.second + "-" + d.first);
      for (const auto& s : d.samples) t.record(s.step, s.comp);
      delta_traces.push_back(std::move(t));
    }
    options.title = "delta COMP between layers";
    probe::emit_svg_lineplot(delta_traces, (out / "delta.svg").string(),
                             options);
  }
  for (int order : {1, 2}) {
    std::vector<probe::CompTrace> dseries;
    for (const auto& d : report.derivatives) {
      if (d.order != order) continue;
      probe::CompTrace t(d.layer_id);
      for (const auto& s : d.samples) t.record(s.step, s.comp);
      dseries.push_back(std::move(t));
    }
    if (dseries.empty()) continue;
    options.title = "smoothed COMP derivative, order " + std::to_string(order);
    probe::emit_svg_lineplot(
        dseries, (out / ("derivative" + std::to_string(order) + ".svg")).string(),
        options);
  }
  std::printf("analysis written to %s\n", out_dir.c_str());
  return 0;
}

int cmd_verify() {
  const auto results = verify::run_verification_suite();
  std::size_t failed = 0;
  for (const auto& r : results) {
    std::printf("%s  %-36s  tol=%-18s %s\n", r.passed ? "PASS" : "FAIL",
                r.name.c_str(), r.tolerance.c_str(), r.detail.c_str());
    if (!r.passed) ++failed;
  }
  std::printf("%zu/%zu checks passed\n", results.size() - failed,
              results.size());
  return failed == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"regularity normalization experiment harness"};
  app.require_subcommand(1);

  CommonFlags train_flags;
  auto* train = app.add_subcommand(
      "train", "train one (variant, n) configuration for each seed");
  add_common(train, train_flags);

  CommonFlags sweep_flags;
  std::vector<std::string> sweep_variant_names;
  std::vector<int> sweep_ns;
  auto* sweep = app.add_subcommand(
      "sweep", "run a (variant, n, seed) grid and aggregate mean +- stderr");
  add_common(sweep, sweep_flags);
  sweep->add_option("--variants", sweep_variant_names,
                    "comma-separated variant list")
      ->delimiter(',');
  sweep->add_option("--ns", sweep_ns, "comma-separated imbalance degrees")
      ->delimiter(',');

  std::string trace_arg, analyze_out;
  int analyze_window = 10;
  auto* analyze = app.add_subcommand(
      "analyze", "build COMP delta/derivative reports and SVG plots");
  analyze->add_option("--trace", trace_arg, "trace.csv file or run directory")
      ->required();
  analyze->add_option("--out", analyze_out, "output directory");
  analyze->add_option("--window", analyze_window, "smoothing window");

  app.add_subcommand("verify", "run the invariant and oracle suites");

  CLI11_PARSE(app, argc, argv);

  try {
    if (app.got_subcommand("train")) return cmd_train(train_flags);
    if (app.got_subcommand("sweep")) {
      return cmd_sweep(sweep_flags, sweep_variant_names, sweep_ns);
    }
    if (app.got_subcommand("analyze")) {
      return cmd_analyze(trace_arg, analyze_out, analyze_window);
    }
    if (app.got_subcommand("verify")) return cmd_verify();
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
