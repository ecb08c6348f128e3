#include "uam/experiment.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "uam/rng.hpp"

namespace uam::exp {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

constexpr std::uint64_t kSplitTag = 0x73706c69;     // stream tags
constexpr std::uint64_t kInitTag = 0x696e6974;
constexpr std::uint64_t kImbalanceTag = 0x696d6261;
constexpr std::uint64_t kBatchTag = 0x62617463;

}  // namespace

const char* to_string(SaliencyMode mode) {
  switch (mode) {
    case SaliencyMode::Uniform: return "uniform";
    case SaliencyMode::ClassFrequency: return "class_frequency";
    case SaliencyMode::InverseClassFrequency: return "inverse_class_frequency";
  }
  return "uniform";
}

SaliencyMode saliency_mode_from_string(const std::string& name) {
  if (name == "uniform") return SaliencyMode::Uniform;
  if (name == "class_frequency") return SaliencyMode::ClassFrequency;
  if (name == "inverse_class_frequency") {
    return SaliencyMode::InverseClassFrequency;
  }
  throw ConfigError("saliency_mode: unknown mode '" + name + "'");
}

std::vector<norm::NormVariant> ExperimentConfig::sweep_variants() const {
  return variants.empty() ? std::vector<norm::NormVariant>{variant} : variants;
}

std::vector<int> ExperimentConfig::sweep_ns() const {
  return ns.empty() ? std::vector<int>{imbalance_n} : ns;
}

void ExperimentConfig::validate() const {
  if (seeds.empty()) throw ConfigError("seeds: must be nonempty");
  if (epochs < 1) throw ConfigError("epochs: must be >= 1");
  if (imbalance_n < 0 || imbalance_n > 9) {
    throw ConfigError("imbalance_n: must be in [0, 9]");
  }
  for (int n : ns) {
    if (n < 0 || n > 9) throw ConfigError("ns: entries must be in [0, 9]");
  }
  if (!(keep_probability > 0.0) || keep_probability > 1.0) {
    throw ConfigError("keep_probability: must be in (0, 1]");
  }
  if (probe.window < 1) throw ConfigError("probe.window: must be >= 1");
  if (workers < 0) throw ConfigError("workers: must be >= 0");
  if (output_dir.empty()) throw ConfigError("output_dir: must be nonempty");
  try {
    net.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

namespace {

json net_to_json(const nn::NetworkConfig& net) {
  json j;
  j["layer_sizes"] = net.layer_sizes;
  j["learning_rate"] = net.learning_rate;
  j["momentum"] = net.momentum;
  j["batch_size"] = net.batch_size;
  j["warmup_batches"] = net.warmup_batches;
  j["sigma_floor"] = net.sigma_floor;
  j["rescale_l"] = net.rescale_l;
  if (net.mixture_prior.has_value()) {
    j["mixture_prior"] = json{
        {"components", net.mixture_prior->components},
        {"refit_interval_batches", net.mixture_prior->refit_interval_batches},
        {"history_capacity", net.mixture_prior->history_capacity},
        {"em_iterations", net.mixture_prior->em_iterations}};
  }
  return j;
}

void net_from_json(const json& j, nn::NetworkConfig& net) {
  if (j.contains("layer_sizes")) {
    net.layer_sizes = j.at("layer_sizes").get<std::vector<int>>();
  }
  if (j.contains("learning_rate")) net.learning_rate = j.at("learning_rate");
  if (j.contains("momentum")) net.momentum = j.at("momentum");
  if (j.contains("batch_size")) net.batch_size = j.at("batch_size");
  if (j.contains("warmup_batches")) net.warmup_batches = j.at("warmup_batches");
  if (j.contains("sigma_floor")) net.sigma_floor = j.at("sigma_floor");
  if (j.contains("rescale_l")) net.rescale_l = j.at("rescale_l");
  if (j.contains("mixture_prior") && !j.at("mixture_prior").is_null()) {
    const auto& m = j.at("mixture_prior");
    norm::MixturePriorConfig cfg;
    if (m.contains("components")) cfg.components = m.at("components");
    if (m.contains("refit_interval_batches")) {
      cfg.refit_interval_batches = m.at("refit_interval_batches");
    }
    if (m.contains("history_capacity")) {
      cfg.history_capacity = m.at("history_capacity");
    }
    if (m.contains("em_iterations")) cfg.em_iterations = m.at("em_iterations");
    net.mixture_prior = cfg;
  }
}

}  // namespace

ExperimentConfig parse_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  ExperimentConfig cfg;
  try {
    if (j.contains("data_dir")) cfg.data_dir = j.at("data_dir");
    if (j.contains("output_dir")) cfg.output_dir = j.at("output_dir");
    if (j.contains("variant")) {
      cfg.variant = norm::variant_from_string(j.at("variant"));
    }
    if (j.contains("imbalance_n")) cfg.imbalance_n = j.at("imbalance_n");
    if (j.contains("keep_probability")) {
      cfg.keep_probability = j.at("keep_probability");
    }
    if (j.contains("seeds")) {
      cfg.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    }
    if (j.contains("epochs")) cfg.epochs = j.at("epochs");
    if (j.contains("net")) net_from_json(j.at("net"), cfg.net);
    if (j.contains("probe")) {
      const auto& p = j.at("probe");
      if (p.contains("enabled")) cfg.probe.enabled = p.at("enabled");
      if (p.contains("window")) cfg.probe.window = p.at("window");
    }
    if (j.contains("saliency_mode")) {
      cfg.saliency_mode = saliency_mode_from_string(j.at("saliency_mode"));
    }
    if (j.contains("variants")) {
      for (const auto& v : j.at("variants")) {
        cfg.variants.push_back(norm::variant_from_string(v));
      }
    }
    if (j.contains("ns")) cfg.ns = j.at("ns").get<std::vector<int>>();
    if (j.contains("workers")) cfg.workers = j.at("workers");
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

std::string serialize_config(const ExperimentConfig& cfg) {
  json j;
  j["data_dir"] = cfg.data_dir;
  j["output_dir"] = cfg.output_dir;
  j["variant"] = norm::to_string(cfg.variant);
  j["imbalance_n"] = cfg.imbalance_n;
  j["keep_probability"] = cfg.keep_probability;
  j["seeds"] = cfg.seeds;
  j["epochs"] = cfg.epochs;
  j["net"] = net_to_json(cfg.net);
  j["probe"] = json{{"enabled", cfg.probe.enabled}, {"window", cfg.probe.window}};
  j["saliency_mode"] = to_string(cfg.saliency_mode);
  if (!cfg.variants.empty()) {
    json arr = json::array();
    for (auto v : cfg.variants) arr.push_back(norm::to_string(v));
    j["variants"] = arr;
  }
  if (!cfg.ns.empty()) j["ns"] = cfg.ns;
  j["workers"] = cfg.workers;
  return j.dump(2) + "\n";
}

ExperimentConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string run_name(const RunSpec& spec) {
  std::string variant = norm::to_string(spec.variant);
  std::replace(variant.begin(), variant.end(), '+', '_');
  return variant + "_n" + std::to_string(spec.n) + "_seed" +
         std::to_string(spec.seed);
}

data::RawMnist load_corpus(const std::string& data_dir) {
  if (data_dir.empty()) {
    throw ConfigError(
        "data_dir: not set (pass --data-dir, set UAM_DATA_DIR, or generate a "
        "fixture corpus with uam-mkdata)");
  }
  return data::load_mnist_dir(data_dir);
}

data::Splits splits_for_seed(const data::RawMnist& raw, std::uint64_t seed) {
  data::SplitSpec spec;
  // Standard corpus: 60000 -> 55000/5000. Smaller fixture corpora keep the
  // same 11:1 train/validation proportion.
  const int raw_train = static_cast<int>(raw.train_images.dims.at(0));
  spec.validation = std::max(raw_train / 12, 1);
  spec.train = raw_train - spec.validation;
  spec.test = static_cast<int>(raw.test_images.dims.at(0));
  spec.shuffle_seed = mix_seed(seed, kSplitTag);
  return data::build_splits(raw.train_images, raw.train_labels, raw.test_images,
                            raw.test_labels, spec);
}

namespace {

nml::SaliencyTable build_saliency(const data::MnistSet& subset,
                                  SaliencyMode mode) {
  nml::SaliencyTable table;  // default weight 1
  if (mode == SaliencyMode::Uniform) return table;
  std::array<double, 10> counts{};
  for (auto l : subset.labels) counts[l] += 1.0;
  const double total = static_cast<double>(subset.size());
  for (int c = 0; c < 10; ++c) {
    const double count = std::max(counts[static_cast<std::size_t>(c)], 1.0);
    if (mode == SaliencyMode::ClassFrequency) {
      table.set(c, count / total);
    } else {
      table.set(c, total / count);
    }
  }
  return table;
}

}  // namespace

RunResult run_experiment(const data::Splits& splits,
                         const ExperimentConfig& config, const RunSpec& spec) {
  nn::NetworkConfig net_cfg = config.net;
  net_cfg.variant = spec.variant;
  net_cfg.seed = mix_seed(spec.seed, kInitTag);
  net_cfg.shadow_probe =
      config.probe.enabled && !norm::is_regularity_variant(spec.variant);
  auto net = nn::Network::init(net_cfg);

  RunResult result;
  result.spec = spec;

  std::vector<probe::CompTrace> traces;
  for (const auto& id : net.comp_layer_ids()) traces.emplace_back(id);

  std::int64_t step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    data::ImbalanceSpec imb;
    imb.n = spec.n;
    imb.keep_probability = config.keep_probability;
    imb.seed = mix_seed(mix_seed(spec.seed, kImbalanceTag),
                        static_cast<std::uint64_t>(spec.n) * 131 +
                            static_cast<std::uint64_t>(epoch));
    const auto imbalanced = data::apply_imbalance(splits.train, imb);
    if (epoch == 0) {
      result.chosen_classes = imbalanced.chosen_classes;
      if (spec.variant == norm::NormVariant::SN) {
        net.set_saliency(build_saliency(imbalanced.subset, config.saliency_mode));
      }
    }

    data::BatchStream stream(imbalanced.subset, net_cfg.batch_size,
                             mix_seed(spec.seed, kBatchTag, epoch));
    const auto records =
        nn::train_epoch(net, stream, config.probe.enabled, step);
    for (const auto& rec : records) {
      for (std::size_t t = 0; t < traces.size(); ++t) {
        traces[t].record(rec.step, rec.layer_comp[t]);
      }
      result.final_train_loss = rec.train_loss;
    }
    step += static_cast<std::int64_t>(records.size());
  }

  result.train_batches = static_cast<int>(step);
  result.test_error = nn::evaluate(net, splits.test);
  result.validation_error = nn::evaluate(net, splits.validation);
  result.confusion = nn::confusion_matrix(net, splits.test);
  result.traces = std::move(traces);
  return result;
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

}  // namespace

std::string write_run_artifacts(const RunResult& result,
                                const ExperimentConfig& config) {
  const fs::path dir = fs::path(config.output_dir) / run_name(result.spec);
  fs::create_directories(dir);

  json metrics;
  metrics["variant"] = norm::to_string(result.spec.variant);
  metrics["imbalance_n"] = result.spec.n;
  metrics["seed"] = result.spec.seed;
  metrics["epochs"] = config.epochs;
  metrics["keep_probability"] = config.keep_probability;
  metrics["layer_sizes"] = config.net.layer_sizes;
  metrics["learning_rate"] = config.net.learning_rate;
  metrics["momentum"] = config.net.momentum;
  metrics["batch_size"] = config.net.batch_size;
  metrics["saliency_mode"] = to_string(config.saliency_mode);
  metrics["chosen_classes"] = result.chosen_classes;
  metrics["train_batches"] = result.train_batches;
  metrics["final_train_loss"] = result.final_train_loss;
  metrics["test_error_percent"] = result.test_error;
  metrics["validation_error_percent"] = result.validation_error;
  if (!result.traces.empty()) {
    json final_comp = json::object();
    for (const auto& t : result.traces) {
      if (!t.empty()) final_comp[t.layer_id()] = t.samples().back().comp;
    }
    metrics["final_comp"] = final_comp;
  }
  write_text(dir / "metrics.json", metrics.dump(2) + "\n");

  std::ostringstream confusion;
  confusion << "true_class";
  for (int c = 0; c < result.confusion.cols(); ++c) confusion << ",pred" << c;
  confusion << "\n";
  for (int r = 0; r < result.confusion.rows(); ++r) {
    confusion << r;
    for (int c = 0; c < result.confusion.cols(); ++c) {
      confusion << ',' << result.confusion(r, c);
    }
    confusion << "\n";
  }
  write_text(dir / "confusion.csv", confusion.str());

  if (!result.traces.empty()) {
    probe::TraceReport report;
    report.traces = result.traces;
    probe::export_report(report, probe::ReportFormat::Csv,
                         (dir / "trace.csv").string());
  }
  return dir.string();
}

SweepResult aggregate_runs(const std::vector<RunResult>& runs) {
  std::map<std::pair<std::string, int>, SweepCell> cells;
  for (const auto& run : runs) {
    const auto key = std::make_pair(std::string(norm::to_string(run.spec.variant)),
                                    run.spec.n);
    auto& cell = cells[key];
    cell.variant = run.spec.variant;
    cell.n = run.spec.n;
    cell.per_seed.push_back(run.test_error);
  }
  SweepResult out;
  for (auto& [_, cell] : cells) {
    const auto runs_count = static_cast<double>(cell.per_seed.size());
    double mean = 0.0;
    for (double v : cell.per_seed) mean += v;
    mean /= runs_count;
    double var = 0.0;
    for (double v : cell.per_seed) var += (v - mean) * (v - mean);
    cell.mean_error = mean;
    cell.stderr_error =
        cell.per_seed.size() > 1
            ? std::sqrt(var / (runs_count - 1.0)) / std::sqrt(runs_count)
            : 0.0;
    out.cells.push_back(cell);
  }
  return out;
}

std::string sweep_long_csv(const std::vector<RunResult>& runs) {
  std::ostringstream out;
  out << "variant,n,seed,test_error_percent,validation_error_percent\n";
  for (const auto& run : runs) {
    char test_buf[32], val_buf[32];
    std::snprintf(test_buf, sizeof(test_buf), "%.6g", run.test_error);
    std::snprintf(val_buf, sizeof(val_buf), "%.6g", run.validation_error);
    out << norm::to_string(run.spec.variant) << ',' << run.spec.n << ','
        << run.spec.seed << ',' << test_buf << ',' << val_buf << "\n";
  }
  return out.str();
}

std::string sweep_summary_csv(const SweepResult& result) {
  std::ostringstream out;
  out << "variant,n,mean_test_error,stderr,runs\n";
  for (const auto& cell : result.cells) {
    char mean_buf[32], se_buf[32];
    std::snprintf(mean_buf, sizeof(mean_buf), "%.6g", cell.mean_error);
    std::snprintf(se_buf, sizeof(se_buf), "%.6g", cell.stderr_error);
    out << norm::to_string(cell.variant) << ',' << cell.n << ',' << mean_buf
        << ',' << se_buf << ',' << cell.per_seed.size() << "\n";
  }
  return out.str();
}

std::string sweep_table_csv(const SweepResult& result) {
  std::vector<int> ns;
  std::vector<std::string> variants;
  for (const auto& cell : result.cells) {
    if (std::find(ns.begin(), ns.end(), cell.n) == ns.end()) ns.push_back(cell.n);
    const std::string v = norm::to_string(cell.variant);
    if (std::find(variants.begin(), variants.end(), v) == variants.end()) {
      variants.push_back(v);
    }
  }
  std::sort(ns.begin(), ns.end());

  std::ostringstream out;
  out << "variant";
  for (int n : ns) out << ",n=" << n;
  out << "\n";
  for (const auto& v : variants) {
    out << v;
    for (int n : ns) {
      out << ',';
      for (const auto& cell : result.cells) {
        if (norm::to_string(cell.variant) == v && cell.n == n) {
          char buf[64];
          std::snprintf(buf, sizeof(buf), "%.2f+-%.2f", cell.mean_error,
                        cell.stderr_error);
          out << buf;
          break;
        }
      }
    }
    out << "\n";
  }
  return out.str();
}

SweepResult run_sweep(const ExperimentConfig& config, bool quiet) {
  config.validate();
  if (config.seeds.size() < 2) {
    throw ConfigError("seeds: sweep needs >= 2 seeds for a standard error");
  }
  const auto raw = load_corpus(config.data_dir);

  // Splits depend only on the run seed; build each once, share across runs.
  std::map<std::uint64_t, data::Splits> splits;
  for (auto seed : config.seeds) {
    if (!splits.count(seed)) splits.emplace(seed, splits_for_seed(raw, seed));
  }

  std::vector<RunSpec> specs;
  for (auto variant : config.sweep_variants()) {
    for (int n : config.sweep_ns()) {
      for (auto seed : config.seeds) specs.push_back(RunSpec{variant, n, seed});
    }
  }

  std::vector<RunResult> results(specs.size());
  std::vector<char> done(specs.size(), 0);
  std::vector<std::string> errors(specs.size());
  std::atomic<std::size_t> cursor{0};
  std::atomic<bool> abort{false};
  std::mutex io_mutex;

  const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  const auto worker_count =
      config.workers > 0 ? static_cast<unsigned>(config.workers)
                         : std::min<unsigned>(hw, static_cast<unsigned>(specs.size()));

  auto work = [&]() {
    while (!abort.load()) {
      const std::size_t i = cursor.fetch_add(1);
      if (i >= specs.size()) return;
      try {
        results[i] = run_experiment(splits.at(specs[i].seed), config, specs[i]);
        write_run_artifacts(results[i], config);
        done[i] = 1;
        if (!quiet) {
          std::lock_guard<std::mutex> lock(io_mutex);
          std::printf("run %-24s test error %6.2f%%\n",
                      run_name(specs[i]).c_str(), results[i].test_error);
          std::fflush(stdout);
        }
      } catch (const std::exception& e) {
        errors[i] = e.what();
        abort.store(true);
      }
    }
  };

  std::vector<std::thread> pool;
  for (unsigned t = 0; t < worker_count; ++t) pool.emplace_back(work);
  for (auto& t : pool) t.join();

  SweepResult out;
  std::vector<RunResult> completed;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    if (done[i]) {
      completed.push_back(results[i]);
    } else if (!errors[i].empty()) {
      out.failed.push_back(specs[i]);
      if (out.error.empty()) {
        out.error = "run " + run_name(specs[i]) + " failed: " + errors[i];
      }
    }
  }
  const auto aggregated = aggregate_runs(completed);
  out.cells = aggregated.cells;

  fs::create_directories(config.output_dir);
  write_text(fs::path(config.output_dir) / "results.csv",
             sweep_long_csv(completed));
  write_text(fs::path(config.output_dir) / "summary.csv",
             sweep_summary_csv(out));
  write_text(fs::path(config.output_dir) / "table1.csv", sweep_table_csv(out));
  return out;
}

}  // namespace uam::exp
