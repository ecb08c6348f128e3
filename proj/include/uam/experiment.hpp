#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "uam/data.hpp"
#include "uam/data_synth.hpp"
#include "uam/dense_nn.hpp"
#include "uam/norm_layers.hpp"
#include "uam/probe.hpp"

namespace uam::exp {

/// Configuration validation failure; the message carries the field path.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ProbeConfig {
  bool enabled = true;
  int window = 10;
};

enum class SaliencyMode { Uniform, ClassFrequency, InverseClassFrequency };

const char* to_string(SaliencyMode mode);
SaliencyMode saliency_mode_from_string(const std::string& name);

struct ExperimentConfig {
  std::string data_dir;
  std::string output_dir = "out";
  norm::NormVariant variant = norm::NormVariant::None;
  int imbalance_n = 0;
  double keep_probability = 0.01;
  std::vector<std::uint64_t> seeds = {1};
  int epochs = 1;
  nn::NetworkConfig net = default_net();  // net.seed is ignored; run seeds drive init
  ProbeConfig probe;
  SaliencyMode saliency_mode = SaliencyMode::ClassFrequency;

  // sweep extents; empty lists fall back to {variant} / {imbalance_n}
  std::vector<norm::NormVariant> variants;
  std::vector<int> ns;
  int workers = 0;  // 0 = hardware concurrency

  std::vector<norm::NormVariant> sweep_variants() const;
  std::vector<int> sweep_ns() const;

  void validate() const;  // throws ConfigError with a field path

  static nn::NetworkConfig default_net() {
    nn::NetworkConfig net;
    net.layer_sizes = {784, 1000, 1000, 10};
    return net;
  }
};

ExperimentConfig parse_config(const std::string& json_text);
std::string serialize_config(const ExperimentConfig& config);
ExperimentConfig load_config_file(const std::string& path);

struct RunSpec {
  norm::NormVariant variant = norm::NormVariant::None;
  int n = 0;
  std::uint64_t seed = 1;
};

std::string run_name(const RunSpec& spec);

struct RunResult {
  RunSpec spec;
  double test_error = 0.0;
  double validation_error = 0.0;
  double final_train_loss = 0.0;
  int train_batches = 0;
  std::vector<int> chosen_classes;
  Eigen::MatrixXi confusion;
  std::vector<probe::CompTrace> traces;
};

data::RawMnist load_corpus(const std::string& data_dir);

/// Split shuffle seed derives from the run seed, so every variant at a
/// given (n, seed) faces the same split and the same imbalance draw.
data::Splits splits_for_seed(const data::RawMnist& raw, std::uint64_t seed);

/// Trains one configuration end to end on prebuilt splits and evaluates on
/// the balanced test set.
RunResult run_experiment(const data::Splits& splits,
                         const ExperimentConfig& config, const RunSpec& spec);

/// Writes metrics.json, confusion.csv and (when probing) trace.csv under
/// output_dir/<run_name>/; returns that run directory.
std::string write_run_artifacts(const RunResult& result,
                                const ExperimentConfig& config);

struct SweepCell {
  norm::NormVariant variant = norm::NormVariant::None;
  int n = 0;
  double mean_error = 0.0;
  double stderr_error = 0.0;
  std::vector<double> per_seed;
};

struct SweepResult {
  std::vector<SweepCell> cells;
  std::vector<RunSpec> failed;
  std::string error;  // first failure message; empty on success
};

/// mean and stderr = sample std / sqrt(runs) per (variant, n).
SweepResult aggregate_runs(const std::vector<RunResult>& runs);

std::string sweep_long_csv(const std::vector<RunResult>& runs);
std::string sweep_summary_csv(const SweepResult& result);

/// One row per variant, one column per n, cells "mean+-stderr".
std::string sweep_table_csv(const SweepResult& result);

/// Runs the whole (variant, n, seed) grid on a worker pool. Per-run
/// artifacts are written as runs finish; a failed run aborts scheduling
/// but preserves everything already written.
SweepResult run_sweep(const ExperimentConfig& config, bool quiet = false);

}  // namespace uam::exp
