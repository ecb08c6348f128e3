#pragma once

#include <Eigen/Dense>
#include <deque>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "uam/nml.hpp"

namespace uam::norm {

enum class NormVariant { None, BN, LN, WN, RN, SN, RBN, RLN, LN_RN };

const char* to_string(NormVariant v);
NormVariant variant_from_string(const std::string& name);

/// Returns true for variants that carry regularity estimator state.
bool is_regularity_variant(NormVariant v);

/// Axis scheme of the implicit space the estimator models.
///  - Elementwise: one estimator for the whole layer x batch stream (RN/SN)
///  - PerNeuron: one estimator per output unit (RBN)
///  - PerSampleLayer: per-sample fit over the layer's features (RLN)
enum class AxisScheme { Elementwise, PerNeuron, PerSampleLayer };

struct EstimatorPair {
  nml::RunningGaussian gaussian;
  nml::CompAccumulator comp;
};

struct MixturePriorConfig {
  int components = 2;
  int refit_interval_batches = 50;
  std::size_t history_capacity = 100000;
  int em_iterations = 10;
};

/// Per-layer normalization state for the regularity family. Plain value
/// type: copyable, single-owner, never mutated in eval mode.
class RegularityNormState {
 public:
  RegularityNormState(AxisScheme scheme, int width, int warmup_batches = 1,
                      double sigma_floor = nml::kDefaultSigmaFloor);

  AxisScheme axis_scheme() const { return scheme_; }
  int width() const { return width_; }
  int warmup_batches() const { return warmup_batches_; }
  int batches_seen() const { return batches_seen_; }
  double sigma_floor() const { return sigma_floor_; }

  bool train_mode() const { return train_mode_; }
  void set_train_mode(bool on) { train_mode_ = on; }

  /// Divide emitted code lengths by their running mean. Escape hatch for
  /// very long runs where COMP keeps growing; off by default.
  void set_rescale_l(bool on) { rescale_l_ = on; }
  bool rescale_l() const { return rescale_l_; }

  void set_saliency(nml::SaliencyTable table);
  const std::optional<nml::SaliencyTable>& saliency() const { return saliency_; }

  /// Enables the Gaussian-mixture prior (Elementwise scheme only): history
  /// is buffered in a bounded FIFO and refit with EM on a batch schedule.
  void set_mixture_prior(MixturePriorConfig cfg);
  const std::optional<nml::PriorModel>& mixture_prior() const {
    return mixture_prior_;
  }

  std::vector<EstimatorPair>& estimators() { return estimators_; }
  const std::vector<EstimatorPair>& estimators() const { return estimators_; }

  /// COMP snapshot for traces: mean of the accumulator log-sums.
  double comp_value() const;

 private:
  friend struct RegularityForwardAccess;

  AxisScheme scheme_;
  int width_;
  int warmup_batches_;
  double sigma_floor_;
  bool train_mode_ = true;
  bool rescale_l_ = false;
  int batches_seen_ = 0;
  std::vector<EstimatorPair> estimators_;
  std::optional<nml::SaliencyTable> saliency_;

  std::optional<MixturePriorConfig> mixture_cfg_;
  std::optional<nml::PriorModel> mixture_prior_;
  std::deque<double> history_;
  int batches_since_refit_ = 0;

  // running mean of emitted L values, used only when rescale_l_ is on
  double l_sum_ = 0.0;
  std::uint64_t l_count_ = 0;
};

struct RnResult {
  Eigen::MatrixXd y;
  Eigen::MatrixXd l_values;
};

/// Regularity normalization (elementwise scheme). Per batch, in order:
/// log-likelihood of every element under the current estimate, COMP
/// increment with all batch terms, per-element code length L, y = L * x,
/// then the Welford update. During warm-up the statistics are absorbed
/// (update first, so the very first batch seeds the estimate) but L == 1.
/// In eval mode nothing mutates and L uses the frozen COMP and estimate.
RnResult rn_forward(const Eigen::MatrixXd& x, RegularityNormState& state);

/// Saliency normalization: rn_forward with every element's log-likelihood
/// shifted by the log saliency weight of its row's label, in both the
/// increment and the code-length step. Labels are required in train mode;
/// eval mode without labels falls back to the table's default weight.
RnResult sn_forward(const Eigen::MatrixXd& x, RegularityNormState& state,
                    std::span<const int> sample_labels);

/// Regularity batch normalization: PerNeuron scheme, column j of x is
/// processed by estimator j exactly as rn_forward processes its stream.
RnResult rbn_forward(const Eigen::MatrixXd& x, RegularityNormState& state);

/// Regularity layer normalization: PerSampleLayer scheme. Each row's
/// elements are scored under that row's own Gaussian fit (sigma floored);
/// one shared accumulator absorbs all element terms across history.
RnResult rln_forward(const Eigen::MatrixXd& x, RegularityNormState& state);

/// Observe-only pass for shadow probes: absorbs statistics and COMP terms
/// exactly like rn-family forwards but never scales activations.
void regularity_observe(const Eigen::MatrixXd& x, RegularityNormState& state);

/// Backward of the regularity family. L is a stop-gradient constant:
/// dx = l_values (*) dy.
Eigen::MatrixXd rn_backward(const Eigen::MatrixXd& dy,
                            const Eigen::MatrixXd& l_values);

// ---------------------------------------------------------------------------
// Baselines

struct BatchNormState {
  Eigen::VectorXd gamma, beta;
  Eigen::VectorXd running_mean, running_var;
  Eigen::VectorXd gamma_velocity, beta_velocity;
  double momentum = 0.9;
  double eps = 1e-5;

  static BatchNormState create(int width);
};

struct BnCache {
  Eigen::MatrixXd x_hat;
  Eigen::VectorXd inv_std;
  bool train_mode = true;
};

/// Batch normalization over the batch dimension (per feature). Train mode
/// standardizes by batch statistics and updates the running estimates;
/// eval mode standardizes by the running estimates. Train mode requires a
/// batch of at least 2 rows. `update_running` exists so gradient checks
/// can re-evaluate the forward without dirtying state.
Eigen::MatrixXd bn_forward(const Eigen::MatrixXd& x, BatchNormState& state,
                           bool train_mode, BnCache* cache,
                           bool update_running = true);

struct BnParamGrads {
  Eigen::VectorXd dgamma, dbeta;
};

Eigen::MatrixXd bn_backward(const Eigen::MatrixXd& dy, const BnCache& cache,
                            const BatchNormState& state, BnParamGrads* grads);

struct LayerNormState {
  Eigen::VectorXd gain, bias;
  Eigen::VectorXd gain_velocity, bias_velocity;
  double eps = 1e-5;

  static LayerNormState create(int width);
};

struct LnCache {
  Eigen::MatrixXd x_hat;
  Eigen::VectorXd inv_std;  // per row
};

/// Layer normalization over the features of each sample (row).
Eigen::MatrixXd ln_forward(const Eigen::MatrixXd& x,
                           const LayerNormState& state, LnCache* cache);

struct LnParamGrads {
  Eigen::VectorXd dgain, dbias;
};

Eigen::MatrixXd ln_backward(const Eigen::MatrixXd& dy, const LnCache& cache,
                            const LayerNormState& state, LnParamGrads* grads);

/// Weight normalization reparameterization: w_row = g_row * v_row / |v_row|.
/// Rows with zero norm are rejected.
Eigen::MatrixXd wn_reparameterize(const Eigen::VectorXd& g,
                                  const Eigen::MatrixXd& v);

/// Chain rule through the reparameterization: given dL/dw, produces dL/dg
/// and dL/dv.
void wn_backward(const Eigen::MatrixXd& dw, const Eigen::VectorXd& g,
                 const Eigen::MatrixXd& v, Eigen::VectorXd* dg,
                 Eigen::MatrixXd* dv);

/// LN followed by RN on LN's output.
RnResult ln_rn_forward(const Eigen::MatrixXd& x, const LayerNormState& ln_state,
                       RegularityNormState& rn_state, LnCache* ln_cache);

Eigen::MatrixXd ln_rn_backward(const Eigen::MatrixXd& dy,
                               const Eigen::MatrixXd& l_values,
                               const LnCache& ln_cache,
                               const LayerNormState& ln_state,
                               LnParamGrads* grads);

}  // namespace uam::norm
