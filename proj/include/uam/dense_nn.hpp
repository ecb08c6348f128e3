#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "uam/data.hpp"
#include "uam/nml.hpp"
#include "uam/norm_layers.hpp"

namespace uam::nn {

struct DenseLayer {
  Eigen::MatrixXd weights;  // out x in; the direction matrix v under WN
  Eigen::VectorXd bias;
  Eigen::MatrixXd w_velocity;
  Eigen::VectorXd b_velocity;

  bool weight_norm = false;
  Eigen::VectorXd wn_g;
  Eigen::VectorXd wn_g_velocity;

  /// The weight matrix actually applied: the WN reparameterization when
  /// weight_norm is set, otherwise `weights` itself.
  Eigen::MatrixXd effective_weights() const;
};

struct NetworkConfig {
  std::vector<int> layer_sizes;  // input, hidden..., classes
  norm::NormVariant variant = norm::NormVariant::None;
  double learning_rate = 0.01;
  double momentum = 0.9;
  std::uint64_t seed = 0;
  int batch_size = 128;
  int warmup_batches = 1;
  double sigma_floor = nml::kDefaultSigmaFloor;
  bool shadow_probe = false;  // observe-only estimators for non-RN variants
  bool rescale_l = false;
  std::optional<norm::MixturePriorConfig> mixture_prior;

  void validate() const;  // throws std::invalid_argument on bad fields
};

struct LayerCache {
  Eigen::MatrixXd input;      // activations entering the affine transform
  Eigen::MatrixXd post_norm;  // tensor feeding the activation function
  Eigen::MatrixXd l_values;   // regularity factors; empty when not used
  norm::BnCache bn;
  norm::LnCache ln;
  Eigen::MatrixXd relu_mask;  // hidden layers only
};

struct ForwardCache {
  Eigen::MatrixXd logits;
  std::vector<LayerCache> layers;
  bool train_mode = true;
};

struct LayerGrads {
  Eigen::MatrixXd dweights;  // gradient of v under WN
  Eigen::VectorXd dbias;
  Eigen::VectorXd dwn_g;
  Eigen::VectorXd dbn_gamma, dbn_beta;
  Eigen::VectorXd dln_gain, dln_bias;
};

struct Gradients {
  std::vector<LayerGrads> layers;
};

struct TrainRecord {
  std::int64_t step = 0;
  double train_loss = 0.0;
  std::vector<double> layer_comp;  // one entry per regularity/shadow state
};

/// Feedforward network: dense layers with ReLU hidden activations, an
/// optional normalization site between affine transform and activation,
/// softmax cross-entropy training with SGD + classical momentum.
/// Single-owner: exactly one training loop mutates a given instance.
class Network {
 public:
  static Network init(const NetworkConfig& config);

  const NetworkConfig& config() const { return config_; }
  std::vector<DenseLayer>& layers() { return layers_; }
  const std::vector<DenseLayer>& layers() const { return layers_; }
  std::vector<norm::RegularityNormState>& regularity_states() {
    return reg_states_;
  }
  const std::vector<norm::RegularityNormState>& regularity_states() const {
    return reg_states_;
  }
  std::vector<norm::BatchNormState>& bn_states() { return bn_states_; }
  const std::vector<norm::BatchNormState>& bn_states() const {
    return bn_states_;
  }
  std::vector<norm::LayerNormState>& ln_states() { return ln_states_; }
  const std::vector<norm::LayerNormState>& ln_states() const {
    return ln_states_;
  }

  /// Installs the saliency table into every regularity state (SN runs).
  void set_saliency(const nml::SaliencyTable& table);

  /// Forward pass. `labels` is consulted only by the SN variant (required
  /// in train mode). `pinned_l` replaces the regularity factors with fixed
  /// matrices (one per hidden layer) and freezes every piece of state;
  /// gradient checks use it to differentiate at a frozen operating point.
  ForwardCache forward(const Eigen::MatrixXd& x, bool train_mode,
                       std::span<const int> labels = {},
                       const std::vector<Eigen::MatrixXd>* pinned_l = nullptr);

  Gradients backward(const ForwardCache& cache, const Eigen::MatrixXd& dlogits);

  /// v' = momentum * v + g; p' = p - lr * v' for every parameter.
  void apply_sgd_step(const Gradients& grads, double learning_rate,
                      double momentum);
  void apply_sgd_step(const Gradients& grads);

  /// COMP snapshots of the regularity/shadow states, one per hidden layer
  /// that carries one; empty for plain baselines.
  std::vector<double> comp_snapshots() const;
  std::vector<std::string> comp_layer_ids() const;

  int input_size() const { return config_.layer_sizes.front(); }
  int class_count() const { return config_.layer_sizes.back(); }
  std::size_t hidden_count() const { return layers_.size() - 1; }

 private:
  NetworkConfig config_;
  std::vector<DenseLayer> layers_;
  std::vector<norm::RegularityNormState> reg_states_;
  std::vector<norm::BatchNormState> bn_states_;
  std::vector<norm::LayerNormState> ln_states_;
};

/// Mean softmax cross-entropy over the batch (shift-by-max) and its logits
/// gradient (softmax - onehot) / batch.
std::pair<double, Eigen::MatrixXd> softmax_cross_entropy(
    const Eigen::MatrixXd& logits, std::span<const int> labels);

/// Test error in percent; argmax decision with ties broken toward the
/// lowest class index. Runs in eval mode.
double evaluate(Network& net, const data::MnistSet& test_set);

/// rows = true class, cols = predicted class. Runs in eval mode.
Eigen::MatrixXi confusion_matrix(Network& net, const data::MnistSet& test_set);

/// One full pass over the stream: forward, loss, backward, SGD step per
/// batch; one TrainRecord per batch (COMP snapshots when record_comp).
std::vector<TrainRecord> train_epoch(Network& net, data::BatchStream& stream,
                                     bool record_comp,
                                     std::int64_t step_offset = 0);

}  // namespace uam::nn
