#include "uam/dense_nn.hpp"

#include <cmath>
#include <stdexcept>

#include "uam/rng.hpp"

namespace uam::nn {

using Eigen::MatrixXd;
using Eigen::VectorXd;

MatrixXd DenseLayer::effective_weights() const {
  return weight_norm ? norm::wn_reparameterize(wn_g, weights) : weights;
}

void NetworkConfig::validate() const {
  if (layer_sizes.size() < 2) {
    throw std::invalid_argument("net.layer_sizes: need at least input and output");
  }
  for (int s : layer_sizes) {
    if (s < 1) throw std::invalid_argument("net.layer_sizes: sizes must be >= 1");
  }
  if (!(learning_rate > 0.0)) {
    throw std::invalid_argument("net.learning_rate: must be positive");
  }
  if (momentum < 0.0 || momentum >= 1.0) {
    throw std::invalid_argument("net.momentum: must be in [0, 1)");
  }
  if (batch_size < 1) {
    throw std::invalid_argument("net.batch_size: must be >= 1");
  }
  if (warmup_batches < 0) {
    throw std::invalid_argument("net.warmup_batches: must be >= 0");
  }
  if (!(sigma_floor > 0.0)) {
    throw std::invalid_argument("net.sigma_floor: must be positive");
  }
}

namespace {

norm::AxisScheme scheme_for(norm::NormVariant v) {
  switch (v) {
    case norm::NormVariant::RBN:
      return norm::AxisScheme::PerNeuron;
    case norm::NormVariant::RLN:
      return norm::AxisScheme::PerSampleLayer;
    default:
      return norm::AxisScheme::Elementwise;
  }
}

}  // namespace

Network Network::init(const NetworkConfig& config) {
  config.validate();
  Network net;
  net.config_ = config;

  Rng rng(config.seed);
  const auto& sizes = config.layer_sizes;
  for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
    const int fan_in = sizes[i];
    const int fan_out = sizes[i + 1];
    DenseLayer layer;
    layer.weights.resize(fan_out, fan_in);
    const double scale = std::sqrt(2.0 / fan_in);
    for (Eigen::Index r = 0; r < fan_out; ++r) {
      for (Eigen::Index c = 0; c < fan_in; ++c) {
        layer.weights(r, c) = scale * rng.normal();
      }
    }
    layer.bias = VectorXd::Zero(fan_out);
    layer.w_velocity = MatrixXd::Zero(fan_out, fan_in);
    layer.b_velocity = VectorXd::Zero(fan_out);
    if (config.variant == norm::NormVariant::WN) {
      layer.weight_norm = true;
      layer.wn_g.resize(fan_out);
      for (Eigen::Index r = 0; r < fan_out; ++r) {
        layer.wn_g(r) = layer.weights.row(r).norm();  // starts as identity
      }
      layer.wn_g_velocity = VectorXd::Zero(fan_out);
    }
    net.layers_.push_back(std::move(layer));
  }

  const bool regularity = norm::is_regularity_variant(config.variant);
  for (std::size_t i = 0; i + 2 < sizes.size(); ++i) {
    const int width = sizes[i + 1];
    switch (config.variant) {
      case norm::NormVariant::BN:
        net.bn_states_.push_back(norm::BatchNormState::create(width));
        break;
      case norm::NormVariant::LN:
        net.ln_states_.push_back(norm::LayerNormState::create(width));
        break;
      case norm::NormVariant::LN_RN:
        net.ln_states_.push_back(norm::LayerNormState::create(width));
        break;
      default:
        break;
    }
    if (regularity || config.shadow_probe) {
      norm::RegularityNormState state(scheme_for(config.variant), width,
                                      config.warmup_batches, config.sigma_floor);
      state.set_rescale_l(config.rescale_l);
      if (config.mixture_prior.has_value() &&
          state.axis_scheme() == norm::AxisScheme::Elementwise) {
        state.set_mixture_prior(*config.mixture_prior);
      }
      net.reg_states_.push_back(std::move(state));
    }
  }
  return net;
}

void Network::set_saliency(const nml::SaliencyTable& table) {
  for (auto& state : reg_states_) state.set_saliency(table);
}

ForwardCache Network::forward(const MatrixXd& x, bool train_mode,
                              std::span<const int> labels,
                              const std::vector<MatrixXd>* pinned_l) {
  if (x.cols() != input_size()) {
    throw std::invalid_argument("forward: input width mismatch");
  }
  if (!x.allFinite()) {
    throw std::invalid_argument("forward: non-finite input");
  }
  if (pinned_l && pinned_l->size() != hidden_count()) {
    throw std::invalid_argument("forward: pinned factor layer count mismatch");
  }

  ForwardCache cache;
  cache.train_mode = train_mode;
  cache.layers.resize(layers_.size());

  MatrixXd a = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    auto& lc = cache.layers[i];
    lc.input = a;

    MatrixXd z;
    if (layers_[i].weight_norm) {
      const MatrixXd w = layers_[i].effective_weights();
      z = (lc.input * w.transpose()).rowwise() + layers_[i].bias.transpose();
    } else {
      z = (lc.input * layers_[i].weights.transpose()).rowwise() +
          layers_[i].bias.transpose();
    }
    if (!z.allFinite()) {
      throw std::runtime_error("non-finite activations at layer " +
                               std::to_string(i + 1));
    }

    if (i + 1 == layers_.size()) {
      cache.logits = std::move(z);
      break;
    }

    MatrixXd h;
    const bool frozen = pinned_l != nullptr;
    switch (config_.variant) {
      case norm::NormVariant::None:
      case norm::NormVariant::WN:
        h = std::move(z);
        break;
      case norm::NormVariant::BN:
        h = norm::bn_forward(z, bn_states_[i], train_mode, &lc.bn,
                             /*update_running=*/train_mode && !frozen);
        break;
      case norm::NormVariant::LN:
        h = norm::ln_forward(z, ln_states_[i], &lc.ln);
        break;
      case norm::NormVariant::RN:
      case norm::NormVariant::SN:
      case norm::NormVariant::RBN:
      case norm::NormVariant::RLN: {
        if (frozen) {
          lc.l_values = (*pinned_l)[i];
          h = lc.l_values.cwiseProduct(z);
          break;
        }
        auto& state = reg_states_[i];
        state.set_train_mode(train_mode);
        norm::RnResult r;
        if (config_.variant == norm::NormVariant::SN) {
          r = norm::sn_forward(z, state, labels);
        } else if (config_.variant == norm::NormVariant::RBN) {
          r = norm::rbn_forward(z, state);
        } else if (config_.variant == norm::NormVariant::RLN) {
          r = norm::rln_forward(z, state);
        } else {
          r = norm::rn_forward(z, state);
        }
        h = std::move(r.y);
        lc.l_values = std::move(r.l_values);
        break;
      }
      case norm::NormVariant::LN_RN: {
        MatrixXd after_ln = norm::ln_forward(z, ln_states_[i], &lc.ln);
        if (frozen) {
          lc.l_values = (*pinned_l)[i];
          h = lc.l_values.cwiseProduct(after_ln);
          break;
        }
        auto& state = reg_states_[i];
        state.set_train_mode(train_mode);
        auto r = norm::rn_forward(after_ln, state);
        h = std::move(r.y);
        lc.l_values = std::move(r.l_values);
        break;
      }
    }

    if (!frozen && config_.shadow_probe &&
        !norm::is_regularity_variant(config_.variant) && train_mode) {
      reg_states_[i].set_train_mode(true);
      norm::regularity_observe(h, reg_states_[i]);
    }

    lc.post_norm = h;
    lc.relu_mask = (h.array() > 0.0).cast<double>().matrix();
    a = h.cwiseMax(0.0);
  }
  return cache;
}

Gradients Network::backward(const ForwardCache& cache,
                            const MatrixXd& dlogits) {
  if (cache.layers.size() != layers_.size()) {
    throw std::invalid_argument("backward: stale cache");
  }
  if (dlogits.rows() != cache.logits.rows() ||
      dlogits.cols() != cache.logits.cols()) {
    throw std::invalid_argument("backward: dlogits shape mismatch");
  }

  Gradients grads;
  grads.layers.resize(layers_.size());

  MatrixXd d = dlogits;  // gradient w.r.t. the current layer's output
  for (std::size_t idx = layers_.size(); idx-- > 0;) {
    const auto& lc = cache.layers[idx];
    auto& lg = grads.layers[idx];

    if (idx + 1 < layers_.size()) {
      MatrixXd dh = d.cwiseProduct(lc.relu_mask);
      switch (config_.variant) {
        case norm::NormVariant::None:
        case norm::NormVariant::WN:
          d = std::move(dh);
          break;
        case norm::NormVariant::BN: {
          norm::BnParamGrads bn_grads;
          d = norm::bn_backward(dh, lc.bn, bn_states_[idx], &bn_grads);
          lg.dbn_gamma = std::move(bn_grads.dgamma);
          lg.dbn_beta = std::move(bn_grads.dbeta);
          break;
        }
        case norm::NormVariant::LN: {
          norm::LnParamGrads ln_grads;
          d = norm::ln_backward(dh, lc.ln, ln_states_[idx], &ln_grads);
          lg.dln_gain = std::move(ln_grads.dgain);
          lg.dln_bias = std::move(ln_grads.dbias);
          break;
        }
        case norm::NormVariant::RN:
        case norm::NormVariant::SN:
        case norm::NormVariant::RBN:
        case norm::NormVariant::RLN:
          d = norm::rn_backward(dh, lc.l_values);
          break;
        case norm::NormVariant::LN_RN: {
          norm::LnParamGrads ln_grads;
          d = norm::ln_rn_backward(dh, lc.l_values, lc.ln, ln_states_[idx],
                                   &ln_grads);
          lg.dln_gain = std::move(ln_grads.dgain);
          lg.dln_bias = std::move(ln_grads.dbias);
          break;
        }
      }
    }

    const MatrixXd dw_eff = d.transpose() * lc.input;
    lg.dbias = d.colwise().sum().transpose();
    if (layers_[idx].weight_norm) {
      norm::wn_backward(dw_eff, layers_[idx].wn_g, layers_[idx].weights,
                        &lg.dwn_g, &lg.dweights);
    } else {
      lg.dweights = dw_eff;
    }

    if (idx > 0) {
      if (layers_[idx].weight_norm) {
        d = d * layers_[idx].effective_weights();
      } else {
        d = d * layers_[idx].weights;
      }
    }
  }
  return grads;
}

void Network::apply_sgd_step(const Gradients& grads, double learning_rate,
                             double momentum) {
  if (grads.layers.size() != layers_.size()) {
    throw std::invalid_argument("sgd step: gradient/layer count mismatch");
  }
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    auto& layer = layers_[i];
    const auto& lg = grads.layers[i];
    layer.w_velocity = momentum * layer.w_velocity + lg.dweights;
    layer.weights -= learning_rate * layer.w_velocity;
    layer.b_velocity = momentum * layer.b_velocity + lg.dbias;
    layer.bias -= learning_rate * layer.b_velocity;
    if (layer.weight_norm && lg.dwn_g.size() > 0) {
      layer.wn_g_velocity = momentum * layer.wn_g_velocity + lg.dwn_g;
      layer.wn_g -= learning_rate * layer.wn_g_velocity;
    }
    if (i < bn_states_.size() && lg.dbn_gamma.size() > 0) {
      auto& bn = bn_states_[i];
      bn.gamma_velocity = momentum * bn.gamma_velocity + lg.dbn_gamma;
      bn.gamma -= learning_rate * bn.gamma_velocity;
      bn.beta_velocity = momentum * bn.beta_velocity + lg.dbn_beta;
      bn.beta -= learning_rate * bn.beta_velocity;
    }
    if (i < ln_states_.size() && lg.dln_gain.size() > 0) {
      auto& ln = ln_states_[i];
      ln.gain_velocity = momentum * ln.gain_velocity + lg.dln_gain;
      ln.gain -= learning_rate * ln.gain_velocity;
      ln.bias_velocity = momentum * ln.bias_velocity + lg.dln_bias;
      ln.bias -= learning_rate * ln.bias_velocity;
    }
  }
}

void Network::apply_sgd_step(const Gradients& grads) {
  apply_sgd_step(grads, config_.learning_rate, config_.momentum);
}

std::vector<double> Network::comp_snapshots() const {
  std::vector<double> out;
  out.reserve(reg_states_.size());
  for (const auto& s : reg_states_) out.push_back(s.comp_value());
  return out;
}

std::vector<std::string> Network::comp_layer_ids() const {
  std::vector<std::string> out;
  out.reserve(reg_states_.size());
  for (std::size_t i = 0; i < reg_states_.size(); ++i) {
    out.push_back("fc" + std::to_string(i + 1));
  }
  return out;
}

std::pair<double, MatrixXd> softmax_cross_entropy(const MatrixXd& logits,
                                                  std::span<const int> labels) {
  const auto rows = logits.rows();
  const auto classes = logits.cols();
  if (std::cmp_not_equal(labels.size(), rows)) {
    throw std::invalid_argument("cross entropy: label count mismatch");
  }
  for (int l : labels) {
    if (l < 0 || l >= classes) {
      throw std::invalid_argument("cross entropy: label out of range");
    }
  }

  MatrixXd dlogits(rows, classes);
  double loss = 0.0;
  for (Eigen::Index r = 0; r < rows; ++r) {
    const double m = logits.row(r).maxCoeff();
    double sum = 0.0;
    for (Eigen::Index c = 0; c < classes; ++c) {
      sum += std::exp(logits(r, c) - m);
    }
    const double lse = m + std::log(sum);
    loss += lse - logits(r, labels[static_cast<std::size_t>(r)]);
    for (Eigen::Index c = 0; c < classes; ++c) {
      dlogits(r, c) = std::exp(logits(r, c) - lse);
    }
    dlogits(r, labels[static_cast<std::size_t>(r)]) -= 1.0;
  }
  const double batch = static_cast<double>(rows);
  return {loss / batch, dlogits / batch};
}

namespace {

template <typename PerRow>
void eval_pass(Network& net, const data::MnistSet& test_set, PerRow handle) {
  if (test_set.size() == 0) {
    throw std::invalid_argument("evaluate: empty test set");
  }
  const auto chunk = static_cast<std::size_t>(net.config().batch_size);
  std::vector<std::uint32_t> rows;
  for (std::size_t start = 0; start < test_set.size(); start += chunk) {
    const std::size_t take = std::min(chunk, test_set.size() - start);
    rows.resize(take);
    for (std::size_t k = 0; k < take; ++k) {
      rows[k] = static_cast<std::uint32_t>(start + k);
    }
    const MatrixXd images = test_set.gather_images(rows);
    const auto cache = net.forward(images, /*train_mode=*/false);
    for (std::size_t k = 0; k < take; ++k) {
      const auto r = static_cast<Eigen::Index>(k);
      Eigen::Index best = 0;
      for (Eigen::Index c = 1; c < cache.logits.cols(); ++c) {
        if (cache.logits(r, c) > cache.logits(r, best)) best = c;
      }
      handle(static_cast<int>(test_set.labels[start + k]),
             static_cast<int>(best));
    }
  }
}

}  // namespace

double evaluate(Network& net, const data::MnistSet& test_set) {
  std::size_t wrong = 0;
  eval_pass(net, test_set, [&](int truth, int predicted) {
    if (truth != predicted) ++wrong;
  });
  return 100.0 * static_cast<double>(wrong) /
         static_cast<double>(test_set.size());
}

Eigen::MatrixXi confusion_matrix(Network& net, const data::MnistSet& test_set) {
  Eigen::MatrixXi counts = Eigen::MatrixXi::Zero(net.class_count(),
                                                 net.class_count());
  eval_pass(net, test_set,
            [&](int truth, int predicted) { counts(truth, predicted) += 1; });
  return counts;
}

std::vector<TrainRecord> train_epoch(Network& net, data::BatchStream& stream,
                                     bool record_comp,
                                     std::int64_t step_offset) {
  std::vector<TrainRecord> records;
  std::int64_t step = step_offset;
  while (auto batch = stream.next()) {
    auto cache = net.forward(batch->images, /*train_mode=*/true, batch->labels);
    auto [loss, dlogits] = softmax_cross_entropy(cache.logits, batch->labels);
    auto grads = net.backward(cache, dlogits);
    net.apply_sgd_step(grads);
    TrainRecord rec;
    rec.step = step++;
    rec.train_loss = loss;
    if (record_comp) rec.layer_comp = net.comp_snapshots();
    records.push_back(std::move(rec));
  }
  return records;
}

}  // namespace uam::nn
