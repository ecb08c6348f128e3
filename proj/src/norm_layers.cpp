#include "uam/norm_layers.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <utility>

namespace uam::norm {

const char* to_string(NormVariant v) {
  switch (v) {
    case NormVariant::None: return "none";
    case NormVariant::BN: return "bn";
    case NormVariant::LN: return "ln";
    case NormVariant::WN: return "wn";
    case NormVariant::RN: return "rn";
    case NormVariant::SN: return "sn";
    case NormVariant::RBN: return "rbn";
    case NormVariant::RLN: return "rln";
    case NormVariant::LN_RN: return "ln+rn";
  }
  return "none";
}

NormVariant variant_from_string(const std::string& name) {
  if (name == "none" || name == "baseline") return NormVariant::None;
  if (name == "bn") return NormVariant::BN;
  if (name == "ln") return NormVariant::LN;
  if (name == "wn") return NormVariant::WN;
  if (name == "rn") return NormVariant::RN;
  if (name == "sn") return NormVariant::SN;
  if (name == "rbn") return NormVariant::RBN;
  if (name == "rln") return NormVariant::RLN;
  if (name == "ln+rn" || name == "ln_rn") return NormVariant::LN_RN;
  throw std::invalid_argument("unknown norm variant: " + name);
}

bool is_regularity_variant(NormVariant v) {
  switch (v) {
    case NormVariant::RN:
    case NormVariant::SN:
    case NormVariant::RBN:
    case NormVariant::RLN:
    case NormVariant::LN_RN:
      return true;
    default:
      return false;
  }
}

RegularityNormState::RegularityNormState(AxisScheme scheme, int width,
                                         int warmup_batches,
                                         double sigma_floor)
    : scheme_(scheme),
      width_(width),
      warmup_batches_(warmup_batches),
      sigma_floor_(sigma_floor) {
  if (width < 1) throw std::invalid_argument("RegularityNormState: width < 1");
  if (warmup_batches < 0) {
    throw std::invalid_argument("RegularityNormState: negative warm-up");
  }
  const std::size_t pairs =
      scheme == AxisScheme::PerNeuron ? static_cast<std::size_t>(width) : 1u;
  estimators_.assign(pairs, EstimatorPair{nml::RunningGaussian(sigma_floor),
                                          nml::CompAccumulator{}});
}

void RegularityNormState::set_saliency(nml::SaliencyTable table) {
  saliency_ = std::move(table);
}

void RegularityNormState::set_mixture_prior(MixturePriorConfig cfg) {
  if (scheme_ != AxisScheme::Elementwise) {
    throw std::invalid_argument("mixture prior requires the elementwise scheme");
  }
  if (cfg.components < 1 || cfg.refit_interval_batches < 1 ||
      cfg.em_iterations < 1 || cfg.history_capacity == 0) {
    throw std::invalid_argument("invalid mixture prior configuration");
  }
  mixture_cfg_ = cfg;
}

double RegularityNormState::comp_value() const {
  double sum = 0.0;
  for (const auto& e : estimators_) sum += e.comp.log_sum();
  return sum / static_cast<double>(estimators_.size());
}

namespace {

void check_input(const Eigen::MatrixXd& x, const RegularityNormState& state) {
  if (x.cols() != state.width()) {
    throw std::invalid_argument("regularity forward: width mismatch");
  }
  if (!x.allFinite()) {
    throw std::invalid_argument("regularity forward: non-finite activations");
  }
}

}  // namespace

// Shared implementation of the rn/sn/rbn/rln forwards. Lives in a friend
// so the state's internals stay private to this translation unit.
struct RegularityForwardAccess {
  static std::vector<double> row_log_weights(const RegularityNormState& state,
                                             std::span<const int> labels,
                                             Eigen::Index rows) {
    std::vector<double> logw(static_cast<std::size_t>(rows), 0.0);
    if (!state.saliency_.has_value()) return logw;
    const auto& table = *state.saliency_;
    if (!labels.empty()) {
      if (std::cmp_not_equal(labels.size(), rows)) {
        throw std::invalid_argument("sn_forward: label count != batch size");
      }
      for (Eigen::Index i = 0; i < rows; ++i) {
        logw[static_cast<std::size_t>(i)] = table.log_weight(labels[i]);
      }
    } else if (state.train_mode_) {
      throw std::invalid_argument("sn_forward: labels required in train mode");
    } else {
      const double dw = std::log(table.default_weight());
      for (auto& w : logw) w = dw;
    }
    return logw;
  }

  static void absorb_history(RegularityNormState& state,
                             const Eigen::MatrixXd& x) {
    if (!state.mixture_cfg_.has_value()) return;
    const auto cap = state.mixture_cfg_->history_capacity;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      for (Eigen::Index j = 0; j < x.cols(); ++j) {
        state.history_.push_back(x(i, j));
        if (state.history_.size() > cap) state.history_.pop_front();
      }
    }
  }

  static void maybe_refit(RegularityNormState& state) {
    if (!state.mixture_cfg_.has_value()) return;
    const auto& cfg = *state.mixture_cfg_;
    if (++state.batches_since_refit_ < cfg.refit_interval_batches) return;
    if (state.history_.size() < static_cast<std::size_t>(cfg.components)) return;
    state.batches_since_refit_ = 0;
    const std::vector<double> buffer(state.history_.begin(),
                                     state.history_.end());
    const auto seed = nml::PriorModel::gaussian(nml::RunningGaussian::from_moments(
        1, 0.0, 1.0, state.sigma_floor_));
    state.mixture_prior_ =
        nml::mixture_em_refit(state.mixture_prior_.value_or(seed), buffer,
                              cfg.components, cfg.em_iterations);
  }

  static double scaled_l(RegularityNormState& state, double l) {
    if (!state.rescale_l_) return l;
    state.l_sum_ += l;
    ++state.l_count_;
    const double mean = state.l_sum_ / static_cast<double>(state.l_count_);
    return mean > 0.0 ? l / mean : l;
  }

  static RnResult forward(const Eigen::MatrixXd& x, RegularityNormState& state,
                          std::span<const int> labels) {
    check_input(x, state);
    const Eigen::Index rows = x.rows();
    const Eigen::Index cols = x.cols();
    RnResult out;
    out.y = x;
    out.l_values = Eigen::MatrixXd::Ones(rows, cols);
    if (rows == 0) return out;

    const auto logw = row_log_weights(state, labels, rows);
    const bool train = state.train_mode_;
    const bool warming = train && state.batches_seen_ < state.warmup_batches_;

    switch (state.scheme_) {
      case AxisScheme::Elementwise:
        elementwise(x, state, logw, warming, out);
        break;
      case AxisScheme::PerNeuron:
        per_neuron(x, state, logw, warming, out);
        break;
      case AxisScheme::PerSampleLayer:
        per_sample_layer(x, state, logw, warming, out);
        break;
    }

    if (train) {
      absorb_history(state, x);
      maybe_refit(state);
      ++state.batches_seen_;
    }
    return out;
  }

  static double elementwise_logp(const RegularityNormState& state,
                                 const nml::RunningGaussian& g, double x) {
    if (state.mixture_prior_.has_value()) return state.mixture_prior_->log_pdf(x);
    return g.log_pdf(x);
  }

  static void elementwise(const Eigen::MatrixXd& x, RegularityNormState& state,
                          const std::vector<double>& logw, bool warming,
                          RnResult& out) {
    auto& est = state.estimators_[0];
    const Eigen::Index rows = x.rows();
    const Eigen::Index cols = x.cols();
    std::vector<double> logp(static_cast<std::size_t>(rows * cols));

    if (!state.train_mode_) {
      if (est.gaussian.count() == 0 || est.comp.empty()) return;  // identity
      for (Eigen::Index i = 0; i < rows; ++i) {
        for (Eigen::Index j = 0; j < cols; ++j) {
          const double lp = elementwise_logp(state, est.gaussian, x(i, j)) +
                            logw[static_cast<std::size_t>(i)];
          const double l = est.comp.log_sum() - lp;
          out.l_values(i, j) = l;
          out.y(i, j) = l * x(i, j);
        }
      }
      return;
    }

    if (warming) {
      // Seed the estimate first so the opening batch has a usable fit.
      for (Eigen::Index i = 0; i < rows; ++i) {
        for (Eigen::Index j = 0; j < cols; ++j) est.gaussian.add(x(i, j));
      }
      std::size_t k = 0;
      for (Eigen::Index i = 0; i < rows; ++i) {
        for (Eigen::Index j = 0; j < cols; ++j) {
          logp[k++] = elementwise_logp(state, est.gaussian, x(i, j)) +
                      logw[static_cast<std::size_t>(i)];
        }
      }
      est.comp.add_terms(logp);
      return;  // identity output
    }

    std::size_t k = 0;
    for (Eigen::Index i = 0; i < rows; ++i) {
      for (Eigen::Index j = 0; j < cols; ++j) {
        logp[k++] = elementwise_logp(state, est.gaussian, x(i, j)) +
                    logw[static_cast<std::size_t>(i)];
      }
    }
    est.comp.add_terms(logp);
    k = 0;
    for (Eigen::Index i = 0; i < rows; ++i) {
      for (Eigen::Index j = 0; j < cols; ++j) {
        const double l = scaled_l(state, est.comp.log_sum() - logp[k++]);
        out.l_values(i, j) = l;
        out.y(i, j) = l * x(i, j);
      }
    }
    for (Eigen::Index i = 0; i < rows; ++i) {
      for (Eigen::Index j = 0; j < cols; ++j) est.gaussian.add(x(i, j));
    }
  }

  static void per_neuron(const Eigen::MatrixXd& x, RegularityNormState& state,
                         const std::vector<double>& logw, bool warming,
                         RnResult& out) {
    const Eigen::Index rows = x.rows();
    const Eigen::Index cols = x.cols();
    std::vector<double> logp(static_cast<std::size_t>(rows));

    for (Eigen::Index j = 0; j < cols; ++j) {
      auto& est = state.estimators_[static_cast<std::size_t>(j)];
      if (!state.train_mode_) {
        if (est.gaussian.count() == 0 || est.comp.empty()) continue;
        for (Eigen::Index i = 0; i < rows; ++i) {
          const double lp =
              est.gaussian.log_pdf(x(i, j)) + logw[static_cast<std::size_t>(i)];
          const double l = est.comp.log_sum() - lp;
          out.l_values(i, j) = l;
          out.y(i, j) = l * x(i, j);
        }
        continue;
      }
      if (warming) {
        for (Eigen::Index i = 0; i < rows; ++i) est.gaussian.add(x(i, j));
        for (Eigen::Index i = 0; i < rows; ++i) {
          logp[static_cast<std::size_t>(i)] =
              est.gaussian.log_pdf(x(i, j)) + logw[static_cast<std::size_t>(i)];
        }
        est.comp.add_terms(logp);
        continue;
      }
      for (Eigen::Index i = 0; i < rows; ++i) {
        logp[static_cast<std::size_t>(i)] =
            est.gaussian.log_pdf(x(i, j)) + logw[static_cast<std::size_t>(i)];
      }
      est.comp.add_terms(logp);
      for (Eigen::Index i = 0; i < rows; ++i) {
        const double l =
            scaled_l(state, est.comp.log_sum() - logp[static_cast<std::size_t>(i)]);
        out.l_values(i, j) = l;
        out.y(i, j) = l * x(i, j);
      }
      for (Eigen::Index i = 0; i < rows; ++i) est.gaussian.add(x(i, j));
    }
  }

  static void per_sample_layer(const Eigen::MatrixXd& x,
                               RegularityNormState& state,
                               const std::vector<double>& logw, bool warming,
                               RnResult& out) {
    if (x.cols() < 2) {
      throw std::invalid_argument("rln_forward: needs at least 2 features");
    }
    auto& est = state.estimators_[0];
    const Eigen::Index rows = x.rows();
    const Eigen::Index cols = x.cols();
    const double floor = state.sigma_floor_;

    Eigen::MatrixXd logp(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
      const double mean = x.row(i).mean();
      const double var =
          (x.row(i).array() - mean).square().sum() / static_cast<double>(cols);
      const double sigma = std::max(std::sqrt(var), floor);
      for (Eigen::Index j = 0; j < cols; ++j) {
        logp(i, j) = nml::gaussian_log_pdf(x(i, j), mean, sigma) +
                     logw[static_cast<std::size_t>(i)];
      }
    }

    if (!state.train_mode_) {
      if (est.comp.empty()) return;  // identity
      for (Eigen::Index i = 0; i < rows; ++i) {
        for (Eigen::Index j = 0; j < cols; ++j) {
          const double l = est.comp.log_sum() - logp(i, j);
          out.l_values(i, j) = l;
          out.y(i, j) = l * x(i, j);
        }
      }
      return;
    }

    std::vector<double> flat(static_cast<std::size_t>(rows * cols));
    std::size_t k = 0;
    for (Eigen::Index i = 0; i < rows; ++i) {
      for (Eigen::Index j = 0; j < cols; ++j) flat[k++] = logp(i, j);
    }
    est.comp.add_terms(flat);
    if (warming) return;  // identity output
    for (Eigen::Index i = 0; i < rows; ++i) {
      for (Eigen::Index j = 0; j < cols; ++j) {
        const double l = scaled_l(state, est.comp.log_sum() - logp(i, j));
        out.l_values(i, j) = l;
        out.y(i, j) = l * x(i, j);
      }
    }
  }
};

RnResult rn_forward(const Eigen::MatrixXd& x, RegularityNormState& state) {
  if (state.axis_scheme() != AxisScheme::Elementwise) {
    throw std::invalid_argument("rn_forward: state is not elementwise");
  }
  if (state.saliency().has_value()) {
    throw std::invalid_argument("rn_forward: state carries a saliency table");
  }
  return RegularityForwardAccess::forward(x, state, {});
}

RnResult sn_forward(const Eigen::MatrixXd& x, RegularityNormState& state,
                    std::span<const int> sample_labels) {
  if (state.axis_scheme() != AxisScheme::Elementwise) {
    throw std::invalid_argument("sn_forward: state is not elementwise");
  }
  if (!state.saliency().has_value()) {
    throw std::invalid_argument("sn_forward: saliency table missing");
  }
  return RegularityForwardAccess::forward(x, state, sample_labels);
}

RnResult rbn_forward(const Eigen::MatrixXd& x, RegularityNormState& state) {
  if (state.axis_scheme() != AxisScheme::PerNeuron) {
    throw std::invalid_argument("rbn_forward: state is not per-neuron");
  }
  return RegularityForwardAccess::forward(x, state, {});
}

RnResult rln_forward(const Eigen::MatrixXd& x, RegularityNormState& state) {
  if (state.axis_scheme() != AxisScheme::PerSampleLayer) {
    throw std::invalid_argument("rln_forward: state is not per-sample-layer");
  }
  return RegularityForwardAccess::forward(x, state, {});
}

void regularity_observe(const Eigen::MatrixXd& x, RegularityNormState& state) {
  if (!state.train_mode()) return;
  RegularityForwardAccess::forward(x, state, {});
}

Eigen::MatrixXd rn_backward(const Eigen::MatrixXd& dy,
                            const Eigen::MatrixXd& l_values) {
  if (dy.rows() != l_values.rows() || dy.cols() != l_values.cols()) {
    throw std::invalid_argument("rn_backward: shape mismatch");
  }
  return dy.cwiseProduct(l_values);
}

// ---------------------------------------------------------------------------

BatchNormState BatchNormState::create(int width) {
  BatchNormState s;
  s.gamma = Eigen::VectorXd::Ones(width);
  s.beta = Eigen::VectorXd::Zero(width);
  s.running_mean = Eigen::VectorXd::Zero(width);
  s.running_var = Eigen::VectorXd::Ones(width);
  s.gamma_velocity = Eigen::VectorXd::Zero(width);
  s.beta_velocity = Eigen::VectorXd::Zero(width);
  return s;
}

Eigen::MatrixXd bn_forward(const Eigen::MatrixXd& x, BatchNormState& state,
                           bool train_mode, BnCache* cache,
                           bool update_running) {
  if (x.cols() != state.gamma.size()) {
    throw std::invalid_argument("bn_forward: width mismatch");
  }
  const auto m = static_cast<double>(x.rows());
  Eigen::VectorXd mean, var;
  if (train_mode) {
    if (x.rows() < 2) {
      throw std::invalid_argument("bn_forward: train mode needs batch >= 2");
    }
    mean = x.colwise().mean();
    var = (x.rowwise() - mean.transpose()).array().square().colwise().sum() / m;
    if (update_running) {
      state.running_mean =
          state.momentum * state.running_mean + (1.0 - state.momentum) * mean;
      state.running_var =
          state.momentum * state.running_var + (1.0 - state.momentum) * var;
    }
  } else {
    mean = state.running_mean;
    var = state.running_var;
  }
  const Eigen::VectorXd inv_std =
      (var.array() + state.eps).sqrt().inverse().matrix();
  Eigen::MatrixXd x_hat =
      (x.rowwise() - mean.transpose()).array().rowwise() *
      inv_std.transpose().array();
  Eigen::MatrixXd y = (x_hat.array().rowwise() * state.gamma.transpose().array())
                          .rowwise() +
                      state.beta.transpose().array();
  if (cache) {
    cache->x_hat = std::move(x_hat);
    cache->inv_std = inv_std;
    cache->train_mode = train_mode;
  }
  return y;
}

Eigen::MatrixXd bn_backward(const Eigen::MatrixXd& dy, const BnCache& cache,
                            const BatchNormState& state, BnParamGrads* grads) {
  if (dy.rows() != cache.x_hat.rows() || dy.cols() != cache.x_hat.cols()) {
    throw std::invalid_argument("bn_backward: shape mismatch");
  }
  if (grads) {
    grads->dgamma = dy.cwiseProduct(cache.x_hat).colwise().sum().transpose();
    grads->dbeta = dy.colwise().sum().transpose();
  }
  const Eigen::MatrixXd dxhat =
      dy.array().rowwise() * state.gamma.transpose().array();
  if (!cache.train_mode) {
    return dxhat.array().rowwise() * cache.inv_std.transpose().array();
  }
  const auto m = static_cast<double>(dy.rows());
  const Eigen::RowVectorXd sum_dxhat = dxhat.colwise().sum();
  const Eigen::RowVectorXd sum_dxhat_xhat =
      dxhat.cwiseProduct(cache.x_hat).colwise().sum();
  Eigen::MatrixXd dx =
      (m * dxhat.array()).rowwise() - sum_dxhat.array();
  dx.array() -= cache.x_hat.array().rowwise() * sum_dxhat_xhat.array();
  dx.array().rowwise() *= (cache.inv_std.transpose().array() / m);
  return dx;
}

LayerNormState LayerNormState::create(int width) {
  LayerNormState s;
  s.gain = Eigen::VectorXd::Ones(width);
  s.bias = Eigen::VectorXd::Zero(width);
  s.gain_velocity = Eigen::VectorXd::Zero(width);
  s.bias_velocity = Eigen::VectorXd::Zero(width);
  return s;
}

Eigen::MatrixXd ln_forward(const Eigen::MatrixXd& x,
                           const LayerNormState& state, LnCache* cache) {
  if (x.cols() != state.gain.size()) {
    throw std::invalid_argument("ln_forward: width mismatch");
  }
  const auto h = static_cast<double>(x.cols());
  const Eigen::VectorXd mean = x.rowwise().mean();
  const Eigen::VectorXd var =
      (x.colwise() - mean).array().square().rowwise().sum() / h;
  const Eigen::VectorXd inv_std =
      (var.array() + state.eps).sqrt().inverse().matrix();
  Eigen::MatrixXd x_hat =
      (x.colwise() - mean).array().colwise() * inv_std.array();
  Eigen::MatrixXd y = (x_hat.array().rowwise() * state.gain.transpose().array())
                          .rowwise() +
                      state.bias.transpose().array();
  if (cache) {
    cache->x_hat = std::move(x_hat);
    cache->inv_std = inv_std;
  }
  return y;
}

Eigen::MatrixXd ln_backward(const Eigen::MatrixXd& dy, const LnCache& cache,
                            const LayerNormState& state, LnParamGrads* grads) {
  if (dy.rows() != cache.x_hat.rows() || dy.cols() != cache.x_hat.cols()) {
    throw std::invalid_argument("ln_backward: shape mismatch");
  }
  if (grads) {
    grads->dgain = dy.cwiseProduct(cache.x_hat).colwise().sum().transpose();
    grads->dbias = dy.colwise().sum().transpose();
  }
  const auto h = static_cast<double>(dy.cols());
  const Eigen::MatrixXd dxhat =
      dy.array().rowwise() * state.gain.transpose().array();
  const Eigen::VectorXd sum_dxhat = dxhat.rowwise().sum();
  const Eigen::VectorXd sum_dxhat_xhat =
      dxhat.cwiseProduct(cache.x_hat).rowwise().sum();
  Eigen::MatrixXd dx = (h * dxhat.array()).colwise() - sum_dxhat.array();
  dx.array() -= cache.x_hat.array().colwise() * sum_dxhat_xhat.array();
  dx.array().colwise() *= (cache.inv_std.array() / h);
  return dx;
}

Eigen::MatrixXd wn_reparameterize(const Eigen::VectorXd& g,
                                  const Eigen::MatrixXd& v) {
  if (g.size() != v.rows()) {
    throw std::invalid_argument("wn_reparameterize: shape mismatch");
  }
  Eigen::MatrixXd w(v.rows(), v.cols());
  for (Eigen::Index r = 0; r < v.rows(); ++r) {
    const double norm = v.row(r).norm();
    if (norm == 0.0) {
      throw std::invalid_argument("wn_reparameterize: zero-norm row");
    }
    w.row(r) = (g(r) / norm) * v.row(r);
  }
  return w;
}

void wn_backward(const Eigen::MatrixXd& dw, const Eigen::VectorXd& g,
                 const Eigen::MatrixXd& v, Eigen::VectorXd* dg,
                 Eigen::MatrixXd* dv) {
  if (dw.rows() != v.rows() || dw.cols() != v.cols() || g.size() != v.rows()) {
    throw std::invalid_argument("wn_backward: shape mismatch");
  }
  if (dg) dg->resize(g.size());
  if (dv) dv->resize(v.rows(), v.cols());
  for (Eigen::Index r = 0; r < v.rows(); ++r) {
    const double norm = v.row(r).norm();
    const Eigen::RowVectorXd vhat = v.row(r) / norm;
    const double dot = dw.row(r).dot(vhat);
    if (dg) (*dg)(r) = dot;
    if (dv) dv->row(r) = (g(r) / norm) * (dw.row(r) - dot * vhat);
  }
}

RnResult ln_rn_forward(const Eigen::MatrixXd& x, const LayerNormState& ln_state,
                       RegularityNormState& rn_state, LnCache* ln_cache) {
  return rn_forward(ln_forward(x, ln_state, ln_cache), rn_state);
}

Eigen::MatrixXd ln_rn_backward(const Eigen::MatrixXd& dy,
                               const Eigen::MatrixXd& l_values,
                               const LnCache& ln_cache,
                               const LayerNormState& ln_state,
                               LnParamGrads* grads) {
  return ln_backward(rn_backward(dy, l_values), ln_cache, ln_state, grads);
}

}  // namespace uam::norm
