#include "uam/verify.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <utility>
#include <vector>

#include "uam/data.hpp"
#include "uam/dense_nn.hpp"
#include "uam/nml.hpp"
#include "uam/rng.hpp"

namespace uam::verify {

using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

std::string format_value(double v) {
  std::ostringstream os;
  os.precision(3);
  os << std::scientific << v;
  return os.str();
}

CheckResult make_result(std::string name, std::string tolerance, bool passed,
                        double measured) {
  return CheckResult{std::move(name), std::move(tolerance), passed,
                     "measured " + format_value(measured)};
}

double scaled_err(double a, double b) {
  return std::abs(a - b) / std::max(1.0, std::max(std::abs(a), std::abs(b)));
}

MatrixXd random_matrix(Rng& rng, int rows, int cols, double scale = 1.0) {
  MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = scale * rng.normal();
  }
  return m;
}

}  // namespace

double welford_oracle_error(std::span<const double> stream,
                            std::ptrdiff_t skip_index) {
  nml::RunningGaussian state;
  for (std::ptrdiff_t i = 0; std::cmp_less(i, stream.size()); ++i) {
    if (i == skip_index) continue;
    state.add(stream[static_cast<std::size_t>(i)]);
  }
  double mean = 0.0;
  for (double x : stream) mean += x;
  mean /= static_cast<double>(stream.size());
  double m2 = 0.0;
  for (double x : stream) m2 += (x - mean) * (x - mean);
  return std::max(scaled_err(state.mean(), mean), scaled_err(state.m2(), m2));
}

double softmax_ce_gradient_error(std::uint64_t seed) {
  Rng rng(seed);
  const MatrixXd logits = random_matrix(rng, 5, 7, 2.0);
  std::vector<int> labels(5);
  for (auto& l : labels) l = static_cast<int>(rng.below(7));

  const auto [loss, dlogits] = nn::softmax_cross_entropy(logits, labels);
  double worst_abs = 0.0;
  const double h = 1e-5;
  MatrixXd probe = logits;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    for (Eigen::Index j = 0; j < logits.cols(); ++j) {
      probe(i, j) = logits(i, j) + h;
      const double up = nn::softmax_cross_entropy(probe, labels).first;
      probe(i, j) = logits(i, j) - h;
      const double dn = nn::softmax_cross_entropy(probe, labels).first;
      probe(i, j) = logits(i, j);
      const double fd = (up - dn) / (2.0 * h);
      worst_abs = std::max(worst_abs, std::abs(fd - dlogits(i, j)));
    }
  }
  // relative to the gradient's scale
  return worst_abs / std::max(dlogits.cwiseAbs().maxCoeff(), 1e-12);
}

namespace {

struct GradientProbe {
  nn::Network net;
  MatrixXd x;
  std::vector<int> labels;
  std::vector<MatrixXd> pinned;
};

GradientProbe make_probe(norm::NormVariant variant, std::uint64_t seed) {
  nn::NetworkConfig cfg;
  cfg.layer_sizes = {6, 4, 3};
  cfg.variant = variant;
  cfg.seed = seed;
  cfg.batch_size = 5;
  cfg.warmup_batches = 1;

  GradientProbe probe{nn::Network::init(cfg), {}, {}, {}};
  if (variant == norm::NormVariant::SN) {
    nml::SaliencyTable table;
    table.set(0, 1.5);
    table.set(1, 0.7);
    table.set(2, 2.0);
    probe.net.set_saliency(table);
  }

  Rng rng(mix_seed(seed, 17));
  const auto labels_for = [&rng]() {
    std::vector<int> l(5);
    for (auto& v : l) v = static_cast<int>(rng.below(3));
    return l;
  };
  // A few train batches to move estimators past warm-up and give the
  // normalization states a realistic operating point.
  for (int b = 0; b < 3; ++b) {
    const MatrixXd warm = random_matrix(rng, 5, 6);
    probe.net.forward(warm, true, labels_for());
  }

  probe.x = random_matrix(rng, 5, 6);
  probe.labels = labels_for();

  // Pin the regularity factors at the operating point: run the forward on
  // a clone so the probe network's state stays untouched.
  nn::Network clone = probe.net;
  const auto base = clone.forward(probe.x, true, probe.labels);
  probe.pinned.resize(probe.net.hidden_count());
  for (std::size_t i = 0; i < probe.net.hidden_count(); ++i) {
    probe.pinned[i] = base.layers[i].l_values;
  }
  return probe;
}

double loss_at(nn::Network& net, const GradientProbe& probe) {
  auto cache = net.forward(probe.x, true, probe.labels, &probe.pinned);
  return nn::softmax_cross_entropy(cache.logits, probe.labels).first;
}

// Central differences over one parameter vector accessed via get/set.
template <typename Get, typename Set>
double fd_vs_analytic(const nn::Network& base, const GradientProbe& probe,
                      const Eigen::VectorXd& analytic, Eigen::Index count,
                      Get get, Set set) {
  double worst = 0.0;
  const double h = 1e-5;
  for (Eigen::Index k = 0; k < count; ++k) {
    nn::Network up = base;
    set(up, k, get(base, k) + h);
    nn::Network dn = base;
    set(dn, k, get(base, k) - h);
    const double fd = (loss_at(up, probe) - loss_at(dn, probe)) / (2.0 * h);
    const double denom = std::max({std::abs(fd), std::abs(analytic(k)), 1e-6});
    worst = std::max(worst, std::abs(fd - analytic(k)) / denom);
  }
  return worst;
}

}  // namespace

double gradient_check_error(norm::NormVariant variant, std::uint64_t seed) {
  GradientProbe probe = make_probe(variant, seed);
  nn::Network& net = probe.net;

  auto cache = net.forward(probe.x, true, probe.labels, &probe.pinned);
  const auto [loss, dlogits] =
      nn::softmax_cross_entropy(cache.logits, probe.labels);
  const auto grads = net.backward(cache, dlogits);

  double worst = 0.0;
  for (std::size_t li = 0; li < net.layers().size(); ++li) {
    const auto& lg = grads.layers[li];
    {
      const auto& w = net.layers()[li].weights;
      Eigen::VectorXd flat(w.size());
      for (Eigen::Index k = 0; k < w.size(); ++k) {
        flat(k) = lg.dweights(k / w.cols(), k % w.cols());
      }
      worst = std::max(
          worst,
          fd_vs_analytic(
              net, probe, flat, w.size(),
              [li, &w](const nn::Network& n, Eigen::Index k) {
                return n.layers()[li].weights(k / w.cols(), k % w.cols());
              },
              [li, &w](nn::Network& n, Eigen::Index k, double v) {
                n.layers()[li].weights(k / w.cols(), k % w.cols()) = v;
              }));
    }
    worst = std::max(
        worst, fd_vs_analytic(
                   net, probe, lg.dbias, net.layers()[li].bias.size(),
                   [li](const nn::Network& n, Eigen::Index k) {
                     return n.layers()[li].bias(k);
                   },
                   [li](nn::Network& n, Eigen::Index k, double v) {
                     n.layers()[li].bias(k) = v;
                   }));
    if (net.layers()[li].weight_norm) {
      worst = std::max(
          worst, fd_vs_analytic(
                     net, probe, lg.dwn_g, net.layers()[li].wn_g.size(),
                     [li](const nn::Network& n, Eigen::Index k) {
                       return n.layers()[li].wn_g(k);
                     },
                     [li](nn::Network& n, Eigen::Index k, double v) {
                       n.layers()[li].wn_g(k) = v;
                     }));
    }
    if (li < net.bn_states().size() && lg.dbn_gamma.size() > 0) {
      worst = std::max(
          worst, fd_vs_analytic(
                     net, probe, lg.dbn_gamma, lg.dbn_gamma.size(),
                     [li](const nn::Network& n, Eigen::Index k) {
                       return n.bn_states()[li].gamma(k);
                     },
                     [li](nn::Network& n, Eigen::Index k, double v) {
                       n.bn_states()[li].gamma(k) = v;
                     }));
      worst = std::max(
          worst, fd_vs_analytic(
                     net, probe, lg.dbn_beta, lg.dbn_beta.size(),
                     [li](const nn::Network& n, Eigen::Index k) {
                       return n.bn_states()[li].beta(k);
                     },
                     [li](nn::Network& n, Eigen::Index k, double v) {
                       n.bn_states()[li].beta(k) = v;
                     }));
    }
    if (li < net.ln_states().size() && lg.dln_gain.size() > 0) {
      worst = std::max(
          worst, fd_vs_analytic(
                     net, probe, lg.dln_gain, lg.dln_gain.size(),
                     [li](const nn::Network& n, Eigen::Index k) {
                       return n.ln_states()[li].gain(k);
                     },
                     [li](nn::Network& n, Eigen::Index k, double v) {
                       n.ln_states()[li].gain(k) = v;
                     }));
      worst = std::max(
          worst, fd_vs_analytic(
                     net, probe, lg.dln_bias, lg.dln_bias.size(),
                     [li](const nn::Network& n, Eigen::Index k) {
                       return n.ln_states()[li].bias(k);
                     },
                     [li](nn::Network& n, Eigen::Index k, double v) {
                       n.ln_states()[li].bias(k) = v;
                     }));
    }
  }
  return worst;
}

namespace {

CheckResult check_log_sum_exp_extremes() {
  double worst = 0.0;
  worst = std::max(worst, std::abs(nml::log_sum_exp(0.0, 0.0) - std::log(2.0)));
  worst = std::max(worst, std::abs(nml::log_sum_exp(nml::kNegInf, -3.5) + 3.5));
  worst = std::max(
      worst, std::abs(nml::log_sum_exp(-1000.0, -1000.5) -
                      (-1000.0 + std::log1p(std::exp(-0.5)))));
  worst = std::max(worst, std::abs(nml::log_sum_exp(700.0, 700.0) -
                                   (700.0 + std::log(2.0))));
  worst = std::max(worst, std::abs(nml::log_sum_exp(-700.0, -700.0) -
                                   (-700.0 + std::log(2.0))));
  const bool neg_inf_ok =
      nml::log_sum_exp(nml::kNegInf, nml::kNegInf) == nml::kNegInf;
  return make_result("log-sum-exp-extremes", "abs <= 1e-12",
                     neg_inf_ok && worst <= 1e-12, worst);
}

CheckResult check_welford_oracle() {
  Rng rng(424242);
  double worst = 0.0;
  for (int stream = 0; stream < 100; ++stream) {
    const int n = 16 + static_cast<int>(rng.below(2000));
    const double shift = (rng.uniform01() - 0.5) * 20.0;
    const double scale = 0.05 + rng.uniform01() * 8.0;
    std::vector<double> xs(static_cast<std::size_t>(n));
    for (double& x : xs) x = shift + scale * rng.normal();
    worst = std::max(worst, welford_oracle_error(xs));
  }
  return make_result("running-gaussian-two-pass-oracle", "rel <= 1e-9",
                     worst <= 1e-9, worst);
}

CheckResult check_comp_monotonicity() {
  Rng rng(11);
  nml::CompAccumulator acc;
  double prev = nml::kNegInf;
  bool mono = true;
  for (int i = 0; i < 10000; ++i) {
    acc.add_term(-300.0 + 600.0 * rng.uniform01());
    mono = mono && acc.log_sum() >= prev;
    prev = acc.log_sum();
  }
  return make_result("comp-monotonicity-10k-increments", "nondecreasing", mono,
                     mono ? 0.0 : 1.0);
}

CheckResult check_comp_oracle() {
  Rng rng(12);
  nml::CompAccumulator acc;
  std::vector<double> stored;
  for (int b = 0; b < 100; ++b) {
    std::vector<double> terms(1 + rng.below(100));
    for (double& t : terms) t = -80.0 + 160.0 * rng.uniform01();
    acc.add_terms(terms);
    stored.insert(stored.end(), terms.begin(), terms.end());
  }
  double m = stored[0];
  for (double t : stored) m = std::max(m, t);
  double s = 0.0;
  for (double t : stored) s += std::exp(t - m);
  const double oracle = m + std::log(s);
  const double err = std::abs(acc.log_sum() - oracle);
  return make_result("comp-stored-list-oracle", "abs <= 1e-9", err <= 1e-9,
                     err);
}

CheckResult check_code_length_nonnegative() {
  Rng rng(13);
  nml::CompAccumulator acc;
  std::vector<double> terms(8192);
  for (double& t : terms) t = -250.0 + 500.0 * rng.uniform01();
  acc.add_terms(terms);
  double min_l = std::numeric_limits<double>::infinity();
  for (double t : terms) min_l = std::min(min_l, nml::code_length(acc, t));
  return make_result("code-length-nonnegative", ">= 0", min_l >= 0.0, min_l);
}

CheckResult check_permutation_invariance() {
  Rng rng(14);
  std::vector<double> terms(1024);
  for (double& t : terms) t = -40.0 + 80.0 * rng.uniform01();
  nml::CompAccumulator a;
  a.add_terms(terms);
  std::vector<double> shuffled = terms;
  for (std::size_t i = shuffled.size(); i > 1; --i) {
    std::swap(shuffled[i - 1], shuffled[rng.below(i)]);
  }
  nml::CompAccumulator b;
  b.add_terms(shuffled);
  const double err = std::abs(a.log_sum() - b.log_sum());
  return make_result("comp-permutation-invariance", "abs <= 1e-12",
                     err <= 1e-12, err);
}

CheckResult check_sn_rn_reduction() {
  Rng rng(15);
  norm::RegularityNormState rn(norm::AxisScheme::Elementwise, 4, 1);
  norm::RegularityNormState sn(norm::AxisScheme::Elementwise, 4, 1);
  sn.set_saliency(nml::SaliencyTable{});  // uniform, weight 1
  double worst = 0.0;
  for (int b = 0; b < 5; ++b) {
    const MatrixXd x = random_matrix(rng, 6, 4);
    std::vector<int> labels(6);
    for (auto& l : labels) l = static_cast<int>(rng.below(10));
    const auto a = norm::rn_forward(x, rn);
    const auto s = norm::sn_forward(x, sn, labels);
    worst = std::max(worst, (a.l_values - s.l_values).cwiseAbs().maxCoeff());
    worst = std::max(worst, (a.y - s.y).cwiseAbs().maxCoeff());
  }
  return make_result("sn-rn-reduction-uniform-saliency", "exact (abs = 0)",
                     worst == 0.0, worst);
}

CheckResult check_saliency_scale_invariance() {
  Rng rng(16);
  nml::SaliencyTable base(1.0);
  nml::SaliencyTable tripled(3.0);
  for (int c = 0; c < 5; ++c) {
    const double w = 0.4 + rng.uniform01() * 4.0;
    base.set(c, w);
    tripled.set(c, 3.0 * w);
  }
  norm::RegularityNormState a(norm::AxisScheme::Elementwise, 3, 1);
  norm::RegularityNormState b(norm::AxisScheme::Elementwise, 3, 1);
  a.set_saliency(base);
  b.set_saliency(tripled);
  double worst = 0.0;
  Rng data_rng(17);
  for (int batch = 0; batch < 6; ++batch) {
    const MatrixXd x = random_matrix(data_rng, 5, 3);
    std::vector<int> labels(5);
    for (auto& l : labels) l = static_cast<int>(data_rng.below(5));
    const auto ra = norm::sn_forward(x, a, labels);
    const auto rb = norm::sn_forward(x, b, labels);
    worst = std::max(worst, (ra.l_values - rb.l_values).cwiseAbs().maxCoeff());
  }
  return make_result("saliency-scale-invariance", "abs <= 1e-9", worst <= 1e-9,
                     worst);
}

CheckResult check_idx_round_trip() {
  Rng rng(18);
  bool ok = true;
  for (int iter = 0; iter < 10; ++iter) {
    data::IdxTensor t;
    if (iter % 2 == 0) {
      t.dims = {static_cast<std::uint32_t>(1 + rng.below(64))};
    } else {
      t.dims = {static_cast<std::uint32_t>(1 + rng.below(6)), 28, 28};
    }
    std::uint64_t n = 1;
    for (auto d : t.dims) n *= d;
    t.payload.resize(n);
    for (auto& byte : t.payload) byte = static_cast<std::uint8_t>(rng.below(256));
    const auto back = data::parse_idx(data::serialize_idx(t));
    ok = ok && back.dims == t.dims && back.payload == t.payload;
  }
  return make_result("idx-round-trip-identity", "exact", ok, ok ? 0.0 : 1.0);
}

}  // namespace

std::vector<CheckResult> run_verification_suite() {
  std::vector<CheckResult> results;
  results.push_back(check_log_sum_exp_extremes());
  results.push_back(check_welford_oracle());
  results.push_back(check_comp_monotonicity());
  results.push_back(check_comp_oracle());
  results.push_back(check_code_length_nonnegative());
  results.push_back(check_permutation_invariance());
  results.push_back(check_sn_rn_reduction());
  results.push_back(check_saliency_scale_invariance());
  results.push_back(check_idx_round_trip());

  for (auto v : {norm::NormVariant::None, norm::NormVariant::BN,
                 norm::NormVariant::LN, norm::NormVariant::WN,
                 norm::NormVariant::RN, norm::NormVariant::SN,
                 norm::NormVariant::RBN, norm::NormVariant::RLN,
                 norm::NormVariant::LN_RN}) {
    const double err = gradient_check_error(v, 90210);
    results.push_back(make_result(
        std::string("gradient-ffnn-") + norm::to_string(v), "rel < 1e-4",
        err < 1e-4, err));
  }
  const double ce_err = softmax_ce_gradient_error(31337);
  results.push_back(
      make_result("gradient-softmax-cross-entropy", "rel < 1e-6",
                  ce_err < 1e-6, ce_err));
  return results;
}

bool all_passed(const std::vector<CheckResult>& results) {
  return std::all_of(results.begin(), results.end(),
                     [](const CheckResult& r) { return r.passed; });
}

}  // namespace uam::verify
