#include "uam/norm_layers.hpp"

#include <cmath>
#include <vector>

#include "doctest.h"
#include "uam/rng.hpp"

using namespace uam;
using namespace uam::norm;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

// Central-difference gradient of loss = sum(c (*) f(x)) w.r.t. x.
template <typename F>
MatrixXd fd_grad(F f, const MatrixXd& x, const MatrixXd& c, double h = 1e-5) {
  MatrixXd g(x.rows(), x.cols());
  MatrixXd xp = x;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      xp(i, j) = x(i, j) + h;
      const double up = (c.cwiseProduct(f(xp))).sum();
      xp(i, j) = x(i, j) - h;
      const double dn = (c.cwiseProduct(f(xp))).sum();
      xp(i, j) = x(i, j);
      g(i, j) = (up - dn) / (2.0 * h);
    }
  }
  return g;
}

double max_rel_diff(const MatrixXd& a, const MatrixXd& b) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
      const double denom =
          std::max({std::abs(a(i, j)), std::abs(b(i, j)), 1e-6});
      worst = std::max(worst, std::abs(a(i, j) - b(i, j)) / denom);
    }
  }
  return worst;
}

MatrixXd random_matrix(Rng& rng, int rows, int cols, double scale = 1.0) {
  MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = scale * rng.normal();
  }
  return m;
}

RegularityNormState seeded_elementwise_state() {
  // Estimator frozen at N(0,1) with COMP mass from exactly one prior term.
  RegularityNormState state(AxisScheme::Elementwise, 1, /*warmup=*/0);
  state.estimators()[0].gaussian = nml::RunningGaussian::from_moments(1, 0.0, 1.0);
  state.estimators()[0].comp.add_term(nml::gaussian_log_pdf(0.0, 0.0, 1.0));
  return state;
}

}  // namespace

TEST_CASE("variant names round trip") {
  for (auto v : {NormVariant::None, NormVariant::BN, NormVariant::LN,
                 NormVariant::WN, NormVariant::RN, NormVariant::SN,
                 NormVariant::RBN, NormVariant::RLN, NormVariant::LN_RN}) {
    CHECK(variant_from_string(to_string(v)) == v);
  }
  CHECK_THROWS_AS(variant_from_string("nope"), std::invalid_argument);
}

TEST_CASE("rn_forward warm-up is the identity and absorbs statistics") {
  RegularityNormState state(AxisScheme::Elementwise, 3, /*warmup=*/1);
  Rng rng(1);
  const MatrixXd x = random_matrix(rng, 4, 3);
  const auto out = rn_forward(x, state);
  CHECK(out.y == x);
  CHECK(out.l_values == MatrixXd::Ones(4, 3));
  CHECK(state.estimators()[0].gaussian.count() == 12);
  CHECK(state.estimators()[0].comp.count() == 12);
  CHECK(state.batches_seen() == 1);

  // Next batch is past warm-up: output is scaled.
  const MatrixXd x2 = random_matrix(rng, 4, 3);
  const auto out2 = rn_forward(x2, state);
  CHECK(out2.y != x2);
  CHECK(state.estimators()[0].gaussian.count() == 24);
}

TEST_CASE("rn_forward hand chain on a frozen estimator") {
  const double n01_at_0 = nml::gaussian_log_pdf(0.0, 0.0, 1.0);

  SUBCASE("x = 0 doubles the equal mass") {
    auto state = seeded_elementwise_state();
    MatrixXd x(1, 1);
    x << 0.0;
    const auto out = rn_forward(x, state);
    const double comp_after = nml::log_sum_exp(n01_at_0, n01_at_0);
    const double expected_l = comp_after - n01_at_0;  // log 2
    CHECK(out.l_values(0, 0) == doctest::Approx(expected_l).epsilon(1e-12));
    CHECK(out.l_values(0, 0) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(out.y(0, 0) == 0.0);
    CHECK(state.estimators()[0].gaussian.count() == 2);  // batch absorbed
  }

  SUBCASE("rarer x = 2 earns a larger code length") {
    auto state = seeded_elementwise_state();
    MatrixXd x(1, 1);
    x << 2.0;
    const double logp = nml::gaussian_log_pdf(2.0, 0.0, 1.0);
    const double comp_after = nml::log_sum_exp(n01_at_0, logp);
    const double expected_l = comp_after - logp;
    const auto out = rn_forward(x, state);
    CHECK(out.l_values(0, 0) == doctest::Approx(expected_l).epsilon(1e-12));
    CHECK(out.y(0, 0) == doctest::Approx(2.0 * expected_l).epsilon(1e-12));
    CHECK(out.l_values(0, 0) > std::log(2.0));
  }
}

TEST_CASE("rn rarity ordering: larger deviation, larger L") {
  auto state = RegularityNormState(AxisScheme::Elementwise, 1, 0);
  state.estimators()[0].gaussian =
      nml::RunningGaussian::from_moments(100, 0.0, 1.0);
  state.estimators()[0].comp.add_term(-0.9);
  state.set_train_mode(false);

  MatrixXd probes(5, 1);
  probes << 0.0, 0.5, -1.0, 2.0, -3.0;  // increasing |x - mu|
  const auto out = rn_forward(probes, state);
  for (int i = 1; i < 5; ++i) {
    CHECK(out.l_values(i, 0) > out.l_values(i - 1, 0));
  }
}

TEST_CASE("rn eval mode is pure") {
  RegularityNormState state(AxisScheme::Elementwise, 2, 1);
  Rng rng(3);
  rn_forward(random_matrix(rng, 8, 2), state);
  rn_forward(random_matrix(rng, 8, 2), state);

  state.set_train_mode(false);
  const auto before_count = state.estimators()[0].gaussian.count();
  const double before_comp = state.estimators()[0].comp.log_sum();
  const MatrixXd x = random_matrix(rng, 8, 2);
  const auto a = rn_forward(x, state);
  const auto b = rn_forward(x, state);
  CHECK(a.y == b.y);
  CHECK(a.l_values == b.l_values);
  CHECK(state.estimators()[0].gaussian.count() == before_count);
  CHECK(state.estimators()[0].comp.log_sum() == before_comp);
}

TEST_CASE("rn eval mode before any training is the identity") {
  RegularityNormState state(AxisScheme::Elementwise, 2, 1);
  state.set_train_mode(false);
  MatrixXd x(2, 2);
  x << 1.0, -2.0, 0.5, 3.0;
  const auto out = rn_forward(x, state);
  CHECK(out.y == x);
}

TEST_CASE("rn_forward input validation") {
  RegularityNormState state(AxisScheme::Elementwise, 3, 1);
  CHECK_THROWS_AS(rn_forward(MatrixXd::Zero(2, 4), state),
                  std::invalid_argument);
  MatrixXd bad = MatrixXd::Zero(2, 3);
  bad(1, 1) = std::nan("");
  CHECK_THROWS_AS(rn_forward(bad, state), std::invalid_argument);
  RegularityNormState per_neuron(AxisScheme::PerNeuron, 3, 1);
  CHECK_THROWS_AS(rn_forward(MatrixXd::Zero(2, 3), per_neuron),
                  std::invalid_argument);
}

TEST_CASE("rn_backward is the stop-gradient elementwise product") {
  MatrixXd dy(1, 1), l(1, 1);
  dy << 1.0;
  l << 0.6931;
  CHECK(rn_backward(dy, l)(0, 0) == doctest::Approx(0.6931));
  CHECK(rn_backward(MatrixXd::Zero(3, 2), MatrixXd::Random(3, 2)) ==
        MatrixXd::Zero(3, 2));
  CHECK_THROWS_AS(rn_backward(MatrixXd::Zero(2, 2), MatrixXd::Zero(2, 3)),
                  std::invalid_argument);

  // Finite differences on the frozen-L map x -> L (*) x.
  Rng rng(17);
  const MatrixXd x = random_matrix(rng, 3, 4);
  const MatrixXd c = random_matrix(rng, 3, 4);
  RegularityNormState state(AxisScheme::Elementwise, 4, 1);
  rn_forward(random_matrix(rng, 16, 4), state);
  auto probe_state = state;
  const MatrixXd l_pinned = rn_forward(x, probe_state).l_values;
  const auto frozen = [&](const MatrixXd& xx) -> MatrixXd {
    return l_pinned.cwiseProduct(xx);
  };
  const MatrixXd analytic = rn_backward(c, l_pinned);
  CHECK(max_rel_diff(analytic, fd_grad(frozen, x, c)) < 1e-4);
}

TEST_CASE("sn_forward with a uniform table is bit-identical to rn_forward") {
  Rng rng(11);
  RegularityNormState rn_state(AxisScheme::Elementwise, 3, 1);
  RegularityNormState sn_state(AxisScheme::Elementwise, 3, 1);
  sn_state.set_saliency(nml::SaliencyTable{});  // every weight 1.0

  std::vector<int> labels = {0, 1, 2, 3};
  for (int b = 0; b < 4; ++b) {
    const MatrixXd x = random_matrix(rng, 4, 3);
    const auto a = rn_forward(x, rn_state);
    const auto s = sn_forward(x, sn_state, labels);
    CHECK(a.y == s.y);
    CHECK(a.l_values == s.l_values);
  }
}

TEST_CASE("sn_forward hand chain with weight 2 on the sample's class") {
  auto state = seeded_elementwise_state();
  nml::SaliencyTable table;
  table.set(5, 2.0);
  state.set_saliency(table);

  MatrixXd x(1, 1);
  x << 0.0;
  const std::vector<int> labels = {5};
  const double logp = nml::gaussian_log_pdf(0.0, 0.0, 1.0) + std::log(2.0);
  const double comp_after =
      nml::log_sum_exp(nml::gaussian_log_pdf(0.0, 0.0, 1.0), logp);
  const double expected_l = comp_after - logp;
  const auto out = sn_forward(x, state, labels);
  CHECK(out.l_values(0, 0) == doctest::Approx(expected_l).epsilon(1e-12));

  CHECK_THROWS_AS(sn_forward(x, state, {}), std::invalid_argument);
  RegularityNormState no_table(AxisScheme::Elementwise, 1, 0);
  CHECK_THROWS_AS(sn_forward(x, no_table, labels), std::invalid_argument);
}

TEST_CASE("sn saliency scale invariance: doubling all weights keeps L") {
  Rng rng(23);
  nml::SaliencyTable table(1.0);
  nml::SaliencyTable doubled(2.0);
  for (int c = 0; c < 4; ++c) {
    const double w = 0.5 + rng.uniform01() * 3.0;
    table.set(c, w);
    doubled.set(c, 2.0 * w);
  }
  RegularityNormState a(AxisScheme::Elementwise, 3, 1);
  RegularityNormState b(AxisScheme::Elementwise, 3, 1);
  a.set_saliency(table);
  b.set_saliency(doubled);

  Rng data_rng(24);
  for (int batch = 0; batch < 6; ++batch) {
    const MatrixXd x = random_matrix(data_rng, 5, 3);
    std::vector<int> labels(5);
    for (auto& l : labels) l = static_cast<int>(data_rng.below(4));
    const auto ra = sn_forward(x, a, labels);
    const auto rb = sn_forward(x, b, labels);
    CHECK((ra.l_values - rb.l_values).cwiseAbs().maxCoeff() <= 1e-9);
  }
}

TEST_CASE("rbn single feature matches rn on the same stream") {
  Rng rng(31);
  RegularityNormState rn_state(AxisScheme::Elementwise, 1, 1);
  RegularityNormState rbn_state(AxisScheme::PerNeuron, 1, 1);
  for (int b = 0; b < 5; ++b) {
    const MatrixXd x = random_matrix(rng, 6, 1);
    const auto a = rn_forward(x, rn_state);
    const auto r = rbn_forward(x, rbn_state);
    CHECK(a.y == r.y);
    CHECK(a.l_values == r.l_values);
  }
}

TEST_CASE("rbn identical columns emit identical L") {
  Rng rng(37);
  RegularityNormState state(AxisScheme::PerNeuron, 2, 1);
  for (int b = 0; b < 4; ++b) {
    const MatrixXd col = random_matrix(rng, 5, 1);
    MatrixXd x(5, 2);
    x << col, col;
    const auto out = rbn_forward(x, state);
    CHECK(out.l_values.col(0) == out.l_values.col(1));
  }
}

TEST_CASE("rbn: alternating column earns larger L than a constant column") {
  // Batch size 1, column A constant 0, column B alternating +-3. The
  // brute-force replay recomputes every estimator from explicit history.
  RegularityNormState state(AxisScheme::PerNeuron, 2, 1);

  std::vector<double> history_a, history_b;
  std::vector<double> logp_a, logp_b;
  MatrixXd last_l(1, 2);

  auto two_pass_sigma = [](const std::vector<double>& xs, double floor) {
    double mean = 0.0;
    for (double v : xs) mean += v;
    mean /= static_cast<double>(xs.size());
    double m2 = 0.0;
    for (double v : xs) m2 += (v - mean) * (v - mean);
    return std::pair<double, double>(
        mean, std::max(std::sqrt(m2 / static_cast<double>(xs.size())), floor));
  };
  auto lse_all = [](const std::vector<double>& terms) {
    double m = terms[0];
    for (double t : terms) m = std::max(m, t);
    double s = 0.0;
    for (double t : terms) s += std::exp(t - m);
    return m + std::log(s);
  };

  for (int b = 0; b < 9; ++b) {
    MatrixXd x(1, 2);
    const double bval = (b % 2 == 0) ? 3.0 : -3.0;
    x << 0.0, bval;
    const auto out = rbn_forward(x, state);
    last_l = out.l_values;

    // Replay column A and B by hand.
    const double floor = state.sigma_floor();
    if (b == 0) {
      history_a.push_back(0.0);
      history_b.push_back(bval);
      auto [ma, sa] = two_pass_sigma(history_a, floor);
      auto [mb, sb] = two_pass_sigma(history_b, floor);
      logp_a.push_back(nml::gaussian_log_pdf(0.0, ma, sa));
      logp_b.push_back(nml::gaussian_log_pdf(bval, mb, sb));
      continue;
    }
    auto [ma, sa] = two_pass_sigma(history_a, floor);
    auto [mb, sb] = two_pass_sigma(history_b, floor);
    logp_a.push_back(nml::gaussian_log_pdf(0.0, ma, sa));
    logp_b.push_back(nml::gaussian_log_pdf(bval, mb, sb));
    const double expected_la = lse_all(logp_a) - logp_a.back();
    const double expected_lb = lse_all(logp_b) - logp_b.back();
    CHECK(out.l_values(0, 0) == doctest::Approx(expected_la).epsilon(1e-9));
    CHECK(out.l_values(0, 1) == doctest::Approx(expected_lb).epsilon(1e-9));
    history_a.push_back(0.0);
    history_b.push_back(bval);
  }
  CHECK(last_l(0, 1) > last_l(0, 0));
}

TEST_CASE("rln constant row shares one code length") {
  RegularityNormState state(AxisScheme::PerSampleLayer, 4, 0);
  MatrixXd x(1, 4);
  x << 2.5, 2.5, 2.5, 2.5;
  const auto out = rln_forward(x, state);
  for (int j = 1; j < 4; ++j) {
    CHECK(out.l_values(0, j) == out.l_values(0, 0));
  }
}

TEST_CASE("rln identical rows emit identical L rows") {
  RegularityNormState state(AxisScheme::PerSampleLayer, 3, 0);
  MatrixXd x(2, 3);
  x << 1.0, -0.5, 2.0, 1.0, -0.5, 2.0;
  const auto out = rln_forward(x, state);
  CHECK(out.l_values.row(0) == out.l_values.row(1));
}

TEST_CASE("rln matches a brute-force reimplementation on a random batch") {
  Rng rng(41);
  RegularityNormState state(AxisScheme::PerSampleLayer, 8, 0);
  std::vector<double> all_logp;

  for (int b = 0; b < 3; ++b) {
    const MatrixXd x = random_matrix(rng, 4, 8);
    const auto out = rln_forward(x, state);

    // Brute force: materialize every row fit and the flat logp list.
    MatrixXd logp(4, 8);
    for (int i = 0; i < 4; ++i) {
      double mean = x.row(i).mean();
      double m2 = (x.row(i).array() - mean).square().sum();
      double sigma = std::max(std::sqrt(m2 / 8.0), state.sigma_floor());
      for (int j = 0; j < 8; ++j) {
        logp(i, j) = nml::gaussian_log_pdf(x(i, j), mean, sigma);
        all_logp.push_back(logp(i, j));
      }
    }
    double m = all_logp[0];
    for (double t : all_logp) m = std::max(m, t);
    double s = 0.0;
    for (double t : all_logp) s += std::exp(t - m);
    const double comp = m + std::log(s);
    for (int i = 0; i < 4; ++i) {
      for (int j = 0; j < 8; ++j) {
        CHECK(out.l_values(i, j) ==
              doctest::Approx(comp - logp(i, j)).epsilon(1e-9));
        CHECK(out.y(i, j) ==
              doctest::Approx((comp - logp(i, j)) * x(i, j)).epsilon(1e-9));
      }
    }
  }
  RegularityNormState tiny(AxisScheme::PerSampleLayer, 1, 0);
  CHECK_THROWS_AS(rln_forward(MatrixXd::Zero(2, 1), tiny),
                  std::invalid_argument);
}

TEST_CASE("ln_forward hand example and constant row") {
  LayerNormState state = LayerNormState::create(3);
  state.eps = 0.0;
  MatrixXd x(1, 3);
  x << 1.0, 2.0, 3.0;
  const auto y = ln_forward(x, state, nullptr);
  const double r = std::sqrt(2.0 / 3.0);
  CHECK(y(0, 0) == doctest::Approx(-1.0 / r).epsilon(1e-12));
  CHECK(y(0, 1) == doctest::Approx(0.0));
  CHECK(y(0, 2) == doctest::Approx(1.0 / r).epsilon(1e-12));
  CHECK(y(0, 0) == doctest::Approx(-1.224745).epsilon(1e-6));

  LayerNormState eps_state = LayerNormState::create(3);
  MatrixXd flat(1, 3);
  flat << 4.0, 4.0, 4.0;
  const auto zeroed = ln_forward(flat, eps_state, nullptr);
  CHECK(zeroed.cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("ln_backward matches finite differences") {
  Rng rng(51);
  LayerNormState state = LayerNormState::create(5);
  state.gain = VectorXd::Random(5).array() + 1.5;
  state.bias = VectorXd::Random(5);
  const MatrixXd x = random_matrix(rng, 4, 5);
  const MatrixXd c = random_matrix(rng, 4, 5);

  LnCache cache;
  ln_forward(x, state, &cache);
  LnParamGrads grads;
  const MatrixXd analytic = ln_backward(c, cache, state, &grads);

  const auto f = [&](const MatrixXd& xx) {
    return ln_forward(xx, state, nullptr);
  };
  CHECK(max_rel_diff(analytic, fd_grad(f, x, c)) < 1e-4);

  // Parameter gradients against finite differences too.
  for (int k = 0; k < 5; ++k) {
    LayerNormState sp = state;
    sp.gain(k) += 1e-5;
    LayerNormState sm = state;
    sm.gain(k) -= 1e-5;
    const double up = c.cwiseProduct(ln_forward(x, sp, nullptr)).sum();
    const double dn = c.cwiseProduct(ln_forward(x, sm, nullptr)).sum();
    CHECK(grads.dgain(k) == doctest::Approx((up - dn) / 2e-5).epsilon(1e-4));
  }
}

TEST_CASE("bn_forward two-point standardization and eval identity") {
  BatchNormState state = BatchNormState::create(1);
  state.eps = 1e-12;
  MatrixXd x(2, 1);
  x << 0.0, 2.0;
  BnCache cache;
  const auto y = bn_forward(x, state, true, &cache);
  CHECK(y(0, 0) == doctest::Approx(-1.0).epsilon(1e-5));
  CHECK(y(1, 0) == doctest::Approx(1.0).epsilon(1e-5));

  BatchNormState fresh = BatchNormState::create(2);
  fresh.eps = 0.0;
  MatrixXd xe(3, 2);
  xe << 1.0, -2.0, 0.5, 4.0, -1.0, 0.25;
  const auto ye = bn_forward(xe, fresh, false, nullptr);
  CHECK((ye - xe).cwiseAbs().maxCoeff() < 1e-12);  // rm 0, rv 1, affine id

  CHECK_THROWS_AS(bn_forward(MatrixXd::Zero(1, 2), fresh, true, nullptr),
                  std::invalid_argument);
}

TEST_CASE("bn running statistics update with momentum") {
  BatchNormState state = BatchNormState::create(1);
  MatrixXd x(2, 1);
  x << 0.0, 2.0;  // batch mean 1, population var 1
  bn_forward(x, state, true, nullptr);
  CHECK(state.running_mean(0) == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(state.running_var(0) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("bn_backward matches finite differences in train and eval mode") {
  Rng rng(61);
  BatchNormState state = BatchNormState::create(4);
  state.gamma = VectorXd::Random(4).array() + 1.5;
  state.beta = VectorXd::Random(4);
  state.running_mean = VectorXd::Random(4);
  state.running_var = VectorXd::Random(4).array().abs() + 0.5;
  const MatrixXd x = random_matrix(rng, 6, 4);
  const MatrixXd c = random_matrix(rng, 6, 4);

  for (bool train : {true, false}) {
    CAPTURE(train);
    BnCache cache;
    BatchNormState work = state;
    bn_forward(x, work, train, &cache, /*update_running=*/false);
    BnParamGrads grads;
    const MatrixXd analytic = bn_backward(c, cache, state, &grads);
    const auto f = [&](const MatrixXd& xx) {
      BatchNormState s = state;
      return bn_forward(xx, s, train, nullptr, false);
    };
    CHECK(max_rel_diff(analytic, fd_grad(f, x, c)) < 1e-4);

    for (int k = 0; k < 4; ++k) {
      BatchNormState sp = state;
      sp.gamma(k) += 1e-5;
      BatchNormState sm = state;
      sm.gamma(k) -= 1e-5;
      const double up = c.cwiseProduct(bn_forward(x, sp, train, nullptr, false)).sum();
      const double dn = c.cwiseProduct(bn_forward(x, sm, train, nullptr, false)).sum();
      CHECK(grads.dgamma(k) == doctest::Approx((up - dn) / 2e-5).epsilon(1e-4));
    }
  }
}

TEST_CASE("wn_reparameterize examples") {
  VectorXd g(1);
  g << 2.0;
  MatrixXd v(1, 2);
  v << 3.0, 4.0;
  const auto w = wn_reparameterize(g, v);
  CHECK(w(0, 0) == doctest::Approx(1.2).epsilon(1e-12));
  CHECK(w(0, 1) == doctest::Approx(1.6).epsilon(1e-12));

  VectorXd gid(1);
  gid << 5.0;  // |v| = 5 -> identity
  CHECK((wn_reparameterize(gid, v) - v).cwiseAbs().maxCoeff() < 1e-12);

  MatrixXd zero_row = MatrixXd::Zero(1, 2);
  CHECK_THROWS_AS(wn_reparameterize(g, zero_row), std::invalid_argument);
}

TEST_CASE("wn_backward matches finite differences") {
  Rng rng(71);
  const MatrixXd v = random_matrix(rng, 3, 4);
  VectorXd g(3);
  g << 1.5, -0.5, 2.0;
  const MatrixXd c = random_matrix(rng, 3, 4);

  VectorXd dg;
  MatrixXd dv;
  wn_backward(c, g, v, &dg, &dv);

  const double h = 1e-6;
  for (int r = 0; r < 3; ++r) {
    VectorXd gp = g, gm = g;
    gp(r) += h;
    gm(r) -= h;
    const double up = c.cwiseProduct(wn_reparameterize(gp, v)).sum();
    const double dn = c.cwiseProduct(wn_reparameterize(gm, v)).sum();
    CHECK(dg(r) == doctest::Approx((up - dn) / (2 * h)).epsilon(1e-4));
    for (int k = 0; k < 4; ++k) {
      MatrixXd vp = v, vm = v;
      vp(r, k) += h;
      vm(r, k) -= h;
      const double u = c.cwiseProduct(wn_reparameterize(g, vp)).sum();
      const double d = c.cwiseProduct(wn_reparameterize(g, vm)).sum();
      const double fd = (u - d) / (2 * h);
      const double denom = std::max({std::abs(fd), std::abs(dv(r, k)), 1e-6});
      CHECK(std::abs(dv(r, k) - fd) / denom < 1e-4);
    }
  }
}

TEST_CASE("ln_rn composition") {
  SUBCASE("warm-up RN equals plain LN output") {
    LayerNormState ln_state = LayerNormState::create(3);
    RegularityNormState rn_state(AxisScheme::Elementwise, 3, 1);
    Rng rng(81);
    const MatrixXd x = random_matrix(rng, 4, 3);
    LnCache cache;
    const auto out = ln_rn_forward(x, ln_state, rn_state, &cache);
    const auto plain = ln_forward(x, ln_state, nullptr);
    CHECK(out.y == plain);
  }

  SUBCASE("constant rows stay zero through the composition") {
    LayerNormState ln_state = LayerNormState::create(3);
    RegularityNormState rn_state(AxisScheme::Elementwise, 3, 1);
    MatrixXd x = MatrixXd::Constant(2, 3, 1.7);
    LnCache cache;
    const auto warm = ln_rn_forward(x, ln_state, rn_state, &cache);
    CHECK(warm.y.cwiseAbs().maxCoeff() < 1e-9);
    const auto scaled = ln_rn_forward(x, ln_state, rn_state, &cache);
    CHECK(scaled.y.cwiseAbs().maxCoeff() < 1e-9);
  }

  SUBCASE("composed gradient matches finite differences with RN frozen") {
    Rng rng(83);
    LayerNormState ln_state = LayerNormState::create(4);
    RegularityNormState rn_state(AxisScheme::Elementwise, 4, 1);
    ln_rn_forward(random_matrix(rng, 8, 4), ln_state, rn_state, nullptr);

    const MatrixXd x = random_matrix(rng, 5, 4);
    const MatrixXd c = random_matrix(rng, 5, 4);
    auto probe = rn_state;
    LnCache cache;
    const auto base = ln_rn_forward(x, ln_state, probe, &cache);
    const MatrixXd l_pinned = base.l_values;

    const MatrixXd analytic =
        ln_rn_backward(c, l_pinned, cache, ln_state, nullptr);
    const auto frozen = [&](const MatrixXd& xx) -> MatrixXd {
      return l_pinned.cwiseProduct(ln_forward(xx, ln_state, nullptr));
    };
    CHECK(max_rel_diff(analytic, fd_grad(frozen, x, c)) < 1e-4);
  }
}

TEST_CASE("elementwise mixture prior path refits and stays usable") {
  RegularityNormState state(AxisScheme::Elementwise, 2, 1);
  MixturePriorConfig cfg;
  cfg.components = 2;
  cfg.refit_interval_batches = 3;
  cfg.history_capacity = 10000;
  cfg.em_iterations = 5;
  state.set_mixture_prior(cfg);

  Rng rng(91);
  for (int b = 0; b < 8; ++b) {
    MatrixXd x(16, 2);
    for (int i = 0; i < 16; ++i) {
      for (int j = 0; j < 2; ++j) {
        x(i, j) = (rng.uniform01() < 0.5 ? -3.0 : 3.0) + 0.3 * rng.normal();
      }
    }
    const auto out = rn_forward(x, state);
    CHECK(out.l_values.allFinite());
  }
  REQUIRE(state.mixture_prior().has_value());
  CHECK(state.mixture_prior()->components().size() == 2);
  double lo = state.mixture_prior()->components()[0].gaussian.mean();
  double hi = state.mixture_prior()->components()[1].gaussian.mean();
  if (lo > hi) std::swap(lo, hi);
  CHECK(lo < -1.0);
  CHECK(hi > 1.0);

  RegularityNormState per_neuron(AxisScheme::PerNeuron, 2, 1);
  CHECK_THROWS_AS(per_neuron.set_mixture_prior(cfg), std::invalid_argument);
}
