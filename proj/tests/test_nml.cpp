#include "uam/nml.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "doctest.h"
#include "uam/rng.hpp"

using namespace uam;
using namespace uam::nml;

namespace {

// Two-pass batch moments; the independent oracle for the Welford state.
struct BatchMoments {
  double mean = 0.0;
  double m2 = 0.0;
};

BatchMoments two_pass_moments(const std::vector<double>& xs) {
  BatchMoments r;
  for (double x : xs) r.mean += x;
  r.mean /= static_cast<double>(xs.size());
  for (double x : xs) r.m2 += (x - r.mean) * (x - r.mean);
  return r;
}

// Recomputes log sum exp from the full stored term list (shift-by-max).
double lse_oracle(const std::vector<double>& terms) {
  const double m = *std::max_element(terms.begin(), terms.end());
  double s = 0.0;
  for (double t : terms) s += std::exp(t - m);
  return m + std::log(s);
}

double rel_err(double a, double b) {
  return std::abs(a - b) / std::max(1.0, std::max(std::abs(a), std::abs(b)));
}

}  // namespace

TEST_CASE("log_sum_exp basics") {
  CHECK(log_sum_exp(0.0, 0.0) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(log_sum_exp(kNegInf, -3.5) == -3.5);
  CHECK(log_sum_exp(-3.5, kNegInf) == -3.5);
  CHECK(log_sum_exp(kNegInf, kNegInf) == kNegInf);
  // shift-by-max hand computation: -1000 + log(1 + e^-0.5)
  const double expected = -1000.0 + std::log1p(std::exp(-0.5));
  CHECK(log_sum_exp(-1000.0, -1000.5) == doctest::Approx(expected).epsilon(1e-13));
}

TEST_CASE("log_sum_exp extreme magnitudes stay finite") {
  CHECK(std::isfinite(log_sum_exp(700.0, 700.0)));
  CHECK(log_sum_exp(700.0, 700.0) == doctest::Approx(700.0 + std::log(2.0)));
  CHECK(log_sum_exp(-700.0, -700.0) ==
        doctest::Approx(-700.0 + std::log(2.0)));
  CHECK(log_sum_exp(700.0, -700.0) == doctest::Approx(700.0));
  CHECK(std::isnan(log_sum_exp(std::nan(""), 1.0)));
}

TEST_CASE("welford hand examples") {
  RunningGaussian g;
  g.add(1.0);
  g.add(2.0);
  g.add(3.0);
  CHECK(g.count() == 3);
  CHECK(g.mean() == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(g.m2() == doctest::Approx(2.0).epsilon(1e-15));

  RunningGaussian single;
  single.add(5.0);
  CHECK(single.count() == 1);
  CHECK(single.mean() == 5.0);
  CHECK(single.m2() == 0.0);

  CHECK_THROWS_AS(g.add(std::nan("")), std::invalid_argument);
  CHECK_THROWS_AS(g.add(std::numeric_limits<double>::infinity()),
                  std::invalid_argument);
  CHECK_THROWS_AS(RunningGaussian{}.sigma(), std::logic_error);
}

TEST_CASE("welford matches two-pass oracle on random streams") {
  Rng rng(20240811);
  for (int stream = 0; stream < 100; ++stream) {
    const int n = 10 + static_cast<int>(rng.below(3000));
    const double shift = (rng.uniform01() - 0.5) * 20.0;
    const double scale = 0.1 + rng.uniform01() * 10.0;
    std::vector<double> xs(n);
    RunningGaussian g;
    for (double& x : xs) {
      x = shift + scale * rng.normal();
      g.add(x);
    }
    const auto oracle = two_pass_moments(xs);
    CHECK(rel_err(g.mean(), oracle.mean) < 1e-9);
    CHECK(rel_err(g.m2(), oracle.m2) < 1e-9);
  }
}

TEST_CASE("welford 10k standard normal draws") {
  Rng rng(7);
  RunningGaussian g;
  std::vector<double> xs;
  for (int i = 0; i < 10000; ++i) {
    const double x = rng.normal();
    xs.push_back(x);
    g.add(x);
  }
  CHECK(std::abs(g.mean()) < 0.05);
  CHECK(std::abs(std::sqrt(g.m2() / 10000.0) - 1.0) < 0.05);
  const auto oracle = two_pass_moments(xs);
  CHECK(rel_err(g.mean(), oracle.mean) < 1e-9);
  CHECK(rel_err(g.m2(), oracle.m2) < 1e-9);
}

TEST_CASE("gaussian_log_pdf closed form") {
  const double half_log_2pi = 0.5 * std::log(2.0 * 3.14159265358979323846);
  CHECK(gaussian_log_pdf(0.0, 0.0, 1.0) ==
        doctest::Approx(-half_log_2pi).epsilon(1e-14));
  CHECK(gaussian_log_pdf(1.0, 0.0, 1.0) ==
        doctest::Approx(-half_log_2pi - 0.5).epsilon(1e-14));
  CHECK(gaussian_log_pdf(2.0, 1.0, 0.5) ==
        doctest::Approx(-half_log_2pi - std::log(0.5) - 2.0).epsilon(1e-14));
  CHECK_THROWS_AS(gaussian_log_pdf(0.0, 0.0, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(gaussian_log_pdf(0.0, 0.0, -1.0), std::invalid_argument);
}

TEST_CASE("comp accumulator hand examples") {
  CompAccumulator acc;
  CHECK(acc.empty());
  CHECK(acc.log_sum() == kNegInf);

  acc.add_term(-1.0);
  CHECK(acc.log_sum() == doctest::Approx(-1.0).epsilon(1e-15));
  CHECK(acc.count() == 1);

  acc.add_term(-1.0);  // equal-mass doubling
  CHECK(acc.log_sum() == doctest::Approx(-1.0 + std::log(2.0)).epsilon(1e-13));
  CHECK(acc.count() == 2);

  CompAccumulator quad;
  const std::vector<double> four(4, -2.0);
  quad.add_terms(four);
  CHECK(quad.log_sum() == doctest::Approx(-2.0 + std::log(4.0)).epsilon(1e-13));
  CHECK(quad.count() == 4);

  CHECK_THROWS_AS(acc.add_term(std::nan("")), std::invalid_argument);
  const std::vector<double> bad = {0.0, std::numeric_limits<double>::infinity()};
  CHECK_THROWS_AS(acc.add_terms(bad), std::invalid_argument);
}

TEST_CASE("comp accumulator matches stored-list oracle and is monotone") {
  Rng rng(99);
  CompAccumulator acc;
  std::vector<double> stored;
  double prev = kNegInf;
  for (int batch = 0; batch < 200; ++batch) {
    const int n = 1 + static_cast<int>(rng.below(64));
    std::vector<double> terms(n);
    for (double& t : terms) t = -50.0 + 100.0 * rng.uniform01();
    acc.add_terms(terms);
    stored.insert(stored.end(), terms.begin(), terms.end());
    CHECK(acc.log_sum() >= prev);
    prev = acc.log_sum();
  }
  CHECK(std::abs(acc.log_sum() - lse_oracle(stored)) < 1e-9);
  CHECK(acc.count() == stored.size());
}

TEST_CASE("comp accumulator permutation invariance") {
  Rng rng(123);
  std::vector<double> terms(257);
  for (double& t : terms) t = -30.0 + 60.0 * rng.uniform01();

  CompAccumulator a;
  a.add_terms(terms);

  std::vector<double> shuffled = terms;
  for (std::size_t i = shuffled.size(); i > 1; --i) {
    std::swap(shuffled[i - 1], shuffled[rng.below(i)]);
  }
  CompAccumulator b;
  b.add_terms(shuffled);
  CHECK(std::abs(a.log_sum() - b.log_sum()) <= 1e-12);

  // Batch split points do not change the sum either.
  CompAccumulator c;
  c.add_terms(std::span<const double>(terms).subspan(0, 100));
  c.add_terms(std::span<const double>(terms).subspan(100));
  CHECK(std::abs(a.log_sum() - c.log_sum()) <= 1e-12);
}

TEST_CASE("code_length examples and nonnegativity") {
  CompAccumulator acc;
  acc.add_term(-1.0);
  acc.add_term(-1.0);
  CHECK(code_length(acc, -1.0) ==
        doctest::Approx(std::log(2.0)).epsilon(1e-13));

  CompAccumulator self;
  self.add_term(-2.0);
  CHECK(code_length(self, -2.0) == doctest::Approx(0.0));

  CompAccumulator quad;
  quad.add_terms(std::vector<double>(4, -2.0));
  CHECK(code_length(quad, -2.0) ==
        doctest::Approx(std::log(4.0)).epsilon(1e-13));

  CHECK_THROWS_AS(code_length(CompAccumulator{}, -1.0), std::invalid_argument);

  // Property: L >= 0 for every absorbed term.
  Rng rng(5);
  CompAccumulator racc;
  std::vector<double> terms(4096);
  for (double& t : terms) t = -200.0 + 400.0 * rng.uniform01();
  racc.add_terms(terms);
  for (double t : terms) CHECK(code_length(racc, t) >= 0.0);
}

TEST_CASE("comp monotonicity over 10k random increments") {
  Rng rng(314);
  CompAccumulator acc;
  double prev = kNegInf;
  for (int i = 0; i < 10000; ++i) {
    acc.add_term(-300.0 + 600.0 * rng.uniform01());
    CHECK(acc.log_sum() >= prev);
    prev = acc.log_sum();
  }
}

TEST_CASE("prior model gaussian and mixture") {
  const double n01_at_0 = gaussian_log_pdf(0.0, 0.0, 1.0);

  auto single = PriorModel::gaussian(RunningGaussian::from_moments(1, 0.0, 1.0));
  CHECK_FALSE(single.is_mixture());
  CHECK(single.log_pdf(0.0) == doctest::Approx(n01_at_0).epsilon(1e-13));

  auto twin = PriorModel::mixture(
      {{0.5, RunningGaussian::from_moments(1, 0.0, 1.0)},
       {0.5, RunningGaussian::from_moments(1, 0.0, 1.0)}});
  CHECK(twin.log_pdf(0.0) == doctest::Approx(n01_at_0).epsilon(1e-12));

  auto sym = PriorModel::mixture(
      {{0.5, RunningGaussian::from_moments(1, -1.0, 1.0)},
       {0.5, RunningGaussian::from_moments(1, 1.0, 1.0)}});
  CHECK(sym.log_pdf(0.0) ==
        doctest::Approx(gaussian_log_pdf(1.0, 0.0, 1.0)).epsilon(1e-12));

  CHECK_THROWS_AS(PriorModel::mixture({}), std::invalid_argument);
  CHECK_THROWS_AS(
      PriorModel::mixture({{0.7, RunningGaussian::from_moments(1, 0, 1)},
                           {0.2, RunningGaussian::from_moments(1, 0, 1)}}),
      std::invalid_argument);
  CHECK_THROWS_AS(
      PriorModel::mixture({{1.5, RunningGaussian::from_moments(1, 0, 1)},
                           {-0.5, RunningGaussian::from_moments(1, 0, 1)}}),
      std::invalid_argument);
}

TEST_CASE("saliency table lookups") {
  SaliencyTable table;
  table.set(3, 2.0);
  CHECK(table.log_weight(3) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(table.log_weight(7) == 0.0);  // default weight 1
  CHECK_THROWS_AS(table.set(1, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(table.set(1, -2.0), std::invalid_argument);
  CHECK_THROWS_AS(SaliencyTable(0.0), std::invalid_argument);
}

TEST_CASE("mixture EM refit: K=1 matches sample moments exactly") {
  Rng rng(42);
  std::vector<double> buffer(200);
  for (double& x : buffer) x = rng.normal();
  const auto prior = PriorModel::gaussian(RunningGaussian::from_moments(1, 0, 1));
  const auto fit = mixture_em_refit(prior, buffer, 1, 5);
  REQUIRE(fit.components().size() == 1);
  const auto oracle = two_pass_moments(buffer);
  const double oracle_sigma = std::sqrt(oracle.m2 / buffer.size());
  CHECK(fit.components()[0].gaussian.mean() ==
        doctest::Approx(oracle.mean).epsilon(1e-9));
  CHECK(fit.components()[0].gaussian.sigma() ==
        doctest::Approx(oracle_sigma).epsilon(1e-9));
  CHECK(std::abs(oracle.mean) < 0.2);
  CHECK(std::abs(oracle_sigma - 1.0) < 0.2);
}

TEST_CASE("mixture EM refit: zero-variance buffer clamps sigma") {
  const std::vector<double> buffer = {0.0, 0.0, 0.0, 0.0};
  const auto prior = PriorModel::gaussian(RunningGaussian::from_moments(1, 0, 1));
  const auto fit = mixture_em_refit(prior, buffer, 1, 3);
  CHECK(fit.components()[0].gaussian.mean() == doctest::Approx(0.0));
  CHECK(fit.components()[0].gaussian.sigma() ==
        doctest::Approx(kDefaultSigmaFloor));
}

TEST_CASE("mixture EM refit: separates a bimodal buffer") {
  Rng rng(1234);
  std::vector<double> buffer(500);
  for (double& x : buffer) {
    x = (rng.uniform01() < 0.5 ? -5.0 : 5.0) + rng.normal();
  }
  const auto prior = PriorModel::gaussian(RunningGaussian::from_moments(1, 0, 1));
  const auto fit2 = mixture_em_refit(prior, buffer, 2, 30);
  REQUIRE(fit2.components().size() == 2);
  double lo = fit2.components()[0].gaussian.mean();
  double hi = fit2.components()[1].gaussian.mean();
  if (lo > hi) std::swap(lo, hi);
  CHECK(std::abs(lo - (-5.0)) < 0.5);
  CHECK(std::abs(hi - 5.0) < 0.5);

  const auto fit1 = mixture_em_refit(prior, buffer, 1, 30);
  CHECK(buffer_log_likelihood(fit2, buffer) >=
        buffer_log_likelihood(fit1, buffer));

  CHECK_THROWS_AS(mixture_em_refit(prior, std::vector<double>{1.0}, 2, 5),
                  std::invalid_argument);
}

TEST_CASE("mixture EM refit: objective nondecreasing across iterations") {
  Rng rng(777);
  std::vector<double> buffer(300);
  for (double& x : buffer) {
    x = (rng.uniform01() < 0.3 ? -2.0 : 1.5) + 0.7 * rng.normal();
  }
  const auto prior = PriorModel::gaussian(RunningGaussian::from_moments(1, 0, 1));
  double prev = -std::numeric_limits<double>::infinity();
  for (int iters = 1; iters <= 12; ++iters) {
    const auto fit = mixture_em_refit(prior, buffer, 2, iters);
    const double ll = buffer_log_likelihood(fit, buffer);
    CHECK(ll >= prev - 1e-9);
    prev = ll;
  }
}
