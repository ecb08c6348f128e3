#pragma once

#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <vector>

namespace uam::nml {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

/// Default lower clamp on standard deviations. A constant activation
/// history (e.g. all-zero ReLU pre-activations) would otherwise produce an
/// infinite log-density.
inline constexpr double kDefaultSigmaFloor = 1e-3;

/// log(exp(a) + exp(b)) computed without overflow or underflow.
/// -inf acts as the additive identity; NaN propagates.
double log_sum_exp(double a, double b);

/// Log density of N(mean, sigma^2) at x. Requires sigma > 0.
double gaussian_log_pdf(double x, double mean, double sigma);

/// Online mean/variance over a scalar stream (Welford update), modelling
/// the Gaussian fit to the full activation history with O(1) memory.
/// Variance is the population variance m2/count.
class RunningGaussian {
 public:
  RunningGaussian() = default;
  explicit RunningGaussian(double sigma_floor);

  /// State equivalent to `count` absorbed samples with the given moments.
  static RunningGaussian from_moments(std::uint64_t count, double mean,
                                      double sigma,
                                      double sigma_floor = kDefaultSigmaFloor);

  /// Absorbs one sample. Rejects non-finite input.
  void add(double x);

  std::uint64_t count() const { return count_; }
  double mean() const { return mean_; }
  double m2() const { return m2_; }
  double sigma_floor() const { return sigma_floor_; }

  /// Population variance. Requires count >= 1.
  double variance() const;

  /// max(sqrt(variance), sigma_floor). Requires count >= 1.
  double sigma() const;

  double log_pdf(double x) const { return gaussian_log_pdf(x, mean_, sigma()); }

 private:
  std::uint64_t count_ = 0;
  double mean_ = 0.0;
  double m2_ = 0.0;
  double sigma_floor_ = kDefaultSigmaFloor;
};

/// Log-domain accumulator of sum_j P(x_j | theta_j(x_j)); its value is the
/// model class complexity COMP. Empty state: log_sum == -inf, count == 0.
/// log_sum is nondecreasing under every increment.
class CompAccumulator {
 public:
  void add_term(double log_likelihood);

  /// Folds a whole batch of log-likelihood terms into the sum in one
  /// shift-by-max pass over {log_sum} U terms. Rejects non-finite terms.
  void add_terms(std::span<const double> log_likelihoods);

  bool empty() const { return count_ == 0; }
  double log_sum() const { return log_sum_; }
  std::uint64_t count() const { return count_; }

 private:
  double log_sum_ = kNegInf;
  std::uint64_t count_ = 0;
};

/// Per-sample universal code length L = COMP - log P(x | theta(x)).
/// Nonnegative whenever the queried term was absorbed into `acc_after`.
/// Rejects an empty accumulator.
double code_length(const CompAccumulator& acc_after, double log_likelihood);

struct PriorComponent {
  double weight = 1.0;
  RunningGaussian gaussian;
};

/// Density model for the activation history: a single Gaussian or a
/// Gaussian mixture. Weights must be strictly positive and sum to 1.
class PriorModel {
 public:
  static PriorModel gaussian(RunningGaussian g);
  static PriorModel mixture(std::vector<PriorComponent> components);

  bool is_mixture() const { return components_.size() > 1; }
  const std::vector<PriorComponent>& components() const { return components_; }

  /// log sum_k w_k N(x; mu_k, sigma_k), folded with log-sum-exp.
  /// Every component must be queryable (count >= 1).
  double log_pdf(double x) const;

 private:
  std::vector<PriorComponent> components_;
};

/// Pre-specified data prior s(x) keyed by a discrete attribute (e.g. a
/// class label). Consumers add log_weight to a sample's log-likelihood in
/// both the numerator and the denominator of the NML ratio, so a constant
/// table cancels exactly.
class SaliencyTable {
 public:
  SaliencyTable() = default;
  explicit SaliencyTable(double default_weight);

  void set(int key, double weight);
  double weight(int key) const;
  double log_weight(int key) const;
  double default_weight() const { return default_weight_; }
  const std::map<int, double>& entries() const { return entries_; }

 private:
  std::map<int, double> entries_;
  double default_weight_ = 1.0;
};

/// Refits a k-component mixture to a history buffer with EM
/// (responsibility E-step, weighted-moment M-step), means initialized at k
/// quantile-spaced positions. Degenerate components are clamped to the
/// sigma floor of `prior`, not treated as errors. Requires
/// |history_buffer| >= k >= 1 and iterations >= 1.
PriorModel mixture_em_refit(const PriorModel& prior,
                            std::span<const double> history_buffer, int k,
                            int iterations);

/// Total log-likelihood of a buffer under a prior (EM's monotone
/// objective; exposed for tests and diagnostics).
double buffer_log_likelihood(const PriorModel& prior,
                             std::span<const double> buffer);

}  // namespace uam::nml
