#include "uam/nml.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace uam::nml {

namespace {
constexpr double kHalfLog2Pi = 0.91893853320467274178;  // 0.5 * log(2*pi)
}

double log_sum_exp(double a, double b) {
  if (std::isnan(a) || std::isnan(b)) return a + b;
  const double m = std::max(a, b);
  if (m == kNegInf) return kNegInf;
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

double gaussian_log_pdf(double x, double mean, double sigma) {
  if (!(sigma > 0.0)) {
    throw std::invalid_argument("gaussian_log_pdf: sigma must be positive");
  }
  const double z = (x - mean) / sigma;
  return -kHalfLog2Pi - std::log(sigma) - 0.5 * z * z;
}

RunningGaussian::RunningGaussian(double sigma_floor)
    : sigma_floor_(sigma_floor) {
  if (!(sigma_floor > 0.0)) {
    throw std::invalid_argument("RunningGaussian: sigma_floor must be positive");
  }
}

RunningGaussian RunningGaussian::from_moments(std::uint64_t count, double mean,
                                              double sigma,
                                              double sigma_floor) {
  if (count == 0) {
    throw std::invalid_argument("from_moments: count must be >= 1");
  }
  if (!std::isfinite(mean) || !std::isfinite(sigma) || sigma < 0.0) {
    throw std::invalid_argument("from_moments: invalid moments");
  }
  RunningGaussian g(sigma_floor);
  g.count_ = count;
  g.mean_ = mean;
  g.m2_ = sigma * sigma * static_cast<double>(count);
  return g;
}

void RunningGaussian::add(double x) {
  if (!std::isfinite(x)) {
    throw std::invalid_argument("RunningGaussian::add: non-finite sample");
  }
  ++count_;
  const double delta = x - mean_;
  mean_ += delta / static_cast<double>(count_);
  m2_ += delta * (x - mean_);
  if (m2_ < 0.0) m2_ = 0.0;  // guard against rounding at tiny variances
}

double RunningGaussian::variance() const {
  if (count_ == 0) {
    throw std::logic_error("RunningGaussian: variance of empty state");
  }
  return m2_ / static_cast<double>(count_);
}

double RunningGaussian::sigma() const {
  return std::max(std::sqrt(variance()), sigma_floor_);
}

void CompAccumulator::add_term(double log_likelihood) {
  add_terms(std::span<const double>(&log_likelihood, 1));
}

void CompAccumulator::add_terms(std::span<const double> log_likelihoods) {
  if (log_likelihoods.empty()) return;
  double m = log_sum_;
  for (double v : log_likelihoods) {
    if (!std::isfinite(v)) {
      throw std::invalid_argument("CompAccumulator: non-finite term");
    }
    m = std::max(m, v);
  }
  // m is finite here: the batch is nonempty and all terms are finite.
  double sum = log_sum_ == kNegInf ? 0.0 : std::exp(log_sum_ - m);
  for (double v : log_likelihoods) sum += std::exp(v - m);
  log_sum_ = m + std::log(sum);
  count_ += log_likelihoods.size();
}

double code_length(const CompAccumulator& acc_after, double log_likelihood) {
  if (acc_after.empty()) {
    throw std::invalid_argument("code_length: empty accumulator");
  }
  return acc_after.log_sum() - log_likelihood;
}

PriorModel PriorModel::gaussian(RunningGaussian g) {
  PriorModel p;
  p.components_.push_back(PriorComponent{1.0, g});
  return p;
}

PriorModel PriorModel::mixture(std::vector<PriorComponent> components) {
  if (components.empty()) {
    throw std::invalid_argument("PriorModel: empty component list");
  }
  double total = 0.0;
  for (const auto& c : components) {
    if (!(c.weight > 0.0)) {
      throw std::invalid_argument("PriorModel: weights must be positive");
    }
    total += c.weight;
  }
  if (std::abs(total - 1.0) > 1e-9) {
    throw std::invalid_argument("PriorModel: weights must sum to 1");
  }
  PriorModel p;
  p.components_ = std::move(components);
  return p;
}

double PriorModel::log_pdf(double x) const {
  double acc = kNegInf;
  for (const auto& c : components_) {
    acc = log_sum_exp(acc, std::log(c.weight) + c.gaussian.log_pdf(x));
  }
  return acc;
}

SaliencyTable::SaliencyTable(double default_weight)
    : default_weight_(default_weight) {
  if (!(default_weight > 0.0)) {
    throw std::invalid_argument("SaliencyTable: default weight must be positive");
  }
}

void SaliencyTable::set(int key, double weight) {
  if (!(weight > 0.0)) {
    throw std::invalid_argument("SaliencyTable: weights must be positive");
  }
  entries_[key] = weight;
}

double SaliencyTable::weight(int key) const {
  const auto it = entries_.find(key);
  return it == entries_.end() ? default_weight_ : it->second;
}

double SaliencyTable::log_weight(int key) const { return std::log(weight(key)); }

double buffer_log_likelihood(const PriorModel& prior,
                             std::span<const double> buffer) {
  double total = 0.0;
  for (double x : buffer) total += prior.log_pdf(x);
  return total;
}

PriorModel mixture_em_refit(const PriorModel& prior,
                            std::span<const double> history_buffer, int k,
                            int iterations) {
  if (k < 1) throw std::invalid_argument("mixture_em_refit: k must be >= 1");
  if (iterations < 1) {
    throw std::invalid_argument("mixture_em_refit: iterations must be >= 1");
  }
  const std::size_t n = history_buffer.size();
  if (n < static_cast<std::size_t>(k)) {
    throw std::invalid_argument("mixture_em_refit: buffer smaller than k");
  }
  const double sigma_floor = prior.components().front().gaussian.sigma_floor();

  // Quantile-spaced means over the sorted buffer; shared initial sigma.
  std::vector<double> sorted(history_buffer.begin(), history_buffer.end());
  std::sort(sorted.begin(), sorted.end());
  const double total = std::accumulate(sorted.begin(), sorted.end(), 0.0);
  const double overall_mean = total / static_cast<double>(n);
  double sq = 0.0;
  for (double x : sorted) sq += (x - overall_mean) * (x - overall_mean);
  const double init_sigma =
      std::max(std::sqrt(sq / static_cast<double>(n)), sigma_floor);

  std::vector<double> weights(k, 1.0 / k);
  std::vector<double> means(k);
  std::vector<double> sigmas(k, init_sigma);
  for (int j = 0; j < k; ++j) {
    const auto idx = static_cast<std::size_t>(
        (static_cast<double>(j) + 0.5) / k * static_cast<double>(n));
    means[j] = sorted[std::min(idx, n - 1)];
  }

  std::vector<double> resp(static_cast<std::size_t>(k));
  std::vector<double> nk(static_cast<std::size_t>(k));
  std::vector<double> mu(static_cast<std::size_t>(k));
  std::vector<double> var(static_cast<std::size_t>(k));
  for (int it = 0; it < iterations; ++it) {
    std::fill(nk.begin(), nk.end(), 0.0);
    std::fill(mu.begin(), mu.end(), 0.0);
    std::fill(var.begin(), var.end(), 0.0);
    for (double x : history_buffer) {
      double norm = kNegInf;
      for (int j = 0; j < k; ++j) {
        resp[j] = std::log(weights[j]) + gaussian_log_pdf(x, means[j], sigmas[j]);
        norm = log_sum_exp(norm, resp[j]);
      }
      for (int j = 0; j < k; ++j) {
        const double r = std::exp(resp[j] - norm);
        nk[j] += r;
        mu[j] += r * x;
      }
    }
    for (int j = 0; j < k; ++j) {
      if (nk[j] > 0.0) mu[j] /= nk[j];
    }
    for (double x : history_buffer) {
      double norm = kNegInf;
      for (int j = 0; j < k; ++j) {
        resp[j] = std::log(weights[j]) + gaussian_log_pdf(x, means[j], sigmas[j]);
        norm = log_sum_exp(norm, resp[j]);
      }
      for (int j = 0; j < k; ++j) {
        const double d = x - mu[j];
        var[j] += std::exp(resp[j] - norm) * d * d;
      }
    }
    for (int j = 0; j < k; ++j) {
      if (nk[j] > 0.0) {
        means[j] = mu[j];
        sigmas[j] = std::max(std::sqrt(var[j] / nk[j]), sigma_floor);
        weights[j] = nk[j] / static_cast<double>(n);
      }
      weights[j] = std::max(weights[j], 1e-12);
    }
    const double wsum = std::accumulate(weights.begin(), weights.end(), 0.0);
    for (double& w : weights) w /= wsum;
  }

  std::vector<PriorComponent> components;
  components.reserve(static_cast<std::size_t>(k));
  for (int j = 0; j < k; ++j) {
    const auto count = std::max<std::uint64_t>(
        1, static_cast<std::uint64_t>(nk[j] > 0.0 ? nk[j] : 1.0));
    components.push_back(PriorComponent{
        weights[j],
        RunningGaussian::from_moments(count, means[j], sigmas[j], sigma_floor)});
  }
  // Renormalize exactly so PriorModel's sum-to-1 validation holds.
  double wsum = 0.0;
  for (const auto& c : components) wsum += c.weight;
  for (auto& c : components) c.weight /= wsum;
  return PriorModel::mixture(std::move(components));
}

}  // namespace uam::nml
