#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "cpfn/dataset.hpp"
#include "cpfn/model.hpp"
#include "cpfn/rng.hpp"

namespace cpfn {

// Draws m conditional samples at the raw-scale covariate x: standardize x,
// push latent draws through the model, de-standardize, invert the response
// transform. Deterministic under the rng seed.
Matrix sample_conditional(const CpfnModel& model, std::span<const double> x, std::size_t m,
                          Rng& rng);

// Caches the pushforward outputs for one covariate so densities at many y
// share the R_density latent draws. Fixed-seed draws keep reported numbers
// reproducible; fresh-rng evaluation is available through the constructor
// taking an Rng.
class ConditionalDensityEvaluator {
 public:
  ConditionalDensityEvaluator(const CpfnModel& model, int r_density, std::uint64_t seed);
  ConditionalDensityEvaluator(const CpfnModel& model, int r_density, Rng& rng);

  // Monte Carlo estimate of the conditional density at raw-scale (x, y),
  // including the standardization Jacobian and, for log1p models, the
  // response-transform change of variables.
  double density(std::span<const double> x, std::span<const double> y);

  int r_density() const { return r_density_; }

 private:
  void prepare(std::span<const double> x);

  const CpfnModel& model_;
  int r_density_;
  std::vector<double> draws_;       // q x R latent draws (row-major)
  std::vector<double> x_cache_;     // covariate the outputs were computed for
  std::vector<double> outputs_;     // q x R pushforward outputs
  bool has_cache_ = false;
};

// One-shot density evaluation with draws from rng.
double conditional_density(const CpfnModel& model, std::span<const double> x,
                           std::span<const double> y, int r_density, Rng& rng);
// One-shot density evaluation with fixed-seed draws (the default reporting
// path).
double conditional_density(const CpfnModel& model, std::span<const double> x,
                           std::span<const double> y, int r_density, std::uint64_t seed = 0);

// Order-statistic quantile with linear interpolation between closest ranks
// (type-7 convention). samples need not be sorted.
double conditional_quantile(std::vector<double> samples, double tau);

// Quantiles at several levels from one sorted copy.
std::vector<double> conditional_quantiles(std::vector<double> samples,
                                          std::span<const double> taus);

struct ConditionalStatistics {
  std::vector<double> mean;                       // q
  Matrix covariance;                              // q x q
  std::vector<double> quantile_taus;              // the probed levels
  Matrix quantiles;                               // q x |taus|, per coordinate
};

// Monte Carlo conditional summaries from m samples at covariate x.
ConditionalStatistics conditional_statistics(const CpfnModel& model, std::span<const double> x,
                                             std::size_t m, Rng& rng);

}  // namespace cpfn
