#pragma once

#include <span>
#include <string>

#include "cpfn/dataset.hpp"
#include "cpfn/rng.hpp"

namespace cpfn {

// Univariate heteroscedastic benchmark process: a uniform covariate, a cubic
// location that switches branch on a fair coin for x >= 0.5, and noise whose
// scale shrinks linearly in x. Conditionals are Gaussian below 0.5 and an
// equal two-component Gaussian mixture above.
struct UnivariateProcess {
  static double mean_low(double x) { return 10.0 * x * (x - 0.5) * (1.5 - x); }
  static double mean_high(double x) { return 10.0 * x * (x - 0.5) * (0.8 - x); }
  static double noise_scale(double x) { return 0.3 * (1.3 - x); }

  Dataset generate(std::size_t n, Rng& rng) const;
  Matrix sample_conditional(double x, std::size_t m, Rng& rng) const;

  double density(double x, double y) const;
  double cdf(double x, double y) const;
  // Bisection inversion of the conditional CDF to |F(q) - tau| < 1e-10.
  double quantile(double x, double tau) const;
};

// Bivariate ring/blobs process over five standard-normal covariates. A
// logistic weight picks between a noisy ring whose radius and thickness move
// with the covariates and a two-blob Gaussian mixture.
struct RingBlobsProcess {
  // direction driving the ring geometry and the mixture weight
  static constexpr double kBeta[5] = {1.2, -0.8, 0.6, -0.4, 0.9};
  // direction driving the ring thickness and the blob layout
  static constexpr double kGamma[5] = {-0.5, 1.1, -0.3, 0.7, 0.4};
  static constexpr double kRadiusBase = 2.0;
  static constexpr double kRadiusSwing = 1.5;
  static constexpr double kSigmaBase = 0.18;
  static constexpr double kSigmaSwing = 0.15;

  double ring_weight(std::span<const double> x) const;
  double ring_radius(std::span<const double> x) const;
  double ring_sigma(std::span<const double> x) const;
  void blob_means(std::span<const double> x, std::span<double> m1, std::span<double> m2) const;
  double blob_sigma(std::span<const double> x) const;

  Dataset generate(std::size_t n, Rng& rng) const;
  Matrix sample_conditional(std::span<const double> x, std::size_t m, Rng& rng) const;

  // Throws SingularOrigin at y = 0 where the ring term is undefined.
  double density(std::span<const double> x, std::span<const double> y) const;
};

enum class SimProcess { Univariate, Multivariate };

SimProcess sim_process_from_string(const std::string& name);
std::string to_string(SimProcess p);

Dataset generate_process(SimProcess p, std::size_t n, Rng& rng);
Matrix sample_true_conditional(SimProcess p, std::span<const double> x, std::size_t m, Rng& rng);

}  // namespace cpfn
