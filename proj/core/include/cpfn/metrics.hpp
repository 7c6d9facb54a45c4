#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "cpfn/dataset.hpp"
#include "cpfn/rng.hpp"

namespace cpfn {

// ---------------------------------------------------------------------------
// 1-Wasserstein machinery
// ---------------------------------------------------------------------------

// (1/m) sum_i |a_(i) - b_(i)| over sorted order statistics.
double w1_sorted_1d(std::span<const double> a, std::span<const double> b);

struct TransportPlan {
  std::vector<int> assignment;  // row i of a matched to assignment[i] of b
  double cost = 0.0;            // (1/m) sum_i |a_i - b_{pi(i)}|
};

// Exact minimum-cost assignment between equal-size point clouds under the
// Euclidean ground cost, via shortest augmenting paths with potentials
// (O(m^3)).
TransportPlan w1_assignment(const Matrix& a, const Matrix& b, std::size_t budget = 512);

// ---------------------------------------------------------------------------
// Average Wasserstein distance / average quantile error
// ---------------------------------------------------------------------------

// Batch conditional quantile evaluator: returns q(tau | x) for each tau.
using QuantileFn = std::function<std::vector<double>(double x, std::span<const double> taus)>;

struct UnivariateAwdResult {
  double awd = 0.0;
  std::vector<double> aqe_taus;
  std::vector<double> aqe;       // aligned with aqe_taus
  std::vector<double> x_grid;    // Simpson nodes in x
  std::vector<double> tau_grid;  // Simpson nodes in tau (endpoints clipped)
  Matrix true_quantiles;         // (x nodes) x (tau nodes)
  Matrix est_quantiles;
};

// Composite Simpson in both x (uniform grid on [0,1], valid for a uniform
// covariate) and tau, with the tau endpoints clipped to [1/R_tau, 1-1/R_tau].
// aqe_taus must be grid points of the tau grid.
UnivariateAwdResult awd_aqe_univariate(const QuantileFn& true_q, const QuantileFn& est_q, int r_x,
                                       int r_tau, std::span<const double> aqe_taus,
                                       int threads = 1);

// Quantile-integral form of the average Wasserstein distance.
double awd_univariate(const QuantileFn& true_q, const QuantileFn& est_q, int r_x, int r_tau,
                      int threads = 1);

// Average absolute conditional-quantile gap at level tau over the x grid.
double aqe(const QuantileFn& true_q, const QuantileFn& est_q, double tau, int r_x,
           int threads = 1);

// Conditional samplers for the cloud-based estimator.
using ConditionalSampler =
    std::function<Matrix(std::span<const double> x, std::size_t m, Rng& rng)>;
using CovariateSampler = std::function<std::vector<double>(Rng& rng)>;

struct MultivariateAwdResult {
  double awd = 0.0;
  std::vector<double> per_x;  // W1 per sampled covariate
};

// Draws r_x covariates, r_y conditional samples from each model per
// covariate, and averages the exact assignment costs.
MultivariateAwdResult awd_multivariate(const CovariateSampler& draw_x,
                                       const ConditionalSampler& true_sampler,
                                       const ConditionalSampler& est_sampler, int r_x, int r_y,
                                       Rng& rng, std::size_t budget = 512, int threads = 1);

// ---------------------------------------------------------------------------
// Negative log-likelihood
// ---------------------------------------------------------------------------

using DensityFn = std::function<double(std::span<const double> x, std::span<const double> y)>;

// -(1/N) sum log(1e-300 + f(y_i | x_i)) over raw-scale test pairs.
double nll(const DensityFn& density, const Matrix& X, const Matrix& Y, int threads = 1);

// ---------------------------------------------------------------------------
// Evaluation report
// ---------------------------------------------------------------------------

struct EvalReport {
  std::string name;
  std::string config_hash;
  std::uint64_t seed = 0;
  int r_x = 0;
  int r_tau = 0;
  int r_y = 0;
  std::map<std::string, double> metrics;
  std::vector<double> per_x_w1;
};

}  // namespace cpfn
