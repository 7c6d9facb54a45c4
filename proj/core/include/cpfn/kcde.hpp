#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "cpfn/dataset.hpp"
#include "cpfn/kernels.hpp"
#include "cpfn/rng.hpp"

namespace cpfn {

enum class BandwidthRule { Silverman, CV };

// Kernel conditional density estimator: product kernels over each covariate
// and response coordinate, conditional density as the joint/marginal ratio.
struct KcdeModel {
  Matrix X;  // n x d training covariates
  Matrix Y;  // n x q training responses
  std::vector<double> x_bandwidths;
  std::vector<double> y_bandwidths;
  KernelFamily kernel = KernelFamily::Gaussian;

  std::size_t n() const { return X.rows; }
  int d() const { return static_cast<int>(X.cols); }
  int q() const { return static_cast<int>(Y.cols); }
};

// Plug-in bandwidths h_j = sigma_j * (4 / ((dim+2) n))^(1/(dim+4)) with
// dim = d + q; the CV rule searches a multiplier grid (containing 1) on the
// plug-in values by leave-one-out conditional log-likelihood.
KcdeModel kcde_fit(const Dataset& data, BandwidthRule rule = BandwidthRule::Silverman,
                   KernelFamily kernel = KernelFamily::Gaussian, int threads = 1);

// f(y | x) = sum_i K_h(x - x_i) K_b(y - y_i) / sum_i K_h(x - x_i).
// Throws EmptyNeighborhood when the denominator underflows to zero.
double kcde_density(const KcdeModel& model, std::span<const double> x, std::span<const double> y);

// The normalized covariate weights for a fixed x; lets many y queries share
// the x-kernel pass.
class KcdeSlice {
 public:
  KcdeSlice(const KcdeModel& model, std::span<const double> x);
  double density(std::span<const double> y) const;

 private:
  const KcdeModel& model_;
  std::vector<double> weights_;  // normalized to sum 1
};

// Generic acceptance-rejection against a uniform proposal on a box with
// bound M = safety * f_max / g(y).
struct ArResult {
  Matrix samples;            // m x q accepted draws
  std::uint64_t trials = 0;  // total candidates proposed
};
ArResult accept_reject_sample(const std::function<double(std::span<const double>)>& density,
                              double f_max, std::span<const double> box_lo,
                              std::span<const double> box_hi, std::size_t m, Rng& rng,
                              double safety = 1.1, std::uint64_t max_consecutive_rejects = 1000000);

// Prepared conditional sampler: proposal box = response range padded by three
// empirical standard deviations per axis; one global f_max approximated on a
// dense y-grid across an x-grid spanning the query set.
struct KcdeSampler {
  const KcdeModel* model = nullptr;
  std::vector<double> box_lo;
  std::vector<double> box_hi;
  double f_max = 0.0;
};

KcdeSampler kcde_prepare_sampler(const KcdeModel& model, const Matrix& query_xs,
                                 int grid_per_axis = 200, int x_grid_points = 50,
                                 int threads = 1);

// m accepted conditional samples at covariate x. Signals AcceptanceStall
// after max_consecutive_rejects consecutive rejections (an f_max
// underestimate).
Matrix kcde_sample_ar(const KcdeSampler& sampler, std::span<const double> x, std::size_t m,
                      Rng& rng);

}  // namespace cpfn
