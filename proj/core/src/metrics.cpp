#include "cpfn/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "cpfn/parallel.hpp"

namespace cpfn {

double w1_sorted_1d(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw SizeMismatch("w1_sorted_1d: sizes differ");
  if (a.empty()) throw SizeMismatch("w1_sorted_1d: empty input");
  std::vector<double> sa(a.begin(), a.end());
  std::vector<double> sb(b.begin(), b.end());
  std::sort(sa.begin(), sa.end());
  std::sort(sb.begin(), sb.end());
  double acc = 0.0;
  for (std::size_t i = 0; i < sa.size(); ++i) acc += std::abs(sa[i] - sb[i]);
  return acc / static_cast<double>(sa.size());
}

TransportPlan w1_assignment(const Matrix& a, const Matrix& b, std::size_t budget) {
  if (a.rows != b.rows || a.cols != b.cols) throw SizeMismatch("w1_assignment: shape mismatch");
  if (a.rows == 0) throw SizeMismatch("w1_assignment: empty clouds");
  if (a.rows > budget) throw BudgetExceeded("w1_assignment: cloud exceeds solver budget");
  const int n = static_cast<int>(a.rows);

  Matrix cost(a.rows, a.rows);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      double ss = 0.0;
      for (std::size_t k = 0; k < a.cols; ++k) {
        const double d = a.at(i, k) - b.at(j, k);
        ss += d * d;
      }
      cost.at(i, j) = std::sqrt(ss);
    }

  // Shortest augmenting paths with dual potentials; rows/columns 1-based,
  // index 0 is the virtual source.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<std::size_t>(n) + 1, 0.0);
  std::vector<double> v(static_cast<std::size_t>(n) + 1, 0.0);
  std::vector<int> p(static_cast<std::size_t>(n) + 1, 0);
  std::vector<int> way(static_cast<std::size_t>(n) + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<std::size_t>(n) + 1, inf);
    std::vector<char> used(static_cast<std::size_t>(n) + 1, 0);
    do {
      used[static_cast<std::size_t>(j0)] = 1;
      const int i0 = p[static_cast<std::size_t>(j0)];
      double delta = inf;
      int j1 = -1;
      for (int j = 1; j <= n; ++j) {
        if (used[static_cast<std::size_t>(j)]) continue;
        const double cur = cost.at(i0 - 1, j - 1) - u[static_cast<std::size_t>(i0)] -
                           v[static_cast<std::size_t>(j)];
        if (cur < minv[static_cast<std::size_t>(j)]) {
          minv[static_cast<std::size_t>(j)] = cur;
          way[static_cast<std::size_t>(j)] = j0;
        }
        if (minv[static_cast<std::size_t>(j)] < delta) {
          delta = minv[static_cast<std::size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[static_cast<std::size_t>(j)]) {
          u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] += delta;
          v[static_cast<std::size_t>(j)] -= delta;
        } else {
          minv[static_cast<std::size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<std::size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<std::size_t>(j0)];
      p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }

  TransportPlan plan;
  plan.assignment.assign(static_cast<std::size_t>(n), -1);
  double total = 0.0;
  for (int j = 1; j <= n; ++j) {
    const int i = p[static_cast<std::size_t>(j)];
    plan.assignment[static_cast<std::size_t>(i) - 1] = j - 1;
    total += cost.at(i - 1, j - 1);
  }
  plan.cost = total / static_cast<double>(n);
  return plan;
}

namespace {

// Composite Simpson weights for n_intervals (even) on [lo, hi].
std::vector<double> simpson_weights(int n_intervals, double lo, double hi) {
  if (n_intervals < 2 || n_intervals % 2 != 0)
    throw InvalidConfig("Simpson rule needs an even positive interval count");
  const double h = (hi - lo) / n_intervals;
  std::vector<double> w(static_cast<std::size_t>(n_intervals) + 1, 0.0);
  for (int i = 0; i <= n_intervals; ++i) {
    double c = (i == 0 || i == n_intervals) ? 1.0 : (i % 2 == 1 ? 4.0 : 2.0);
    w[static_cast<std::size_t>(i)] = c * h / 3.0;
  }
  return w;
}

}  // namespace

UnivariateAwdResult awd_aqe_univariate(const QuantileFn& true_q, const QuantileFn& est_q, int r_x,
                                       int r_tau, std::span<const double> aqe_taus, int threads) {
  const auto wx = simpson_weights(r_x, 0.0, 1.0);
  const auto wt = simpson_weights(r_tau, 0.0, 1.0);

  UnivariateAwdResult res;
  res.x_grid.resize(static_cast<std::size_t>(r_x) + 1);
  for (int i = 0; i <= r_x; ++i)
    res.x_grid[static_cast<std::size_t>(i)] = static_cast<double>(i) / r_x;
  res.tau_grid.resize(static_cast<std::size_t>(r_tau) + 1);
  for (int j = 0; j <= r_tau; ++j) {
    double tau = static_cast<double>(j) / r_tau;
    // quantiles at 0 and 1 are unbounded for unbounded conditionals
    tau = std::max(tau, 1.0 / r_tau);
    tau = std::min(tau, 1.0 - 1.0 / r_tau);
    res.tau_grid[static_cast<std::size_t>(j)] = tau;
  }

  // map requested AQE levels onto grid nodes
  res.aqe_taus.assign(aqe_taus.begin(), aqe_taus.end());
  std::vector<std::size_t> aqe_idx;
  for (double tau : aqe_taus) {
    std::size_t best = 0;
    double gap = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < res.tau_grid.size(); ++j) {
      const double g = std::abs(res.tau_grid[j] - tau);
      if (g < gap) {
        gap = g;
        best = j;
      }
    }
    if (gap > 1e-12) throw InvalidConfig("aqe level is not a tau-grid node");
    aqe_idx.push_back(best);
  }

  const std::size_t nx = res.x_grid.size();
  const std::size_t nt = res.tau_grid.size();
  res.true_quantiles = Matrix(nx, nt);
  res.est_quantiles = Matrix(nx, nt);

  parallel_for(nx, threads, [&](std::size_t i) {
    const auto tq = true_q(res.x_grid[i], res.tau_grid);
    const auto eq = est_q(res.x_grid[i], res.tau_grid);
    if (tq.size() != nt || eq.size() != nt)
      throw DimensionMismatch("quantile source returned wrong grid size");
    for (std::size_t j = 0; j < nt; ++j) {
      res.true_quantiles.at(i, j) = tq[j];
      res.est_quantiles.at(i, j) = eq[j];
    }
  });

  double awd = 0.0;
  for (std::size_t i = 0; i < nx; ++i) {
    double inner = 0.0;
    for (std::size_t j = 0; j < nt; ++j)
      inner += wt[j] * std::abs(res.true_quantiles.at(i, j) - res.est_quantiles.at(i, j));
    awd += wx[i] * inner;
  }
  res.awd = awd;

  res.aqe.clear();
  for (std::size_t t = 0; t < aqe_idx.size(); ++t) {
    double acc = 0.0;
    for (std::size_t i = 0; i < nx; ++i)
      acc += wx[i] * std::abs(res.true_quantiles.at(i, aqe_idx[t]) -
                              res.est_quantiles.at(i, aqe_idx[t]));
    res.aqe.push_back(acc);
  }
  return res;
}

double awd_univariate(const QuantileFn& true_q, const QuantileFn& est_q, int r_x, int r_tau,
                      int threads) {
  return awd_aqe_univariate(true_q, est_q, r_x, r_tau, {}, threads).awd;
}

double aqe(const QuantileFn& true_q, const QuantileFn& est_q, double tau, int r_x, int threads) {
  if (!(tau > 0.0 && tau < 1.0)) throw InvalidTau("aqe: tau must lie in (0, 1)");
  const auto wx = simpson_weights(r_x, 0.0, 1.0);
  const std::size_t nx = wx.size();
  const std::vector<double> taus{tau};
  std::vector<double> gaps(nx, 0.0);
  parallel_for(nx, threads, [&](std::size_t i) {
    const double x = static_cast<double>(i) / r_x;
    gaps[i] = std::abs(true_q(x, taus)[0] - est_q(x, taus)[0]);
  });
  double acc = 0.0;
  for (std::size_t i = 0; i < nx; ++i) acc += wx[i] * gaps[i];
  return acc;
}

MultivariateAwdResult awd_multivariate(const CovariateSampler& draw_x,
                                       const ConditionalSampler& true_sampler,
                                       const ConditionalSampler& est_sampler, int r_x, int r_y,
                                       Rng& rng, std::size_t budget, int threads) {
  if (r_x < 1 || r_y < 1) throw InvalidConfig("awd_multivariate: r_x and r_y must be >= 1");
  if (static_cast<std::size_t>(r_y) > budget)
    throw BudgetExceeded("awd_multivariate: r_y exceeds the assignment budget");

  // Covariates and per-x stream seeds drawn sequentially for reproducibility,
  // then the per-x work runs in parallel.
  std::vector<std::vector<double>> xs(static_cast<std::size_t>(r_x));
  std::vector<std::uint64_t> seeds(static_cast<std::size_t>(r_x));
  for (int i = 0; i < r_x; ++i) {
    xs[static_cast<std::size_t>(i)] = draw_x(rng);
    seeds[static_cast<std::size_t>(i)] = rng.raw();
  }

  MultivariateAwdResult res;
  res.per_x.assign(static_cast<std::size_t>(r_x), 0.0);
  parallel_for(static_cast<std::size_t>(r_x), threads, [&](std::size_t i) {
    Rng true_rng(mix_seed(seeds[i], 1));
    Rng est_rng(mix_seed(seeds[i], 2));
    const Matrix a = true_sampler(xs[i], static_cast<std::size_t>(r_y), true_rng);
    const Matrix b = est_sampler(xs[i], static_cast<std::size_t>(r_y), est_rng);
    res.per_x[i] = w1_assignment(a, b, budget).cost;
  });

  double acc = 0.0;
  for (double v : res.per_x) acc += v;
  res.awd = acc / static_cast<double>(r_x);
  return res;
}

double nll(const DensityFn& density, const Matrix& X, const Matrix& Y, int threads) {
  if (X.rows != Y.rows) throw DimensionMismatch("nll: X/Y row mismatch");
  if (X.rows == 0) throw EmptyDataset("nll: empty test set");
  const std::size_t n = X.rows;
  std::vector<double> partial(64, 0.0);
  parallel_chunks(n, 64, threads, [&](std::size_t chunk, std::size_t b, std::size_t e) {
    double acc = 0.0;
    for (std::size_t i = b; i < e; ++i) acc += std::log(1e-300 + density(X.row(i), Y.row(i)));
    partial[chunk] = acc;
  });
  double total = 0.0;
  for (double p : partial) total += p;
  return -total / static_cast<double>(n);
}

}  // namespace cpfn
