#include "cpfn/kcde.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "cpfn/parallel.hpp"

namespace cpfn {

namespace {

double column_std(const Matrix& m, std::size_t c) {
  const std::size_t n = m.rows;
  double mean = 0.0;
  for (std::size_t r = 0; r < n; ++r) mean += m.at(r, c);
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    const double d = m.at(r, c) - mean;
    ss += d * d;
  }
  return std::sqrt(ss / static_cast<double>(n - 1));
}

// Product kernel in one coordinate, bandwidth-scaled.
inline double kernel1(KernelFamily family, double u, double h) {
  const double z = u / h;
  if (family == KernelFamily::Gaussian)
    return 0.39894228040143267794 * std::exp(-0.5 * z * z) / h;
  if (std::abs(z) > 1.0) return 0.0;
  return 0.75 * (1.0 - z * z) / h;
}

double loo_conditional_loglik(const KcdeModel& m, int threads) {
  const std::size_t n = m.n();
  const int d = m.d();
  const int q = m.q();
  std::vector<double> partial(64, 0.0);
  parallel_chunks(n, 64, threads, [&](std::size_t chunk, std::size_t b, std::size_t e) {
    double acc = 0.0;
    for (std::size_t i = b; i < e; ++i) {
      double num = 0.0, den = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        if (j == i) continue;
        double wx = 1.0;
        for (int k = 0; k < d; ++k)
          wx *= kernel1(m.kernel, m.X.at(i, k) - m.X.at(j, k), m.x_bandwidths[k]);
        double wy = 1.0;
        for (int k = 0; k < q; ++k)
          wy *= kernel1(m.kernel, m.Y.at(i, k) - m.Y.at(j, k), m.y_bandwidths[k]);
        num += wx * wy;
        den += wx;
      }
      acc += std::log(1e-300 + (den > 0.0 ? num / den : 0.0));
    }
    partial[chunk] = acc;
  });
  double total = 0.0;
  for (double p : partial) total += p;
  return total;
}

}  // namespace

KcdeModel kcde_fit(const Dataset& data, BandwidthRule rule, KernelFamily kernel, int threads) {
  data.validate();
  if (data.n() < 2) throw DataError("kcde_fit: need at least 2 rows");

  KcdeModel m;
  m.X = data.X;
  m.Y = data.Y;
  m.kernel = kernel;

  const int dim = data.d() + data.q();
  const double factor =
      std::pow(4.0 / ((dim + 2.0) * static_cast<double>(data.n())), 1.0 / (dim + 4.0));

  m.x_bandwidths.resize(data.d());
  for (int k = 0; k < data.d(); ++k) {
    double sd = column_std(m.X, static_cast<std::size_t>(k));
    if (!(sd > 0.0)) sd = 1.0;  // constant column, same clamp as standardize_fit
    m.x_bandwidths[static_cast<std::size_t>(k)] = sd * factor;
  }
  m.y_bandwidths.resize(data.q());
  for (int k = 0; k < data.q(); ++k) {
    double sd = column_std(m.Y, static_cast<std::size_t>(k));
    if (!(sd > 0.0)) sd = 1.0;
    m.y_bandwidths[static_cast<std::size_t>(k)] = sd * factor;
  }

  if (rule == BandwidthRule::CV) {
    static const double kMultipliers[] = {0.25, 0.35, 0.5, 0.7, 1.0, 1.4, 2.0, 2.8, 4.0};
    const auto hx = m.x_bandwidths;
    const auto hy = m.y_bandwidths;
    double best_ll = -std::numeric_limits<double>::infinity();
    double best_mult = 1.0;
    for (double mult : kMultipliers) {
      for (std::size_t k = 0; k < hx.size(); ++k) m.x_bandwidths[k] = hx[k] * mult;
      for (std::size_t k = 0; k < hy.size(); ++k) m.y_bandwidths[k] = hy[k] * mult;
      const double ll = loo_conditional_loglik(m, threads);
      if (ll > best_ll) {
        best_ll = ll;
        best_mult = mult;
      }
    }
    for (std::size_t k = 0; k < hx.size(); ++k) m.x_bandwidths[k] = hx[k] * best_mult;
    for (std::size_t k = 0; k < hy.size(); ++k) m.y_bandwidths[k] = hy[k] * best_mult;
  }
  return m;
}

KcdeSlice::KcdeSlice(const KcdeModel& model, std::span<const double> x) : model_(model) {
  if (static_cast<int>(x.size()) != model.d())
    throw DimensionMismatch("kcde: covariate dimension mismatch");
  const std::size_t n = model.n();
  weights_.resize(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double w = 1.0;
    for (int k = 0; k < model.d(); ++k)
      w *= kernel1(model.kernel, x[static_cast<std::size_t>(k)] - model.X.at(i, k),
                   model.x_bandwidths[static_cast<std::size_t>(k)]);
    weights_[i] = w;
    total += w;
  }
  if (!(total > 0.0))
    throw EmptyNeighborhood("kcde: no training mass near the query covariate");
  for (double& w : weights_) w /= total;
}

double KcdeSlice::density(std::span<const double> y) const {
  if (static_cast<int>(y.size()) != model_.q())
    throw DimensionMismatch("kcde: response dimension mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < model_.n(); ++i) {
    if (weights_[i] == 0.0) continue;
    double wy = 1.0;
    for (int k = 0; k < model_.q(); ++k)
      wy *= kernel1(model_.kernel, y[static_cast<std::size_t>(k)] - model_.Y.at(i, k),
                    model_.y_bandwidths[static_cast<std::size_t>(k)]);
    acc += weights_[i] * wy;
  }
  return acc;
}

double kcde_density(const KcdeModel& model, std::span<const double> x, std::span<const double> y) {
  return KcdeSlice(model, x).density(y);
}

ArResult accept_reject_sample(const std::function<double(std::span<const double>)>& density,
                              double f_max, std::span<const double> box_lo,
                              std::span<const double> box_hi, std::size_t m, Rng& rng,
                              double safety, std::uint64_t max_consecutive_rejects) {
  if (box_lo.size() != box_hi.size()) throw DimensionMismatch("accept_reject: box mismatch");
  if (!(f_max > 0.0)) throw InvalidConfig("accept_reject: f_max must be positive");
  const std::size_t q = box_lo.size();
  const double bound = safety * f_max;

  ArResult res;
  res.samples = Matrix(m, q);
  std::vector<double> y(q);
  for (std::size_t s = 0; s < m; ++s) {
    std::uint64_t consecutive = 0;
    for (;;) {
      for (std::size_t k = 0; k < q; ++k) y[k] = rng.uniform(box_lo[k], box_hi[k]);
      const double u = rng.uniform01();
      ++res.trials;
      if (u < density(y) / bound) {
        for (std::size_t k = 0; k < q; ++k) res.samples.at(s, k) = y[k];
        break;
      }
      if (++consecutive > max_consecutive_rejects)
        throw AcceptanceStall("acceptance-rejection stalled; f_max likely underestimated");
    }
  }
  return res;
}

KcdeSampler kcde_prepare_sampler(const KcdeModel& model, const Matrix& query_xs,
                                 int grid_per_axis, int x_grid_points, int threads) {
  if (model.q() > 2)
    throw InvalidConfig("kcde sampler: grid f_max approximation supports q <= 2");
  if (query_xs.rows == 0) throw InvalidConfig("kcde sampler: empty query set");

  KcdeSampler s;
  s.model = &model;
  const int q = model.q();
  s.box_lo.resize(q);
  s.box_hi.resize(q);
  for (int k = 0; k < q; ++k) {
    double lo = model.Y.at(0, k), hi = model.Y.at(0, k);
    for (std::size_t i = 1; i < model.n(); ++i) {
      lo = std::min(lo, model.Y.at(i, k));
      hi = std::max(hi, model.Y.at(i, k));
    }
    const double sd = column_std(model.Y, static_cast<std::size_t>(k));
    s.box_lo[static_cast<std::size_t>(k)] = lo - 3.0 * sd;
    s.box_hi[static_cast<std::size_t>(k)] = hi + 3.0 * sd;
  }

  // x-grid spanning the query set: an even subsample of its rows.
  const std::size_t nx = std::min<std::size_t>(query_xs.rows, static_cast<std::size_t>(x_grid_points));
  std::vector<std::size_t> x_rows(nx);
  for (std::size_t i = 0; i < nx; ++i)
    x_rows[i] = nx == 1 ? 0 : i * (query_xs.rows - 1) / (nx - 1);

  std::vector<double> maxima(nx, 0.0);
  parallel_for(nx, threads, [&](std::size_t xi) {
    const KcdeSlice slice(model, query_xs.row(x_rows[xi]));
    double best = 0.0;
    std::vector<double> y(static_cast<std::size_t>(q));
    if (q == 1) {
      for (int a = 0; a < grid_per_axis; ++a) {
        y[0] = s.box_lo[0] + (s.box_hi[0] - s.box_lo[0]) * a / (grid_per_axis - 1.0);
        best = std::max(best, slice.density(y));
      }
    } else {
      for (int a = 0; a < grid_per_axis; ++a) {
        y[0] = s.box_lo[0] + (s.box_hi[0] - s.box_lo[0]) * a / (grid_per_axis - 1.0);
        for (int b = 0; b < grid_per_axis; ++b) {
          y[1] = s.box_lo[1] + (s.box_hi[1] - s.box_lo[1]) * b / (grid_per_axis - 1.0);
          best = std::max(best, slice.density(y));
        }
      }
    }
    maxima[xi] = best;
  });
  s.f_max = *std::max_element(maxima.begin(), maxima.end());
  if (!(s.f_max > 0.0)) throw EmptyNeighborhood("kcde sampler: zero density over the whole grid");
  return s;
}

Matrix kcde_sample_ar(const KcdeSampler& sampler, std::span<const double> x, std::size_t m,
                      Rng& rng) {
  if (sampler.model == nullptr) throw InvalidConfig("kcde sampler not prepared");
  const KcdeSlice slice(*sampler.model, x);
  const auto res = accept_reject_sample(
      [&](std::span<const double> y) { return slice.density(y); }, sampler.f_max,
      sampler.box_lo, sampler.box_hi, m, rng);
  return res.samples;
}

}  // namespace cpfn
