#include "cpfn/inference.hpp"

#include <algorithm>
#include <cmath>

#include "cpfn/kernels.hpp"
#include "cpfn/training.hpp"

namespace cpfn {

namespace {

std::vector<double> standardize_x(const CpfnModel& model, std::span<const double> x) {
  if (static_cast<int>(x.size()) != model.d)
    throw DimensionMismatch("covariate dimension mismatch");
  std::vector<double> xs(x.size());
  for (std::size_t j = 0; j < x.size(); ++j)
    xs[j] = (x[j] - model.x_stats.mean[j]) / model.x_stats.std[j];
  return xs;
}

double latent_draw(Rng& rng, LatentLaw law) {
  return law == LatentLaw::Uniform01 ? rng.uniform01() : rng.normal();
}

}  // namespace

Matrix sample_conditional(const CpfnModel& model, std::span<const double> x, std::size_t m,
                          Rng& rng) {
  if (m < 1) throw InvalidConfig("sample_conditional: m must be >= 1");
  const auto xs = standardize_x(model, x);
  const int q = model.q;
  Matrix out(m, static_cast<std::size_t>(q));
  std::vector<double> u(static_cast<std::size_t>(q));
  for (std::size_t i = 0; i < m; ++i) {
    for (int k = 0; k < q; ++k) u[static_cast<std::size_t>(k)] = latent_draw(rng, model.latent);
    const auto ys = cpfn_forward(model, xs, u);
    for (int k = 0; k < q; ++k) {
      double v = ys[static_cast<std::size_t>(k)] * model.y_stats.std[static_cast<std::size_t>(k)] +
                 model.y_stats.mean[static_cast<std::size_t>(k)];
      if (model.y_transform == ResponseTransform::Log1p) v = std::expm1(v);
      out.at(i, static_cast<std::size_t>(k)) = v;
    }
  }
  return out;
}

ConditionalDensityEvaluator::ConditionalDensityEvaluator(const CpfnModel& model, int r_density,
                                                         std::uint64_t seed)
    : model_(model), r_density_(r_density) {
  if (r_density < 1) throw InvalidConfig("density: R must be >= 1");
  Rng rng(mix_seed(seed, 0x9e11));
  draws_ = draw_collocation(rng, 1, r_density, model.q, model.latent);
}

ConditionalDensityEvaluator::ConditionalDensityEvaluator(const CpfnModel& model, int r_density,
                                                         Rng& rng)
    : model_(model), r_density_(r_density) {
  if (r_density < 1) throw InvalidConfig("density: R must be >= 1");
  draws_ = draw_collocation(rng, 1, r_density, model.q, model.latent);
}

void ConditionalDensityEvaluator::prepare(std::span<const double> x) {
  if (has_cache_ && x_cache_.size() == x.size() &&
      std::equal(x.begin(), x.end(), x_cache_.begin()))
    return;
  const auto xs = standardize_x(model_, x);
  const int q = model_.q;
  const int R = r_density_;
  outputs_.assign(static_cast<std::size_t>(q) * R, 0.0);
  std::vector<double> u(static_cast<std::size_t>(q));
  for (int j = 0; j < R; ++j) {
    for (int k = 0; k < q; ++k) u[static_cast<std::size_t>(k)] = draws_[static_cast<std::size_t>(k) * R + j];
    const auto ys = cpfn_forward(model_, xs, u);
    for (int k = 0; k < q; ++k) outputs_[static_cast<std::size_t>(k) * R + j] = ys[static_cast<std::size_t>(k)];
  }
  x_cache_.assign(x.begin(), x.end());
  has_cache_ = true;
}

double ConditionalDensityEvaluator::density(std::span<const double> x, std::span<const double> y) {
  if (static_cast<int>(y.size()) != model_.q)
    throw DimensionMismatch("response dimension mismatch");
  prepare(x);
  const int q = model_.q;
  const int R = r_density_;

  // Transform then standardize the query point; track the Jacobian factors.
  double jac = 1.0;
  std::vector<double> yt(y.size());
  for (int k = 0; k < q; ++k) {
    double v = y[static_cast<std::size_t>(k)];
    if (model_.y_transform == ResponseTransform::Log1p) {
      if (v <= -1.0) return 0.0;  // outside the image of expm1
      jac /= 1.0 + v;
      v = std::log1p(v);
    }
    yt[static_cast<std::size_t>(k)] = (v - model_.y_stats.mean[static_cast<std::size_t>(k)]) /
                                      model_.y_stats.std[static_cast<std::size_t>(k)];
    jac /= model_.y_stats.std[static_cast<std::size_t>(k)];
  }

  const Bandwidth bw = model_.bandwidth();
  std::vector<double> v(static_cast<std::size_t>(q));
  double acc = 0.0;
  for (int j = 0; j < R; ++j) {
    for (int k = 0; k < q; ++k)
      v[static_cast<std::size_t>(k)] =
          yt[static_cast<std::size_t>(k)] - outputs_[static_cast<std::size_t>(k) * R + j];
    acc += scaled_kernel_eval(model_.kernel, bw, v);
  }
  return (acc / R) * jac;
}

double conditional_density(const CpfnModel& model, std::span<const double> x,
                           std::span<const double> y, int r_density, Rng& rng) {
  ConditionalDensityEvaluator ev(model, r_density, rng);
  return ev.density(x, y);
}

double conditional_density(const CpfnModel& model, std::span<const double> x,
                           std::span<const double> y, int r_density, std::uint64_t seed) {
  ConditionalDensityEvaluator ev(model, r_density, seed);
  return ev.density(x, y);
}

double conditional_quantile(std::vector<double> samples, double tau) {
  if (samples.empty()) throw InvalidConfig("conditional_quantile: empty sample");
  if (!(tau > 0.0 && tau < 1.0)) throw InvalidTau("tau must lie in (0, 1)");
  std::sort(samples.begin(), samples.end());
  const double h = (static_cast<double>(samples.size()) - 1.0) * tau;
  const std::size_t lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, samples.size() - 1);
  const double frac = h - static_cast<double>(lo);
  return samples[lo] + frac * (samples[hi] - samples[lo]);
}

std::vector<double> conditional_quantiles(std::vector<double> samples,
                                          std::span<const double> taus) {
  if (samples.empty()) throw InvalidConfig("conditional_quantiles: empty sample");
  std::sort(samples.begin(), samples.end());
  std::vector<double> out;
  out.reserve(taus.size());
  for (double tau : taus) {
    if (!(tau > 0.0 && tau < 1.0)) throw InvalidTau("tau must lie in (0, 1)");
    const double h = (static_cast<double>(samples.size()) - 1.0) * tau;
    const std::size_t lo = static_cast<std::size_t>(std::floor(h));
    const std::size_t hi = std::min(lo + 1, samples.size() - 1);
    const double frac = h - static_cast<double>(lo);
    out.push_back(samples[lo] + frac * (samples[hi] - samples[lo]));
  }
  return out;
}

ConditionalStatistics conditional_statistics(const CpfnModel& model, std::span<const double> x,
                                             std::size_t m, Rng& rng) {
  if (m < 2) throw InvalidConfig("conditional_statistics: m must be >= 2");
  const Matrix samples = sample_conditional(model, x, m, rng);
  const int q = model.q;

  ConditionalStatistics stats;
  stats.mean.assign(static_cast<std::size_t>(q), 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (int k = 0; k < q; ++k) stats.mean[static_cast<std::size_t>(k)] += samples.at(i, k);
  for (double& v : stats.mean) v /= static_cast<double>(m);

  stats.covariance = Matrix(static_cast<std::size_t>(q), static_cast<std::size_t>(q));
  for (std::size_t i = 0; i < m; ++i)
    for (int a = 0; a < q; ++a)
      for (int b = 0; b < q; ++b)
        stats.covariance.at(a, b) += (samples.at(i, a) - stats.mean[static_cast<std::size_t>(a)]) *
                                     (samples.at(i, b) - stats.mean[static_cast<std::size_t>(b)]);
  for (double& v : stats.covariance.data) v /= static_cast<double>(m - 1);

  stats.quantile_taus = {0.1, 0.25, 0.5, 0.75, 0.9};
  stats.quantiles = Matrix(static_cast<std::size_t>(q), stats.quantile_taus.size());
  std::vector<double> col(m);
  for (int k = 0; k < q; ++k) {
    for (std::size_t i = 0; i < m; ++i) col[i] = samples.at(i, k);
    const auto qs = conditional_quantiles(col, stats.quantile_taus);
    for (std::size_t t = 0; t < qs.size(); ++t) stats.quantiles.at(k, t) = qs[t];
  }
  return stats;
}

}  // namespace cpfn
