#include "cpfn/simulators.hpp"

#include <cmath>

#include "cpfn/autodiff.hpp"

namespace cpfn {

namespace {

constexpr double kInvSqrt2Pi = 0.39894228040143267794;
constexpr double kTwoPi = 6.28318530717958647693;

double gauss_pdf(double y, double mean, double sd) {
  const double z = (y - mean) / sd;
  return kInvSqrt2Pi * std::exp(-0.5 * z * z) / sd;
}

double sigmoid(double t) { return 1.0 / (1.0 + std::exp(-t)); }

double dot5(std::span<const double> x, const double (&w)[5]) {
  double acc = 0.0;
  for (int k = 0; k < 5; ++k) acc += w[k] * x[static_cast<std::size_t>(k)];
  return acc;
}

}  // namespace

// ---------------------------------------------------------------------------
// Univariate process
// ---------------------------------------------------------------------------

namespace {

double univariate_draw(const UnivariateProcess& p, double x, Rng& rng) {
  const bool coin = rng.bernoulli(0.5);
  const double w = rng.normal();
  const double mean =
      (x < 0.5 || !coin) ? UnivariateProcess::mean_low(x) : UnivariateProcess::mean_high(x);
  (void)p;
  return mean + UnivariateProcess::noise_scale(x) * w;
}

}  // namespace

Dataset UnivariateProcess::generate(std::size_t n, Rng& rng) const {
  if (n < 1) throw InvalidConfig("generate: n must be >= 1");
  Dataset data;
  data.X = Matrix(n, 1);
  data.Y = Matrix(n, 1);
  data.x_columns = {ColumnMeta{"x", ColumnKind::Continuous}};
  data.y_columns = {ColumnMeta{"y", ColumnKind::Continuous}};
  for (std::size_t i = 0; i < n; ++i) {
    const double x = rng.uniform01();
    data.X.at(i, 0) = x;
    data.Y.at(i, 0) = univariate_draw(*this, x, rng);
  }
  return data;
}

Matrix UnivariateProcess::sample_conditional(double x, std::size_t m, Rng& rng) const {
  if (m < 1) throw InvalidConfig("sample_conditional: m must be >= 1");
  Matrix out(m, 1);
  for (std::size_t i = 0; i < m; ++i) out.at(i, 0) = univariate_draw(*this, x, rng);
  return out;
}

double UnivariateProcess::density(double x, double y) const {
  const double s = noise_scale(x);
  if (x < 0.5) return gauss_pdf(y, mean_low(x), s);
  return 0.5 * gauss_pdf(y, mean_low(x), s) + 0.5 * gauss_pdf(y, mean_high(x), s);
}

double UnivariateProcess::cdf(double x, double y) const {
  const double s = noise_scale(x);
  if (x < 0.5) return norm_cdf((y - mean_low(x)) / s);
  return 0.5 * norm_cdf((y - mean_low(x)) / s) + 0.5 * norm_cdf((y - mean_high(x)) / s);
}

double UnivariateProcess::quantile(double x, double tau) const {
  if (!(tau > 0.0 && tau < 1.0)) throw InvalidTau("quantile: tau must lie in (0, 1)");
  const double s = noise_scale(x);
  const double m1 = mean_low(x);
  const double m2 = x < 0.5 ? m1 : mean_high(x);
  double lo = std::min(m1, m2) - 10.0 * s;
  double hi = std::max(m1, m2) + 10.0 * s;
  // extend the bracket for extreme levels
  while (cdf(x, lo) > tau) lo -= 10.0 * s;
  while (cdf(x, hi) < tau) hi += 10.0 * s;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    const double f = cdf(x, mid);
    if (std::abs(f - tau) < 1e-10) return mid;
    if (f < tau)
      lo = mid;
    else
      hi = mid;
  }
  return 0.5 * (lo + hi);
}

// ---------------------------------------------------------------------------
// Ring/blobs process
// ---------------------------------------------------------------------------

double RingBlobsProcess::ring_weight(std::span<const double> x) const {
  return sigmoid(dot5(x, kBeta));
}

double RingBlobsProcess::ring_radius(std::span<const double> x) const {
  return kRadiusBase + kRadiusSwing * std::tanh(0.7 * dot5(x, kBeta));
}

double RingBlobsProcess::ring_sigma(std::span<const double> x) const {
  return kSigmaBase + kSigmaSwing * sigmoid(1.2 * dot5(x, kGamma));
}

// The blob layout keeps both components inside the ring's radius range and
// well separated: one blob in the upper-right quadrant sliding with the
// covariates, the mirrored one in the lower-left.
void RingBlobsProcess::blob_means(std::span<const double> x, std::span<double> m1,
                                  std::span<double> m2) const {
  const double t = std::tanh(0.5 * dot5(x, kGamma));
  m1[0] = 1.0 + 1.5 * t;
  m1[1] = 1.0;
  m2[0] = -1.0;
  m2[1] = -1.0 - 1.5 * t;
}

double RingBlobsProcess::blob_sigma(std::span<const double> x) const {
  return 0.2 + 0.1 * sigmoid(dot5(x, kGamma));
}

namespace {

void ring_blobs_draw(const RingBlobsProcess& p, std::span<const double> x, double* y, Rng& rng) {
  if (rng.bernoulli(p.ring_weight(x))) {
    const double r_mean = p.ring_radius(x);
    const double r_sd = p.ring_sigma(x);
    double radius;
    do {
      radius = r_mean + r_sd * rng.normal();
    } while (radius < 0.0);
    const double angle = rng.uniform(0.0, kTwoPi);
    y[0] = radius * std::cos(angle);
    y[1] = radius * std::sin(angle);
  } else {
    double m1[2], m2[2];
    p.blob_means(x, m1, m2);
    const double sd = p.blob_sigma(x);
    const double* m = rng.bernoulli(0.5) ? m1 : m2;
    y[0] = m[0] + sd * rng.normal();
    y[1] = m[1] + sd * rng.normal();
  }
}

}  // namespace

Dataset RingBlobsProcess::generate(std::size_t n, Rng& rng) const {
  if (n < 1) throw InvalidConfig("generate: n must be >= 1");
  Dataset data;
  data.X = Matrix(n, 5);
  data.Y = Matrix(n, 2);
  for (int k = 0; k < 5; ++k)
    data.x_columns.push_back(ColumnMeta{"x" + std::to_string(k + 1), ColumnKind::Continuous});
  data.y_columns = {ColumnMeta{"y1", ColumnKind::Continuous},
                    ColumnMeta{"y2", ColumnKind::Continuous}};
  for (std::size_t i = 0; i < n; ++i) {
    for (int k = 0; k < 5; ++k) data.X.at(i, static_cast<std::size_t>(k)) = rng.normal();
    ring_blobs_draw(*this, data.X.row(i), &data.Y.at(i, 0), rng);
  }
  return data;
}

Matrix RingBlobsProcess::sample_conditional(std::span<const double> x, std::size_t m,
                                            Rng& rng) const {
  if (m < 1) throw InvalidConfig("sample_conditional: m must be >= 1");
  if (x.size() != 5) throw DimensionMismatch("ring/blobs covariate must have dimension 5");
  Matrix out(m, 2);
  for (std::size_t i = 0; i < m; ++i) ring_blobs_draw(*this, x, &out.at(i, 0), rng);
  return out;
}

double RingBlobsProcess::density(std::span<const double> x, std::span<const double> y) const {
  if (x.size() != 5 || y.size() != 2) throw DimensionMismatch("ring/blobs dimension mismatch");
  const double radius = std::hypot(y[0], y[1]);
  if (radius == 0.0) throw SingularOrigin("ring density undefined at the origin");

  const double w = ring_weight(x);
  const double r_mean = ring_radius(x);
  const double r_sd = ring_sigma(x);
  // radius density truncated to [0, inf)
  const double trunc_mass = 1.0 - norm_cdf(-r_mean / r_sd);
  const double g = gauss_pdf(radius, r_mean, r_sd) / trunc_mass;
  const double ring_term = g / (kTwoPi * radius);

  double m1[2], m2[2];
  blob_means(x, m1, m2);
  const double sd = blob_sigma(x);
  const double blob_term = 0.5 * gauss_pdf(y[0], m1[0], sd) * gauss_pdf(y[1], m1[1], sd) +
                           0.5 * gauss_pdf(y[0], m2[0], sd) * gauss_pdf(y[1], m2[1], sd);

  return w * ring_term + (1.0 - w) * blob_term;
}

// ---------------------------------------------------------------------------
// Dispatch
// ---------------------------------------------------------------------------

SimProcess sim_process_from_string(const std::string& name) {
  if (name == "univariate") return SimProcess::Univariate;
  if (name == "multivariate") return SimProcess::Multivariate;
  throw InvalidConfig("unknown simulation process: " + name);
}

std::string to_string(SimProcess p) {
  return p == SimProcess::Univariate ? "univariate" : "multivariate";
}

Dataset generate_process(SimProcess p, std::size_t n, Rng& rng) {
  if (p == SimProcess::Univariate) return UnivariateProcess{}.generate(n, rng);
  return RingBlobsProcess{}.generate(n, rng);
}

Matrix sample_true_conditional(SimProcess p, std::span<const double> x, std::size_t m, Rng& rng) {
  if (p == SimProcess::Univariate) {
    if (x.size() != 1) throw DimensionMismatch("univariate covariate must be scalar");
    return UnivariateProcess{}.sample_conditional(x[0], m, rng);
  }
  return RingBlobsProcess{}.sample_conditional(x, m, rng);
}

}  // namespace cpfn
