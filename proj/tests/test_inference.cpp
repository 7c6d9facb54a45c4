#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "cpfn/inference.hpp"
#include "cpfn/kernels.hpp"
#include "cpfn/simulators.hpp"
#include "cpfn/training.hpp"
#include "support.hpp"

using namespace cpfn;

namespace {

// One modest model trained on the univariate benchmark process, shared by
// the tests below.
const TrainResult& trained_model() {
  static const TrainResult result = [] {
    Rng rng(2024);
    const Dataset data = UnivariateProcess{}.generate(600, rng);
    ModelSpec spec;
    spec.rank = 8;
    spec.hidden_widths = {24, 24};
    TrainConfig cfg;
    cfg.epochs = 500;
    cfg.collocation = 12;
    cfg.seed = 7;
    cfg.validation_fraction = 0.1;
    return train(data, spec, cfg);
  }();
  return result;
}

}  // namespace

TEST_CASE("sampling is deterministic under the seed") {
  const auto& tr = trained_model();
  const double x = 0.4;
  Rng a(99), b(99);
  const Matrix s1 = sample_conditional(tr.model, {&x, 1}, 50, a);
  const Matrix s2 = sample_conditional(tr.model, {&x, 1}, 50, b);
  for (std::size_t i = 0; i < s1.rows; ++i) CHECK(s1.at(i, 0) == s2.at(i, 0));
}

TEST_CASE("trained model recovers the conditional mean and spread") {
  const auto& tr = trained_model();
  REQUIRE(!tr.aborted_non_finite);
  const double x = 0.25;
  Rng rng(5);
  const Matrix s = sample_conditional(tr.model, {&x, 1}, 4000, rng);
  double mean = 0.0;
  for (std::size_t i = 0; i < s.rows; ++i) mean += s.at(i, 0);
  mean /= static_cast<double>(s.rows);
  double sd = 0.0;
  for (std::size_t i = 0; i < s.rows; ++i) {
    const double d = s.at(i, 0) - mean;
    sd += d * d;
  }
  sd = std::sqrt(sd / static_cast<double>(s.rows - 1));
  // closed-form conditional at x = 0.25: mean -0.78125, sd 0.315
  CHECK(std::abs(mean - (-0.78125)) < 0.1);
  CHECK(std::abs(sd - 0.315) < 0.1);
}

TEST_CASE("density of the zero stub equals the kernel at the origin") {
  auto m = init_model(1, 1, 2, {4}, LatentLaw::StandardNormal, KernelFamily::Gaussian, 0.05, 3);
  for (double& v : m.params.values()) v = 0.0;
  m.set_bandwidth(Bandwidth::constant(0.05, 1));
  const double x = 0.2, y = 0.0;
  const double f = conditional_density(m, {&x, 1}, {&y, 1}, 64, std::uint64_t{0});
  CHECK(f == doctest::Approx(7.978845608028654).epsilon(1e-12));
}

TEST_CASE("log1p change of variables at the origin") {
  auto m = init_model(1, 1, 2, {4}, LatentLaw::StandardNormal, KernelFamily::Gaussian, 0.05, 3);
  for (double& v : m.params.values()) v = 0.0;
  m.set_bandwidth(Bandwidth::constant(0.05, 1));
  const double x = 0.2, y = 0.0;
  const double f_id = conditional_density(m, {&x, 1}, {&y, 1}, 64, std::uint64_t{0});
  m.y_transform = ResponseTransform::Log1p;
  const double f_tr = conditional_density(m, {&x, 1}, {&y, 1}, 64, std::uint64_t{0});
  // log1p(0) = 0 and the Jacobian 1/(1+0) = 1
  CHECK(f_tr == doctest::Approx(f_id).epsilon(1e-14));
  // outside the image of the transform the density vanishes
  const double y_bad = -1.5;
  CHECK(conditional_density(m, {&x, 1}, {&y_bad, 1}, 64, std::uint64_t{0}) == 0.0);
}

TEST_CASE("density integrates to one in raw scale") {
  const auto& tr = trained_model();
  const double x = 0.6;
  ConditionalDensityEvaluator ev(tr.model, 800, 4);

  Rng rng(31);
  const Matrix s = sample_conditional(tr.model, {&x, 1}, 3000, rng);
  double lo = s.at(0, 0), hi = s.at(0, 0);
  for (std::size_t i = 1; i < s.rows; ++i) {
    lo = std::min(lo, s.at(i, 0));
    hi = std::max(hi, s.at(i, 0));
  }
  const double pad = 8.0 * tr.model.bandwidth().eps()[0] * tr.model.y_stats.std[0];
  lo -= pad;
  hi += pad;
  const int steps = 2000;
  const double h = (hi - lo) / steps;
  double integral = 0.0;
  for (int i = 0; i <= steps; ++i) {
    const double y = lo + h * i;
    const double f = ev.density({&x, 1}, {&y, 1});
    integral += (i == 0 || i == steps) ? 0.5 * f : f;
  }
  integral *= h;
  CHECK(std::abs(integral - 1.0) < 0.02);
}

TEST_CASE("quantile order statistics, type 7") {
  CHECK(conditional_quantile({1, 2, 3, 4, 5}, 0.5) == 3.0);
  CHECK(conditional_quantile({5, 1, 4, 2, 3}, 0.5) == 3.0);  // order-free
  // limits clamp to the extreme samples
  CHECK(conditional_quantile({1, 2, 3, 4, 5}, 1e-9) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(conditional_quantile({1, 2, 3, 4, 5}, 1.0 - 1e-9) == doctest::Approx(5.0).epsilon(1e-6));
  CHECK_THROWS_AS(conditional_quantile({1, 2}, 0.0), InvalidTau);
  CHECK_THROWS_AS(conditional_quantile({1, 2}, 1.0), InvalidTau);
}

TEST_CASE("empirical quantile of a large normal sample") {
  Rng rng(8);
  std::vector<double> draws(100000);
  for (double& v : draws) v = rng.normal();
  CHECK(std::abs(conditional_quantile(draws, 0.9) - 1.2815515655446004) < 0.02);
}

TEST_CASE("conditional statistics of a degenerate model") {
  auto m = init_model(2, 2, 1, {}, LatentLaw::StandardNormal, KernelFamily::Gaussian, 0.05, 3);
  m.psi_arch.output_activation = Activation::Identity;
  test::make_constant_submodule(m, "phi", 1.0);
  test::make_constant_submodule(m, "psi", 0.0);
  // constant output c: phi = 1, psi row bias differs per output; set via bias
  auto psib = m.params.view("psi.b0");
  psib[0] = 2.5;  // output (1,1) -> coordinate 1
  psib[1] = -1.0;
  Rng rng(4);
  const std::vector<double> x{0.0, 0.0};
  const auto stats = conditional_statistics(m, x, 200, rng);
  CHECK(stats.mean[0] == doctest::Approx(2.5).epsilon(1e-12));
  CHECK(stats.mean[1] == doctest::Approx(-1.0).epsilon(1e-12));
  for (double c : stats.covariance.data) CHECK(std::abs(c) < 1e-20);
  CHECK(stats.quantiles.at(0, 2) == doctest::Approx(2.5).epsilon(1e-12));
}

TEST_CASE("statistics are invariant to sample order") {
  Rng rng(6);
  std::vector<double> sample(500);
  for (double& v : sample) v = rng.normal();
  const auto q1 = conditional_quantiles(sample, std::vector<double>{0.25, 0.5, 0.75});
  std::reverse(sample.begin(), sample.end());
  const auto q2 = conditional_quantiles(sample, std::vector<double>{0.25, 0.5, 0.75});
  for (std::size_t i = 0; i < q1.size(); ++i) CHECK(q1[i] == q2[i]);
}

TEST_CASE("raw-scale sampling equals de-standardized standardized sampling") {
  const auto& tr = trained_model();
  CpfnModel plain = tr.model;  // identical weights, identity stats
  plain.x_stats = ColumnStats::identity(plain.d);
  plain.y_stats = ColumnStats::identity(plain.q);

  const double x = 0.35;
  const double xs = (x - tr.model.x_stats.mean[0]) / tr.model.x_stats.std[0];
  Rng a(17), b(17);
  const Matrix raw = sample_conditional(tr.model, {&x, 1}, 100, a);
  const Matrix std_scale = sample_conditional(plain, {&xs, 1}, 100, b);
  for (std::size_t i = 0; i < raw.rows; ++i) {
    const double manual = std_scale.at(i, 0) * tr.model.y_stats.std[0] + tr.model.y_stats.mean[0];
    CHECK(raw.at(i, 0) == manual);  // bit-exact
  }
}

TEST_CASE("pushforward samples and the density agree") {
  const auto& tr = trained_model();
  const double x = 0.7;
  const int R = 4000;
  ConditionalDensityEvaluator ev(tr.model, R, 12);

  Rng rng(3);
  const std::size_t m = 10000;
  const Matrix s = sample_conditional(tr.model, {&x, 1}, m, rng);

  // smooth the empirical sample with the model's own kernel and compare to
  // the reported density on a grid, allowing 3 x the MC standard error
  const double eps_raw = tr.model.bandwidth().eps()[0] * tr.model.y_stats.std[0];
  const KernelSpec spec{KernelFamily::Gaussian, 1};
  const auto bw = Bandwidth::constant(eps_raw, 1);
  for (double y : {-1.5, -0.5, 0.0, 0.5, 1.5}) {
    double acc = 0.0, acc2 = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      const double v = y - s.at(i, 0);
      const double k = scaled_kernel_eval(spec, bw, {&v, 1});
      acc += k;
      acc2 += k * k;
    }
    const double smoothed = acc / static_cast<double>(m);
    const double var = std::max(0.0, acc2 / m - smoothed * smoothed);
    const double se_smoothed = std::sqrt(var / m);
    const double f = ev.density({&x, 1}, {&y, 1});
    const double se_density = std::sqrt(var / R);  // same integrand family
    CHECK(std::abs(smoothed - f) <= 3.0 * (se_smoothed + se_density) + 1e-6);
  }
}

TEST_CASE("density is nonnegative everywhere") {
  const auto& tr = trained_model();
  ConditionalDensityEvaluator ev(tr.model, 256, 9);
  Rng rng(14);
  for (int rep = 0; rep < 100; ++rep) {
    const double x = rng.uniform01();
    const double y = rng.uniform(-5.0, 5.0);
    CHECK(ev.density({&x, 1}, {&y, 1}) >= 0.0);
  }
}
