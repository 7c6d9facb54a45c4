#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "cpfn/inference.hpp"
#include "cpfn/kernels.hpp"
#include "cpfn/training.hpp"
#include "support.hpp"

using namespace cpfn;

namespace {

Dataset toy_dataset(std::size_t n, int d, int q, Rng& rng) {
  Dataset data;
  data.X = Matrix(n, static_cast<std::size_t>(d));
  data.Y = Matrix(n, static_cast<std::size_t>(q));
  for (auto& v : data.X.data) v = rng.normal();
  for (auto& v : data.Y.data) v = rng.normal();
  return data;
}

}  // namespace

TEST_CASE("standardize_fit basics") {
  Dataset data;
  data.X = Matrix(2, 1);
  data.X.at(0, 0) = 0.0;
  data.X.at(1, 0) = 2.0;
  data.Y = Matrix(2, 1);
  data.Y.at(0, 0) = 5.0;
  data.Y.at(1, 0) = 5.0;
  const auto s = standardize_fit(data);
  CHECK(s.x.mean[0] == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(s.x.std[0] == doctest::Approx(std::sqrt(2.0)).epsilon(1e-15));
  // constant column: clamped to 1 and reported
  CHECK(s.y.mean[0] == 5.0);
  CHECK(s.y.std[0] == 1.0);
  REQUIRE(s.clamped_y.size() == 1);
  CHECK(s.clamped_y[0] == 0);
  CHECK(s.clamped_x.empty());
}

TEST_CASE("standardize_fit on a large standard normal sample") {
  Rng rng(12);
  Dataset data = toy_dataset(10000, 1, 1, rng);
  const auto s = standardize_fit(data);
  CHECK(std::abs(s.x.mean[0]) < 0.05);
  CHECK(std::abs(s.x.std[0] - 1.0) < 0.05);
}

TEST_CASE("loss of a perfectly matched stub model") {
  // all weights and biases zero: the pushforward is identically zero
  auto m = init_model(1, 1, 3, {4}, LatentLaw::StandardNormal, KernelFamily::Gaussian, 0.05, 1);
  for (double& v : m.params.values()) v = 0.0;
  m.set_bandwidth(Bandwidth::constant(0.05, 1));

  Matrix Xs(1, 1), Ys(1, 1);
  Xs.at(0, 0) = 0.3;
  Ys.at(0, 0) = 0.0;
  Rng rng(2);
  const double loss = cpfn_loss(m, Xs, Ys, 8, 1e-300, rng);
  // -log of the scaled kernel at zero
  CHECK(loss == doctest::Approx(-2.0767937403493183).epsilon(1e-12));
}

TEST_CASE("delta floor when every kernel term vanishes") {
  auto m = init_model(1, 1, 3, {4}, LatentLaw::StandardNormal, KernelFamily::Epanechnikov,
                      0.05, 1);
  for (double& v : m.params.values()) v = 0.0;
  m.set_bandwidth(Bandwidth::constant(0.05, 1));
  Matrix Xs(2, 1), Ys(2, 1);
  Ys.at(0, 0) = 10.0;  // far outside the compact support
  Ys.at(1, 0) = -3.0;
  Rng rng(2);
  const double loss = cpfn_loss(m, Xs, Ys, 5, 1e-15, rng);
  CHECK(loss == doctest::Approx(34.538776394910684).epsilon(1e-12));
}

TEST_CASE("loss matches a straight-line reimplementation") {
  const auto m = init_model(2, 2, 3, {5, 4}, LatentLaw::StandardNormal, KernelFamily::Gaussian,
                            0.3, 5);
  Rng rng(8);
  Matrix Xs(3, 2), Ys(3, 2);
  for (auto& v : Xs.data) v = rng.normal();
  for (auto& v : Ys.data) v = 0.4 * rng.normal();
  const int R = 4;
  const double delta = 1e-10;
  Rng drng(3);
  const auto draws = draw_collocation(drng, 3, R, 2, m.latent);

  // independent scalar-code oracle: its own forward pass and kernel formula
  auto oracle_mlp = [&](const NetworkArchitecture& arch, std::size_t base,
                        const std::vector<double>& in) {
    std::vector<double> cur = in;
    const auto dims = arch.layer_dims();
    std::size_t off = base;
    for (std::size_t k = 1; k < dims.size(); ++k) {
      std::vector<double> next(static_cast<std::size_t>(dims[k]), 0.0);
      for (int o = 0; o < dims[k]; ++o) {
        double acc = 0.0;
        for (int i = 0; i < dims[k - 1]; ++i)
          acc += m.params.values()[off + static_cast<std::size_t>(o) * dims[k - 1] + i] *
                 cur[static_cast<std::size_t>(i)];
        next[static_cast<std::size_t>(o)] = acc;
      }
      off += static_cast<std::size_t>(dims[k - 1]) * dims[k];
      for (int o = 0; o < dims[k]; ++o) next[static_cast<std::size_t>(o)] += m.params.values()[off + o];
      off += static_cast<std::size_t>(dims[k]);
      const bool last = k + 1 == dims.size();
      if (!last || arch.output_activation == Activation::Gelu)
        for (double& v : next) v = v * (0.5 * std::erfc(-v * 0.7071067811865476));
      cur = std::move(next);
    }
    return cur;
  };
  const double eps = std::exp(m.params.view("log_eps")[0]);
  double oracle = 0.0;
  for (std::size_t i = 0; i < 3; ++i) {
    const auto phi = oracle_mlp(m.phi_arch, m.phi_offset(),
                                {Xs.at(i, 0), Xs.at(i, 1)});
    double sum_k = 0.0;
    for (int j = 0; j < R; ++j) {
      const std::vector<double> u{draws[i * 8 + 0 * R + j], draws[i * 8 + 1 * R + j]};
      const auto psi = oracle_mlp(m.psi_arch, m.psi_offset(), u);
      double sq = 0.0;
      for (int k = 0; k < 2; ++k) {
        double out = 0.0;
        for (int r = 0; r < 3; ++r) out += phi[static_cast<std::size_t>(r * 2 + k)] *
                                           psi[static_cast<std::size_t>(r * 2 + k)];
        const double v = (Ys.at(i, static_cast<std::size_t>(k)) - out) / eps;
        sq += v * v;
      }
      sum_k += std::exp(-0.5 * sq) / (2.0 * 3.14159265358979323846 * eps * eps);
    }
    oracle += std::log(delta + sum_k / R);
  }
  oracle = -oracle / 3.0;

  const double lib_plain = cpfn_loss_at(m, Xs, Ys, draws, R, delta);
  const double lib_tape = cpfn_loss_batched(m, Xs, Ys, draws, R, delta);
  const double lib_grad_value = loss_gradient_at(m, Xs, Ys, draws, R, delta).value;
  CHECK(lib_plain == doctest::Approx(oracle).epsilon(1e-12));
  CHECK(lib_tape == doctest::Approx(oracle).epsilon(1e-12));
  CHECK(lib_grad_value == doctest::Approx(oracle).epsilon(1e-12));
}

TEST_CASE("adam single and double steps") {
  AdamState st = AdamState::zeros(1);
  std::vector<double> p{1.0};
  std::vector<double> g{1.0};
  adam_step(p, g, st);
  CHECK(std::abs((1.0 - p[0]) - 1e-3) < 1e-6 * 1e-3);
  CHECK(st.step_count == 1);

  // zero gradient leaves parameters unchanged (moments are already zero)
  AdamState st0 = AdamState::zeros(2);
  std::vector<double> p0{0.5, -0.5};
  std::vector<double> g0{0.0, 0.0};
  adam_step(p0, g0, st0);
  CHECK(p0[0] == 0.5);
  CHECK(p0[1] == -0.5);
  CHECK(st0.step_count == 1);

  // two steps with constant gradient against a hand-rolled trace
  const double lr = 1e-3, b1 = 0.9, b2 = 0.999, eh = 1e-8, grad = 0.7;
  double m = 0.0, v = 0.0, x = 2.0;
  for (int t = 1; t <= 2; ++t) {
    m = b1 * m + (1 - b1) * grad;
    v = b2 * v + (1 - b2) * grad * grad;
    const double mhat = m / (1 - std::pow(b1, t));
    const double vhat = v / (1 - std::pow(b2, t));
    x -= lr * mhat / (std::sqrt(vhat) + eh);
  }
  AdamState st2 = AdamState::zeros(1);
  std::vector<double> p2{2.0};
  std::vector<double> g2{grad};
  adam_step(p2, g2, st2, lr, b1, b2, eh);
  adam_step(p2, g2, st2, lr, b1, b2, eh);
  CHECK(p2[0] == doctest::Approx(x).epsilon(1e-12));
}

TEST_CASE("loss gradient against finite differences") {
  const auto m = init_model(1, 1, 4, {6}, LatentLaw::StandardNormal, KernelFamily::Gaussian,
                            0.5, 3);
  Rng rng(4);
  Matrix Xs(5, 1), Ys(5, 1);
  for (auto& v : Xs.data) v = rng.normal();
  for (auto& v : Ys.data) v = 0.3 * rng.normal();
  Rng drng(6);
  const auto draws = draw_collocation(drng, 5, 3, 1, m.latent);
  const auto g = loss_gradient_at(m, Xs, Ys, draws, 3, 1e-8);

  const ad::Program prog = [&](ad::Tape& t) -> ad::Var {
    ad::Var acc{};
    for (std::size_t i = 0; i < 5; ++i) {
      const auto term =
          loss_term_program(t, m, Xs.row(i), Ys.row(i), {draws.data() + i * 3, 3}, 3, 1e-8);
      acc = acc.valid() ? t.add(acc, term) : term;
    }
    return t.scale(acc, -1.0 / 5.0);
  };
  const auto fd = finite_difference_gradient(prog, m.params, 1e-5);
  CHECK(max_relative_error(g.gradient, fd) < 1e-5);
}

TEST_CASE("bandwidth gradient masking") {
  const auto m = init_model(1, 1, 3, {5}, LatentLaw::StandardNormal, KernelFamily::Gaussian,
                            0.4, 3);
  Rng rng(4);
  Matrix Xs(4, 1), Ys(4, 1);
  for (auto& v : Xs.data) v = rng.normal();
  for (auto& v : Ys.data) v = 0.3 * rng.normal();
  Rng d1(9), d2(9);
  const auto draws = draw_collocation(d1, 4, 3, 1, m.latent);

  const auto g_on = loss_gradient_at(m, Xs, Ys, draws, 3, 1e-10, true);
  const auto g_off = loss_gradient_at(m, Xs, Ys, draws, 3, 1e-10, false);
  const std::size_t off = m.log_eps_offset();
  CHECK(g_on.gradient[off] != 0.0);
  CHECK(g_off.gradient[off] == 0.0);
  for (std::size_t i = 0; i < off; ++i) CHECK(g_on.gradient[i] == g_off.gradient[i]);
}

TEST_CASE("doubling delta shrinks the gradient when kernels sit below the floor") {
  auto m = init_model(1, 1, 2, {4}, LatentLaw::StandardNormal, KernelFamily::Gaussian, 0.05, 7);
  Matrix Xs(3, 1), Ys(3, 1);
  for (std::size_t i = 0; i < 3; ++i) {
    Xs.at(i, 0) = 0.1 * static_cast<double>(i);
    Ys.at(i, 0) = 0.49;  // kernel mass ~1e-20 at eps=0.05: below delta=1e-15
  }
  Rng d1(3), d2(3);
  const auto draws = draw_collocation(d1, 3, 4, 1, m.latent);
  const auto g1 = loss_gradient_at(m, Xs, Ys, draws, 4, 1e-15);
  const auto g2 = loss_gradient_at(m, Xs, Ys, draws, 4, 2e-15);
  double sup1 = 0.0, sup2 = 0.0;
  for (std::size_t i = 0; i < m.log_eps_offset(); ++i) {
    sup1 = std::max(sup1, std::abs(g1.gradient[i]));
    sup2 = std::max(sup2, std::abs(g2.gradient[i]));
  }
  CHECK(sup1 > 0.0);
  CHECK(sup2 < sup1);
}

TEST_CASE("training on a constant response collapses the spread") {
  Rng rng(15);
  Dataset data;
  data.X = Matrix(200, 1);
  data.Y = Matrix(200, 1, 0.0);  // Y identically zero
  for (auto& v : data.X.data) v = rng.uniform01();

  ModelSpec spec;
  spec.rank = 4;
  spec.hidden_widths = {12};
  TrainConfig cfg;
  cfg.epochs = 300;
  cfg.collocation = 8;
  cfg.seed = 4;
  cfg.validation_fraction = 0.1;
  const auto result = train(data, spec, cfg);
  REQUIRE(!result.aborted_non_finite);
  // constant column warning surfaced
  REQUIRE(!result.warnings.empty());

  Rng srng(77);
  const double x = 0.5;
  const Matrix samples = sample_conditional(result.model, {&x, 1}, 400, srng);
  double mean = 0.0;
  for (std::size_t i = 0; i < samples.rows; ++i) mean += samples.at(i, 0);
  mean /= static_cast<double>(samples.rows);
  double sd = 0.0;
  for (std::size_t i = 0; i < samples.rows; ++i) {
    const double d = samples.at(i, 0) - mean;
    sd += d * d;
  }
  sd = std::sqrt(sd / static_cast<double>(samples.rows - 1));
  CHECK(sd < 0.1);
  CHECK(std::abs(mean) < 0.2);
}

TEST_CASE("config validation") {
  TrainConfig cfg;
  cfg.epochs = 0;
  CHECK_THROWS_AS(cfg.validate(), InvalidConfig);
  cfg = TrainConfig{};
  cfg.delta = 0.0;
  CHECK_THROWS_AS(cfg.validate(), InvalidConfig);
  cfg = TrainConfig{};
  cfg.validation_fraction = 1.0;
  CHECK_THROWS_AS(cfg.validate(), InvalidConfig);
}

TEST_CASE("identical config and seed reproduce the model bit for bit") {
  Rng rng(21);
  Dataset data = toy_dataset(80, 1, 1, rng);
  ModelSpec spec;
  spec.rank = 3;
  spec.hidden_widths = {8};
  TrainConfig cfg;
  cfg.epochs = 40;
  cfg.collocation = 6;
  cfg.seed = 5;
  const auto a = train(data, spec, cfg);
  const auto b = train(data, spec, cfg);
  CHECK(serialize_model(a.model) == serialize_model(b.model));
  // and the traces agree exactly
  REQUIRE(a.trace.size() == b.trace.size());
  for (std::size_t e = 0; e < a.trace.size(); ++e) {
    CHECK(a.trace[e].train_loss == b.trace[e].train_loss);
    CHECK(a.trace[e].val_loss == b.trace[e].val_loss);
  }
}

TEST_CASE("best-state retention picks the lowest recorded validation loss") {
  Rng rng(33);
  Dataset data = toy_dataset(120, 1, 1, rng);
  ModelSpec spec;
  spec.rank = 3;
  spec.hidden_widths = {8};
  TrainConfig cfg;
  cfg.epochs = 60;
  cfg.collocation = 6;
  cfg.seed = 9;
  cfg.validation_fraction = 0.2;
  const auto res = train(data, spec, cfg);
  REQUIRE(!res.trace.empty());
  double best = res.trace[0].val_loss;
  for (const auto& t : res.trace) best = std::min(best, t.val_loss);
  CHECK(res.best_val_loss == best);
  CHECK(res.best_val_loss <= res.trace.back().val_loss);
  CHECK(res.best_epoch >= 0);
}

TEST_CASE("loss decreases over training for almost every seed") {
  int improved = 0;
  const int runs = 20;
  for (int s = 0; s < runs; ++s) {
    Rng rng(100 + static_cast<std::uint64_t>(s));
    // heteroscedastic synthetic data, small paper-shaped net
    Dataset data;
    data.X = Matrix(250, 1);
    data.Y = Matrix(250, 1);
    for (std::size_t i = 0; i < 250; ++i) {
      const double x = rng.uniform01();
      data.X.at(i, 0) = x;
      data.Y.at(i, 0) = 10.0 * x * (x - 0.5) * (1.5 - x) + 0.3 * (1.3 - x) * rng.normal();
    }
    ModelSpec spec;
    spec.rank = 6;
    spec.hidden_widths = {16, 16};
    TrainConfig cfg;
    cfg.epochs = 100;
    cfg.collocation = 10;
    cfg.seed = static_cast<std::uint64_t>(s);
    cfg.validation_fraction = 0.0;
    const auto res = train(data, spec, cfg);
    if (res.trace.back().train_loss < res.trace.front().train_loss) ++improved;
  }
  CHECK(improved >= 19);
}

TEST_CASE("delta floor bounds the loss from above") {
  Rng rng(55);
  for (int rep = 0; rep < 30; ++rep) {
    const auto m = init_model(1, 1, 2, {5}, LatentLaw::StandardNormal, KernelFamily::Gaussian,
                              rng.uniform(0.05, 0.5), rng.raw());
    Matrix Xs(6, 1), Ys(6, 1);
    for (auto& v : Xs.data) v = rng.normal();
    for (auto& v : Ys.data) v = rng.normal();
    const double delta = 1e-12;
    Rng drng(rep);
    const double loss = cpfn_loss(m, Xs, Ys, 4, delta, drng);
    CHECK(loss <= -std::log(delta) + 1e-9);
  }
}

TEST_CASE("exploding updates abort with the last finite snapshot") {
  Rng rng(3);
  Dataset data = toy_dataset(50, 1, 1, rng);
  ModelSpec spec;
  spec.rank = 2;
  spec.hidden_widths = {4};
  TrainConfig cfg;
  cfg.epochs = 50;
  cfg.collocation = 4;
  cfg.seed = 1;
  cfg.learning_rate = 1e200;  // weight products overflow in the next forward pass
  const auto res = train(data, spec, cfg);
  CHECK(res.aborted_non_finite);
  CHECK(!res.diagnostic.empty());
  res.model.params.check_finite();  // snapshot stayed finite
}

TEST_CASE("trained bandwidth stays positive and finite") {
  Rng rng(71);
  Dataset data = toy_dataset(150, 1, 1, rng);
  ModelSpec spec;
  spec.rank = 4;
  spec.hidden_widths = {10};
  TrainConfig cfg;
  cfg.epochs = 120;
  cfg.collocation = 8;
  cfg.seed = 2;
  const auto res = train(data, spec, cfg);
  for (double e : res.model.bandwidth().eps()) {
    CHECK(e > 0.0);
    CHECK(std::isfinite(e));
  }
}
