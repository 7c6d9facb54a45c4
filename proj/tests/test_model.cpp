#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "cpfn/model.hpp"
#include "cpfn/rng.hpp"
#include "cpfn/training.hpp"
#include "support.hpp"

using namespace cpfn;

TEST_CASE("parameter count follows the layer arithmetic") {
  // two identical submodules, 3 hidden layers of width 50, rank 20:
  // (1*50+50) + (50*50+50)*2 + (50*20+20) per net
  const auto m = init_model(1, 1, 20, {50, 50, 50}, LatentLaw::StandardNormal,
                            KernelFamily::Gaussian, 0.05, 7);
  CHECK(m.network_parameter_count() == 12440);
  CHECK(m.params.size() == 12440 + 1);  // + log bandwidth

  // the benchmark configuration d=4, q=1, rank 50, width 50 has 15650
  // trainable network parameters
  const auto energy = init_model(4, 1, 50, {50, 50, 50}, LatentLaw::StandardNormal,
                                 KernelFamily::Gaussian, 0.05, 7);
  CHECK(energy.network_parameter_count() == 15650);
}

TEST_CASE("seeded initialization is bit-identical") {
  const auto a = init_model(2, 1, 5, {8, 8}, LatentLaw::Uniform01, KernelFamily::Gaussian,
                            0.05, 42);
  const auto b = init_model(2, 1, 5, {8, 8}, LatentLaw::Uniform01, KernelFamily::Gaussian,
                            0.05, 42);
  REQUIRE(a.params.size() == b.params.size());
  for (std::size_t i = 0; i < a.params.size(); ++i)
    CHECK(a.params.values()[i] == b.params.values()[i]);
  const auto c = init_model(2, 1, 5, {8, 8}, LatentLaw::Uniform01, KernelFamily::Gaussian,
                            0.05, 43);
  bool any_diff = false;
  for (std::size_t i = 0; i < a.params.size(); ++i)
    any_diff |= a.params.values()[i] != c.params.values()[i];
  CHECK(any_diff);
}

TEST_CASE("initial bandwidth round trip") {
  const auto m = init_model(1, 1, 4, {6}, LatentLaw::StandardNormal, KernelFamily::Gaussian,
                            0.05, 1);
  CHECK(std::abs(m.bandwidth().eps()[0] - 0.05) < 1e-15);
  CHECK_THROWS_AS(init_model(0, 1, 4, {6}, LatentLaw::StandardNormal, KernelFamily::Gaussian,
                             0.05, 1),
                  InvalidConfig);
  CHECK_THROWS_AS(init_model(1, 1, 4, {6}, LatentLaw::StandardNormal, KernelFamily::Gaussian,
                             -1.0, 1),
                  InvalidConfig);
}

TEST_CASE("mlp forward: identity and zero nets") {
  // zero-hidden-layer degenerate net with identity weights
  NetworkArchitecture arch{2, 2, {}, Activation::Gelu, Activation::Identity};
  std::vector<double> params(arch.parameter_count(), 0.0);
  params[0] = 1.0;  // W = I
  params[3] = 1.0;
  const std::vector<double> in{0.7, -1.2};
  auto out = mlp_forward(arch, params, in);
  CHECK(out[0] == 0.7);
  CHECK(out[1] == -1.2);

  std::fill(params.begin(), params.end(), 0.0);
  out = mlp_forward(arch, params, in);
  CHECK(out[0] == 0.0);
  CHECK(out[1] == 0.0);
}

TEST_CASE("mlp forward matches a hand computation through gelu") {
  // 1 -> 2 -> 1 with handpicked weights; hidden gelu, output identity
  NetworkArchitecture arch{1, 1, {2}, Activation::Gelu, Activation::Identity};
  std::vector<double> params(arch.parameter_count(), 0.0);
  // layer 0: W0 = [0.5; -1.25], b0 = [0.1, 0.2]
  params[0] = 0.5;
  params[1] = -1.25;
  params[2] = 0.1;
  params[3] = 0.2;
  // layer 1: W1 = [2.0, -0.5], b1 = [0.05]
  params[4] = 2.0;
  params[5] = -0.5;
  params[6] = 0.05;

  const double x = 0.8;
  const double h0 = gelu(0.5 * x + 0.1);
  const double h1 = gelu(-1.25 * x + 0.2);
  const double expected = 2.0 * h0 - 0.5 * h1 + 0.05;
  const auto out = mlp_forward(arch, params, {&x, 1});
  CHECK(out[0] == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("combiner with constant stub submodules") {
  auto m = init_model(1, 1, 1, {}, LatentLaw::StandardNormal, KernelFamily::Gaussian, 0.05, 0);
  m.psi_arch.output_activation = Activation::Identity;  // stub wants an exact constant
  test::make_constant_submodule(m, "phi", 2.0);
  test::make_constant_submodule(m, "psi", 3.0);
  const double x = 0.4, u = -1.7;
  CHECK(cpfn_forward(m, {&x, 1}, {&u, 1})[0] == 6.0);

  test::make_constant_submodule(m, "psi", 0.0);
  for (double uu : {-2.0, 0.0, 1.5}) CHECK(cpfn_forward(m, {&x, 1}, {&uu, 1})[0] == 0.0);
}

TEST_CASE("combiner equals the explicit double loop") {
  const auto m = init_model(2, 2, 3, {5}, LatentLaw::StandardNormal, KernelFamily::Gaussian,
                            0.1, 17);
  Rng rng(9);
  for (int rep = 0; rep < 20; ++rep) {
    const std::vector<double> x{rng.normal(), rng.normal()};
    const std::vector<double> u{rng.normal(), rng.normal()};
    const auto out = cpfn_forward(m, x, u);

    const auto phi = mlp_forward(m.phi_arch,
                                 {m.params.data() + m.phi_offset(),
                                  m.phi_arch.parameter_count()},
                                 x);
    const auto psi = mlp_forward(m.psi_arch,
                                 {m.params.data() + m.psi_offset(),
                                  m.psi_arch.parameter_count()},
                                 u);
    for (int j = 0; j < 2; ++j) {
      double acc = 0.0;
      for (int i = 0; i < 3; ++i) acc += phi[static_cast<std::size_t>(i * 2 + j)] *
                                         psi[static_cast<std::size_t>(i * 2 + j)];
      CHECK(std::abs(out[static_cast<std::size_t>(j)] - acc) < 1e-14);
    }
  }
}

TEST_CASE("constant psi makes the output independent of u") {
  auto m = init_model(2, 2, 4, {6, 6}, LatentLaw::StandardNormal, KernelFamily::Gaussian, 0.05,
                      23);
  test::freeze_psi_input(m);
  Rng rng(5);
  const std::vector<double> x{0.3, -0.9};
  const std::vector<double> u1{rng.normal(), rng.normal()};
  const std::vector<double> u2{rng.normal(), rng.normal()};
  const auto a = cpfn_forward(m, x, u1);
  const auto b = cpfn_forward(m, x, u2);
  CHECK(a[0] == b[0]);  // exact equality
  CHECK(a[1] == b[1]);
}

TEST_CASE("forward stays finite on a bounded box") {
  const auto m = init_model(2, 1, 8, {16, 16}, LatentLaw::StandardNormal,
                            KernelFamily::Gaussian, 0.05, 3);
  Rng rng(11);
  double lipschitz = 0.0;
  for (int rep = 0; rep < 200; ++rep) {
    const std::vector<double> x{rng.uniform(-10.0, 10.0), rng.uniform(-10.0, 10.0)};
    const std::vector<double> u{rng.uniform(-10.0, 10.0)};
    const auto out = cpfn_forward(m, x, u);
    REQUIRE(std::isfinite(out[0]));
    std::vector<double> u2{u[0] + 1e-4};
    const auto out2 = cpfn_forward(m, x, u2);
    lipschitz = std::max(lipschitz, std::abs(out2[0] - out[0]) / 1e-4);
  }
  CHECK(std::isfinite(lipschitz));
}

TEST_CASE("tape forward agrees with the plain forward") {
  const auto m = init_model(2, 2, 4, {7, 5}, LatentLaw::StandardNormal, KernelFamily::Gaussian,
                            0.2, 29);
  Rng rng(41);
  const std::vector<double> x{rng.normal(), rng.normal()};
  const std::vector<double> u{rng.normal(), rng.normal()};
  const auto plain = cpfn_forward(m, x, u);

  ad::Tape tape(m.params);
  auto run_mlp = [&](const NetworkArchitecture& arch, std::size_t base, ad::Var in) {
    auto layers = mlp_layout(arch, base);
    ad::Var h = in;
    for (std::size_t k = 0; k < layers.size(); ++k) {
      h = tape.affine(h, layers[k].w, layers[k].b, layers[k].out);
      const bool last = k + 1 == layers.size();
      if ((last ? arch.output_activation : arch.hidden_activation) == Activation::Gelu)
        h = tape.gelu(h);
    }
    return h;
  };
  const auto phi = run_mlp(m.phi_arch, m.phi_offset(), tape.input(x));
  const auto psi = run_mlp(m.psi_arch, m.psi_offset(), tape.input(u));
  const auto out = tape.rank_combine(phi, psi, m.rank, m.q);
  const auto vals = tape.values(out);
  for (int j = 0; j < m.q; ++j)
    CHECK(std::abs(vals[static_cast<std::size_t>(j)] - plain[static_cast<std::size_t>(j)]) <
          1e-13);
}

TEST_CASE("serialization round trip is bit exact") {
  auto m = init_model(3, 2, 6, {10, 10}, LatentLaw::Uniform01, KernelFamily::Epanechnikov,
                      0.07, 99);
  m.y_transform = ResponseTransform::Log1p;
  m.x_stats.mean = {0.1, -0.2, 0.3};
  m.x_stats.std = {1.1, 0.9, 2.0};
  m.y_stats.mean = {0.5, -0.5};
  m.y_stats.std = {1.5, 0.7};
  m.config_hash = "deadbeef00000000";

  const std::string bytes = serialize_model(m);
  const CpfnModel back = deserialize_model(bytes);
  CHECK(serialize_model(back) == bytes);
  REQUIRE(back.params.size() == m.params.size());
  for (std::size_t i = 0; i < m.params.size(); ++i)
    CHECK(back.params.values()[i] == m.params.values()[i]);
  CHECK(back.y_transform == ResponseTransform::Log1p);
  CHECK(back.latent == LatentLaw::Uniform01);
  CHECK(back.kernel.family == KernelFamily::Epanechnikov);
}

TEST_CASE("corrupt model streams are rejected") {
  const auto m = init_model(1, 1, 2, {4}, LatentLaw::StandardNormal, KernelFamily::Gaussian,
                            0.05, 1);
  const std::string bytes = serialize_model(m);
  CHECK_THROWS_AS(deserialize_model(bytes.substr(0, bytes.size() / 2)), CorruptModel);

  // flip one parameter digit: checksum must catch it
  std::string tampered = bytes;
  const auto pos = tampered.find("\"values\"");
  REQUIRE(pos != std::string::npos);
  for (std::size_t i = pos; i < tampered.size(); ++i) {
    if (tampered[i] == '7') {
      tampered[i] = '3';
      break;
    }
    if (tampered[i] == '3') {
      tampered[i] = '7';
      break;
    }
  }
  CHECK_THROWS_AS(deserialize_model(tampered), CorruptModel);
}

TEST_CASE("golden model file stays readable") {
  const std::string path = std::string(CPFN_TEST_DATA_DIR) + "/golden_model_v1.json";
  const CpfnModel m = read_model_file(path);
  CHECK(m.d == 1);
  CHECK(m.q == 1);
  CHECK(m.rank == 3);
  const double x = 0.25, u = 0.5;
  const auto out = cpfn_forward(m, {&x, 1}, {&u, 1});
  // frozen at the time the golden file was produced
  CHECK(out[0] == doctest::Approx(CPFN_GOLDEN_FORWARD).epsilon(1e-12));
}
