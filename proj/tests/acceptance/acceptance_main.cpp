// Acceptance suite: one pass/fail line per criterion, nonzero exit if any
// checked criterion fails. Run a subset with --only 1,2,3.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cpfn/config.hpp"
#include "cpfn/harness.hpp"
#include "cpfn/inference.hpp"
#include "cpfn/kcde.hpp"
#include "cpfn/metrics.hpp"
#include "cpfn/parallel.hpp"
#include "cpfn/simulators.hpp"
#include "cpfn/training.hpp"

using namespace cpfn;
namespace fs = std::filesystem;
using clock_type = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  bool skipped = false;
  std::string detail;
};

double seconds_since(clock_type::time_point t0) {
  return std::chrono::duration<double>(clock_type::now() - t0).count();
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

// ---------------------------------------------------------------------------
// 1. Gradient fidelity
// ---------------------------------------------------------------------------

Outcome criterion_gradients() {
  const auto report = gradcheck(50, 20250811, 1e-5, resolve_threads(0));
  Outcome o;
  o.pass = report.worst < 1e-5;
  o.detail = "max rel err " + fmt(report.worst) + " over 50 instances (tolerance 1e-5)";
  return o;
}

// ---------------------------------------------------------------------------
// 2. Density normalization
// ---------------------------------------------------------------------------

double density_integral(const CpfnModel& model, double x) {
  // integration grid from the sampled range, padded by 8 bandwidths, built
  // uniformly in the transformed scale and mapped back
  Rng rng(99);
  const Matrix s = sample_conditional(model, {&x, 1}, 2000, rng);
  auto to_t = [&](double y) {
    double v = model.y_transform == ResponseTransform::Log1p ? std::log1p(y) : y;
    return (v - model.y_stats.mean[0]) / model.y_stats.std[0];
  };
  double lo_t = to_t(s.at(0, 0)), hi_t = lo_t;
  for (std::size_t i = 1; i < s.rows; ++i) {
    lo_t = std::min(lo_t, to_t(s.at(i, 0)));
    hi_t = std::max(hi_t, to_t(s.at(i, 0)));
  }
  const double pad = 8.0 * model.bandwidth().eps()[0];
  lo_t -= pad;
  hi_t += pad;

  ConditionalDensityEvaluator ev(model, 1000, 7);
  const int steps = 2500;
  std::vector<double> ys(static_cast<std::size_t>(steps) + 1);
  for (int i = 0; i <= steps; ++i) {
    const double t = lo_t + (hi_t - lo_t) * i / steps;
    const double v = t * model.y_stats.std[0] + model.y_stats.mean[0];
    ys[static_cast<std::size_t>(i)] =
        model.y_transform == ResponseTransform::Log1p ? std::expm1(v) : v;
  }
  double integral = 0.0;
  double prev_f = ev.density({&x, 1}, {&ys[0], 1});
  for (int i = 1; i <= steps; ++i) {
    const double f = ev.density({&x, 1}, {&ys[static_cast<std::size_t>(i)], 1});
    integral += 0.5 * (prev_f + f) *
                (ys[static_cast<std::size_t>(i)] - ys[static_cast<std::size_t>(i - 1)]);
    prev_f = f;
  }
  return integral;
}

Outcome criterion_density_normalization() {
  Outcome o;
  o.pass = true;
  double worst = 0.0;

  // ten quick trained models (two on a log1p response)
  for (int s = 0; s < 10; ++s) {
    Rng gen(400 + static_cast<std::uint64_t>(s));
    Dataset data = UnivariateProcess{}.generate(150, gen);
    if (s >= 8) {
      for (double& v : data.Y.data) v = std::log1p(std::expm1(v));  // stays y, tags transform
      data.y_transform = ResponseTransform::Log1p;
    }
    ModelSpec spec;
    spec.rank = 4;
    spec.hidden_widths = {12};
    TrainConfig cfg;
    cfg.epochs = 150;
    cfg.collocation = 8;
    cfg.seed = static_cast<std::uint64_t>(s);
    const auto tr = train(data, spec, cfg);
    const double integral = density_integral(tr.model, 0.3 + 0.04 * s);
    worst = std::max(worst, std::abs(integral - 1.0));
  }

  // ten random-weight models with assorted shapes and stats
  Rng rng(31);
  for (int s = 0; s < 10; ++s) {
    auto model = init_model(1 + static_cast<int>(rng.below(3)), 1,
                            1 + static_cast<int>(rng.below(6)),
                            {4 + static_cast<int>(rng.below(8))},
                            rng.bernoulli(0.5) ? LatentLaw::StandardNormal : LatentLaw::Uniform01,
                            KernelFamily::Gaussian, rng.uniform(0.05, 0.6), rng.raw());
    model.y_stats.mean = {rng.uniform(-1.0, 1.0)};
    model.y_stats.std = {rng.uniform(0.5, 2.0)};
    std::vector<double> x(static_cast<std::size_t>(model.d), 0.0);
    // reuse the 1-d integration with the first covariate coordinate
    Rng sr(99);
    const Matrix samples = sample_conditional(model, x, 2000, sr);
    double lo = samples.at(0, 0), hi = lo;
    for (std::size_t i = 1; i < samples.rows; ++i) {
      lo = std::min(lo, samples.at(i, 0));
      hi = std::max(hi, samples.at(i, 0));
    }
    const double pad = 8.0 * model.bandwidth().eps()[0] * model.y_stats.std[0];
    lo -= pad;
    hi += pad;
    ConditionalDensityEvaluator ev(model, 1000, 7);
    const int steps = 2500;
    const double h = (hi - lo) / steps;
    double integral = 0.0;
    for (int i = 0; i <= steps; ++i) {
      const double y = lo + h * i;
      const double f = ev.density(x, {&y, 1});
      integral += (i == 0 || i == steps) ? 0.5 * f : f;
    }
    integral *= h;
    worst = std::max(worst, std::abs(integral - 1.0));
  }

  o.pass = worst <= 0.02;
  o.detail = "worst |integral - 1| = " + fmt(worst) + " over 20 models (tolerance 0.02)";
  return o;
}

// ---------------------------------------------------------------------------
// 3. Optimal transport correctness
// ---------------------------------------------------------------------------

Outcome criterion_ot() {
  Rng rng(55);
  double worst_2d = 0.0;
  for (int rep = 0; rep < 200; ++rep) {
    const std::size_t m = 2 + rng.below(6);  // up to 7 points
    Matrix a(m, 2), b(m, 2);
    for (auto& v : a.data) v = rng.normal();
    for (auto& v : b.data) v = rng.normal();
    const double solver = w1_assignment(a, b).cost;

    std::vector<int> perm(m);
    std::iota(perm.begin(), perm.end(), 0);
    double brute = std::numeric_limits<double>::infinity();
    do {
      double acc = 0.0;
      for (std::size_t i = 0; i < m; ++i) {
        const double dx = a.at(i, 0) - b.at(static_cast<std::size_t>(perm[i]), 0);
        const double dy = a.at(i, 1) - b.at(static_cast<std::size_t>(perm[i]), 1);
        acc += std::sqrt(dx * dx + dy * dy);
      }
      brute = std::min(brute, acc / static_cast<double>(m));
    } while (std::next_permutation(perm.begin(), perm.end()));
    worst_2d = std::max(worst_2d, std::abs(solver - brute));
  }

  double worst_1d = 0.0;
  for (int rep = 0; rep < 200; ++rep) {
    const std::size_t m = 2 + rng.below(40);
    Matrix a(m, 1), b(m, 1);
    for (auto& v : a.data) v = rng.normal();
    for (auto& v : b.data) v = rng.normal();
    worst_1d = std::max(
        worst_1d, std::abs(w1_sorted_1d(a.data, b.data) - w1_assignment(a, b).cost));
  }

  Outcome o;
  o.pass = worst_2d < 1e-12 && worst_1d < 1e-10;
  o.detail = "assignment vs exhaustive gap " + fmt(worst_2d) + " (200 runs, m<=7); sorted vs " +
             "assignment gap " + fmt(worst_1d) + " (200 runs)";
  return o;
}

// ---------------------------------------------------------------------------
// 4 + 5. Univariate benchmark and consistency trend (one shared study)
// ---------------------------------------------------------------------------

struct StudyNumbers {
  double awd250 = 0.0, awd500 = 0.0, awd1000 = 0.0, aqe25 = 0.0;
  bool ok = false;
  std::string error;
};

const StudyNumbers& shared_univariate_study() {
  static const StudyNumbers numbers = [] {
    StudyNumbers out;
    SimStudyConfig cfg;
    cfg.process = SimProcess::Univariate;
    cfg.n_list = {250, 500, 1000};
    cfg.replicates = 10;
    cfg.spec.rank = 20;
    cfg.spec.hidden_widths = {50, 50, 50};
    cfg.spec.latent = LatentLaw::StandardNormal;
    cfg.spec.kernel = KernelFamily::Gaussian;
    cfg.train.epochs = 3000;
    cfg.train.collocation = 30;
    cfg.train.delta = 1e-15;
    cfg.train.eps0 = {0.05};
    cfg.train.validation_fraction = 0.1;
    cfg.run_kcde = false;
    cfg.r_x = 1000;
    cfg.r_tau = 100;
    cfg.r_y = 1000;
    cfg.seed = 90125;
    cfg.threads = 0;
    try {
      const auto result = run_sim_study(cfg);
      for (const auto& cell : result.cells)
        if (cell.failed) {
          out.error = "replicate failed: " + cell.error;
          return out;
        }
      for (const auto& agg : result.aggregates) {
        if (agg.method != "cpfn") continue;
        if (agg.n == 250) out.awd250 = agg.metrics.at("awd");
        if (agg.n == 500) out.awd500 = agg.metrics.at("awd");
        if (agg.n == 1000) {
          out.awd1000 = agg.metrics.at("awd");
          out.aqe25 = agg.metrics.at("aqe_0.25");
        }
      }
      out.ok = true;
    } catch (const std::exception& e) {
      out.error = e.what();
    }
    return out;
  }();
  return numbers;
}

Outcome criterion_univariate_benchmark() {
  const auto& s = shared_univariate_study();
  Outcome o;
  if (!s.ok) {
    o.detail = "study failed: " + s.error;
    return o;
  }
  const bool awd_ok = s.awd1000 >= 0.027 && s.awd1000 <= 0.075;
  const bool aqe_ok = s.aqe25 <= 0.051;
  o.pass = awd_ok && aqe_ok;
  o.detail = "mean AWD(n=1000) = " + fmt(s.awd1000) + " (band [0.027, 0.075]); mean AQE(0.25) = " +
             fmt(s.aqe25) + " (<= 0.051)";
  return o;
}

Outcome criterion_consistency_trend() {
  const auto& s = shared_univariate_study();
  Outcome o;
  if (!s.ok) {
    o.detail = "study failed: " + s.error;
    return o;
  }
  o.pass = s.awd250 > s.awd500 && s.awd500 > s.awd1000;
  o.detail = "mean AWD " + fmt(s.awd250) + " (n=250) > " + fmt(s.awd500) + " (n=500) > " +
             fmt(s.awd1000) + " (n=1000)";
  return o;
}

// ---------------------------------------------------------------------------
// 6. Multivariate dominance
// ---------------------------------------------------------------------------

Outcome criterion_multivariate() {
  SimStudyConfig cfg;
  cfg.process = SimProcess::Multivariate;
  cfg.n_list = {5000};
  cfg.replicates = 1;
  cfg.spec.rank = 50;
  cfg.spec.hidden_widths = {50, 50, 50};
  cfg.train.epochs = 2000;
  cfg.train.collocation = 100;
  cfg.train.delta = 1e-15;
  cfg.train.eps0 = {0.05, 0.05};
  cfg.train.validation_fraction = 0.1;
  cfg.r_x = 30;
  cfg.r_y_assignment = 200;
  cfg.seed = 777;
  cfg.threads = 0;

  Outcome o;
  const auto result = run_sim_study(cfg);
  double cpfn_awd = -1.0, kcde_awd = -1.0, floor = -1.0;
  for (const auto& cell : result.cells) {
    if (cell.failed) {
      o.detail = "replicate failed: " + cell.error;
      return o;
    }
    if (cell.method == "cpfn") {
      cpfn_awd = cell.metrics.at("awd");
      floor = cell.metrics.at("noise_floor");
    }
    if (cell.method == "kcde") kcde_awd = cell.metrics.at("awd");
  }
  const bool dominance = cpfn_awd < kcde_awd;
  const bool near_floor = cpfn_awd < 2.0 * floor + 0.4;
  o.pass = dominance && near_floor;
  o.detail = "AWD cpfn " + fmt(cpfn_awd) + " vs kcde " + fmt(kcde_awd) + "; noise floor " +
             fmt(floor) + " (bound " + fmt(2.0 * floor + 0.4) + ")";
  return o;
}

// ---------------------------------------------------------------------------
// 7. Acceptance-rejection correctness
// ---------------------------------------------------------------------------

Outcome criterion_acceptance_rejection() {
  Outcome o;
  // uniform target baked in: acceptance rate must sit at 1/1.1
  const std::vector<double> lo{-2.0}, hi{3.0};
  const double g = 1.0 / 5.0;
  Rng rng(8);
  const auto res = accept_reject_sample(
      [&](std::span<const double>) { return g; }, g, lo, hi, 10000, rng);
  const double rate = 10000.0 / static_cast<double>(res.trials);
  const bool rate_ok = std::abs(rate - 1.0 / 1.1) < 0.02;

  // 1D KS check of KCDE acceptance-rejection draws vs the numerically
  // integrated target CDF at alpha = 0.01
  Rng gen(12);
  Dataset data;
  data.X = Matrix(150, 1);
  data.Y = Matrix(150, 1);
  for (std::size_t i = 0; i < 150; ++i) {
    data.X.at(i, 0) = gen.normal();
    data.Y.at(i, 0) = 0.7 * data.X.at(i, 0) + 0.5 * gen.normal();
  }
  const auto model = kcde_fit(data, BandwidthRule::Silverman);
  Matrix qx(1, 1);
  qx.at(0, 0) = 0.3;
  const auto sampler = kcde_prepare_sampler(model, qx, 400, 1);
  const double x = 0.3;
  Rng srng(5);
  const std::size_t n_samp = 10000;
  const Matrix s = kcde_sample_ar(sampler, {&x, 1}, n_samp, srng);

  const KcdeSlice slice(model, {&x, 1});
  const int grid = 6000;
  std::vector<double> ys(static_cast<std::size_t>(grid) + 1);
  std::vector<double> cdf(static_cast<std::size_t>(grid) + 1, 0.0);
  for (int i = 0; i <= grid; ++i)
    ys[static_cast<std::size_t>(i)] =
        sampler.box_lo[0] + (sampler.box_hi[0] - sampler.box_lo[0]) * i / grid;
  double acc = 0.0;
  for (int i = 1; i <= grid; ++i) {
    const double h = ys[static_cast<std::size_t>(i)] - ys[static_cast<std::size_t>(i - 1)];
    acc += 0.5 * h * (slice.density({&ys[static_cast<std::size_t>(i - 1)], 1}) +
                      slice.density({&ys[static_cast<std::size_t>(i)], 1}));
    cdf[static_cast<std::size_t>(i)] = acc;
  }
  for (auto& v : cdf) v /= acc;

  std::vector<double> sorted(n_samp);
  for (std::size_t i = 0; i < n_samp; ++i) sorted[i] = s.at(i, 0);
  std::sort(sorted.begin(), sorted.end());
  double ks = 0.0;
  for (std::size_t i = 0; i < n_samp; ++i) {
    const auto it = std::upper_bound(ys.begin(), ys.end(), sorted[i]);
    const std::size_t idx =
        std::min(static_cast<std::size_t>(std::distance(ys.begin(), it)), cdf.size() - 1);
    ks = std::max({ks, std::abs(cdf[idx] - static_cast<double>(i + 1) / n_samp),
                   std::abs(cdf[idx] - static_cast<double>(i) / n_samp)});
  }
  const double ks_crit = 1.628 / std::sqrt(static_cast<double>(n_samp));
  const bool ks_ok = ks < ks_crit;

  o.pass = rate_ok && ks_ok;
  o.detail = "acceptance rate " + fmt(rate) + " (target " + fmt(1.0 / 1.1) + " +- 0.02); KS " +
             fmt(ks) + " (crit " + fmt(ks_crit) + ")";
  return o;
}

// ---------------------------------------------------------------------------
// 8. NLL sanity
// ---------------------------------------------------------------------------

Outcome criterion_nll() {
  auto make_data = [](bool log1p_scale) {
    Rng rng(42);
    Dataset data;
    data.X = Matrix(2000, 1);
    data.Y = Matrix(2000, 1);
    for (std::size_t i = 0; i < 2000; ++i) {
      data.X.at(i, 0) = rng.normal();
      data.Y.at(i, 0) = rng.normal();  // independent of X
    }
    if (log1p_scale) {
      // the raw responses are expm1(y); the tag brings them back to y
      data.y_transform = ResponseTransform::Log1p;
    }
    return data;
  };

  ModelSpec spec;
  spec.rank = 20;
  spec.hidden_widths = {50, 50, 50};
  TrainConfig cfg;
  cfg.epochs = 800;
  cfg.collocation = 30;
  cfg.seed = 5;
  cfg.validation_fraction = 0.1;

  const auto plain = kfold_nll(make_data(false), 5, spec, cfg, 1000, 0);
  const auto transformed = kfold_nll(make_data(true), 5, spec, cfg, 1000, 0);

  const double reference = 1.4189385332046727;
  const bool plain_ok = std::abs(plain.mean - reference) < 0.15;
  const bool transform_ok = std::abs(transformed.mean - plain.mean) < 0.15;

  Outcome o;
  o.pass = plain_ok && transform_ok;
  o.detail = "mean NLL " + fmt(plain.mean) + " (ref " + fmt(reference) +
             " +- 0.15); log1p rerun " + fmt(transformed.mean) + " (|diff| " +
             fmt(std::abs(transformed.mean - plain.mean)) + " < 0.15)";
  return o;
}

// ---------------------------------------------------------------------------
// 9. Determinism of the CLI surface
// ---------------------------------------------------------------------------

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome criterion_determinism() {
  Outcome o;
  const fs::path dir = fs::temp_directory_path() / "cpfn_acceptance_determinism";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const auto file = [&](const std::string& name) { return (dir / name).string(); };

  {
    std::ofstream cfg(file("cfg.json"));
    cfg << R"({
      "seed": 31,
      "model": {"rank": 4, "hidden_widths": [12]},
      "train": {"epochs": 40, "collocation": 8},
      "data": {"path": ")" << file("data.csv") << R"(", "x_columns": ["x"], "y_columns": ["y"]},
      "metrics": {"r_x": 50, "r_tau": 20, "r_y": 120, "r_y_assignment": 50, "r_density": 200},
      "eval_sim": {"process": "univariate", "n_list": [100], "replicates": 1},
      "eval_nll": {"folds": 2}
    })";
  }
  const std::string cli = CPFN_CLI_PATH;
  auto run = [&](const std::string& args) {
    const std::string cmd = cli + " " + args + " > /dev/null 2>&1";
    return WEXITSTATUS(std::system(cmd.c_str()));
  };
  const std::string base = "--config " + file("cfg.json");

  std::vector<std::pair<std::string, std::string>> steps = {
      {"simulate " + base + " --n 120 --out " + file("data.csv"), "data.csv"},
      {"train " + base + " --out " + file("model.json") + " --trace " + file("trace.csv"),
       "model.json"},
      {"sample " + base + " --model " + file("model.json") + " --x 0.4 --n 25 --out " +
           file("samples.csv"),
       "samples.csv"},
      {"density " + base + " --model " + file("model.json") + " --x 0.4 --y-grid -2:2:21 --out " +
           file("density.json"),
       "density.json"},
      {"eval-nll " + base + " --out " + file("nll.json"), "nll.json"},
      {"eval-sim " + base + " --out-dir " + dir.string(), "study.csv"},
  };
  for (const auto& [args, artifact] : steps) {
    if (run(args) != 0) {
      o.detail = "command failed: " + args;
      fs::remove_all(dir);
      return o;
    }
    const std::string first = slurp(file(artifact));
    if (run(args) != 0) {
      o.detail = "rerun failed: " + args;
      fs::remove_all(dir);
      return o;
    }
    if (slurp(file(artifact)) != first) {
      o.detail = "artifact differs between reruns: " + artifact;
      fs::remove_all(dir);
      return o;
    }
  }
  fs::remove_all(dir);
  o.pass = true;
  o.detail = "simulate/train/sample/density/eval-nll/eval-sim reruns byte-identical";
  return o;
}

// ---------------------------------------------------------------------------
// 10. UCI-shaped regression (optional, data-dependent)
// ---------------------------------------------------------------------------

Outcome criterion_uci() {
  Outcome o;
  const char* path = std::getenv("CPFN_UCI_CSV");
  if (path == nullptr) {
    o.skipped = true;
    o.detail = "no dataset supplied (set CPFN_UCI_CSV, CPFN_UCI_X, CPFN_UCI_Y)";
    return o;
  }
  const char* xcols = std::getenv("CPFN_UCI_X");
  const char* ycol = std::getenv("CPFN_UCI_Y");
  if (xcols == nullptr || ycol == nullptr) {
    o.detail = "CPFN_UCI_X / CPFN_UCI_Y must name the columns";
    return o;
  }
  std::vector<std::string> x_columns;
  std::stringstream ss(xcols);
  std::string tok;
  while (std::getline(ss, tok, ',')) x_columns.push_back(tok);
  const bool log1p = std::getenv("CPFN_UCI_LOG1P") != nullptr;

  const auto ingest = ingest_csv(path, x_columns, {ycol},
                                 log1p ? ResponseTransform::Log1p : ResponseTransform::Identity);
  ModelSpec spec;
  spec.rank = 50;
  spec.hidden_widths = {50, 50, 50};
  TrainConfig cfg;
  cfg.epochs = 2000;
  cfg.collocation = 100;
  cfg.seed = 1;
  cfg.validation_fraction = 0.1;
  const auto res = kfold_nll(ingest.data, 5, spec, cfg, 1000, 0);
  bool finite = true;
  for (double v : res.per_fold) finite &= std::isfinite(v);
  o.pass = finite;
  o.detail = "mean NLL " + fmt(res.mean) + " over 5 folds, n=" + std::to_string(ingest.data.n());
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    if (std::string(argv[i]) == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[i + 1]);
      std::string tok;
      while (std::getline(ss, tok, ',')) only.insert(std::atoi(tok.c_str()));
      ++i;
    }
  }

  struct Criterion {
    int id;
    const char* name;
    Outcome (*run)();
  };
  const std::vector<Criterion> criteria = {
      {1, "gradient fidelity", criterion_gradients},
      {2, "density normalization", criterion_density_normalization},
      {3, "optimal transport correctness", criterion_ot},
      {7, "acceptance-rejection correctness", criterion_acceptance_rejection},
      {9, "determinism", criterion_determinism},
      {8, "NLL sanity", criterion_nll},
      {4, "univariate benchmark", criterion_univariate_benchmark},
      {5, "consistency trend", criterion_consistency_trend},
      {6, "multivariate dominance", criterion_multivariate},
      {10, "UCI-shaped regression (optional)", criterion_uci},
  };

  bool all_pass = true;
  for (const auto& criterion : criteria) {
    if (!only.empty() && only.count(criterion.id) == 0) continue;
    const auto t0 = clock_type::now();
    Outcome outcome;
    try {
      outcome = criterion.run();
    } catch (const std::exception& e) {
      outcome.detail = std::string("exception: ") + e.what();
    }
    const double dt = seconds_since(t0);
    const char* verdict = outcome.skipped ? "SKIP" : (outcome.pass ? "PASS" : "FAIL");
    std::printf("[%s] criterion %d (%s): %s  [%.1f s]\n", verdict, criterion.id, criterion.name,
                outcome.detail.c_str(), dt);
    std::fflush(stdout);
    if (!outcome.skipped && !outcome.pass) all_pass = false;
  }
  return all_pass ? 0 : 1;
}
