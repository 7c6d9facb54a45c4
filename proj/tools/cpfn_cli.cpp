#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cpfn/config.hpp"
#include "cpfn/harness.hpp"
#include "cpfn/inference.hpp"
#include "cpfn/kcde.hpp"
#include "cpfn/metrics.hpp"
#include "cpfn/model.hpp"
#include "cpfn/parallel.hpp"
#include "cpfn/simulators.hpp"
#include "cpfn/training.hpp"

namespace {

using nlohmann::json;

// Exit-code contract: 0 success, 2 config error, 3 data error, 4 numerical
// failure.
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumerical = 4;

std::vector<double> parse_doubles(const std::string& csv) {
  std::vector<double> out;
  std::stringstream ss(csv);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      out.push_back(std::stod(tok));
    } catch (const std::exception&) {
      throw cpfn::InvalidConfig("cannot parse '" + tok + "' as a number");
    }
  }
  if (out.empty()) throw cpfn::InvalidConfig("expected a comma-separated number list");
  return out;
}

struct CommonOpts {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
  cmd->add_option("--config", opts.config_path, "JSON configuration file");
  cmd->add_option("--seed", opts.seed, "override the config seed");
  cmd->add_option("--threads", opts.threads, "worker threads (0 = auto)");
}

cpfn::RunConfig effective_config(const CommonOpts& opts) {
  cpfn::RunConfig cfg = opts.config_path.empty() ? cpfn::default_run_config()
                                                 : cpfn::load_run_config(opts.config_path);
  if (opts.seed) cfg.seed = *opts.seed;
  if (opts.threads) cfg.threads = *opts.threads;
  cpfn::finalize_run_config(cfg);
  return cfg;
}

cpfn::Dataset load_dataset(const cpfn::RunConfig& cfg) {
  if (cfg.data_path.empty())
    throw cpfn::InvalidConfig("config is missing data.path");
  if (cfg.x_columns.empty() || cfg.y_columns.empty())
    throw cpfn::InvalidConfig("config is missing data.x_columns / data.y_columns");
  const auto res =
      cpfn::ingest_csv(cfg.data_path, cfg.x_columns, cfg.y_columns, cfg.y_transform, cfg.one_hot);
  if (res.dropped_rows > 0)
    std::cerr << "warning: dropped " << res.dropped_rows << " rows with missing values\n";
  return res.data;
}

void write_text(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw cpfn::DataError("cannot open output file: " + path);
  out << text;
}

// --- subcommand bodies ---

int cmd_simulate(const CommonOpts& opts, const std::string& process_flag, std::size_t n_flag,
                 const std::string& out_path) {
  cpfn::RunConfig cfg = effective_config(opts);
  if (!process_flag.empty()) cfg.sim_process = cpfn::sim_process_from_string(process_flag);
  if (n_flag > 0) cfg.sim_n = n_flag;
  cpfn::finalize_run_config(cfg);

  cpfn::Rng rng(cpfn::mix_seed(cfg.seed, 0x51));
  const cpfn::Dataset data = cpfn::generate_process(cfg.sim_process, cfg.sim_n, rng);
  cpfn::write_dataset_csv(data, cfg.hash, cfg.seed, out_path);

  json sidecar{{"kind", "cpfn-simulated-dataset"},
               {"process", cpfn::to_string(cfg.sim_process)},
               {"n", cfg.sim_n},
               {"seed", cfg.seed},
               {"config_hash", cfg.hash}};
  write_text(out_path + ".meta.json", sidecar.dump(2) + "\n");
  std::cout << "wrote " << data.n() << " rows to " << out_path << "\n";
  return 0;
}

int cmd_train(const CommonOpts& opts, const std::string& out_path,
              const std::string& trace_path) {
  const cpfn::RunConfig cfg = effective_config(opts);
  const cpfn::Dataset data = load_dataset(cfg);

  cpfn::TrainConfig tc = cfg.train;
  tc.seed = cfg.seed;
  tc.threads = cfg.threads;
  cpfn::TrainResult result = cpfn::train(data, cfg.model, tc);
  for (const auto& w : result.warnings) std::cerr << "warning: " << w << "\n";
  if (result.aborted_non_finite) {
    std::cerr << "error: " << result.diagnostic << "\n";
    return kExitNumerical;
  }

  result.model.config_hash = cfg.hash;
  cpfn::write_model_file(result.model, out_path);
  if (!trace_path.empty()) cpfn::write_trace_csv(result, cfg.hash, cfg.seed, trace_path);
  std::cout << "trained " << result.trace.size() << " epochs; best epoch " << result.best_epoch
            << " (val loss " << cpfn::format_double(result.best_val_loss) << "); model written to "
            << out_path << "\n";
  return 0;
}

int cmd_sample(const CommonOpts& opts, const std::string& model_path, const std::string& x_csv,
               std::size_t count, const std::string& out_path) {
  const cpfn::RunConfig cfg = effective_config(opts);
  const cpfn::CpfnModel model = cpfn::read_model_file(model_path);
  const auto x = parse_doubles(x_csv);
  cpfn::Rng rng(cpfn::mix_seed(cfg.seed, 0x5A));
  const cpfn::Matrix samples = cpfn::sample_conditional(model, x, count, rng);

  std::ostringstream out;
  out << "# config_hash=" << cfg.hash << " seed=" << cfg.seed << "\n";
  for (int k = 0; k < model.q; ++k) out << (k == 0 ? "" : ",") << "y" << (k + 1);
  out << "\n";
  for (std::size_t i = 0; i < samples.rows; ++i) {
    for (std::size_t c = 0; c < samples.cols; ++c)
      out << (c == 0 ? "" : ",") << cpfn::format_double(samples.at(i, c));
    out << "\n";
  }
  write_text(out_path, out.str());
  return 0;
}

int cmd_density(const CommonOpts& opts, const std::string& model_path, const std::string& x_csv,
                const std::string& y_csv, const std::string& grid_spec,
                const std::string& out_path) {
  const cpfn::RunConfig cfg = effective_config(opts);
  const cpfn::CpfnModel model = cpfn::read_model_file(model_path);
  const auto x = parse_doubles(x_csv);
  cpfn::ConditionalDensityEvaluator ev(model, cfg.r_density, cfg.seed);

  json records = json::array();
  if (!grid_spec.empty()) {
    if (model.q != 1)
      throw cpfn::InvalidConfig("--y-grid works for univariate responses only");
    const auto parts = parse_doubles([&] {
      std::string s = grid_spec;
      for (char& c : s)
        if (c == ':') c = ',';
      return s;
    }());
    if (parts.size() != 3 || parts[2] < 2)
      throw cpfn::InvalidConfig("--y-grid expects lo:hi:count with count >= 2");
    const int count = static_cast<int>(parts[2]);
    for (int i = 0; i < count; ++i) {
      const double y = parts[0] + (parts[1] - parts[0]) * i / (count - 1.0);
      records.push_back(json{{"y", y}, {"density", ev.density(x, {&y, 1})}});
    }
  } else {
    const auto y = parse_doubles(y_csv);
    records.push_back(json{{"y", y}, {"density", ev.density(x, y)}});
  }
  json doc{{"kind", "cpfn-density"},
           {"x", x},
           {"r_density", cfg.r_density},
           {"seed", cfg.seed},
           {"config_hash", cfg.hash},
           {"records", std::move(records)}};
  write_text(out_path, doc.dump(2) + "\n");
  return 0;
}

int cmd_quantiles(const CommonOpts& opts, const std::string& model_path, const std::string& x_csv,
                  const std::string& taus_csv, std::size_t count, const std::string& out_path) {
  const cpfn::RunConfig cfg = effective_config(opts);
  const cpfn::CpfnModel model = cpfn::read_model_file(model_path);
  if (model.q != 1)
    throw cpfn::InvalidConfig("quantiles are reported for univariate responses only");
  const auto x = parse_doubles(x_csv);
  const auto taus = parse_doubles(taus_csv);
  cpfn::Rng rng(cpfn::mix_seed(cfg.seed, 0x7A));
  const cpfn::Matrix samples = cpfn::sample_conditional(model, x, count, rng);
  std::vector<double> col(samples.rows);
  for (std::size_t i = 0; i < samples.rows; ++i) col[i] = samples.at(i, 0);
  const auto qs = cpfn::conditional_quantiles(col, taus);

  json records = json::array();
  for (std::size_t t = 0; t < taus.size(); ++t)
    records.push_back(json{{"tau", taus[t]}, {"quantile", qs[t]}});
  json doc{{"kind", "cpfn-quantiles"},
           {"x", x},
           {"samples", count},
           {"seed", cfg.seed},
           {"config_hash", cfg.hash},
           {"records", std::move(records)}};
  write_text(out_path, doc.dump(2) + "\n");
  return 0;
}

int cmd_eval_sim(const CommonOpts& opts, const std::string& out_dir) {
  const cpfn::RunConfig cfg = effective_config(opts);
  cpfn::SimStudyConfig study;
  study.process = cfg.study_process;
  study.n_list = cfg.study_n_list;
  study.replicates = cfg.study_replicates;
  study.spec = cfg.model;
  study.train = cfg.train;
  study.train.seed = cfg.seed;
  study.run_cpfn = cfg.study_cpfn;
  study.run_kcde = cfg.study_kcde;
  study.kcde_rule = cfg.kcde_rule;
  study.r_x = cfg.r_x;
  study.r_tau = cfg.r_tau;
  study.r_y = cfg.r_y;
  study.r_y_assignment = cfg.r_y_assignment;
  study.seed = cfg.seed;
  study.threads = cfg.threads;
  study.config_hash = cfg.hash;
  if (study.process == cpfn::SimProcess::Multivariate) {
    study.r_x = std::min(study.r_x, 30);
  }

  const cpfn::SimStudyResult result = cpfn::run_sim_study(study);
  cpfn::write_study_csv(result, study, out_dir + "/study.csv");
  cpfn::write_study_json(result, study, out_dir + "/study.json");
  if (study.process == cpfn::SimProcess::Univariate)
    cpfn::write_quantile_long_csv(result, study, out_dir + "/quantiles_long.csv");

  for (const auto& agg : result.aggregates) {
    std::cout << agg.method << " n=" << agg.n << ":";
    for (const auto& [k, v] : agg.metrics) std::cout << " " << k << "=" << cpfn::format_double(v);
    std::cout << "\n";
  }
  std::size_t failures = 0;
  for (const auto& c : result.cells)
    if (c.failed) ++failures;
  if (failures > 0) std::cerr << "warning: " << failures << " replicate(s) failed\n";
  return 0;
}

int cmd_eval_nll(const CommonOpts& opts, const std::string& out_path) {
  const cpfn::RunConfig cfg = effective_config(opts);
  const cpfn::Dataset data = load_dataset(cfg);

  cpfn::TrainConfig tc = cfg.train;
  tc.seed = cfg.seed;
  const auto result = cpfn::kfold_nll(data, cfg.folds, cfg.model, tc, cfg.r_density, cfg.threads);
  for (const auto& w : result.warnings) std::cerr << "warning: " << w << "\n";

  json folds = json::array();
  for (std::size_t f = 0; f < result.per_fold.size(); ++f)
    folds.push_back(json{{"fold", f}, {"nll", result.per_fold[f]}});
  json doc{{"kind", "cpfn-nll-report"},
           {"folds", cfg.folds},
           {"seed", cfg.seed},
           {"config_hash", cfg.hash},
           {"per_fold", std::move(folds)},
           {"mean_nll", result.mean}};
  write_text(out_path, doc.dump(2) + "\n");
  for (std::size_t f = 0; f < result.per_fold.size(); ++f)
    std::cout << "fold " << f << ": nll=" << cpfn::format_double(result.per_fold[f]) << "\n";
  std::cout << "mean nll: " << cpfn::format_double(result.mean) << "\n";
  return 0;
}

int cmd_gradcheck(const CommonOpts& opts, int instances, double step, double tolerance) {
  const cpfn::RunConfig cfg = effective_config(opts);
  const auto report =
      cpfn::gradcheck(instances, cfg.seed, step, cpfn::resolve_threads(cfg.threads));
  for (std::size_t i = 0; i < report.per_instance.size(); ++i)
    std::cout << "instance " << i << ": max rel err = "
              << cpfn::format_double(report.per_instance[i]) << "\n";
  std::cout << "worst: " << cpfn::format_double(report.worst) << " (tolerance "
            << cpfn::format_double(tolerance) << ")\n";
  if (report.worst >= tolerance) {
    std::cerr << "gradient check FAILED\n";
    return kExitNumerical;
  }
  std::cout << "gradient check passed\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"conditional push-forward networks: train, sample, evaluate"};
  app.require_subcommand(1);

  CommonOpts opts;

  auto* simulate = app.add_subcommand("simulate", "generate a synthetic dataset CSV");
  std::string sim_process, sim_out = "data.csv";
  std::size_t sim_n = 0;
  add_common(simulate, opts);
  simulate->add_option("--process", sim_process, "univariate | multivariate");
  simulate->add_option("--n", sim_n, "sample count");
  simulate->add_option("--out", sim_out, "output CSV path");

  auto* train_cmd = app.add_subcommand("train", "fit a model on a CSV dataset");
  std::string train_out = "model.json", train_trace;
  add_common(train_cmd, opts);
  train_cmd->add_option("--out", train_out, "model file path");
  train_cmd->add_option("--trace", train_trace, "per-epoch loss trace CSV");

  auto* sample_cmd = app.add_subcommand("sample", "draw conditional samples");
  std::string sample_model, sample_x, sample_out = "-";
  std::size_t sample_n = 1000;
  add_common(sample_cmd, opts);
  sample_cmd->add_option("--model", sample_model, "model file")->required();
  sample_cmd->add_option("--x", sample_x, "covariate values, comma separated")->required();
  sample_cmd->add_option("--n", sample_n, "sample count");
  sample_cmd->add_option("--out", sample_out, "output CSV ('-' for stdout)");

  auto* density_cmd = app.add_subcommand("density", "evaluate the conditional density");
  std::string density_model, density_x, density_y, density_grid, density_out = "-";
  add_common(density_cmd, opts);
  density_cmd->add_option("--model", density_model, "model file")->required();
  density_cmd->add_option("--x", density_x, "covariate values")->required();
  density_cmd->add_option("--y", density_y, "response point");
  density_cmd->add_option("--y-grid", density_grid, "lo:hi:count grid (univariate)");
  density_cmd->add_option("--out", density_out, "output JSON ('-' for stdout)");

  auto* quant_cmd = app.add_subcommand("quantiles", "conditional quantiles from samples");
  std::string quant_model, quant_x, quant_taus = "0.1,0.25,0.5,0.75,0.9", quant_out = "-";
  std::size_t quant_n = 10000;
  add_common(quant_cmd, opts);
  quant_cmd->add_option("--model", quant_model, "model file")->required();
  quant_cmd->add_option("--x", quant_x, "covariate values")->required();
  quant_cmd->add_option("--taus", quant_taus, "quantile levels, comma separated");
  quant_cmd->add_option("--n", quant_n, "Monte Carlo sample count");
  quant_cmd->add_option("--out", quant_out, "output JSON ('-' for stdout)");

  auto* evalsim_cmd = app.add_subcommand("eval-sim", "simulation study with true-model metrics");
  std::string evalsim_dir = ".";
  add_common(evalsim_cmd, opts);
  evalsim_cmd->add_option("--out-dir", evalsim_dir, "directory for study artifacts");

  auto* evalnll_cmd = app.add_subcommand("eval-nll", "k-fold cross-validated NLL on a CSV");
  std::string evalnll_out = "nll_report.json";
  add_common(evalnll_cmd, opts);
  evalnll_cmd->add_option("--out", evalnll_out, "report JSON path");

  auto* gradcheck_cmd =
      app.add_subcommand("gradcheck", "reverse-mode vs finite-difference gradient check");
  int gc_instances = 50;
  double gc_step = 1e-5, gc_tol = 1e-5;
  add_common(gradcheck_cmd, opts);
  gradcheck_cmd->add_option("--instances", gc_instances, "random instances to test");
  gradcheck_cmd->add_option("--step", gc_step, "finite difference step");
  gradcheck_cmd->add_option("--tolerance", gc_tol, "maximum allowed relative error");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (simulate->parsed()) return cmd_simulate(opts, sim_process, sim_n, sim_out);
    if (train_cmd->parsed()) return cmd_train(opts, train_out, train_trace);
    if (sample_cmd->parsed())
      return cmd_sample(opts, sample_model, sample_x, sample_n, sample_out);
    if (density_cmd->parsed())
      return cmd_density(opts, density_model, density_x, density_y, density_grid, density_out);
    if (quant_cmd->parsed())
      return cmd_quantiles(opts, quant_model, quant_x, quant_taus, quant_n, quant_out);
    if (evalsim_cmd->parsed()) return cmd_eval_sim(opts, evalsim_dir);
    if (evalnll_cmd->parsed()) return cmd_eval_nll(opts, evalnll_out);
    if (gradcheck_cmd->parsed()) return cmd_gradcheck(opts, gc_instances, gc_step, gc_tol);
  } catch (const cpfn::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const cpfn::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const cpfn::NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
