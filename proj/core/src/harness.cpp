#include "cpfn/harness.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "cpfn/inference.hpp"
#include "cpfn/parallel.hpp"

namespace cpfn {

using nlohmann::json;

// ---------------------------------------------------------------------------
// CSV ingestion
// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t");
  std::size_t e = s.find_last_not_of(" \t");
  if (b == std::string::npos) return "";
  return s.substr(b, e - b + 1);
}

bool is_missing(const std::string& cell) {
  return cell.empty() || cell == "NA" || cell == "na" || cell == "nan" || cell == "NaN" ||
         cell == "?";
}

bool parse_number(const std::string& cell, double& out) {
  const char* b = cell.data();
  const char* e = b + cell.size();
  const auto res = std::from_chars(b, e, out);
  return res.ec == std::errc{} && res.ptr == e;
}

bool integral_column(const Matrix& m, std::size_t c) {
  for (std::size_t r = 0; r < m.rows; ++r) {
    const double v = m.at(r, c);
    if (v != std::floor(v)) return false;
  }
  return true;
}

}  // namespace

IngestResult ingest_csv(const std::string& path, const std::vector<std::string>& x_columns,
                        const std::vector<std::string>& y_columns,
                        ResponseTransform y_transform, bool one_hot) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open data file: " + path);
  if (x_columns.empty() || y_columns.empty())
    throw InvalidConfig("ingest_csv: x and y column lists must be nonempty");

  std::string line;
  std::size_t lineno = 0;
  // skip comment lines, read header
  std::vector<std::string> header;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line[0] == '#') continue;
    for (auto& h : split_csv_line(line)) header.push_back(trim(h));
    break;
  }
  if (header.empty()) throw ParseError("empty file: " + path);

  auto column_index = [&](const std::string& name) -> std::size_t {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    throw ParseError("column '" + name + "' not found in " + path);
  };
  std::vector<std::size_t> x_idx, y_idx;
  for (const auto& c : x_columns) x_idx.push_back(column_index(c));
  for (const auto& c : y_columns) y_idx.push_back(column_index(c));

  std::vector<std::vector<double>> x_rows, y_rows;
  std::size_t dropped = 0;
  std::size_t data_row = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() && in.eof()) break;
    if (!line.empty() && line[0] == '#') continue;
    ++data_row;
    const auto cells = split_csv_line(line);
    if (cells.size() != header.size())
      throw ParseError("row " + std::to_string(data_row) + " has " +
                       std::to_string(cells.size()) + " cells, header has " +
                       std::to_string(header.size()));
    bool missing = false;
    auto read = [&](std::size_t idx, double& out) {
      const std::string cell = trim(cells[idx]);
      if (is_missing(cell)) {
        missing = true;
        return true;
      }
      if (!parse_number(cell, out)) {
        throw ParseError("row " + std::to_string(data_row) + ", column '" + header[idx] +
                         "': cannot parse '" + cell + "' as a number");
      }
      return true;
    };
    std::vector<double> xr(x_idx.size()), yr(y_idx.size());
    for (std::size_t i = 0; i < x_idx.size(); ++i) read(x_idx[i], xr[i]);
    for (std::size_t i = 0; i < y_idx.size(); ++i) read(y_idx[i], yr[i]);
    if (missing) {
      ++dropped;
      continue;
    }
    x_rows.push_back(std::move(xr));
    y_rows.push_back(std::move(yr));
  }
  if (x_rows.empty()) throw EmptyDataset("no usable rows in " + path);

  IngestResult res;
  res.dropped_rows = dropped;
  Dataset& data = res.data;
  data.X = Matrix(x_rows.size(), x_idx.size());
  data.Y = Matrix(y_rows.size(), y_idx.size());
  for (std::size_t r = 0; r < x_rows.size(); ++r) {
    for (std::size_t c = 0; c < x_idx.size(); ++c) data.X.at(r, c) = x_rows[r][c];
    for (std::size_t c = 0; c < y_idx.size(); ++c) data.Y.at(r, c) = y_rows[r][c];
  }
  for (const auto& name : y_columns) data.y_columns.push_back(ColumnMeta{name});

  if (y_transform == ResponseTransform::Log1p) {
    for (double& v : data.Y.data) {
      if (v <= -1.0)
        throw DataError("log1p transform requires responses > -1");
      v = std::log1p(v);
    }
  }
  data.y_transform = y_transform;

  // column typing; integer-valued covariates are tagged discrete
  std::vector<ColumnMeta> x_meta;
  for (std::size_t c = 0; c < x_idx.size(); ++c) {
    ColumnMeta m{x_columns[c]};
    m.kind = integral_column(data.X, c) ? ColumnKind::Discrete : ColumnKind::Continuous;
    x_meta.push_back(m);
  }

  if (!one_hot) {
    data.x_columns = std::move(x_meta);
    data.validate();
    return res;
  }

  // one-hot expansion of discrete covariates
  std::vector<std::vector<double>> levels(x_idx.size());
  std::size_t out_cols = 0;
  for (std::size_t c = 0; c < x_idx.size(); ++c) {
    if (x_meta[c].kind == ColumnKind::Discrete) {
      std::set<double> uniq;
      for (std::size_t r = 0; r < data.X.rows; ++r) uniq.insert(data.X.at(r, c));
      if (uniq.size() > 1 && uniq.size() <= 64) {
        levels[c].assign(uniq.begin(), uniq.end());
        out_cols += uniq.size();
        continue;
      }
    }
    out_cols += 1;
  }
  Matrix expanded(data.X.rows, out_cols);
  std::vector<ColumnMeta> expanded_meta;
  std::size_t oc = 0;
  for (std::size_t c = 0; c < x_idx.size(); ++c) {
    if (!levels[c].empty()) {
      for (double lv : levels[c]) {
        for (std::size_t r = 0; r < data.X.rows; ++r)
          expanded.at(r, oc) = data.X.at(r, c) == lv ? 1.0 : 0.0;
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%g", lv);
        expanded_meta.push_back(ColumnMeta{x_meta[c].name + "=" + buf, ColumnKind::Discrete});
        ++oc;
      }
    } else {
      for (std::size_t r = 0; r < data.X.rows; ++r) expanded.at(r, oc) = data.X.at(r, c);
      expanded_meta.push_back(x_meta[c]);
      ++oc;
    }
  }
  data.X = std::move(expanded);
  data.x_columns = std::move(expanded_meta);
  data.validate();
  return res;
}

// ---------------------------------------------------------------------------
// k-fold NLL
// ---------------------------------------------------------------------------

std::vector<std::vector<std::size_t>> kfold_split(std::size_t n, int k, std::uint64_t seed) {
  if (k < 2) throw InvalidConfig("kfold: k must be >= 2");
  if (n < static_cast<std::size_t>(k)) throw InvalidConfig("kfold: need at least k rows");
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  Rng rng(mix_seed(seed, 0xF01D));
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = rng.below(i);
    std::swap(perm[i - 1], perm[j]);
  }
  std::vector<std::vector<std::size_t>> folds(static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < n; ++i) folds[i % static_cast<std::size_t>(k)].push_back(perm[i]);
  return folds;
}

namespace {

Dataset subset_rows(const Dataset& data, std::span<const std::size_t> rows) {
  Dataset out;
  out.X = Matrix(rows.size(), data.X.cols);
  out.Y = Matrix(rows.size(), data.Y.cols);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    std::copy(data.X.row(rows[r]).begin(), data.X.row(rows[r]).end(), out.X.row(r).begin());
    std::copy(data.Y.row(rows[r]).begin(), data.Y.row(rows[r]).end(), out.Y.row(r).begin());
  }
  out.x_columns = data.x_columns;
  out.y_columns = data.y_columns;
  out.y_transform = data.y_transform;
  return out;
}

// Raw-scale responses for NLL evaluation (inverts the stored transform).
Matrix raw_scale_y(const Dataset& data) {
  Matrix y = data.Y;
  if (data.y_transform == ResponseTransform::Log1p)
    for (double& v : y.data) v = std::expm1(v);
  return y;
}

}  // namespace

KfoldNllResult kfold_nll(const Dataset& data, int k, const ModelSpec& spec,
                         const TrainConfig& config, int r_density, int threads) {
  data.validate();
  const auto folds = kfold_split(data.n(), k, config.seed);
  KfoldNllResult result;
  result.per_fold.assign(folds.size(), 0.0);
  std::vector<std::string> fold_warnings(folds.size());

  const int workers = resolve_threads(threads == 0 ? config.threads : threads);
  const int outer = std::min<int>(workers, k);
  const int inner = std::max(1, workers / outer);

  parallel_for(folds.size(), outer, [&](std::size_t f) {
    std::vector<std::size_t> train_rows;
    for (std::size_t g = 0; g < folds.size(); ++g)
      if (g != f) train_rows.insert(train_rows.end(), folds[g].begin(), folds[g].end());

    try {
      Dataset train_data = subset_rows(data, train_rows);
      TrainConfig fold_cfg = config;
      fold_cfg.seed = mix_seed(config.seed, 0xF10000 + f);
      fold_cfg.threads = inner;
      const TrainResult tr = train(train_data, spec, fold_cfg);
      if (tr.aborted_non_finite)
        fold_warnings[f] = "fold " + std::to_string(f) + ": " + tr.diagnostic;

      const Dataset test_data = subset_rows(data, folds[f]);
      const Matrix y_raw = raw_scale_y(test_data);
      ConditionalDensityEvaluator ev(tr.model, r_density, mix_seed(config.seed, 0xDE000 + f));
      result.per_fold[f] = nll(
          [&](std::span<const double> x, std::span<const double> y) { return ev.density(x, y); },
          test_data.X, y_raw, 1);
    } catch (const ConfigError& e) {
      throw InvalidConfig("fold " + std::to_string(f) + ": " + e.what());
    } catch (const DataError& e) {
      throw DataError("fold " + std::to_string(f) + ": " + e.what());
    } catch (const NumericalError& e) {
      throw NumericalError("fold " + std::to_string(f) + ": " + e.what());
    }
  });

  double acc = 0.0;
  for (double v : result.per_fold) acc += v;
  result.mean = acc / static_cast<double>(result.per_fold.size());
  for (auto& w : fold_warnings)
    if (!w.empty()) result.warnings.push_back(w);
  return result;
}

// ---------------------------------------------------------------------------
// Simulation study
// ---------------------------------------------------------------------------

namespace {

struct ReplicateOutcome {
  std::vector<SimStudyCell> cells;
  std::vector<QuantileGridRow> quantile_rows;
  std::string error;
};

// Thinning step for the plot-ready quantile grid.
constexpr std::size_t kPlotGridStride = 20;

std::vector<double> aqe_levels() { return {0.1, 0.25, 0.5, 0.75, 0.9}; }

void append_quantile_rows(std::vector<QuantileGridRow>& rows, const std::string& method,
                          std::size_t n, const UnivariateAwdResult& r) {
  for (std::size_t i = 0; i < r.x_grid.size(); i += kPlotGridStride)
    for (std::size_t j = 0; j < r.tau_grid.size(); ++j)
      rows.push_back(QuantileGridRow{method, n, r.x_grid[i], r.tau_grid[j],
                                     r.true_quantiles.at(i, j), r.est_quantiles.at(i, j)});
}

ReplicateOutcome run_univariate_replicate(const SimStudyConfig& cfg, std::size_t n,
                                          int replicate, std::uint64_t task_seed, int threads) {
  ReplicateOutcome out;
  const UnivariateProcess process;
  Rng gen_rng(mix_seed(task_seed, 1));
  const Dataset data = process.generate(n, gen_rng);

  const QuantileFn true_q = [&](double x, std::span<const double> taus) {
    std::vector<double> qs;
    qs.reserve(taus.size());
    for (double tau : taus) qs.push_back(process.quantile(x, tau));
    return qs;
  };
  const auto levels = aqe_levels();

  auto push_cell = [&](const std::string& method, const UnivariateAwdResult& r) {
    SimStudyCell cell;
    cell.method = method;
    cell.n = n;
    cell.replicate = replicate;
    cell.metrics["awd"] = r.awd;
    for (std::size_t t = 0; t < levels.size(); ++t) {
      char key[32];
      std::snprintf(key, sizeof(key), "aqe_%g", levels[t]);
      cell.metrics[key] = r.aqe[t];
    }
    out.cells.push_back(std::move(cell));
    if (replicate == 0) append_quantile_rows(out.quantile_rows, method, n, r);
  };

  if (cfg.run_cpfn) {
    TrainConfig tc = cfg.train;
    tc.seed = mix_seed(task_seed, 2);
    tc.threads = threads;
    const TrainResult tr = train(data, cfg.spec, tc);
    const std::uint64_t eval_seed = mix_seed(task_seed, 3);
    const QuantileFn est_q = [&](double x, std::span<const double> taus) {
      // per-x sample stream derived from the grid position
      Rng rng(mix_seed(eval_seed, static_cast<std::uint64_t>(x * 1e9) + 17));
      const double xv = x;
      const Matrix s =
          sample_conditional(tr.model, {&xv, 1}, static_cast<std::size_t>(cfg.r_y), rng);
      std::vector<double> col(s.rows);
      for (std::size_t i = 0; i < s.rows; ++i) col[i] = s.at(i, 0);
      return conditional_quantiles(col, taus);
    };
    push_cell("cpfn", awd_aqe_univariate(true_q, est_q, cfg.r_x, cfg.r_tau, levels, threads));
  }

  if (cfg.run_kcde) {
    const KcdeModel km = kcde_fit(data, cfg.kcde_rule, KernelFamily::Gaussian, threads);
    // f_max grid over the Simpson x nodes
    Matrix query_xs(static_cast<std::size_t>(cfg.r_x) + 1, 1);
    for (int i = 0; i <= cfg.r_x; ++i)
      query_xs.at(static_cast<std::size_t>(i), 0) = static_cast<double>(i) / cfg.r_x;
    const KcdeSampler sampler = kcde_prepare_sampler(km, query_xs, 200, 50, threads);
    const std::uint64_t eval_seed = mix_seed(task_seed, 4);
    const QuantileFn est_q = [&](double x, std::span<const double> taus) {
      Rng rng(mix_seed(eval_seed, static_cast<std::uint64_t>(x * 1e9) + 17));
      const double xv = x;
      const Matrix s = kcde_sample_ar(sampler, {&xv, 1}, static_cast<std::size_t>(cfg.r_y), rng);
      std::vector<double> col(s.rows);
      for (std::size_t i = 0; i < s.rows; ++i) col[i] = s.at(i, 0);
      return conditional_quantiles(col, taus);
    };
    push_cell("kcde", awd_aqe_univariate(true_q, est_q, cfg.r_x, cfg.r_tau, levels, threads));
  }
  return out;
}

ReplicateOutcome run_multivariate_replicate(const SimStudyConfig& cfg, std::size_t n,
                                            int replicate, std::uint64_t task_seed,
                                            int threads) {
  ReplicateOutcome out;
  const RingBlobsProcess process;
  Rng gen_rng(mix_seed(task_seed, 1));
  const Dataset data = process.generate(n, gen_rng);

  const CovariateSampler draw_x = [](Rng& rng) {
    std::vector<double> x(5);
    for (double& v : x) v = rng.normal();
    return x;
  };
  const ConditionalSampler true_sampler = [&](std::span<const double> x, std::size_t m,
                                              Rng& rng) {
    return process.sample_conditional(x, m, rng);
  };

  // empirical-W1 self-distance of the true process: the noise floor every
  // cloud-based comparison carries
  Rng floor_rng(mix_seed(task_seed, 5));
  const auto floor_res =
      awd_multivariate(draw_x, true_sampler, true_sampler, cfg.r_x, cfg.r_y_assignment,
                       floor_rng, 512, threads);

  auto push_cell = [&](const std::string& method, const MultivariateAwdResult& r) {
    SimStudyCell cell;
    cell.method = method;
    cell.n = n;
    cell.replicate = replicate;
    cell.metrics["awd"] = r.awd;
    cell.metrics["noise_floor"] = floor_res.awd;
    out.cells.push_back(std::move(cell));
  };

  if (cfg.run_cpfn) {
    TrainConfig tc = cfg.train;
    tc.seed = mix_seed(task_seed, 2);
    tc.threads = threads;
    const TrainResult tr = train(data, cfg.spec, tc);
    const ConditionalSampler est = [&](std::span<const double> x, std::size_t m, Rng& rng) {
      return sample_conditional(tr.model, x, m, rng);
    };
    Rng eval_rng(mix_seed(task_seed, 3));
    push_cell("cpfn", awd_multivariate(draw_x, true_sampler, est, cfg.r_x, cfg.r_y_assignment,
                                       eval_rng, 512, threads));
  }

  if (cfg.run_kcde) {
    const KcdeModel km = kcde_fit(data, cfg.kcde_rule, KernelFamily::Gaussian, threads);
    // the query x set for f_max: fresh draws from the covariate law
    Rng grid_rng(mix_seed(task_seed, 6));
    Matrix query_xs(50, 5);
    for (std::size_t i = 0; i < query_xs.rows; ++i)
      for (std::size_t k = 0; k < 5; ++k) query_xs.at(i, k) = grid_rng.normal();
    const KcdeSampler sampler = kcde_prepare_sampler(km, query_xs, 200, 50, threads);
    const ConditionalSampler est = [&](std::span<const double> x, std::size_t m, Rng& rng) {
      return kcde_sample_ar(sampler, x, m, rng);
    };
    Rng eval_rng(mix_seed(task_seed, 4));
    push_cell("kcde", awd_multivariate(draw_x, true_sampler, est, cfg.r_x, cfg.r_y_assignment,
                                       eval_rng, 512, threads));
  }
  return out;
}

}  // namespace

SimStudyResult run_sim_study(const SimStudyConfig& config) {
  if (config.replicates < 1) throw InvalidConfig("run_sim_study: replicates must be >= 1");
  if (config.n_list.empty()) throw InvalidConfig("run_sim_study: empty n list");

  struct Task {
    std::size_t n;
    int replicate;
    std::uint64_t seed;
  };
  std::vector<Task> tasks;
  for (std::size_t ni = 0; ni < config.n_list.size(); ++ni)
    for (int rep = 0; rep < config.replicates; ++rep)
      tasks.push_back(Task{config.n_list[ni], rep,
                           mix_seed(config.seed, (ni << 20) | static_cast<std::size_t>(rep))});

  const int workers = resolve_threads(config.threads);
  const int outer = std::min<int>(workers, static_cast<int>(tasks.size()));
  const int inner = std::max(1, workers / std::max(1, outer));

  std::vector<ReplicateOutcome> outcomes(tasks.size());
  parallel_for(tasks.size(), outer, [&](std::size_t t) {
    try {
      outcomes[t] = config.process == SimProcess::Univariate
                        ? run_univariate_replicate(config, tasks[t].n, tasks[t].replicate,
                                                   tasks[t].seed, inner)
                        : run_multivariate_replicate(config, tasks[t].n, tasks[t].replicate,
                                                     tasks[t].seed, inner);
    } catch (const std::exception& e) {
      // record the failure, keep the study running
      outcomes[t].error = e.what();
    }
  });

  SimStudyResult result;
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    if (!outcomes[t].error.empty()) {
      SimStudyCell cell;
      cell.method = "-";
      cell.n = tasks[t].n;
      cell.replicate = tasks[t].replicate;
      cell.failed = true;
      cell.error = outcomes[t].error;
      result.cells.push_back(std::move(cell));
      continue;
    }
    for (auto& c : outcomes[t].cells) result.cells.push_back(std::move(c));
    for (auto& rrow : outcomes[t].quantile_rows) result.quantile_rows.push_back(rrow);
  }

  // aggregate means and standard deviations per (method, n)
  std::map<std::pair<std::string, std::size_t>, std::vector<const SimStudyCell*>> groups;
  for (const auto& c : result.cells)
    if (!c.failed) groups[{c.method, c.n}].push_back(&c);
  for (const auto& [key, cells] : groups) {
    SimStudyCell mean_cell, std_cell;
    mean_cell.method = std_cell.method = key.first;
    mean_cell.n = std_cell.n = key.second;
    mean_cell.replicate = std_cell.replicate = static_cast<int>(cells.size());
    for (const auto& [metric, _] : cells.front()->metrics) {
      double mean = 0.0;
      for (const auto* c : cells) mean += c->metrics.at(metric);
      mean /= static_cast<double>(cells.size());
      double ss = 0.0;
      for (const auto* c : cells) {
        const double d = c->metrics.at(metric) - mean;
        ss += d * d;
      }
      const double sd =
          cells.size() > 1 ? std::sqrt(ss / static_cast<double>(cells.size() - 1)) : 0.0;
      mean_cell.metrics[metric] = mean;
      std_cell.metrics[metric] = sd;
    }
    result.aggregates.push_back(std::move(mean_cell));
    result.aggregate_stds.push_back(std::move(std_cell));
  }
  return result;
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

GradCheckReport gradcheck(int instances, std::uint64_t seed, double step, int threads) {
  if (instances < 1) throw InvalidConfig("gradcheck: instances must be >= 1");
  GradCheckReport report;
  report.per_instance.assign(static_cast<std::size_t>(instances), 0.0);

  parallel_for(static_cast<std::size_t>(instances), threads, [&](std::size_t inst) {
    Rng rng(mix_seed(seed, 0x6C<<8 | inst));
    const int d = 1 + static_cast<int>(rng.below(3));
    const int q = 1 + static_cast<int>(rng.below(3));
    const int r = 1 + static_cast<int>(rng.below(4));
    const int width = 2 + static_cast<int>(rng.below(7));
    const int depth = 1 + static_cast<int>(rng.below(2));
    const int R = 1 + static_cast<int>(rng.below(5));
    const std::size_t n = 2 + rng.below(4);
    const LatentLaw latent = rng.bernoulli(0.5) ? LatentLaw::StandardNormal
                                                : LatentLaw::Uniform01;
    const KernelFamily kernel =
        rng.bernoulli(0.8) ? KernelFamily::Gaussian : KernelFamily::Epanechnikov;
    const double eps0 = rng.uniform(0.3, 1.0);
    const double delta = 1e-8;

    CpfnModel model = init_model(d, q, r, std::vector<int>(static_cast<std::size_t>(depth), width),
                                 latent, kernel, eps0, rng.raw());

    Matrix Xs(n, static_cast<std::size_t>(d)), Ys(n, static_cast<std::size_t>(q));
    for (auto& v : Xs.data) v = rng.normal();
    // responses near the pushforward so kernel terms carry signal
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> u(static_cast<std::size_t>(q));
      for (auto& v : u) v = latent == LatentLaw::Uniform01 ? rng.uniform01() : rng.normal();
      const auto out = cpfn_forward(model, Xs.row(i), u);
      for (int k = 0; k < q; ++k)
        Ys.at(i, static_cast<std::size_t>(k)) =
            out[static_cast<std::size_t>(k)] + 0.3 * eps0 * rng.normal();
    }

    Rng draw_rng(mix_seed(seed, 0xD0<<8 | inst));
    const auto draws = draw_collocation(draw_rng, n, R, q, latent);
    const auto ad_grad = loss_gradient_at(model, Xs, Ys, draws, R, delta, true, 1);

    const std::size_t block = static_cast<std::size_t>(R) * q;
    const ad::Program program = [&](ad::Tape& t) -> ad::Var {
      ad::Var acc{};
      for (std::size_t i = 0; i < n; ++i) {
        const ad::Var term = loss_term_program(t, model, Xs.row(i), Ys.row(i),
                                               {draws.data() + i * block, block}, R, delta);
        acc = acc.valid() ? t.add(acc, term) : term;
      }
      return t.scale(acc, -1.0 / static_cast<double>(n));
    };
    const auto fd = finite_difference_gradient(program, model.params, step);
    report.per_instance[inst] = max_relative_error(ad_grad.gradient, fd);
  });

  report.worst = 0.0;
  for (double v : report.per_instance) report.worst = std::max(report.worst, v);
  return report;
}

// ---------------------------------------------------------------------------
// Writers
// ---------------------------------------------------------------------------

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  // shortest representation that round-trips
  for (int prec = 1; prec < 17; ++prec) {
    char probe[32];
    std::snprintf(probe, sizeof(probe), "%.*g", prec, v);
    double back;
    std::sscanf(probe, "%lf", &back);
    if (back == v) return probe;
  }
  return buf;
}

namespace {

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open output file: " + path);
  return out;
}

std::vector<std::string> metric_union(const SimStudyResult& result) {
  std::set<std::string> keys;
  for (const auto& c : result.cells)
    for (const auto& [k, _] : c.metrics) keys.insert(k);
  return {keys.begin(), keys.end()};
}

}  // namespace

void write_study_csv(const SimStudyResult& result, const SimStudyConfig& config,
                     const std::string& path) {
  auto out = open_out(path);
  out << "# config_hash=" << config.config_hash << " seed=" << config.seed << "\n";
  const auto metrics = metric_union(result);
  out << "method,n,replicates";
  for (const auto& m : metrics) out << "," << m << "_mean," << m << "_std";
  out << "\n";
  for (std::size_t g = 0; g < result.aggregates.size(); ++g) {
    const auto& mean = result.aggregates[g];
    const auto& sd = result.aggregate_stds[g];
    out << mean.method << "," << mean.n << "," << mean.replicate;
    for (const auto& m : metrics) {
      out << ",";
      if (mean.metrics.count(m))
        out << format_double(mean.metrics.at(m)) << "," << format_double(sd.metrics.at(m));
      else
        out << ",";
    }
    out << "\n";
  }
}

void write_study_json(const SimStudyResult& result, const SimStudyConfig& config,
                      const std::string& path) {
  json cells = json::array();
  for (const auto& c : result.cells) {
    json jc{{"method", c.method}, {"n", c.n}, {"replicate", c.replicate}, {"failed", c.failed}};
    if (c.failed)
      jc["error"] = c.error;
    else
      jc["metrics"] = c.metrics;
    cells.push_back(std::move(jc));
  }
  json aggregates = json::array();
  for (std::size_t g = 0; g < result.aggregates.size(); ++g) {
    aggregates.push_back(json{{"method", result.aggregates[g].method},
                              {"n", result.aggregates[g].n},
                              {"replicates", result.aggregates[g].replicate},
                              {"mean", result.aggregates[g].metrics},
                              {"std", result.aggregate_stds[g].metrics}});
  }
  json doc{{"kind", "cpfn-sim-study"},
           {"schema_version", 1},
           {"process", to_string(config.process)},
           {"seed", config.seed},
           {"config_hash", config.config_hash},
           {"r_x", config.r_x},
           {"r_tau", config.r_tau},
           {"r_y", config.r_y},
           {"r_y_assignment", config.r_y_assignment},
           {"replicates", config.replicates},
           {"cells", std::move(cells)},
           {"aggregates", std::move(aggregates)}};
  auto out = open_out(path);
  out << doc.dump(2) << "\n";
}

void write_quantile_long_csv(const SimStudyResult& result, const SimStudyConfig& config,
                             const std::string& path) {
  auto out = open_out(path);
  out << "# config_hash=" << config.config_hash << " seed=" << config.seed << "\n";
  out << "method,n,x,tau,true_q,est_q\n";
  for (const auto& r : result.quantile_rows)
    out << r.method << "," << r.n << "," << format_double(r.x) << "," << format_double(r.tau)
        << "," << format_double(r.true_q) << "," << format_double(r.est_q) << "\n";
}

void write_trace_csv(const TrainResult& result, const std::string& config_hash,
                     std::uint64_t seed, const std::string& path) {
  auto out = open_out(path);
  out << "# config_hash=" << config_hash << " seed=" << seed << "\n";
  out << "epoch,train_loss,val_loss\n";
  for (std::size_t e = 0; e < result.trace.size(); ++e)
    out << e << "," << format_double(result.trace[e].train_loss) << ","
        << format_double(result.trace[e].val_loss) << "\n";
}

void write_dataset_csv(const Dataset& data, const std::string& config_hash, std::uint64_t seed,
                       const std::string& path) {
  auto out = open_out(path);
  out << "# config_hash=" << config_hash << " seed=" << seed << "\n";
  bool first = true;
  for (const auto& c : data.x_columns) {
    out << (first ? "" : ",") << c.name;
    first = false;
  }
  for (const auto& c : data.y_columns) out << "," << c.name;
  out << "\n";
  for (std::size_t r = 0; r < data.n(); ++r) {
    for (std::size_t c = 0; c < data.X.cols; ++c)
      out << (c == 0 ? "" : ",") << format_double(data.X.at(r, c));
    for (std::size_t c = 0; c < data.Y.cols; ++c) out << "," << format_double(data.Y.at(r, c));
    out << "\n";
  }
}

}  // namespace cpfn
