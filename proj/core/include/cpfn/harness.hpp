#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cpfn/dataset.hpp"
#include "cpfn/kcde.hpp"
#include "cpfn/metrics.hpp"
#include "cpfn/simulators.hpp"
#include "cpfn/training.hpp"

namespace cpfn {

// ---------------------------------------------------------------------------
// CSV ingestion
// ---------------------------------------------------------------------------

struct IngestResult {
  Dataset data;
  std::size_t dropped_rows = 0;  // rows removed for missing values
};

// Reads a comma-delimited file with a header row ('#' comment lines before
// the header are skipped). Declared columns must exist and parse as numbers;
// discrete covariates ride along as numeric codes. y_transform is applied to
// the response and recorded on the dataset. With one_hot, integer-coded
// discrete covariate columns are expanded into indicator columns.
IngestResult ingest_csv(const std::string& path, const std::vector<std::string>& x_columns,
                        const std::vector<std::string>& y_columns,
                        ResponseTransform y_transform, bool one_hot = false);

// ---------------------------------------------------------------------------
// k-fold cross-validated NLL
// ---------------------------------------------------------------------------

// Index partition over a seeded permutation; fold sizes differ by at most 1
// and depend only on (n, k, seed), never on row contents.
std::vector<std::vector<std::size_t>> kfold_split(std::size_t n, int k, std::uint64_t seed);

struct KfoldNllResult {
  std::vector<double> per_fold;
  double mean = 0.0;
  std::vector<std::string> warnings;
};

// For each fold: train on the remaining folds (inner validation split per
// config), then evaluate the mean negative log predicted density on the held
// out fold in the original response scale.
KfoldNllResult kfold_nll(const Dataset& data, int k, const ModelSpec& spec,
                         const TrainConfig& config, int r_density, int threads = 0);

// ---------------------------------------------------------------------------
// Simulation study
// ---------------------------------------------------------------------------

struct SimStudyConfig {
  SimProcess process = SimProcess::Univariate;
  std::vector<std::size_t> n_list = {250, 500, 1000};
  int replicates = 10;
  ModelSpec spec;
  TrainConfig train;
  bool run_cpfn = true;
  bool run_kcde = true;
  BandwidthRule kcde_rule = BandwidthRule::Silverman;
  int r_x = 1000;       // covariate grid / draws
  int r_tau = 100;      // quantile grid
  int r_y = 1000;       // conditional samples per covariate (quantile form)
  int r_y_assignment = 200;  // conditional samples per covariate (cloud form)
  std::uint64_t seed = 0;
  int threads = 0;
  std::string config_hash;
};

struct SimStudyCell {
  std::string method;
  std::size_t n = 0;
  int replicate = 0;
  bool failed = false;
  std::string error;
  std::map<std::string, double> metrics;  // awd, aqe@tau..., noise_floor
};

struct QuantileGridRow {
  std::string method;
  std::size_t n = 0;
  double x = 0.0;
  double tau = 0.0;
  double true_q = 0.0;
  double est_q = 0.0;
};

struct SimStudyResult {
  std::vector<SimStudyCell> cells;
  // mean/std across successful replicates, keyed (method, n, metric)
  std::vector<SimStudyCell> aggregates;  // replicate = count, metrics hold means
  std::vector<SimStudyCell> aggregate_stds;
  std::vector<QuantileGridRow> quantile_rows;  // first replicate per (method, n)
};

SimStudyResult run_sim_study(const SimStudyConfig& config);

// ---------------------------------------------------------------------------
// Gradient checking (the trust anchor behind every training run)
// ---------------------------------------------------------------------------

struct GradCheckReport {
  std::vector<double> per_instance;  // max relative error per random instance
  double worst = 0.0;
};

// Draws random small models and batches, evaluates the reverse-mode loss
// gradient and central finite differences, and reports the relative errors.
GradCheckReport gradcheck(int instances, std::uint64_t seed, double step = 1e-5,
                          int threads = 1);

// ---------------------------------------------------------------------------
// Artifact writers (deterministic byte output)
// ---------------------------------------------------------------------------

std::string format_double(double v);  // shortest round-trip decimal

void write_study_csv(const SimStudyResult& result, const SimStudyConfig& config,
                     const std::string& path);
void write_study_json(const SimStudyResult& result, const SimStudyConfig& config,
                      const std::string& path);
void write_quantile_long_csv(const SimStudyResult& result, const SimStudyConfig& config,
                             const std::string& path);
void write_trace_csv(const TrainResult& result, const std::string& config_hash,
                     std::uint64_t seed, const std::string& path);
void write_dataset_csv(const Dataset& data, const std::string& config_hash, std::uint64_t seed,
                       const std::string& path);

}  // namespace cpfn
