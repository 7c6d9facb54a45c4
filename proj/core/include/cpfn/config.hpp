#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cpfn/harness.hpp"
#include "cpfn/model.hpp"
#include "cpfn/training.hpp"

namespace cpfn {

// Everything a CLI run can configure, parsed from a JSON file plus flag
// overrides. Unknown keys anywhere in the file are rejected before any
// compute starts.
struct RunConfig {
  std::uint64_t seed = 0;
  int threads = 0;

  ModelSpec model;
  TrainConfig train;

  // data section
  std::string data_path;
  std::vector<std::string> x_columns;
  std::vector<std::string> y_columns;
  ResponseTransform y_transform = ResponseTransform::Identity;
  bool one_hot = false;

  // metric grids
  int r_x = 1000;
  int r_tau = 100;
  int r_y = 1000;
  int r_y_assignment = 200;
  int r_density = 1000;

  // simulate section
  SimProcess sim_process = SimProcess::Univariate;
  std::size_t sim_n = 1000;

  // eval-sim section
  SimProcess study_process = SimProcess::Univariate;
  std::vector<std::size_t> study_n_list = {250, 500, 1000};
  int study_replicates = 10;
  bool study_cpfn = true;
  bool study_kcde = true;
  BandwidthRule kcde_rule = BandwidthRule::Silverman;

  // eval-nll section
  int folds = 5;

  // hash of the effective configuration; filled by finalize()
  std::string hash;
};

// Parses and validates the JSON text (all sections optional). Throws
// InvalidConfig on unknown keys or malformed values.
RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::string& path);
RunConfig default_run_config();

// Recomputes the config hash from the effective values; call after applying
// flag overrides.
void finalize_run_config(RunConfig& config);

// Canonical JSON dump of the effective configuration.
std::string run_config_to_json(const RunConfig& config);

}  // namespace cpfn
