#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "cpfn/autodiff.hpp"
#include "cpfn/kernels.hpp"

namespace cpfn {

enum class Activation { Identity, Gelu };
enum class LatentLaw { Uniform01, StandardNormal };
enum class ResponseTransform { Identity, Log1p };

LatentLaw latent_from_string(const std::string& name);
std::string to_string(LatentLaw law);
ResponseTransform transform_from_string(const std::string& name);
std::string to_string(ResponseTransform t);

struct NetworkArchitecture {
  int in_dim = 1;
  int out_dim = 1;
  std::vector<int> hidden_widths;
  Activation hidden_activation = Activation::Gelu;
  Activation output_activation = Activation::Identity;

  // [in_dim, hidden..., out_dim]
  std::vector<int> layer_dims() const;
  // sum over layers of (fan_in + 1) * fan_out
  std::size_t parameter_count() const;
};

struct LayerOffsets {
  std::size_t w = 0;
  std::size_t b = 0;
  int in = 0;
  int out = 0;
};

// Per-layer (W, b) offsets for an MLP whose segments start at base_offset in
// the flat parameter vector. W is (out x in) row-major, b follows it.
std::vector<LayerOffsets> mlp_layout(const NetworkArchitecture& arch, std::size_t base_offset);

// Per-column mean/std pairs used for z-score standardization.
struct ColumnStats {
  std::vector<double> mean;
  std::vector<double> std;

  static ColumnStats identity(int dim);
  int dim() const { return static_cast<int>(mean.size()); }
};

// The trained artifact: the two submodules, the flat parameter vector
// (phi segments, then psi segments, then log_eps), standardization stats and
// the response transform tag.
struct CpfnModel {
  NetworkArchitecture phi_arch;
  NetworkArchitecture psi_arch;
  ParameterVector params;
  int rank = 1;
  int d = 1;
  int q = 1;
  KernelSpec kernel;
  LatentLaw latent = LatentLaw::StandardNormal;
  ColumnStats x_stats;
  ColumnStats y_stats;
  ResponseTransform y_transform = ResponseTransform::Identity;

  // Provenance carried into every artifact written from this model.
  std::uint64_t seed = 0;
  std::string config_hash;

  std::size_t phi_offset() const { return params.segment("phi.W0").offset; }
  std::size_t psi_offset() const { return params.segment("psi.W0").offset; }
  std::size_t log_eps_offset() const { return params.segment("log_eps").offset; }

  // phi + psi weights and biases, excluding the bandwidth coordinates.
  std::size_t network_parameter_count() const;

  Bandwidth bandwidth() const;
  void set_bandwidth(const Bandwidth& bw);

  void validate() const;
};

// Glorot-uniform weights, zero biases, log_eps = log(eps0) broadcast to q.
CpfnModel init_model(int d, int q, int rank, const std::vector<int>& hidden_widths,
                     LatentLaw latent, KernelFamily kernel, std::span<const double> eps0,
                     std::uint64_t seed);
CpfnModel init_model(int d, int q, int rank, const std::vector<int>& hidden_widths,
                     LatentLaw latent, KernelFamily kernel, double eps0, std::uint64_t seed);

// Forward pass of one submodule; params_slice must hold its [W0,b0,W1,b1,...]
// block contiguously.
std::vector<double> mlp_forward(const NetworkArchitecture& arch,
                                std::span<const double> params_slice,
                                std::span<const double> input);

// The rank-r combiner: out_j = sum_i phi_{i,j}(x) psi_{i,j}(u), with the
// r*q submodule outputs laid out rank-major (element (i,j) at index i*q+j).
// Inputs are in standardized coordinates.
std::vector<double> cpfn_forward(const CpfnModel& model, std::span<const double> x,
                                 std::span<const double> u);

// JSON container with schema version, architecture, parameter segments,
// stats, transform tag and a checksum over the parameter bytes.
std::string serialize_model(const CpfnModel& model);
CpfnModel deserialize_model(const std::string& bytes);
void write_model_file(const CpfnModel& model, const std::string& path);
CpfnModel read_model_file(const std::string& path);

}  // namespace cpfn
