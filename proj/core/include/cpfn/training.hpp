#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cpfn/autodiff.hpp"
#include "cpfn/dataset.hpp"
#include "cpfn/kernels.hpp"
#include "cpfn/model.hpp"
#include "cpfn/rng.hpp"

namespace cpfn {

// Architecture choices handed to train(); the remaining hyperparameters live
// in TrainConfig.
struct ModelSpec {
  int rank = 20;
  std::vector<int> hidden_widths = {50, 50, 50};
  LatentLaw latent = LatentLaw::StandardNormal;
  KernelFamily kernel = KernelFamily::Gaussian;
};

struct TrainConfig {
  int epochs = 3000;
  int collocation = 30;  // R draws per datum per step
  double delta = 1e-15;
  std::vector<double> eps0 = {0.05};
  double learning_rate = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  double validation_fraction = 0.1;
  int batch_size = 0;  // 0 = full batch
  bool train_bandwidth = true;
  int threads = 0;  // 0 = resolve_threads default

  void validate() const;
};

struct AdamState {
  std::vector<double> first_moment;
  std::vector<double> second_moment;
  long step_count = 0;

  static AdamState zeros(std::size_t n);
};

// Canonical Adam with bias correction (defaults lr=1e-3, b1=0.9, b2=0.999,
// eps_hat=1e-8).
void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state,
               double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999,
               double eps_hat = 1e-8);

// Per-column sample mean and sample std (denominator n-1); constant columns
// have their std clamped to 1 and are reported in clamped_*.
struct DataStandardization {
  ColumnStats x;
  ColumnStats y;
  std::vector<int> clamped_x;
  std::vector<int> clamped_y;
};
DataStandardization standardize_fit(const Dataset& data);

// Latent draws for a batch: for datum i, the (q x R) row-major block starting
// at i*q*R, entry (k, j) at offset k*R + j.
std::vector<double> draw_collocation(Rng& rng, std::size_t n, int R, int q, LatentLaw law);

// Monte Carlo loss of the batch at fixed draws:
//   -(1/n) sum_i log[ delta + (1/R) sum_j kappa_eps(y_i - phi(x_i, u_ij)) ]
// Xs/Ys are standardized rows. Plain-forward evaluation (no tape).
double cpfn_loss_at(const CpfnModel& model, const Matrix& Xs, const Matrix& Ys,
                    std::span<const double> draws, int R, double delta, int threads = 1);

// Same, drawing the u_ij from rng.
double cpfn_loss(const CpfnModel& model, const Matrix& Xs, const Matrix& Ys, int R, double delta,
                 Rng& rng, int threads = 1);

// Loss value through the batched tape path used by training; agrees with
// cpfn_loss_at up to accumulation rounding.
double cpfn_loss_batched(const CpfnModel& model, const Matrix& Xs, const Matrix& Ys,
                         std::span<const double> draws, int R, double delta, int threads = 1);

// Tape program computing one datum's log(delta + mean kernel) term; exposed
// so gradient checks can replay the exact training computation.
ad::Var loss_term_program(ad::Tape& tape, const CpfnModel& model, std::span<const double> x,
                          std::span<const double> y, std::span<const double> u_block, int R,
                          double delta);

// Gradient of the batch loss w.r.t. (theta, log_eps) at fixed draws; when
// train_bandwidth is false the log_eps coordinates are zeroed.
GradientResult loss_gradient_at(const CpfnModel& model, const Matrix& Xs, const Matrix& Ys,
                                std::span<const double> draws, int R, double delta,
                                bool train_bandwidth = true, int threads = 1);
GradientResult loss_gradient(const CpfnModel& model, const Matrix& Xs, const Matrix& Ys, int R,
                             double delta, Rng& rng, bool train_bandwidth = true,
                             int threads = 1);

struct EpochTrace {
  double train_loss = 0.0;
  double val_loss = 0.0;
};

struct TrainResult {
  CpfnModel model;
  std::vector<EpochTrace> trace;
  int best_epoch = -1;
  double best_val_loss = 0.0;
  bool aborted_non_finite = false;
  std::string diagnostic;
  std::vector<std::string> warnings;
};

// Standardizes, splits off the validation rows (seeded shuffle), runs Adam on
// the Monte Carlo loss with fresh collocation draws per step, and returns the
// parameter snapshot with the lowest validation loss (training loss when
// validation_fraction = 0).
TrainResult train(const Dataset& data, const ModelSpec& spec, const TrainConfig& config);

}  // namespace cpfn
