#include "cpfn/training.hpp"
#include <cstdlib>

#include <algorithm>
#include <cmath>
#include <limits>

#include "cpfn/parallel.hpp"

namespace cpfn {

namespace {

// Fixed chunk grid for data-parallel reductions. Partial sums are combined in
// chunk order, so results are bit-identical for any worker count.
constexpr std::size_t kReductionChunks = 64;

constexpr double kPi = 3.14159265358979323846;

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 1) throw InvalidConfig("epochs must be >= 1");
  if (collocation < 1) throw InvalidConfig("collocation draws must be >= 1");
  if (!(delta > 0.0)) throw InvalidConfig("delta must be > 0");
  if (eps0.empty()) throw InvalidConfig("eps0 must be set");
  for (double e : eps0)
    if (!(e > 0.0)) throw InvalidConfig("eps0 must be positive");
  if (!(learning_rate > 0.0)) throw InvalidConfig("learning rate must be positive");
  if (!(validation_fraction >= 0.0 && validation_fraction < 1.0))
    throw InvalidConfig("validation_fraction must be in [0, 1)");
  if (batch_size < 0) throw InvalidConfig("batch_size must be >= 0");
}

AdamState AdamState::zeros(std::size_t n) {
  AdamState s;
  s.first_moment.assign(n, 0.0);
  s.second_moment.assign(n, 0.0);
  return s;
}

void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state,
               double lr, double beta1, double beta2, double eps_hat) {
  if (params.size() != grads.size() || params.size() != state.first_moment.size())
    throw DimensionMismatch("adam_step: shape mismatch");
  state.step_count += 1;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step_count));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step_count));
  double* m = state.first_moment.data();
  double* v = state.second_moment.data();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    m[i] = beta1 * m[i] + (1.0 - beta1) * g;
    v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
    const double mhat = m[i] / bc1;
    const double vhat = v[i] / bc2;
    params[i] -= lr * mhat / (std::sqrt(vhat) + eps_hat);
  }
}

namespace {

void fit_columns(const Matrix& m, ColumnStats& stats, std::vector<int>& clamped) {
  const std::size_t n = m.rows;
  stats.mean.assign(m.cols, 0.0);
  stats.std.assign(m.cols, 1.0);
  for (std::size_t c = 0; c < m.cols; ++c) {
    double mean = 0.0;
    for (std::size_t r = 0; r < n; ++r) mean += m.at(r, c);
    mean /= static_cast<double>(n);
    double ss = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
      const double dv = m.at(r, c) - mean;
      ss += dv * dv;
    }
    double sd = std::sqrt(ss / static_cast<double>(n - 1));
    stats.mean[c] = mean;
    if (!(sd > 0.0)) {
      sd = 1.0;
      clamped.push_back(static_cast<int>(c));
    }
    stats.std[c] = sd;
  }
}

}  // namespace

DataStandardization standardize_fit(const Dataset& data) {
  data.validate();
  if (data.n() < 2) throw DataError("standardize_fit: need at least 2 rows");
  DataStandardization out;
  fit_columns(data.X, out.x, out.clamped_x);
  fit_columns(data.Y, out.y, out.clamped_y);
  return out;
}

std::vector<double> draw_collocation(Rng& rng, std::size_t n, int R, int q, LatentLaw law) {
  std::vector<double> draws(n * static_cast<std::size_t>(R) * q);
  const std::size_t block = static_cast<std::size_t>(R) * q;
  for (std::size_t i = 0; i < n; ++i) {
    double* b = draws.data() + i * block;
    for (int j = 0; j < R; ++j)
      for (int k = 0; k < q; ++k)
        b[static_cast<std::size_t>(k) * R + j] =
            law == LatentLaw::Uniform01 ? rng.uniform01() : rng.normal();
  }
  return draws;
}

// ---------------------------------------------------------------------------
// Loss programs
// ---------------------------------------------------------------------------

namespace {

ad::Var mlp_program(ad::Tape& t, const NetworkArchitecture& arch, std::size_t base_offset,
                    ad::Var input) {
  const auto layers = mlp_layout(arch, base_offset);
  ad::Var h = input;
  for (std::size_t k = 0; k < layers.size(); ++k) {
    const auto& l = layers[k];
    h = t.affine(h, l.w, l.b, l.out);
    const bool last = (k + 1 == layers.size());
    const Activation act = last ? arch.output_activation : arch.hidden_activation;
    if (act == Activation::Gelu) h = t.gelu(h);
  }
  return h;
}

}  // namespace

ad::Var loss_term_program(ad::Tape& t, const CpfnModel& model, std::span<const double> x,
                          std::span<const double> y, std::span<const double> u_block, int R,
                          double delta) {
  const int q = model.q;
  const ad::Var phi = mlp_program(t, model.phi_arch, model.phi_offset(), t.input(x));
  const ad::Var psi =
      mlp_program(t, model.psi_arch, model.psi_offset(), t.input(u_block, q, R));
  const ad::Var out = t.rank_combine(phi, psi, model.rank, q);
  const ad::Var resid = t.sub_bcast_col(t.input(y), out);

  const ad::Var log_eps = t.param(model.log_eps_offset(), static_cast<std::size_t>(q));
  const ad::Var inv_eps = t.exp(t.scale(log_eps, -1.0));
  const ad::Var z = t.scale_rows(resid, inv_eps);
  const ad::Var prod_inv = t.exp(t.scale(t.sum_all(log_eps), -1.0));

  ad::Var kvec;
  if (model.kernel.family == KernelFamily::Gaussian) {
    const ad::Var s = t.col_sqnorm(z);
    const ad::Var e = t.exp(t.scale(s, -0.5));
    kvec = t.scale(t.mul(e, prod_inv), std::pow(2.0 * kPi, -0.5 * q));
  } else {
    const ad::Var one_minus = t.add_const(t.scale(t.mul(z, z), -1.0), 1.0);
    const ad::Var clipped = t.relu(one_minus);
    kvec = t.scale(t.mul(t.col_prod(clipped), prod_inv), std::pow(0.75, q));
  }
  const ad::Var mean_k = t.scale(t.sum_all(kvec), 1.0 / R);
  return t.log(t.add_const(mean_k, delta));
}

// ---------------------------------------------------------------------------
// Loss value (plain forward) and gradient (tape)
// ---------------------------------------------------------------------------

double cpfn_loss_at(const CpfnModel& model, const Matrix& Xs, const Matrix& Ys,
                    std::span<const double> draws, int R, double delta, int threads) {
  if (Xs.rows != Ys.rows) throw DimensionMismatch("cpfn_loss: X/Y row mismatch");
  if (Xs.rows == 0) throw EmptyDataset("cpfn_loss: empty batch");
  if (!(delta > 0.0)) throw InvalidConfig("cpfn_loss: delta must be > 0");
  if (R < 1) throw InvalidConfig("cpfn_loss: R must be >= 1");
  const std::size_t n = Xs.rows;
  const int q = model.q;
  const std::size_t block = static_cast<std::size_t>(R) * q;
  if (draws.size() != n * block) throw DimensionMismatch("cpfn_loss: draw buffer mismatch");

  const std::size_t phi_size = model.phi_arch.parameter_count();
  const std::size_t psi_size = model.psi_arch.parameter_count();
  const std::span<const double> phi_slice{model.params.data() + model.phi_offset(), phi_size};
  const std::span<const double> psi_slice{model.params.data() + model.psi_offset(), psi_size};
  const Bandwidth bw = model.bandwidth();

  std::vector<double> partial(kReductionChunks, 0.0);
  parallel_chunks(n, kReductionChunks, threads, [&](std::size_t chunk, std::size_t b,
                                                    std::size_t e) {
    double acc = 0.0;
    std::vector<double> u(static_cast<std::size_t>(q));
    std::vector<double> v(static_cast<std::size_t>(q));
    for (std::size_t i = b; i < e; ++i) {
      const auto phi = mlp_forward(model.phi_arch, phi_slice, Xs.row(i));
      const double* ub = draws.data() + i * block;
      const auto y = Ys.row(i);
      double sum_k = 0.0;
      for (int j = 0; j < R; ++j) {
        for (int k = 0; k < q; ++k) u[static_cast<std::size_t>(k)] = ub[static_cast<std::size_t>(k) * R + j];
        const auto psi = mlp_forward(model.psi_arch, psi_slice, u);
        for (int k = 0; k < q; ++k) {
          double acc_out = 0.0;
          for (int r = 0; r < model.rank; ++r) {
            const std::size_t idx = static_cast<std::size_t>(r) * q + k;
            acc_out += phi[idx] * psi[idx];
          }
          v[static_cast<std::size_t>(k)] = y[static_cast<std::size_t>(k)] - acc_out;
        }
        const double kv = scaled_kernel_eval(model.kernel, bw, v);
        if (!std::isfinite(kv)) throw NonFiniteLoss("kernel evaluation overflowed");
        sum_k += kv;
      }
      acc += std::log(delta + sum_k / R);
    }
    partial[chunk] = acc;
  });

  double total = 0.0;
  for (double p : partial) total += p;
  const double loss = -total / static_cast<double>(n);
  if (!std::isfinite(loss)) throw NonFiniteLoss("non-finite loss value");
  return loss;
}

double cpfn_loss(const CpfnModel& model, const Matrix& Xs, const Matrix& Ys, int R, double delta,
                 Rng& rng, int threads) {
  const auto draws = draw_collocation(rng, Xs.rows, R, model.q, model.latent);
  return cpfn_loss_at(model, Xs, Ys, draws, R, delta, threads);
}

namespace {

// Builds the whole-block program: B samples batched through one tape, each
// sample owning a contiguous group of R columns. Returns sum_b of the
// per-sample log(delta + mean kernel) terms.
ad::Var loss_block_program(ad::Tape& t, const CpfnModel& model, std::span<const double> xb,
                           std::span<const double> yb, std::span<const double> ub, int B, int R,
                           double delta) {
  const int q = model.q;
  const ad::Var phi = mlp_program(t, model.phi_arch, model.phi_offset(),
                                  t.input(xb, model.d, B));
  const ad::Var psi = mlp_program(t, model.psi_arch, model.psi_offset(),
                                  t.input(ub, q, B * R));
  const ad::Var out = t.rank_combine_grouped(phi, psi, model.rank, q, R);
  const ad::Var resid = t.sub_bcast_grouped(t.input(yb, q, B), out, R);

  const ad::Var log_eps = t.param(model.log_eps_offset(), static_cast<std::size_t>(q));
  const ad::Var inv_eps = t.exp(t.scale(log_eps, -1.0));
  const ad::Var z = t.scale_rows(resid, inv_eps);
  const ad::Var prod_inv = t.exp(t.scale(t.sum_all(log_eps), -1.0));

  ad::Var kvec;
  if (model.kernel.family == KernelFamily::Gaussian) {
    const ad::Var s = t.col_sqnorm(z);
    const ad::Var e = t.exp(t.scale(s, -0.5));
    kvec = t.scale(t.mul(e, prod_inv), std::pow(2.0 * kPi, -0.5 * q));
  } else {
    const ad::Var one_minus = t.add_const(t.scale(t.mul(z, z), -1.0), 1.0);
    const ad::Var clipped = t.relu(one_minus);
    kvec = t.scale(t.mul(t.col_prod(clipped), prod_inv), std::pow(0.75, q));
  }
  const ad::Var means = t.scale(t.group_sum(kvec, R), 1.0 / R);
  const ad::Var terms = t.log(t.add_const(means, delta));
  return t.sum_all(terms);
}

// Shared implementation of the batched loss value and gradient. When
// grad_out is null only the forward pass runs.
double block_loss_impl(const CpfnModel& model, const Matrix& Xs, const Matrix& Ys,
                       std::span<const double> draws, int R, double delta, int threads,
                       std::vector<double>* grad_out) {
  if (Xs.rows != Ys.rows) throw DimensionMismatch("loss: X/Y row mismatch");
  if (Xs.rows == 0) throw EmptyDataset("loss: empty batch");
  if (!(delta > 0.0)) throw InvalidConfig("loss: delta must be > 0");
  if (R < 1) throw InvalidConfig("loss: R must be >= 1");
  const std::size_t n = Xs.rows;
  const int d = model.d;
  const int q = model.q;
  const std::size_t block = static_cast<std::size_t>(R) * q;
  if (draws.size() != n * block) throw DimensionMismatch("loss: draw buffer mismatch");
  const std::size_t P = model.params.size();

  // Sub-blocks sized so the tape arena stays cache-resident: roughly 120
  // batched columns regardless of R.
  std::size_t block_cols = 120;
  if (const char* env = std::getenv("CPFN_BLOCK_COLS")) {
    const long v = std::atol(env);
    if (v > 0) block_cols = static_cast<std::size_t>(v);
  }
  const std::size_t max_block = std::max<std::size_t>(1, block_cols / static_cast<std::size_t>(R));

  const std::size_t n_chunks = std::min<std::size_t>(kReductionChunks, n);
  std::vector<double> partial_val(n_chunks, 0.0);
  std::vector<std::vector<double>> partial_grad(grad_out ? n_chunks : 0);

  parallel_chunks(n, n_chunks, threads, [&](std::size_t chunk, std::size_t b, std::size_t e) {
    double acc = 0.0;
    ad::Tape tape(model.params);
    std::vector<double> xb, yb, ub;
    std::vector<double>* grad = nullptr;
    if (grad_out) {
      partial_grad[chunk].assign(P, 0.0);
      grad = &partial_grad[chunk];
    }
    const double w = -1.0 / static_cast<double>(n);
    for (std::size_t beg = b; beg < e; beg += max_block) {
      const std::size_t end = std::min(e, beg + max_block);
      const int B = static_cast<int>(end - beg);
      xb.assign(static_cast<std::size_t>(d) * B, 0.0);
      yb.assign(static_cast<std::size_t>(q) * B, 0.0);
      ub.assign(static_cast<std::size_t>(q) * B * R, 0.0);
      for (std::size_t i = beg; i < end; ++i) {
        const std::size_t s = i - beg;
        for (int k = 0; k < d; ++k) xb[static_cast<std::size_t>(k) * B + s] = Xs.at(i, k);
        for (int k = 0; k < q; ++k) yb[static_cast<std::size_t>(k) * B + s] = Ys.at(i, k);
        // draw block for sample i is (q x R) row-major; row k lands in the
        // wide (q x B*R) input at columns [s*R, (s+1)*R)
        const double* src = draws.data() + i * block;
        for (int k = 0; k < q; ++k)
          std::copy(src + static_cast<std::size_t>(k) * R, src + static_cast<std::size_t>(k + 1) * R,
                    ub.begin() + static_cast<std::size_t>(k) * B * R + s * static_cast<std::size_t>(R));
      }
      tape.reset();
      const ad::Var total = loss_block_program(tape, model, xb, yb, ub, B, R, delta);
      acc += tape.value_scalar(total);
      if (grad) tape.backward_into(total, *grad, w);
    }
    partial_val[chunk] = acc;
  });

  double total = 0.0;
  for (std::size_t c = 0; c < n_chunks; ++c) total += partial_val[c];
  const double loss = -total / static_cast<double>(n);
  if (!std::isfinite(loss)) throw NonFiniteLoss("non-finite loss value");

  if (grad_out) {
    grad_out->assign(P, 0.0);
    for (std::size_t c = 0; c < n_chunks; ++c) {
      const auto& g = partial_grad[c];
      if (g.empty()) continue;  // chunk grid can overshoot the data
      for (std::size_t i = 0; i < P; ++i) (*grad_out)[i] += g[i];
    }
  }
  return loss;
}

}  // namespace

double cpfn_loss_batched(const CpfnModel& model, const Matrix& Xs, const Matrix& Ys,
                         std::span<const double> draws, int R, double delta, int threads) {
  return block_loss_impl(model, Xs, Ys, draws, R, delta, threads, nullptr);
}

GradientResult loss_gradient_at(const CpfnModel& model, const Matrix& Xs, const Matrix& Ys,
                                std::span<const double> draws, int R, double delta,
                                bool train_bandwidth, int threads) {
  GradientResult res;
  res.value = block_loss_impl(model, Xs, Ys, draws, R, delta, threads, &res.gradient);

  if (!train_bandwidth) {
    const std::size_t off = model.log_eps_offset();
    for (int j = 0; j < model.q; ++j) res.gradient[off + static_cast<std::size_t>(j)] = 0.0;
  }
  return res;
}

GradientResult loss_gradient(const CpfnModel& model, const Matrix& Xs, const Matrix& Ys, int R,
                             double delta, Rng& rng, bool train_bandwidth, int threads) {
  const auto draws = draw_collocation(rng, Xs.rows, R, model.q, model.latent);
  return loss_gradient_at(model, Xs, Ys, draws, R, delta, train_bandwidth, threads);
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

namespace {

Matrix standardize_rows(const Matrix& m, const ColumnStats& stats,
                        std::span<const std::size_t> rows) {
  Matrix out(rows.size(), m.cols);
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < m.cols; ++c)
      out.at(r, c) = (m.at(rows[r], c) - stats.mean[c]) / stats.std[c];
  return out;
}

}  // namespace

TrainResult train(const Dataset& data, const ModelSpec& spec, const TrainConfig& config) {
  config.validate();
  data.validate();
  const std::size_t n = data.n();
  const int d = data.d();
  const int q = data.q();
  const int R = config.collocation;

  TrainResult result;
  const auto stzn = standardize_fit(data);
  for (int c : stzn.clamped_x)
    result.warnings.push_back("constant X column " + std::to_string(c) + "; std clamped to 1");
  for (int c : stzn.clamped_y)
    result.warnings.push_back("constant Y column " + std::to_string(c) + "; std clamped to 1");

  // Seeded shuffle; the leading rows of the permutation form the validation
  // split.
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  Rng shuffle_rng(mix_seed(config.seed, 1));
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = shuffle_rng.below(i);
    std::swap(perm[i - 1], perm[j]);
  }
  const std::size_t n_val = static_cast<std::size_t>(
      std::floor(config.validation_fraction * static_cast<double>(n)));
  const std::span<const std::size_t> val_rows{perm.data(), n_val};
  const std::span<const std::size_t> train_rows{perm.data() + n_val, n - n_val};
  if (train_rows.empty()) throw InvalidConfig("train: no rows left after validation split");

  const Matrix Xtr = standardize_rows(data.X, stzn.x, train_rows);
  const Matrix Ytr = standardize_rows(data.Y, stzn.y, train_rows);
  const Matrix Xval = standardize_rows(data.X, stzn.x, val_rows);
  const Matrix Yval = standardize_rows(data.Y, stzn.y, val_rows);

  CpfnModel model = init_model(d, q, spec.rank, spec.hidden_widths, spec.latent, spec.kernel,
                               config.eps0, mix_seed(config.seed, 0));
  model.x_stats = stzn.x;
  model.y_stats = stzn.y;
  model.y_transform = data.y_transform;
  model.seed = config.seed;

  AdamState adam = AdamState::zeros(model.params.size());
  Rng colloc_rng(mix_seed(config.seed, 2));
  Rng batch_rng(mix_seed(config.seed, 4));
  Rng val_rng(mix_seed(config.seed, 3));
  // Validation draws are fixed once so the best-state criterion is stable
  // across epochs.
  const auto val_draws = draw_collocation(val_rng, n_val, R, q, model.latent);

  double best_val = std::numeric_limits<double>::infinity();
  std::vector<double> best_params;
  std::vector<double> last_good = model.params.values();
  const std::size_t n_train = train_rows.size();
  std::vector<std::size_t> batch_order(n_train);
  for (std::size_t i = 0; i < n_train; ++i) batch_order[i] = i;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    double train_loss = 0.0;
    try {
      if (config.batch_size == 0 || static_cast<std::size_t>(config.batch_size) >= n_train) {
        const auto draws = draw_collocation(colloc_rng, n_train, R, q, model.latent);
        const auto g = loss_gradient_at(model, Xtr, Ytr, draws, R, config.delta,
                                        config.train_bandwidth, config.threads);
        adam_step(model.params.values(), g.gradient, adam, config.learning_rate,
                  config.adam_beta1, config.adam_beta2, config.adam_eps);
        train_loss = g.value;
      } else {
        for (std::size_t i = n_train; i > 1; --i) {
          const std::size_t j = batch_rng.below(i);
          std::swap(batch_order[i - 1], batch_order[j]);
        }
        const std::size_t bs = static_cast<std::size_t>(config.batch_size);
        double weighted = 0.0;
        for (std::size_t start = 0; start < n_train; start += bs) {
          const std::size_t stop = std::min(n_train, start + bs);
          Matrix Xb(stop - start, Xtr.cols), Yb(stop - start, Ytr.cols);
          for (std::size_t r = start; r < stop; ++r) {
            const std::size_t src = batch_order[r];
            std::copy(Xtr.row(src).begin(), Xtr.row(src).end(), Xb.row(r - start).begin());
            std::copy(Ytr.row(src).begin(), Ytr.row(src).end(), Yb.row(r - start).begin());
          }
          const auto draws = draw_collocation(colloc_rng, Xb.rows, R, q, model.latent);
          const auto g = loss_gradient_at(model, Xb, Yb, draws, R, config.delta,
                                          config.train_bandwidth, config.threads);
          adam_step(model.params.values(), g.gradient, adam, config.learning_rate,
                    config.adam_beta1, config.adam_beta2, config.adam_eps);
          weighted += g.value * static_cast<double>(Xb.rows);
        }
        train_loss = weighted / static_cast<double>(n_train);
      }
      model.params.check_finite();
    } catch (const NumericalError& e) {
      // Abort with the last finite snapshot rather than clamping; a collapsed
      // bandwidth should be visible to the caller.
      model.params.values() = last_good;
      result.aborted_non_finite = true;
      result.diagnostic =
          "non-finite loss at epoch " + std::to_string(epoch) + ": " + e.what();
      break;
    }

    double val_loss = train_loss;
    if (n_val > 0)
      val_loss = cpfn_loss_batched(model, Xval, Yval, val_draws, R, config.delta, config.threads);
    result.trace.push_back(EpochTrace{train_loss, val_loss});
    if (val_loss < best_val) {
      best_val = val_loss;
      best_params = model.params.values();
      result.best_epoch = epoch;
    }
    last_good = model.params.values();
  }

  if (!result.aborted_non_finite && !best_params.empty()) model.params.values() = best_params;
  result.best_val_loss = best_val;
  result.model = std::move(model);
  return result;
}

}  // namespace cpfn
