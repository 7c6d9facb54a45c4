#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cpfn/errors.hpp"
#include "cpfn/fastmath.hpp"

namespace cpfn {

// ---------------------------------------------------------------------------
// Flat parameter storage
// ---------------------------------------------------------------------------

struct ParamSegment {
  std::string name;
  std::size_t offset = 0;
  std::vector<std::size_t> shape;

  std::size_t size() const {
    std::size_t s = 1;
    for (std::size_t d : shape) s *= d;
    return s;
  }
};

// Contiguous 64-bit parameter vector with a named segment layout. All model
// weights, biases and the log-bandwidth live here so the optimizer sees one
// flat array.
class ParameterVector {
 public:
  // Appends a zero-initialized segment and returns its offset.
  std::size_t add_segment(std::string name, std::vector<std::size_t> shape);

  bool has_segment(std::string_view name) const;
  const ParamSegment& segment(std::string_view name) const;
  const std::vector<ParamSegment>& segments() const { return segments_; }

  std::span<double> view(std::string_view name);
  std::span<const double> view(std::string_view name) const;

  std::size_t size() const { return values_.size(); }
  double* data() { return values_.data(); }
  const double* data() const { return values_.data(); }
  std::vector<double>& values() { return values_; }
  const std::vector<double>& values() const { return values_; }

  // Throws NonFiniteValue if any entry is NaN/Inf.
  void check_finite() const;

 private:
  std::vector<double> values_;
  std::vector<ParamSegment> segments_;
};

struct GradientResult {
  double value = 0.0;
  std::vector<double> gradient;  // same length as the ParameterVector
};

// ---------------------------------------------------------------------------
// Scalar math helpers (exact erf-based gelu)
// ---------------------------------------------------------------------------

inline double norm_cdf(double z) { return fastmath::norm_cdf_scalar(z); }
inline double norm_pdf(double z) {
  return 0.39894228040143267794 * fastmath::exp_scalar(-0.5 * z * z);
}

// gelu(z) = z * Phi(z) with Phi the standard normal CDF.
inline double gelu(double z) { return z * norm_cdf(z); }
inline double gelu_derivative(double z) { return norm_cdf(z) + z * norm_pdf(z); }

namespace ad {

// ---------------------------------------------------------------------------
// Reverse-mode tape over matrix-valued nodes
// ---------------------------------------------------------------------------
//
// Nodes hold row-major (rows x cols) value blocks; a column is one sample, so
// a whole collocation batch flows through each node. The tape is rebuilt for
// every loss evaluation; arenas keep their capacity across reset() calls.

enum class UnaryOp { Gelu, Tanh, Exp, Log, Relu };

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

class Tape {
 public:
  explicit Tape(const ParameterVector& params);
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Drops all nodes, keeps arena capacity and the params binding.
  void reset();

  // --- leaves ---
  Var input(std::span<const double> data, int rows, int cols);
  Var input(std::span<const double> data);  // column vector
  Var param(std::size_t offset, std::size_t size);

  // --- primitives ---
  // y = W x + b applied per column; W is (out_dim x in_dim) row-major at
  // w_offset inside the ParameterVector, b at b_offset.
  Var affine(Var x, std::size_t w_offset, std::size_t b_offset, int out_dim);
  Var unary(UnaryOp op, Var x);
  Var gelu(Var x) { return unary(UnaryOp::Gelu, x); }
  Var tanh(Var x) { return unary(UnaryOp::Tanh, x); }
  Var exp(Var x) { return unary(UnaryOp::Exp, x); }
  Var log(Var x) { return unary(UnaryOp::Log, x); }
  Var relu(Var x) { return unary(UnaryOp::Relu, x); }

  // Elementwise on equal shapes; a 1x1 operand broadcasts.
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var add_const(Var a, double c);
  Var scale(Var a, double c);

  // out[i,c] = a[i] - b[i,c]  (a is rows x 1)
  Var sub_bcast_col(Var a, Var b);
  // out[i,c] = a[i,c] * v[i]  (v is rows x 1)
  Var scale_rows(Var a, Var v);

  // Column-wise reductions to 1 x C.
  Var col_sqnorm(Var a);
  Var col_prod(Var a);
  Var col_sum(Var a);
  // Sum of all entries, 1 x 1.
  Var sum_all(Var a);

  // out[j,c] = sum_i a[i*q+j] * b[i*q+j, c] with a (r*q x 1), b (r*q x C).
  Var rank_combine(Var a, Var b, int r, int q);

  // Grouped variants processing a block of B samples whose per-sample columns
  // are laid out contiguously in groups of g:
  //   rank_combine_grouped: a (r*q x B), b (r*q x B*g) ->
  //     out[j, s*g+c] = sum_i a[i*q+j, s] * b[i*q+j, s*g+c]
  Var rank_combine_grouped(Var a, Var b, int r, int q, int g);
  //   out[i, s*g+c] = a[i, s] - b[i, s*g+c]
  Var sub_bcast_grouped(Var a, Var b, int g);
  //   out[0, s] = sum_{c in group s} x[0, s*g+c]  (x is 1 x B*g)
  Var group_sum(Var x, int g);

  // --- inspection ---
  int rows(Var v) const;
  int cols(Var v) const;
  std::span<const double> values(Var v) const;
  double value_scalar(Var v) const;

  // Accumulates weight * d(node)/d(params) into grad (length params.size()).
  // The node must be 1 x 1.
  void backward_into(Var v, std::span<double> grad, double weight = 1.0);

  const ParameterVector& params() const { return params_; }

 private:
  struct Node;
  Var push(Node n, int rows, int cols);
  void ensure_finite(int id);
  friend struct TapeImpl;

  const ParameterVector& params_;
  std::vector<Node> nodes_;
  std::vector<double> val_;
  std::vector<double> adj_;
  std::vector<double> aux_;
  std::size_t val_top_ = 0;
  std::size_t aux_top_ = 0;
};

using Program = std::function<Var(Tape&)>;

}  // namespace ad

// Forward + exact reverse-mode gradient of a scalar program.
GradientResult evaluate_with_gradient(const ad::Program& program, const ParameterVector& params);

// Forward value only.
double evaluate(const ad::Program& program, const ParameterVector& params);

// Central finite differences (p(theta+h e_i) - p(theta-h e_i)) / (2h); the
// test oracle for every gradient in the library.
std::vector<double> finite_difference_gradient(const ad::Program& program,
                                               const ParameterVector& params, double step);

// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor); the gradient-check metric.
double max_relative_error(std::span<const double> a, std::span<const double> b,
                          double floor = 1.0);

}  // namespace cpfn
