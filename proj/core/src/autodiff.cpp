#include "cpfn/autodiff.hpp"

#include <algorithm>
#include <cstring>

#if defined(__AVX512F__) && defined(__AVX512DQ__)
#include <immintrin.h>
#endif

namespace cpfn {

// ---------------------------------------------------------------------------
// ParameterVector
// ---------------------------------------------------------------------------

std::size_t ParameterVector::add_segment(std::string name, std::vector<std::size_t> shape) {
  ParamSegment seg;
  seg.name = std::move(name);
  seg.offset = values_.size();
  seg.shape = std::move(shape);
  const std::size_t n = seg.size();
  values_.resize(values_.size() + n, 0.0);
  segments_.push_back(std::move(seg));
  return segments_.back().offset;
}

bool ParameterVector::has_segment(std::string_view name) const {
  for (const auto& s : segments_)
    if (s.name == name) return true;
  return false;
}

const ParamSegment& ParameterVector::segment(std::string_view name) const {
  for (const auto& s : segments_)
    if (s.name == name) return s;
  throw InvalidConfig("unknown parameter segment: " + std::string(name));
}

std::span<double> ParameterVector::view(std::string_view name) {
  const auto& s = segment(name);
  return {values_.data() + s.offset, s.size()};
}

std::span<const double> ParameterVector::view(std::string_view name) const {
  const auto& s = segment(name);
  return {values_.data() + s.offset, s.size()};
}

void ParameterVector::check_finite() const {
  for (double v : values_)
    if (!std::isfinite(v)) throw NonFiniteValue("non-finite parameter value");
}

namespace ad {

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

enum class Op {
  Input,
  Param,
  Affine,
  Unary,
  Add,
  Sub,
  Mul,
  AddConst,
  Scale,
  SubBcastCol,
  ScaleRows,
  ColSqNorm,
  ColProd,
  ColSum,
  SumAll,
  RankCombine,
  RankCombineGrouped,
  SubBcastGrouped,
  GroupSum,
};

struct Tape::Node {
  Op op;
  UnaryOp uop = UnaryOp::Gelu;
  int a = -1, b = -1;
  int rows = 0, cols = 0;
  std::size_t val = 0;
  std::size_t aux = 0;
  std::size_t p_off = 0, p_off2 = 0;
  double c = 0.0;
  int r = 0, q = 0, g = 0;
  std::size_t len() const { return static_cast<std::size_t>(rows) * cols; }
};

namespace {

// Deterministic dot products: fixed lane counts and a fixed horizontal-sum
// order, so results are identical from run to run.

#if defined(__AVX512F__) && defined(__AVX512DQ__)

inline double hsum(__m512d v) {
  alignas(64) double lane[8];
  _mm512_store_pd(lane, v);
  return ((lane[0] + lane[1]) + (lane[2] + lane[3])) +
         ((lane[4] + lane[5]) + (lane[6] + lane[7]));
}

inline double dot4(const double* a, const double* b, int n) {
  __m512d acc = _mm512_setzero_pd();
  int i = 0;
  for (; i + 8 <= n; i += 8)
    acc = _mm512_fmadd_pd(_mm512_loadu_pd(a + i), _mm512_loadu_pd(b + i), acc);
  double s = hsum(acc);
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

// Four simultaneous dots against a shared right-hand side.
inline void dot4x(const double* a0, const double* a1, const double* a2, const double* a3,
                  const double* b, int n, double* out) {
  __m512d c0 = _mm512_setzero_pd(), c1 = _mm512_setzero_pd();
  __m512d c2 = _mm512_setzero_pd(), c3 = _mm512_setzero_pd();
  int i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m512d x = _mm512_loadu_pd(b + i);
    c0 = _mm512_fmadd_pd(_mm512_loadu_pd(a0 + i), x, c0);
    c1 = _mm512_fmadd_pd(_mm512_loadu_pd(a1 + i), x, c1);
    c2 = _mm512_fmadd_pd(_mm512_loadu_pd(a2 + i), x, c2);
    c3 = _mm512_fmadd_pd(_mm512_loadu_pd(a3 + i), x, c3);
  }
  double s0 = hsum(c0), s1 = hsum(c1), s2 = hsum(c2), s3 = hsum(c3);
  for (; i < n; ++i) {
    s0 += a0[i] * b[i];
    s1 += a1[i] * b[i];
    s2 += a2[i] * b[i];
    s3 += a3[i] * b[i];
  }
  out[0] = s0;
  out[1] = s1;
  out[2] = s2;
  out[3] = s3;
}

#else

inline double dot4(const double* a, const double* b, int n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  int i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

inline void dot4x(const double* a0, const double* a1, const double* a2, const double* a3,
                  const double* b, int n, double* out) {
  out[0] = dot4(a0, b, n);
  out[1] = dot4(a1, b, n);
  out[2] = dot4(a2, b, n);
  out[3] = dot4(a3, b, n);
}

#endif



// Row-major GEMM kernels for the affine node. Each element's accumulation
// order is fixed (ascending reduction index), so results are reproducible
// run to run; the AVX-512 paths keep the accumulators in registers.

#if defined(__AVX512F__) && defined(__AVX512DQ__)

// Y = W X + b (broadcast over columns). W is (out x K), X is (K x C).
void gemm_fwd(const double* W, const double* b, const double* X, double* Y, int out, int K,
              int C) {
  int o = 0;
  for (; o + 4 <= out; o += 4) {
    const double* w0 = W + static_cast<std::size_t>(o) * K;
    const double* w1 = w0 + K;
    const double* w2 = w1 + K;
    const double* w3 = w2 + K;
    double* y0 = Y + static_cast<std::size_t>(o) * C;
    double* y1 = y0 + C;
    double* y2 = y1 + C;
    double* y3 = y2 + C;
    int c = 0;
    for (; c + 8 <= C; c += 8) {
      __m512d a0 = _mm512_set1_pd(b[o]);
      __m512d a1 = _mm512_set1_pd(b[o + 1]);
      __m512d a2 = _mm512_set1_pd(b[o + 2]);
      __m512d a3 = _mm512_set1_pd(b[o + 3]);
      for (int k = 0; k < K; ++k) {
        const __m512d x = _mm512_loadu_pd(X + static_cast<std::size_t>(k) * C + c);
        a0 = _mm512_fmadd_pd(_mm512_set1_pd(w0[k]), x, a0);
        a1 = _mm512_fmadd_pd(_mm512_set1_pd(w1[k]), x, a1);
        a2 = _mm512_fmadd_pd(_mm512_set1_pd(w2[k]), x, a2);
        a3 = _mm512_fmadd_pd(_mm512_set1_pd(w3[k]), x, a3);
      }
      _mm512_storeu_pd(y0 + c, a0);
      _mm512_storeu_pd(y1 + c, a1);
      _mm512_storeu_pd(y2 + c, a2);
      _mm512_storeu_pd(y3 + c, a3);
    }
    for (; c < C; ++c) {
      double s0 = b[o], s1 = b[o + 1], s2 = b[o + 2], s3 = b[o + 3];
      for (int k = 0; k < K; ++k) {
        const double x = X[static_cast<std::size_t>(k) * C + c];
        s0 += w0[k] * x;
        s1 += w1[k] * x;
        s2 += w2[k] * x;
        s3 += w3[k] * x;
      }
      y0[c] = s0;
      y1[c] = s1;
      y2[c] = s2;
      y3[c] = s3;
    }
  }
  for (; o < out; ++o) {
    const double* wr = W + static_cast<std::size_t>(o) * K;
    double* yr = Y + static_cast<std::size_t>(o) * C;
    int c = 0;
    for (; c + 8 <= C; c += 8) {
      __m512d a = _mm512_set1_pd(b[o]);
      for (int k = 0; k < K; ++k)
        a = _mm512_fmadd_pd(_mm512_set1_pd(wr[k]),
                            _mm512_loadu_pd(X + static_cast<std::size_t>(k) * C + c), a);
      _mm512_storeu_pd(yr + c, a);
    }
    for (; c < C; ++c) {
      double s = b[o];
      for (int k = 0; k < K; ++k) s += wr[k] * X[static_cast<std::size_t>(k) * C + c];
      yr[c] = s;
    }
  }
}

// gW += dY X^T and gb += rowsum(dY). Register blocks of 4 output rows by 2
// input rows; horizontal sums use a fixed lane order.
void gemm_bwd_dw(const double* X, const double* dY, double* gW, double* gb, int out, int K,
                 int C) {
  int o = 0;
  for (; o + 4 <= out; o += 4) {
    const double* dy0 = dY + static_cast<std::size_t>(o) * C;
    const double* dy1 = dy0 + C;
    const double* dy2 = dy1 + C;
    const double* dy3 = dy2 + C;
    {
      __m512d b0 = _mm512_setzero_pd(), b1 = _mm512_setzero_pd();
      __m512d b2 = _mm512_setzero_pd(), b3 = _mm512_setzero_pd();
      int c = 0;
      for (; c + 8 <= C; c += 8) {
        b0 = _mm512_add_pd(b0, _mm512_loadu_pd(dy0 + c));
        b1 = _mm512_add_pd(b1, _mm512_loadu_pd(dy1 + c));
        b2 = _mm512_add_pd(b2, _mm512_loadu_pd(dy2 + c));
        b3 = _mm512_add_pd(b3, _mm512_loadu_pd(dy3 + c));
      }
      double s0 = hsum(b0), s1 = hsum(b1), s2 = hsum(b2), s3 = hsum(b3);
      for (; c < C; ++c) {
        s0 += dy0[c];
        s1 += dy1[c];
        s2 += dy2[c];
        s3 += dy3[c];
      }
      gb[o] += s0;
      gb[o + 1] += s1;
      gb[o + 2] += s2;
      gb[o + 3] += s3;
    }
    double* g0 = gW + static_cast<std::size_t>(o) * K;
    double* g1 = g0 + K;
    double* g2 = g1 + K;
    double* g3 = g2 + K;
    int k = 0;
    for (; k + 2 <= K; k += 2) {
      const double* x0 = X + static_cast<std::size_t>(k) * C;
      const double* x1 = x0 + C;
      __m512d a00 = _mm512_setzero_pd(), a01 = _mm512_setzero_pd();
      __m512d a10 = _mm512_setzero_pd(), a11 = _mm512_setzero_pd();
      __m512d a20 = _mm512_setzero_pd(), a21 = _mm512_setzero_pd();
      __m512d a30 = _mm512_setzero_pd(), a31 = _mm512_setzero_pd();
      int c = 0;
      for (; c + 8 <= C; c += 8) {
        const __m512d vx0 = _mm512_loadu_pd(x0 + c);
        const __m512d vx1 = _mm512_loadu_pd(x1 + c);
        const __m512d v0 = _mm512_loadu_pd(dy0 + c);
        const __m512d v1 = _mm512_loadu_pd(dy1 + c);
        const __m512d v2 = _mm512_loadu_pd(dy2 + c);
        const __m512d v3 = _mm512_loadu_pd(dy3 + c);
        a00 = _mm512_fmadd_pd(v0, vx0, a00);
        a01 = _mm512_fmadd_pd(v0, vx1, a01);
        a10 = _mm512_fmadd_pd(v1, vx0, a10);
        a11 = _mm512_fmadd_pd(v1, vx1, a11);
        a20 = _mm512_fmadd_pd(v2, vx0, a20);
        a21 = _mm512_fmadd_pd(v2, vx1, a21);
        a30 = _mm512_fmadd_pd(v3, vx0, a30);
        a31 = _mm512_fmadd_pd(v3, vx1, a31);
      }
      double s00 = hsum(a00), s01 = hsum(a01);
      double s10 = hsum(a10), s11 = hsum(a11);
      double s20 = hsum(a20), s21 = hsum(a21);
      double s30 = hsum(a30), s31 = hsum(a31);
      for (; c < C; ++c) {
        s00 += dy0[c] * x0[c];
        s01 += dy0[c] * x1[c];
        s10 += dy1[c] * x0[c];
        s11 += dy1[c] * x1[c];
        s20 += dy2[c] * x0[c];
        s21 += dy2[c] * x1[c];
        s30 += dy3[c] * x0[c];
        s31 += dy3[c] * x1[c];
      }
      g0[k] += s00;
      g0[k + 1] += s01;
      g1[k] += s10;
      g1[k + 1] += s11;
      g2[k] += s20;
      g2[k + 1] += s21;
      g3[k] += s30;
      g3[k + 1] += s31;
    }
    for (; k < K; ++k) {
      const double* xr = X + static_cast<std::size_t>(k) * C;
      double acc[4];
      dot4x(dy0, dy1, dy2, dy3, xr, C, acc);
      g0[k] += acc[0];
      g1[k] += acc[1];
      g2[k] += acc[2];
      g3[k] += acc[3];
    }
  }
  for (; o < out; ++o) {
    const double* dy = dY + static_cast<std::size_t>(o) * C;
    double acc = 0.0;
    for (int c = 0; c < C; ++c) acc += dy[c];
    gb[o] += acc;
    double* gr = gW + static_cast<std::size_t>(o) * K;
    for (int k = 0; k < K; ++k) gr[k] += dot4(dy, X + static_cast<std::size_t>(k) * C, C);
  }
}

// dX += W^T dY.
void gemm_bwd_dx(const double* W, const double* dY, double* dX, int out, int K, int C) {
  int k = 0;
  for (; k + 4 <= K; k += 4) {
    double* x0 = dX + static_cast<std::size_t>(k) * C;
    double* x1 = x0 + C;
    double* x2 = x1 + C;
    double* x3 = x2 + C;
    int c = 0;
    for (; c + 8 <= C; c += 8) {
      __m512d a0 = _mm512_loadu_pd(x0 + c);
      __m512d a1 = _mm512_loadu_pd(x1 + c);
      __m512d a2 = _mm512_loadu_pd(x2 + c);
      __m512d a3 = _mm512_loadu_pd(x3 + c);
      for (int o = 0; o < out; ++o) {
        const __m512d dy = _mm512_loadu_pd(dY + static_cast<std::size_t>(o) * C + c);
        const double* wo = W + static_cast<std::size_t>(o) * K + k;
        a0 = _mm512_fmadd_pd(_mm512_set1_pd(wo[0]), dy, a0);
        a1 = _mm512_fmadd_pd(_mm512_set1_pd(wo[1]), dy, a1);
        a2 = _mm512_fmadd_pd(_mm512_set1_pd(wo[2]), dy, a2);
        a3 = _mm512_fmadd_pd(_mm512_set1_pd(wo[3]), dy, a3);
      }
      _mm512_storeu_pd(x0 + c, a0);
      _mm512_storeu_pd(x1 + c, a1);
      _mm512_storeu_pd(x2 + c, a2);
      _mm512_storeu_pd(x3 + c, a3);
    }
    for (; c < C; ++c) {
      double s0 = x0[c], s1 = x1[c], s2 = x2[c], s3 = x3[c];
      for (int o = 0; o < out; ++o) {
        const double dy = dY[static_cast<std::size_t>(o) * C + c];
        const double* wo = W + static_cast<std::size_t>(o) * K + k;
        s0 += wo[0] * dy;
        s1 += wo[1] * dy;
        s2 += wo[2] * dy;
        s3 += wo[3] * dy;
      }
      x0[c] = s0;
      x1[c] = s1;
      x2[c] = s2;
      x3[c] = s3;
    }
  }
  for (; k < K; ++k) {
    double* xr = dX + static_cast<std::size_t>(k) * C;
    int c = 0;
    for (; c + 8 <= C; c += 8) {
      __m512d a = _mm512_loadu_pd(xr + c);
      for (int o = 0; o < out; ++o)
        a = _mm512_fmadd_pd(_mm512_set1_pd(W[static_cast<std::size_t>(o) * K + k]),
                            _mm512_loadu_pd(dY + static_cast<std::size_t>(o) * C + c), a);
      _mm512_storeu_pd(xr + c, a);
    }
    for (; c < C; ++c) {
      double s = xr[c];
      for (int o = 0; o < out; ++o)
        s += W[static_cast<std::size_t>(o) * K + k] * dY[static_cast<std::size_t>(o) * C + c];
      xr[c] = s;
    }
  }
}

#else

void gemm_fwd(const double* W, const double* b, const double* X, double* Y, int out, int K,
              int C) {
  for (int o = 0; o < out; ++o) {
    double* y = Y + static_cast<std::size_t>(o) * C;
    for (int c = 0; c < C; ++c) y[c] = b[o];
    const double* wr = W + static_cast<std::size_t>(o) * K;
    for (int k = 0; k < K; ++k) {
      const double w = wr[k];
      const double* xr = X + static_cast<std::size_t>(k) * C;
      for (int c = 0; c < C; ++c) y[c] += w * xr[c];
    }
  }
}

void gemm_bwd_dx(const double* W, const double* dY, double* dX, int out, int K, int C) {
  for (int o = 0; o < out; ++o) {
    const double* dy = dY + static_cast<std::size_t>(o) * C;
    const double* wr = W + static_cast<std::size_t>(o) * K;
    for (int k = 0; k < K; ++k) {
      const double w = wr[k];
      double* xr = dX + static_cast<std::size_t>(k) * C;
      for (int c = 0; c < C; ++c) xr[c] += w * dy[c];
    }
  }
}

void gemm_bwd_dw(const double* X, const double* dY, double* gW, double* gb, int out, int K,
                 int C) {
  for (int o = 0; o < out; ++o) {
    const double* dy = dY + static_cast<std::size_t>(o) * C;
    double acc = 0.0;
    for (int c = 0; c < C; ++c) acc += dy[c];
    gb[o] += acc;
    double* gr = gW + static_cast<std::size_t>(o) * K;
    for (int k = 0; k < K; ++k) gr[k] += dot4(dy, X + static_cast<std::size_t>(k) * C, C);
  }
}

#endif

}  // namespace

Tape::Tape(const ParameterVector& params) : params_(params) {}

Tape::~Tape() = default;

void Tape::reset() {
  nodes_.clear();
  val_top_ = 0;
  aux_top_ = 0;
}

Var Tape::push(Node n, int rows, int cols) {
  n.rows = rows;
  n.cols = cols;
  n.val = val_top_;
  val_top_ += n.len();
  if (val_.size() < val_top_) val_.resize(val_top_);
  nodes_.push_back(n);
  return Var{static_cast<int>(nodes_.size() - 1)};
}

int Tape::rows(Var v) const { return nodes_[v.id].rows; }
int Tape::cols(Var v) const { return nodes_[v.id].cols; }

std::span<const double> Tape::values(Var v) const {
  const Node& n = nodes_[v.id];
  return {val_.data() + n.val, n.len()};
}

double Tape::value_scalar(Var v) const {
  const Node& n = nodes_[v.id];
  if (n.rows != 1 || n.cols != 1) throw DimensionMismatch("scalar node expected");
  return val_[n.val];
}

void Tape::ensure_finite(int id) {
  const Node& n = nodes_[id];
  if (!fastmath::all_finite(val_.data() + n.val, n.len()))
    throw NonFiniteValue("non-finite intermediate value");
}

Var Tape::input(std::span<const double> data, int rows, int cols) {
  if (data.size() != static_cast<std::size_t>(rows) * cols)
    throw DimensionMismatch("input size does not match shape");
  Var v = push(Node{Op::Input}, rows, cols);
  std::memcpy(val_.data() + nodes_[v.id].val, data.data(), data.size() * sizeof(double));
  ensure_finite(v.id);
  return v;
}

Var Tape::input(std::span<const double> data) {
  return input(data, static_cast<int>(data.size()), 1);
}

Var Tape::param(std::size_t offset, std::size_t size) {
  if (offset + size > params_.size()) throw DimensionMismatch("param segment out of range");
  Node n{Op::Param};
  n.p_off = offset;
  Var v = push(n, static_cast<int>(size), 1);
  std::memcpy(val_.data() + nodes_[v.id].val, params_.data() + offset, size * sizeof(double));
  ensure_finite(v.id);
  return v;
}

Var Tape::affine(Var x, std::size_t w_offset, std::size_t b_offset, int out_dim) {
  const Node xn = nodes_[x.id];
  const int in_dim = xn.rows;
  const int C = xn.cols;
  if (w_offset + static_cast<std::size_t>(out_dim) * in_dim > params_.size() ||
      b_offset + static_cast<std::size_t>(out_dim) > params_.size())
    throw DimensionMismatch("affine parameters out of range");

  Node n{Op::Affine};
  n.a = x.id;
  n.p_off = w_offset;
  n.p_off2 = b_offset;
  Var v = push(n, out_dim, C);

  const double* W = params_.data() + w_offset;
  const double* b = params_.data() + b_offset;
  const double* X = val_.data() + nodes_[x.id].val;
  double* Y = val_.data() + nodes_[v.id].val;
  gemm_fwd(W, b, X, Y, out_dim, in_dim, C);
  ensure_finite(v.id);
  return v;
}

Var Tape::unary(UnaryOp op, Var x) {
  switch (op) {
    case UnaryOp::Gelu:
    case UnaryOp::Tanh:
    case UnaryOp::Exp:
    case UnaryOp::Log:
    case UnaryOp::Relu:
      break;
    default:
      throw UnsupportedPrimitive("unsupported unary primitive");
  }
  const Node xn = nodes_[x.id];
  Node n{Op::Unary};
  n.uop = op;
  n.a = x.id;
  if (op == UnaryOp::Gelu) {
    n.aux = aux_top_;
    aux_top_ += 2 * xn.len();
    if (aux_.size() < aux_top_) aux_.resize(aux_top_);
  }
  Var v = push(n, xn.rows, xn.cols);

  const double* X = val_.data() + nodes_[x.id].val;
  double* Y = val_.data() + nodes_[v.id].val;
  const std::size_t m = nodes_[v.id].len();
  switch (op) {
    case UnaryOp::Gelu: {
      // aux holds Phi(z) in the first half and pdf(z) in the second so the
      // backward pass is pure arithmetic.
      double* cdf = aux_.data() + nodes_[v.id].aux;
      double* pdf = cdf + m;
      fastmath::norm_cdf_pdf_batch(X, cdf, pdf, m);
      for (std::size_t i = 0; i < m; ++i) Y[i] = X[i] * cdf[i];
      break;
    }
    case UnaryOp::Tanh:
      for (std::size_t i = 0; i < m; ++i) Y[i] = std::tanh(X[i]);
      break;
    case UnaryOp::Exp:
      fastmath::exp_batch(X, Y, m);
      break;
    case UnaryOp::Log:
      for (std::size_t i = 0; i < m; ++i) Y[i] = std::log(X[i]);
      break;
    case UnaryOp::Relu:
      for (std::size_t i = 0; i < m; ++i) Y[i] = X[i] > 0.0 ? X[i] : 0.0;
      break;
  }
  ensure_finite(v.id);
  return v;
}

Var Tape::add(Var a, Var b) {
  const Node an = nodes_[a.id];
  const Node bn = nodes_[b.id];
  const bool a_scalar = an.rows == 1 && an.cols == 1;
  const bool b_scalar = bn.rows == 1 && bn.cols == 1;
  if (!(an.rows == bn.rows && an.cols == bn.cols) && !a_scalar && !b_scalar)
    throw DimensionMismatch("add: incompatible shapes");
  Node n{Op::Add};
  n.a = a.id;
  n.b = b.id;
  const Node& big = (an.len() >= bn.len()) ? an : bn;
  Var v = push(n, big.rows, big.cols);
  const double* A = val_.data() + an.val;
  const double* B = val_.data() + bn.val;
  double* Y = val_.data() + nodes_[v.id].val;
  const std::size_t m = nodes_[v.id].len();
  if (an.len() == bn.len()) {
    for (std::size_t i = 0; i < m; ++i) Y[i] = A[i] + B[i];
  } else if (b_scalar) {
    const double s = B[0];
    for (std::size_t i = 0; i < m; ++i) Y[i] = A[i] + s;
  } else {
    const double s = A[0];
    for (std::size_t i = 0; i < m; ++i) Y[i] = s + B[i];
  }
  ensure_finite(v.id);
  return v;
}

Var Tape::sub(Var a, Var b) {
  const Node an = nodes_[a.id];
  const Node bn = nodes_[b.id];
  if (an.rows != bn.rows || an.cols != bn.cols)
    throw DimensionMismatch("sub: incompatible shapes");
  Node n{Op::Sub};
  n.a = a.id;
  n.b = b.id;
  Var v = push(n, an.rows, an.cols);
  const double* A = val_.data() + an.val;
  const double* B = val_.data() + bn.val;
  double* Y = val_.data() + nodes_[v.id].val;
  for (std::size_t i = 0; i < an.len(); ++i) Y[i] = A[i] - B[i];
  ensure_finite(v.id);
  return v;
}

Var Tape::mul(Var a, Var b) {
  const Node an = nodes_[a.id];
  const Node bn = nodes_[b.id];
  const bool a_scalar = an.rows == 1 && an.cols == 1;
  const bool b_scalar = bn.rows == 1 && bn.cols == 1;
  if (!(an.rows == bn.rows && an.cols == bn.cols) && !a_scalar && !b_scalar)
    throw DimensionMismatch("mul: incompatible shapes");
  Node n{Op::Mul};
  n.a = a.id;
  n.b = b.id;
  const Node& big = (an.len() >= bn.len()) ? an : bn;
  Var v = push(n, big.rows, big.cols);
  const double* A = val_.data() + an.val;
  const double* B = val_.data() + bn.val;
  double* Y = val_.data() + nodes_[v.id].val;
  const std::size_t m = nodes_[v.id].len();
  if (an.len() == bn.len()) {
    for (std::size_t i = 0; i < m; ++i) Y[i] = A[i] * B[i];
  } else if (b_scalar) {
    const double s = B[0];
    for (std::size_t i = 0; i < m; ++i) Y[i] = A[i] * s;
  } else {
    const double s = A[0];
    for (std::size_t i = 0; i < m; ++i) Y[i] = s * B[i];
  }
  ensure_finite(v.id);
  return v;
}

Var Tape::add_const(Var a, double c) {
  const Node an = nodes_[a.id];
  Node n{Op::AddConst};
  n.a = a.id;
  n.c = c;
  Var v = push(n, an.rows, an.cols);
  const double* A = val_.data() + an.val;
  double* Y = val_.data() + nodes_[v.id].val;
  for (std::size_t i = 0; i < an.len(); ++i) Y[i] = A[i] + c;
  ensure_finite(v.id);
  return v;
}

Var Tape::scale(Var a, double c) {
  const Node an = nodes_[a.id];
  Node n{Op::Scale};
  n.a = a.id;
  n.c = c;
  Var v = push(n, an.rows, an.cols);
  const double* A = val_.data() + an.val;
  double* Y = val_.data() + nodes_[v.id].val;
  for (std::size_t i = 0; i < an.len(); ++i) Y[i] = A[i] * c;
  ensure_finite(v.id);
  return v;
}

Var Tape::sub_bcast_col(Var a, Var b) {
  const Node an = nodes_[a.id];
  const Node bn = nodes_[b.id];
  if (an.cols != 1 || an.rows != bn.rows)
    throw DimensionMismatch("sub_bcast_col: a must be (rows x 1) matching b rows");
  Node n{Op::SubBcastCol};
  n.a = a.id;
  n.b = b.id;
  Var v = push(n, bn.rows, bn.cols);
  const double* A = val_.data() + an.val;
  const double* B = val_.data() + bn.val;
  double* Y = val_.data() + nodes_[v.id].val;
  const int C = bn.cols;
  for (int i = 0; i < bn.rows; ++i) {
    const double ai = A[i];
    const double* br = B + static_cast<std::size_t>(i) * C;
    double* yr = Y + static_cast<std::size_t>(i) * C;
    for (int c = 0; c < C; ++c) yr[c] = ai - br[c];
  }
  ensure_finite(v.id);
  return v;
}

Var Tape::scale_rows(Var a, Var vvec) {
  const Node an = nodes_[a.id];
  const Node vn = nodes_[vvec.id];
  if (vn.cols != 1 || vn.rows != an.rows)
    throw DimensionMismatch("scale_rows: v must be (rows x 1) matching a rows");
  Node n{Op::ScaleRows};
  n.a = a.id;
  n.b = vvec.id;
  Var v = push(n, an.rows, an.cols);
  const double* A = val_.data() + an.val;
  const double* V = val_.data() + vn.val;
  double* Y = val_.data() + nodes_[v.id].val;
  const int C = an.cols;
  for (int i = 0; i < an.rows; ++i) {
    const double s = V[i];
    const double* ar = A + static_cast<std::size_t>(i) * C;
    double* yr = Y + static_cast<std::size_t>(i) * C;
    for (int c = 0; c < C; ++c) yr[c] = ar[c] * s;
  }
  ensure_finite(v.id);
  return v;
}

Var Tape::col_sqnorm(Var a) {
  const Node an = nodes_[a.id];
  Node n{Op::ColSqNorm};
  n.a = a.id;
  Var v = push(n, 1, an.cols);
  const double* A = val_.data() + an.val;
  double* Y = val_.data() + nodes_[v.id].val;
  const int C = an.cols;
  for (int c = 0; c < C; ++c) Y[c] = 0.0;
  for (int i = 0; i < an.rows; ++i) {
    const double* ar = A + static_cast<std::size_t>(i) * C;
    for (int c = 0; c < C; ++c) Y[c] += ar[c] * ar[c];
  }
  ensure_finite(v.id);
  return v;
}

Var Tape::col_prod(Var a) {
  const Node an = nodes_[a.id];
  Node n{Op::ColProd};
  n.a = a.id;
  Var v = push(n, 1, an.cols);
  const double* A = val_.data() + an.val;
  double* Y = val_.data() + nodes_[v.id].val;
  const int C = an.cols;
  for (int c = 0; c < C; ++c) Y[c] = 1.0;
  for (int i = 0; i < an.rows; ++i) {
    const double* ar = A + static_cast<std::size_t>(i) * C;
    for (int c = 0; c < C; ++c) Y[c] *= ar[c];
  }
  ensure_finite(v.id);
  return v;
}

Var Tape::col_sum(Var a) {
  const Node an = nodes_[a.id];
  Node n{Op::ColSum};
  n.a = a.id;
  Var v = push(n, 1, an.cols);
  const double* A = val_.data() + an.val;
  double* Y = val_.data() + nodes_[v.id].val;
  const int C = an.cols;
  for (int c = 0; c < C; ++c) Y[c] = 0.0;
  for (int i = 0; i < an.rows; ++i) {
    const double* ar = A + static_cast<std::size_t>(i) * C;
    for (int c = 0; c < C; ++c) Y[c] += ar[c];
  }
  ensure_finite(v.id);
  return v;
}

Var Tape::sum_all(Var a) {
  const Node an = nodes_[a.id];
  Node n{Op::SumAll};
  n.a = a.id;
  Var v = push(n, 1, 1);
  const double* A = val_.data() + an.val;
  double acc = 0.0;
  for (std::size_t i = 0; i < an.len(); ++i) acc += A[i];
  val_[nodes_[v.id].val] = acc;
  ensure_finite(v.id);
  return v;
}

Var Tape::rank_combine(Var a, Var b, int r, int q) {
  const Node an = nodes_[a.id];
  const Node bn = nodes_[b.id];
  if (an.cols != 1 || an.rows != r * q || bn.rows != r * q)
    throw DimensionMismatch("rank_combine: need a (r*q x 1) and b (r*q x C)");
  Node n{Op::RankCombine};
  n.a = a.id;
  n.b = b.id;
  n.r = r;
  n.q = q;
  Var v = push(n, q, bn.cols);
  const double* A = val_.data() + an.val;
  const double* B = val_.data() + bn.val;
  double* Y = val_.data() + nodes_[v.id].val;
  const int C = bn.cols;
  for (int j = 0; j < q; ++j) {
    double* yr = Y + static_cast<std::size_t>(j) * C;
    for (int c = 0; c < C; ++c) yr[c] = 0.0;
    for (int i = 0; i < r; ++i) {
      const double w = A[i * q + j];
      const double* br = B + static_cast<std::size_t>(i * q + j) * C;
      for (int c = 0; c < C; ++c) yr[c] += w * br[c];
    }
  }
  ensure_finite(v.id);
  return v;
}

Var Tape::rank_combine_grouped(Var a, Var b, int r, int q, int g) {
  const Node an = nodes_[a.id];
  const Node bn = nodes_[b.id];
  if (an.rows != r * q || bn.rows != r * q || bn.cols != an.cols * g)
    throw DimensionMismatch("rank_combine_grouped: inconsistent shapes");
  Node n{Op::RankCombineGrouped};
  n.a = a.id;
  n.b = b.id;
  n.r = r;
  n.q = q;
  n.g = g;
  Var v = push(n, q, bn.cols);
  const double* A = val_.data() + an.val;
  const double* B = val_.data() + bn.val;
  double* Y = val_.data() + nodes_[v.id].val;
  const int Bcols = an.cols;
  const int C = bn.cols;
  for (int j = 0; j < q; ++j) {
    double* yr = Y + static_cast<std::size_t>(j) * C;
    for (int c = 0; c < C; ++c) yr[c] = 0.0;
    for (int i = 0; i < r; ++i) {
      const double* ar = A + static_cast<std::size_t>(i * q + j) * Bcols;
      const double* br = B + static_cast<std::size_t>(i * q + j) * C;
      for (int s = 0; s < Bcols; ++s) {
        const double w = ar[s];
        double* yg = yr + static_cast<std::size_t>(s) * g;
        const double* bg = br + static_cast<std::size_t>(s) * g;
        for (int c = 0; c < g; ++c) yg[c] += w * bg[c];
      }
    }
  }
  ensure_finite(v.id);
  return v;
}

Var Tape::sub_bcast_grouped(Var a, Var b, int g) {
  const Node an = nodes_[a.id];
  const Node bn = nodes_[b.id];
  if (an.rows != bn.rows || bn.cols != an.cols * g)
    throw DimensionMismatch("sub_bcast_grouped: inconsistent shapes");
  Node n{Op::SubBcastGrouped};
  n.a = a.id;
  n.b = b.id;
  n.g = g;
  Var v = push(n, bn.rows, bn.cols);
  const double* A = val_.data() + an.val;
  const double* B = val_.data() + bn.val;
  double* Y = val_.data() + nodes_[v.id].val;
  const int Bcols = an.cols;
  const int C = bn.cols;
  for (int i = 0; i < bn.rows; ++i) {
    const double* ar = A + static_cast<std::size_t>(i) * Bcols;
    const double* br = B + static_cast<std::size_t>(i) * C;
    double* yr = Y + static_cast<std::size_t>(i) * C;
    for (int s = 0; s < Bcols; ++s) {
      const double as = ar[s];
      for (int c = 0; c < g; ++c)
        yr[static_cast<std::size_t>(s) * g + c] = as - br[static_cast<std::size_t>(s) * g + c];
    }
  }
  ensure_finite(v.id);
  return v;
}

Var Tape::group_sum(Var x, int g) {
  const Node xn = nodes_[x.id];
  if (xn.rows != 1 || xn.cols % g != 0)
    throw DimensionMismatch("group_sum: need a 1 x (B*g) input");
  Node n{Op::GroupSum};
  n.a = x.id;
  n.g = g;
  Var v = push(n, 1, xn.cols / g);
  const double* X = val_.data() + xn.val;
  double* Y = val_.data() + nodes_[v.id].val;
  for (int s = 0; s < xn.cols / g; ++s) {
    double acc = 0.0;
    const double* xg = X + static_cast<std::size_t>(s) * g;
    for (int c = 0; c < g; ++c) acc += xg[c];
    Y[s] = acc;
  }
  ensure_finite(v.id);
  return v;
}


void Tape::backward_into(Var v, std::span<double> grad, double weight) {
  const Node& out = nodes_[v.id];
  if (out.rows != 1 || out.cols != 1)
    throw DimensionMismatch("backward_into: output node must be scalar");
  if (grad.size() != params_.size())
    throw DimensionMismatch("backward_into: gradient buffer size mismatch");

  if (adj_.size() < val_top_) adj_.resize(val_top_);
  std::fill(adj_.begin(), adj_.begin() + static_cast<std::ptrdiff_t>(val_top_), 0.0);
  adj_[out.val] = weight;

  for (int id = v.id; id >= 0; --id) {
    const Node& n = nodes_[id];
    const double* dY = adj_.data() + n.val;
    const int C = n.cols;
    switch (n.op) {
      case Op::Input:
        break;
      case Op::Param: {
        double* g = grad.data() + n.p_off;
        for (int i = 0; i < n.rows; ++i) g[i] += dY[i];
        break;
      }
      case Op::Affine: {
        const Node& xn = nodes_[n.a];
        const int in_dim = xn.rows;
        const double* W = params_.data() + n.p_off;
        const double* X = val_.data() + xn.val;
        double* dX = adj_.data() + xn.val;
        gemm_bwd_dw(X, dY, grad.data() + n.p_off, grad.data() + n.p_off2, n.rows, in_dim, C);
        gemm_bwd_dx(W, dY, dX, n.rows, in_dim, C);
        break;
      }
      case Op::Unary: {
        const Node& xn = nodes_[n.a];
        const double* X = val_.data() + xn.val;
        const double* Y = val_.data() + n.val;
        double* dX = adj_.data() + xn.val;
        const std::size_t m = n.len();
        switch (n.uop) {
          case UnaryOp::Gelu: {
            const double* cdf = aux_.data() + n.aux;
            const double* pdf = cdf + m;
            for (std::size_t i = 0; i < m; ++i) dX[i] += dY[i] * (cdf[i] + X[i] * pdf[i]);
            break;
          }
          case UnaryOp::Tanh:
            for (std::size_t i = 0; i < m; ++i) dX[i] += dY[i] * (1.0 - Y[i] * Y[i]);
            break;
          case UnaryOp::Exp:
            for (std::size_t i = 0; i < m; ++i) dX[i] += dY[i] * Y[i];
            break;
          case UnaryOp::Log:
            for (std::size_t i = 0; i < m; ++i) dX[i] += dY[i] / X[i];
            break;
          case UnaryOp::Relu:
            for (std::size_t i = 0; i < m; ++i) dX[i] += X[i] > 0.0 ? dY[i] : 0.0;
            break;
        }
        break;
      }
      case Op::Add: {
        const Node& an = nodes_[n.a];
        const Node& bn = nodes_[n.b];
        double* dA = adj_.data() + an.val;
        double* dB = adj_.data() + bn.val;
        const std::size_t m = n.len();
        if (an.len() == bn.len()) {
          for (std::size_t i = 0; i < m; ++i) dA[i] += dY[i];
          for (std::size_t i = 0; i < m; ++i) dB[i] += dY[i];
        } else if (bn.len() == 1) {
          for (std::size_t i = 0; i < m; ++i) dA[i] += dY[i];
          double acc = 0.0;
          for (std::size_t i = 0; i < m; ++i) acc += dY[i];
          dB[0] += acc;
        } else {
          double acc = 0.0;
          for (std::size_t i = 0; i < m; ++i) acc += dY[i];
          dA[0] += acc;
          for (std::size_t i = 0; i < m; ++i) dB[i] += dY[i];
        }
        break;
      }
      case Op::Sub: {
        const Node& an = nodes_[n.a];
        const Node& bn = nodes_[n.b];
        double* dA = adj_.data() + an.val;
        double* dB = adj_.data() + bn.val;
        for (std::size_t i = 0; i < n.len(); ++i) {
          dA[i] += dY[i];
          dB[i] -= dY[i];
        }
        break;
      }
      case Op::Mul: {
        const Node& an = nodes_[n.a];
        const Node& bn = nodes_[n.b];
        const double* A = val_.data() + an.val;
        const double* B = val_.data() + bn.val;
        double* dA = adj_.data() + an.val;
        double* dB = adj_.data() + bn.val;
        const std::size_t m = n.len();
        if (an.len() == bn.len()) {
          for (std::size_t i = 0; i < m; ++i) {
            dA[i] += dY[i] * B[i];
            dB[i] += dY[i] * A[i];
          }
        } else if (bn.len() == 1) {
          const double s = B[0];
          double acc = 0.0;
          for (std::size_t i = 0; i < m; ++i) {
            dA[i] += dY[i] * s;
            acc += dY[i] * A[i];
          }
          dB[0] += acc;
        } else {
          const double s = A[0];
          double acc = 0.0;
          for (std::size_t i = 0; i < m; ++i) {
            dB[i] += dY[i] * s;
            acc += dY[i] * B[i];
          }
          dA[0] += acc;
        }
        break;
      }
      case Op::AddConst: {
        double* dA = adj_.data() + nodes_[n.a].val;
        for (std::size_t i = 0; i < n.len(); ++i) dA[i] += dY[i];
        break;
      }
      case Op::Scale: {
        double* dA = adj_.data() + nodes_[n.a].val;
        const double s = n.c;
        for (std::size_t i = 0; i < n.len(); ++i) dA[i] += s * dY[i];
        break;
      }
      case Op::SubBcastCol: {
        const Node& an = nodes_[n.a];
        const Node& bn = nodes_[n.b];
        double* dA = adj_.data() + an.val;
        double* dB = adj_.data() + bn.val;
        for (int i = 0; i < n.rows; ++i) {
          const double* dyr = dY + static_cast<std::size_t>(i) * C;
          double acc = 0.0;
          for (int c = 0; c < C; ++c) acc += dyr[c];
          dA[i] += acc;
          double* dbr = dB + static_cast<std::size_t>(i) * C;
          for (int c = 0; c < C; ++c) dbr[c] -= dyr[c];
        }
        break;
      }
      case Op::ScaleRows: {
        const Node& an = nodes_[n.a];
        const Node& vn = nodes_[n.b];
        const double* A = val_.data() + an.val;
        const double* V = val_.data() + vn.val;
        double* dA = adj_.data() + an.val;
        double* dV = adj_.data() + vn.val;
        for (int i = 0; i < n.rows; ++i) {
          const double s = V[i];
          const double* dyr = dY + static_cast<std::size_t>(i) * C;
          const double* ar = A + static_cast<std::size_t>(i) * C;
          double* dar = dA + static_cast<std::size_t>(i) * C;
          double acc = 0.0;
          for (int c = 0; c < C; ++c) {
            dar[c] += dyr[c] * s;
            acc += dyr[c] * ar[c];
          }
          dV[i] += acc;
        }
        break;
      }
      case Op::ColSqNorm: {
        const Node& an = nodes_[n.a];
        const double* A = val_.data() + an.val;
        double* dA = adj_.data() + an.val;
        for (int i = 0; i < an.rows; ++i) {
          const double* ar = A + static_cast<std::size_t>(i) * C;
          double* dar = dA + static_cast<std::size_t>(i) * C;
          for (int c = 0; c < C; ++c) dar[c] += 2.0 * ar[c] * dY[c];
        }
        break;
      }
      case Op::ColProd: {
        const Node& an = nodes_[n.a];
        const double* A = val_.data() + an.val;
        double* dA = adj_.data() + an.val;
        // O(rows^2) per column; fine for the small row counts this is used
        // with (response dimensions).
        for (int c = 0; c < C; ++c) {
          for (int i = 0; i < an.rows; ++i) {
            double p = 1.0;
            for (int k = 0; k < an.rows; ++k)
              if (k != i) p *= A[static_cast<std::size_t>(k) * C + c];
            dA[static_cast<std::size_t>(i) * C + c] += dY[c] * p;
          }
        }
        break;
      }
      case Op::ColSum: {
        const Node& an = nodes_[n.a];
        double* dA = adj_.data() + an.val;
        for (int i = 0; i < an.rows; ++i) {
          double* dar = dA + static_cast<std::size_t>(i) * C;
          for (int c = 0; c < C; ++c) dar[c] += dY[c];
        }
        break;
      }
      case Op::SumAll: {
        const Node& an = nodes_[n.a];
        double* dA = adj_.data() + an.val;
        const double s = dY[0];
        for (std::size_t i = 0; i < an.len(); ++i) dA[i] += s;
        break;
      }
      case Op::RankCombine: {
        const Node& an = nodes_[n.a];
        const Node& bn = nodes_[n.b];
        const double* A = val_.data() + an.val;
        const double* B = val_.data() + bn.val;
        double* dA = adj_.data() + an.val;
        double* dB = adj_.data() + bn.val;
        for (int j = 0; j < n.q; ++j) {
          const double* dyr = dY + static_cast<std::size_t>(j) * C;
          for (int i = 0; i < n.r; ++i) {
            const int e = i * n.q + j;
            const double* br = B + static_cast<std::size_t>(e) * C;
            dA[e] += dot4(dyr, br, C);
            const double w = A[e];
            double* dbr = dB + static_cast<std::size_t>(e) * C;
            for (int c = 0; c < C; ++c) dbr[c] += w * dyr[c];
          }
        }
        break;
      }
      case Op::RankCombineGrouped: {
        const Node& an = nodes_[n.a];
        const Node& bn = nodes_[n.b];
        const double* A = val_.data() + an.val;
        const double* B = val_.data() + bn.val;
        double* dA = adj_.data() + an.val;
        double* dB = adj_.data() + bn.val;
        const int Bcols = an.cols;
        const int g = n.g;
        for (int j = 0; j < n.q; ++j) {
          const double* dyr = dY + static_cast<std::size_t>(j) * C;
          for (int i = 0; i < n.r; ++i) {
            const int e = i * n.q + j;
            const double* br = B + static_cast<std::size_t>(e) * C;
            double* dbr = dB + static_cast<std::size_t>(e) * C;
            double* dar = dA + static_cast<std::size_t>(e) * Bcols;
            const double* ar = A + static_cast<std::size_t>(e) * Bcols;
            for (int s = 0; s < Bcols; ++s) {
              const std::size_t off = static_cast<std::size_t>(s) * g;
              dar[s] += dot4(dyr + off, br + off, g);
              const double w = ar[s];
              for (int c = 0; c < g; ++c) dbr[off + c] += w * dyr[off + c];
            }
          }
        }
        break;
      }
      case Op::SubBcastGrouped: {
        const Node& an = nodes_[n.a];
        const Node& bn = nodes_[n.b];
        double* dA = adj_.data() + an.val;
        double* dB = adj_.data() + bn.val;
        const int Bcols = an.cols;
        const int g = n.g;
        for (int i = 0; i < bn.rows; ++i) {
          const double* dyr = dY + static_cast<std::size_t>(i) * C;
          double* dar = dA + static_cast<std::size_t>(i) * Bcols;
          double* dbr = dB + static_cast<std::size_t>(i) * C;
          for (int s = 0; s < Bcols; ++s) {
            const std::size_t off = static_cast<std::size_t>(s) * g;
            double acc = 0.0;
            for (int c = 0; c < g; ++c) {
              acc += dyr[off + c];
              dbr[off + c] -= dyr[off + c];
            }
            dar[s] += acc;
          }
        }
        break;
      }
      case Op::GroupSum: {
        const Node& xn = nodes_[n.a];
        double* dX = adj_.data() + xn.val;
        const int g = n.g;
        for (int s = 0; s < n.cols; ++s) {
          const double d = dY[s];
          double* dxg = dX + static_cast<std::size_t>(s) * g;
          for (int c = 0; c < g; ++c) dxg[c] += d;
        }
        break;
      }
    }
  }

  if (!fastmath::all_finite(grad.data(), grad.size()))
    throw NonFiniteValue("non-finite gradient");
}

}  // namespace ad

// ---------------------------------------------------------------------------
// Public entry points
// ---------------------------------------------------------------------------

GradientResult evaluate_with_gradient(const ad::Program& program, const ParameterVector& params) {
  ad::Tape tape(params);
  const ad::Var out = program(tape);
  GradientResult res;
  res.value = tape.value_scalar(out);
  res.gradient.assign(params.size(), 0.0);
  tape.backward_into(out, res.gradient, 1.0);
  return res;
}

double evaluate(const ad::Program& program, const ParameterVector& params) {
  ad::Tape tape(params);
  return tape.value_scalar(program(tape));
}

std::vector<double> finite_difference_gradient(const ad::Program& program,
                                               const ParameterVector& params, double step) {
  if (!(step > 0.0)) throw InvalidConfig("finite difference step must be positive");
  ParameterVector work = params;
  std::vector<double> grad(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double saved = work.values()[i];
    work.values()[i] = saved + step;
    const double up = evaluate(program, work);
    work.values()[i] = saved - step;
    const double down = evaluate(program, work);
    work.values()[i] = saved;
    grad[i] = (up - down) / (2.0 * step);
    if (!std::isfinite(grad[i])) throw NonFiniteValue("non-finite finite-difference gradient");
  }
  return grad;
}

double max_relative_error(std::span<const double> a, std::span<const double> b, double floor) {
  if (a.size() != b.size()) throw SizeMismatch("max_relative_error: length mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double denom = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

}  // namespace cpfn
