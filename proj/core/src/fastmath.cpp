#include "cpfn/fastmath.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>

#if defined(__AVX512F__) && defined(__AVX512DQ__)
#include <immintrin.h>
#endif

namespace cpfn::fastmath {

namespace {

// --- exp ------------------------------------------------------------------
// 2^k * p(r) with r = x - k ln2 reduced via the round-to-nearest shift trick
// and a degree-11 Taylor/minimax polynomial. Scaling by 2^k is split in two
// so subnormal results survive.

constexpr double kLog2E = 1.4426950408889634074;
constexpr double kLn2Hi = 6.93147180369123816490e-01;
constexpr double kLn2Lo = 1.90821492927058770002e-10;
constexpr double kShift = 6755399441055744.0;  // 1.5 * 2^52

inline double exp_core(double x) noexcept {
  double kd = x * kLog2E + kShift;
  const std::int64_t ki = std::bit_cast<std::int64_t>(kd) & 0xffffffffll;
  const std::int64_t k = (ki << 32) >> 32;  // sign-extend low 32 bits
  kd -= kShift;
  const double r = (x - kd * kLn2Hi) - kd * kLn2Lo;

  // exp(r), |r| <= 0.5 ln2
  double p = 2.08767569878681e-09;
  p = p * r + 2.51126554126053e-08;
  p = p * r + 2.75573192239859e-07;
  p = p * r + 2.75573192101527e-06;
  p = p * r + 2.48015873015873e-05;
  p = p * r + 1.98412698412698e-04;
  p = p * r + 1.38888888888889e-03;
  p = p * r + 8.33333333333333e-03;
  p = p * r + 4.16666666666667e-02;
  p = p * r + 1.66666666666667e-01;
  p = p * r + 5.00000000000000e-01;
  p = p * r + 1.0;
  p = p * r + 1.0;

  const std::int64_t k1 = k >> 1;
  const std::int64_t k2 = k - k1;
  const double s1 = std::bit_cast<double>((1023 + k1) << 52);
  const double s2 = std::bit_cast<double>((1023 + k2) << 52);
  return (p * s1) * s2;
}

constexpr double kExpHi = 709.782712893384;
constexpr double kExpLo = -745.2;

inline double exp_full(double x) noexcept {
  const double xc = x < kExpLo ? kExpLo : (x > kExpHi ? kExpHi : x);
  double v = exp_core(xc);
  v = x < kExpLo ? 0.0 : v;
  v = x > kExpHi ? std::numeric_limits<double>::infinity() : v;
  v = x != x ? x : v;  // NaN passthrough
  return v;
}

// --- erfc -----------------------------------------------------------------
// Rational Chebyshev approximations (Cody's erf algorithm). Region split at
// 0.46875 and 4.0; beyond 26.5 erfc underflows to 0.

constexpr double kErfA[5] = {3.16112374387056560e00, 1.13864154151050156e02,
                             3.77485237685302021e02, 3.20937758913846947e03,
                             1.85777706184603153e-1};
constexpr double kErfB[4] = {2.36012909523441209e01, 2.44024637934444173e02,
                             1.28261652607737228e03, 2.84423683343917062e03};
constexpr double kErfC[9] = {5.64188496988670089e-1, 8.88314979438837594e00,
                             6.61191906371416295e01, 2.98635138197400131e02,
                             8.81952221241769090e02, 1.71204761263407058e03,
                             2.05107837782607147e03, 1.23033935479799725e03,
                             2.15311535474403846e-8};
constexpr double kErfD[8] = {1.57449261107098347e01, 1.17693950891312499e02,
                             5.37181101862009858e02, 1.62138957456669019e03,
                             3.29079923573345963e03, 4.36261909014324716e03,
                             3.43936767414372164e03, 1.23033935480374942e03};
constexpr double kErfP[6] = {3.05326634961232344e-1, 3.60344899949804439e-1,
                             1.25781726111229246e-1, 1.60837851487422766e-2,
                             6.58749161529837803e-4, 1.63153871373020978e-2};
constexpr double kErfQ[5] = {2.56852019228982242e00, 1.87295284992346047e00,
                             5.27905102951428412e-1, 6.05183413124413191e-2,
                             2.33520497626869185e-3};
constexpr double kInvSqrtPi = 5.6418958354775628695e-1;

// erf(y) for y in [0, 0.46875].
inline double erf_small(double ysq) noexcept {
  double xnum = kErfA[4] * ysq;
  double xden = ysq;
  xnum = (xnum + kErfA[0]) * ysq;
  xden = (xden + kErfB[0]) * ysq;
  xnum = (xnum + kErfA[1]) * ysq;
  xden = (xden + kErfB[1]) * ysq;
  xnum = (xnum + kErfA[2]) * ysq;
  xden = (xden + kErfB[2]) * ysq;
  return (xnum + kErfA[3]) / (xden + kErfB[3]);  // caller multiplies by y
}

// erfc(y) * exp(y^2) for y in [0.46875, 4]; fully unrolled so the batch
// loops stay straight-line and vectorizable.
inline double erfcx_mid(double y) noexcept {
  double xnum = kErfC[8] * y;
  double xden = y;
  xnum = (xnum + kErfC[0]) * y;
  xden = (xden + kErfD[0]) * y;
  xnum = (xnum + kErfC[1]) * y;
  xden = (xden + kErfD[1]) * y;
  xnum = (xnum + kErfC[2]) * y;
  xden = (xden + kErfD[2]) * y;
  xnum = (xnum + kErfC[3]) * y;
  xden = (xden + kErfD[3]) * y;
  xnum = (xnum + kErfC[4]) * y;
  xden = (xden + kErfD[4]) * y;
  xnum = (xnum + kErfC[5]) * y;
  xden = (xden + kErfD[5]) * y;
  xnum = (xnum + kErfC[6]) * y;
  xden = (xden + kErfD[6]) * y;
  return (xnum + kErfC[7]) / (xden + kErfD[7]);
}

// erfc(y) * exp(y^2) for y > 4.
inline double erfcx_tail(double y) noexcept {
  const double ysq = 1.0 / (y * y);
  double xnum = kErfP[5] * ysq;
  double xden = ysq;
  xnum = (xnum + kErfP[0]) * ysq;
  xden = (xden + kErfQ[0]) * ysq;
  xnum = (xnum + kErfP[1]) * ysq;
  xden = (xden + kErfQ[1]) * ysq;
  xnum = (xnum + kErfP[2]) * ysq;
  xden = (xden + kErfQ[2]) * ysq;
  xnum = (xnum + kErfP[3]) * ysq;
  xden = (xden + kErfQ[3]) * ysq;
  const double r = ysq * (xnum + kErfP[4]) / (xden + kErfQ[4]);
  return (kInvSqrtPi - r) / y;
}

// exp(-y^2) with compensation for the rounding of y*y.
inline double exp_neg_sq(double y) noexcept {
  const double s = y * y;
  const double e = std::fma(y, y, -s);
  return exp_core(-s) * (1.0 - e);
}

inline double erfc_pos(double y) noexcept {
  // All regions evaluated branch-free and blended; y is assumed >= 0.
  const double ysq_small = y * y;
  const double small = 1.0 - y * erf_small(ysq_small);
  const double ym = y < 0.46875 ? 0.46875 : (y > 26.5 ? 26.5 : y);
  const double expney2 = exp_neg_sq(ym);
  const double mid = expney2 * erfcx_mid(ym);
  const double tail = expney2 * erfcx_tail(ym > 4.0 ? ym : 4.0);
  double r = y <= 0.46875 ? small : (y <= 4.0 ? mid : tail);
  r = y > 26.5 ? 0.0 : r;
  return r;
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

inline double norm_cdf_core(double z) noexcept {
  const double w = std::abs(z) * kInvSqrt2;
  const double half_erfc = 0.5 * erfc_pos(w);
  return z >= 0.0 ? 1.0 - half_erfc : half_erfc;
}

}  // namespace

double exp_scalar(double x) noexcept { return exp_full(x); }

double erfc_pos_scalar(double y) noexcept { return erfc_pos(y); }

double norm_cdf_scalar(double z) noexcept { return norm_cdf_core(z); }

#if defined(__AVX512F__) && defined(__AVX512DQ__)

// 8-wide transcription of the scalar kernels above.

namespace {

inline __m512d v_exp_core(__m512d x) noexcept {
  const __m512d vlog2e = _mm512_set1_pd(kLog2E);
  const __m512d vshift = _mm512_set1_pd(kShift);
  __m512d kd = _mm512_fmadd_pd(x, vlog2e, vshift);
  const __m512i k =
      _mm512_srai_epi64(_mm512_slli_epi64(_mm512_castpd_si512(kd), 32), 32);
  kd = _mm512_sub_pd(kd, vshift);
  __m512d r = _mm512_fnmadd_pd(kd, _mm512_set1_pd(kLn2Hi), x);
  r = _mm512_fnmadd_pd(kd, _mm512_set1_pd(kLn2Lo), r);

  __m512d p = _mm512_set1_pd(2.08767569878681e-09);
  p = _mm512_fmadd_pd(p, r, _mm512_set1_pd(2.51126554126053e-08));
  p = _mm512_fmadd_pd(p, r, _mm512_set1_pd(2.75573192239859e-07));
  p = _mm512_fmadd_pd(p, r, _mm512_set1_pd(2.75573192101527e-06));
  p = _mm512_fmadd_pd(p, r, _mm512_set1_pd(2.48015873015873e-05));
  p = _mm512_fmadd_pd(p, r, _mm512_set1_pd(1.98412698412698e-04));
  p = _mm512_fmadd_pd(p, r, _mm512_set1_pd(1.38888888888889e-03));
  p = _mm512_fmadd_pd(p, r, _mm512_set1_pd(8.33333333333333e-03));
  p = _mm512_fmadd_pd(p, r, _mm512_set1_pd(4.16666666666667e-02));
  p = _mm512_fmadd_pd(p, r, _mm512_set1_pd(1.66666666666667e-01));
  p = _mm512_fmadd_pd(p, r, _mm512_set1_pd(5.00000000000000e-01));
  p = _mm512_fmadd_pd(p, r, _mm512_set1_pd(1.0));
  p = _mm512_fmadd_pd(p, r, _mm512_set1_pd(1.0));

  const __m512i bias = _mm512_set1_epi64(1023);
  const __m512i k1 = _mm512_srai_epi64(k, 1);
  const __m512i k2 = _mm512_sub_epi64(k, k1);
  const __m512d s1 = _mm512_castsi512_pd(_mm512_slli_epi64(_mm512_add_epi64(k1, bias), 52));
  const __m512d s2 = _mm512_castsi512_pd(_mm512_slli_epi64(_mm512_add_epi64(k2, bias), 52));
  return _mm512_mul_pd(_mm512_mul_pd(p, s1), s2);
}

inline __m512d v_exp_full(__m512d x) noexcept {
  const __m512d lo = _mm512_set1_pd(kExpLo);
  const __m512d hi = _mm512_set1_pd(kExpHi);
  const __m512d xc = _mm512_max_pd(lo, _mm512_min_pd(hi, x));
  __m512d v = v_exp_core(xc);
  v = _mm512_mask_blend_pd(_mm512_cmp_pd_mask(x, lo, _CMP_LT_OQ), v, _mm512_setzero_pd());
  v = _mm512_mask_blend_pd(_mm512_cmp_pd_mask(x, hi, _CMP_GT_OQ), v,
                           _mm512_set1_pd(std::numeric_limits<double>::infinity()));
  v = _mm512_mask_blend_pd(_mm512_cmp_pd_mask(x, x, _CMP_UNORD_Q), v, x);
  return v;
}

inline __m512d v_rational(const __m512d y, const double* num, int nn, double num_tail,
                          const double* den, int nd, double den_tail, __m512d lead) noexcept {
  __m512d xnum = _mm512_mul_pd(lead, y);
  __m512d xden = y;
  for (int i = 0; i < nn; ++i) xnum = _mm512_mul_pd(_mm512_add_pd(xnum, _mm512_set1_pd(num[i])), y);
  for (int i = 0; i < nd; ++i) xden = _mm512_mul_pd(_mm512_add_pd(xden, _mm512_set1_pd(den[i])), y);
  return _mm512_div_pd(_mm512_add_pd(xnum, _mm512_set1_pd(num_tail)),
                       _mm512_add_pd(xden, _mm512_set1_pd(den_tail)));
}

inline __m512d v_erfc_pos(__m512d y) noexcept {
  // region A: 1 - y * PA(y^2)/QA(y^2)
  const __m512d ysq = _mm512_mul_pd(y, y);
  const __m512d small = _mm512_fnmadd_pd(
      y, v_rational(ysq, kErfA, 3, kErfA[3], kErfB, 3, kErfB[3], _mm512_set1_pd(kErfA[4])),
      _mm512_set1_pd(1.0));

  const __m512d ym = _mm512_max_pd(_mm512_set1_pd(0.46875),
                                   _mm512_min_pd(_mm512_set1_pd(26.5), y));
  // exp(-ym^2) with rounding compensation
  const __m512d s = _mm512_mul_pd(ym, ym);
  const __m512d e = _mm512_fmsub_pd(ym, ym, s);
  const __m512d expney2 = _mm512_mul_pd(
      v_exp_core(_mm512_sub_pd(_mm512_setzero_pd(), s)),
      _mm512_sub_pd(_mm512_set1_pd(1.0), e));

  const __m512d mid = _mm512_mul_pd(
      expney2, v_rational(ym, kErfC, 7, kErfC[7], kErfD, 7, kErfD[7], _mm512_set1_pd(kErfC[8])));

  const __m512d yt = _mm512_max_pd(_mm512_set1_pd(4.0), ym);
  const __m512d it = _mm512_div_pd(_mm512_set1_pd(1.0), _mm512_mul_pd(yt, yt));
  const __m512d rt = _mm512_mul_pd(
      it, v_rational(it, kErfP, 4, kErfP[4], kErfQ, 4, kErfQ[4], _mm512_set1_pd(kErfP[5])));
  const __m512d tail = _mm512_mul_pd(
      expney2, _mm512_div_pd(_mm512_sub_pd(_mm512_set1_pd(kInvSqrtPi), rt), yt));

  __m512d r = _mm512_mask_blend_pd(_mm512_cmp_pd_mask(y, _mm512_set1_pd(4.0), _CMP_GT_OQ), mid,
                                   tail);
  r = _mm512_mask_blend_pd(_mm512_cmp_pd_mask(y, _mm512_set1_pd(0.46875), _CMP_LE_OQ), r, small);
  r = _mm512_mask_blend_pd(_mm512_cmp_pd_mask(y, _mm512_set1_pd(26.5), _CMP_GT_OQ), r,
                           _mm512_setzero_pd());
  return r;
}

inline __m512d v_norm_cdf(__m512d z) noexcept {
  const __m512d absmask = _mm512_castsi512_pd(_mm512_set1_epi64(0x7fffffffffffffffll));
  const __m512d w = _mm512_mul_pd(_mm512_and_pd(z, absmask), _mm512_set1_pd(kInvSqrt2));
  const __m512d half_erfc = _mm512_mul_pd(_mm512_set1_pd(0.5), v_erfc_pos(w));
  const __m512d flipped = _mm512_sub_pd(_mm512_set1_pd(1.0), half_erfc);
  return _mm512_mask_blend_pd(_mm512_cmp_pd_mask(z, _mm512_setzero_pd(), _CMP_GE_OQ), half_erfc,
                              flipped);
}

}  // namespace

void exp_batch(const double* x, double* out, std::size_t n) noexcept {
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm512_storeu_pd(out + i, v_exp_full(_mm512_loadu_pd(x + i)));
  for (; i < n; ++i) out[i] = exp_full(x[i]);
}

void norm_cdf_pdf_batch(const double* z, double* cdf, double* pdf, std::size_t n) noexcept {
  const __m512d c_half = _mm512_set1_pd(-0.5);
  const __m512d c_pdf = _mm512_set1_pd(kInvSqrt2Pi);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m512d zi = _mm512_loadu_pd(z + i);
    _mm512_storeu_pd(cdf + i, v_norm_cdf(zi));
    const __m512d arg = _mm512_mul_pd(c_half, _mm512_mul_pd(zi, zi));
    _mm512_storeu_pd(pdf + i, _mm512_mul_pd(c_pdf, v_exp_full(arg)));
  }
  for (; i < n; ++i) {
    cdf[i] = norm_cdf_core(z[i]);
    pdf[i] = kInvSqrt2Pi * exp_full(-0.5 * z[i] * z[i]);
  }
}

void norm_cdf_batch(const double* z, double* cdf, std::size_t n) noexcept {
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) _mm512_storeu_pd(cdf + i, v_norm_cdf(_mm512_loadu_pd(z + i)));
  for (; i < n; ++i) cdf[i] = norm_cdf_core(z[i]);
}

bool all_finite(const double* x, std::size_t n) noexcept {
  const __m512d absmask = _mm512_castsi512_pd(_mm512_set1_epi64(0x7fffffffffffffffll));
  const __m512d inf = _mm512_set1_pd(std::numeric_limits<double>::infinity());
  std::size_t i = 0;
  __mmask8 ok = 0xff;
  for (; i + 8 <= n; i += 8) {
    const __m512d v = _mm512_and_pd(_mm512_loadu_pd(x + i), absmask);
    ok &= _mm512_cmp_pd_mask(v, inf, _CMP_LT_OQ);  // false for NaN and inf
  }
  if (ok != 0xff) return false;
  for (; i < n; ++i)
    if (!std::isfinite(x[i])) return false;
  return true;
}

#else  // scalar fallback

void exp_batch(const double* x, double* out, std::size_t n) noexcept {
  for (std::size_t i = 0; i < n; ++i) out[i] = exp_full(x[i]);
}

void norm_cdf_pdf_batch(const double* z, double* cdf, double* pdf, std::size_t n) noexcept {
  for (std::size_t i = 0; i < n; ++i) {
    const double zi = z[i];
    cdf[i] = norm_cdf_core(zi);
    pdf[i] = kInvSqrt2Pi * exp_full(-0.5 * zi * zi);
  }
}

void norm_cdf_batch(const double* z, double* cdf, std::size_t n) noexcept {
  for (std::size_t i = 0; i < n; ++i) cdf[i] = norm_cdf_core(z[i]);
}

bool all_finite(const double* x, std::size_t n) noexcept {
  for (std::size_t i = 0; i < n; ++i)
    if (!std::isfinite(x[i])) return false;
  return true;
}

#endif

}  // namespace cpfn::fastmath
