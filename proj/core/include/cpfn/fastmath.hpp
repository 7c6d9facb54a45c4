#pragma once

#include <cstddef>

namespace cpfn::fastmath {

// Branch-free double-precision kernels written so the compiler can
// vectorize the batch loops. Accuracy is a few ulps, validated against the
// C library in the test suite.

// exp(x) with full range handling (overflow -> inf, underflow -> 0).
double exp_scalar(double x) noexcept;
void exp_batch(const double* x, double* out, std::size_t n) noexcept;

// erfc(y) for y >= 0 (rational approximations in three regions).
double erfc_pos_scalar(double y) noexcept;

// Standard normal CDF via erfc.
double norm_cdf_scalar(double z) noexcept;

// Fills cdf[i] = Phi(z[i]) and pdf[i] = phi(z[i]) in one pass; the hot path
// of every gelu evaluation.
void norm_cdf_pdf_batch(const double* z, double* cdf, double* pdf, std::size_t n) noexcept;
void norm_cdf_batch(const double* z, double* cdf, std::size_t n) noexcept;

// True when no entry is NaN or infinite.
bool all_finite(const double* x, std::size_t n) noexcept;

}  // namespace cpfn::fastmath
