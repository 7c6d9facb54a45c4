#include "cpfn/kernels.hpp"

#include <cmath>

namespace cpfn {

namespace {
constexpr double kInvSqrt2Pi = 0.39894228040143267794;
}

KernelFamily kernel_family_from_string(const std::string& name) {
  if (name == "gaussian") return KernelFamily::Gaussian;
  if (name == "epanechnikov") return KernelFamily::Epanechnikov;
  throw InvalidConfig("unknown kernel family: " + name);
}

std::string to_string(KernelFamily family) {
  return family == KernelFamily::Gaussian ? "gaussian" : "epanechnikov";
}

Bandwidth Bandwidth::from_eps(std::span<const double> eps) {
  Bandwidth bw;
  bw.log_eps.reserve(eps.size());
  for (double e : eps) {
    if (!(e > 0.0) || !std::isfinite(e)) throw InvalidConfig("bandwidth must be positive finite");
    bw.log_eps.push_back(std::log(e));
  }
  return bw;
}

Bandwidth Bandwidth::constant(double eps, int dim) {
  if (!(eps > 0.0) || !std::isfinite(eps)) throw InvalidConfig("bandwidth must be positive finite");
  Bandwidth bw;
  bw.log_eps.assign(static_cast<std::size_t>(dim), std::log(eps));
  return bw;
}

std::vector<double> Bandwidth::eps() const {
  std::vector<double> out(log_eps.size());
  for (std::size_t j = 0; j < log_eps.size(); ++j) out[j] = std::exp(log_eps[j]);
  return out;
}

double kernel_eval(const KernelSpec& spec, std::span<const double> v) {
  if (static_cast<int>(v.size()) != spec.dim)
    throw DimensionMismatch("kernel_eval: vector length does not match kernel dim");
  double out = 1.0;
  if (spec.family == KernelFamily::Gaussian) {
    double sq = 0.0;
    for (double x : v) sq += x * x;
    out = std::exp(-0.5 * sq);
    for (int j = 0; j < spec.dim; ++j) out *= kInvSqrt2Pi;
  } else {
    for (double x : v) {
      if (std::abs(x) > 1.0) return 0.0;
      out *= 0.75 * (1.0 - x * x);
    }
  }
  return out;
}

double scaled_kernel_eval(const KernelSpec& spec, const Bandwidth& bw, std::span<const double> v) {
  if (static_cast<int>(v.size()) != spec.dim || bw.dim() != spec.dim)
    throw DimensionMismatch("scaled_kernel_eval: dimension mismatch");
  double scale = 1.0;
  double buf[8];
  std::vector<double> heap;
  double* z = spec.dim <= 8 ? buf : (heap.resize(v.size()), heap.data());
  for (int j = 0; j < spec.dim; ++j) {
    const double eps = std::exp(bw.log_eps[j]);
    z[j] = v[j] / eps;
    scale /= eps;
  }
  return scale * kernel_eval(spec, {z, v.size()});
}

}  // namespace cpfn
