#pragma once

#include <span>
#include <string>
#include <vector>

#include "cpfn/errors.hpp"

namespace cpfn {

enum class KernelFamily { Gaussian, Epanechnikov };

KernelFamily kernel_family_from_string(const std::string& name);
std::string to_string(KernelFamily family);

struct KernelSpec {
  KernelFamily family = KernelFamily::Gaussian;
  int dim = 1;
};

// Per-coordinate bandwidth stored in log scale so it can sit unconstrained
// inside the optimized parameter vector.
struct Bandwidth {
  std::vector<double> log_eps;

  static Bandwidth from_eps(std::span<const double> eps);
  static Bandwidth constant(double eps, int dim);

  int dim() const { return static_cast<int>(log_eps.size()); }
  std::vector<double> eps() const;
};

// Product kernel density at v; integrates to 1 over R^dim.
//   Gaussian:     prod_j (2 pi)^{-1/2} exp(-v_j^2 / 2)
//   Epanechnikov: prod_j (3/4)(1 - v_j^2) 1{|v_j| <= 1}
double kernel_eval(const KernelSpec& spec, std::span<const double> v);

// (prod_j eps_j)^{-1} kappa(v_1/eps_1, ..., v_q/eps_q).
double scaled_kernel_eval(const KernelSpec& spec, const Bandwidth& bw, std::span<const double> v);

}  // namespace cpfn
