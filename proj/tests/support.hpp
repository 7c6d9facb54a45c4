#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "cpfn/model.hpp"
#include "cpfn/rng.hpp"

namespace cpfn::test {

// Sets every weight and bias of one submodule to zero and the final-layer
// bias to `value`, making the submodule constant.
inline void make_constant_submodule(CpfnModel& model, const std::string& prefix, double value) {
  const NetworkArchitecture& arch = prefix == "phi" ? model.phi_arch : model.psi_arch;
  const auto dims = arch.layer_dims();
  for (std::size_t k = 1; k < dims.size(); ++k) {
    const std::string idx = std::to_string(k - 1);
    for (double& w : model.params.view(prefix + ".W" + idx)) w = 0.0;
    for (double& b : model.params.view(prefix + ".b" + idx)) b = 0.0;
  }
  for (double& b : model.params.view(prefix + ".b" + std::to_string(dims.size() - 2))) b = value;
}

// Zeroes the first-layer weights of psi so its output cannot depend on u.
inline void freeze_psi_input(CpfnModel& model) {
  for (double& w : model.params.view("psi.W0")) w = 0.0;
}

inline double rel_err(double a, double b, double floor = 1.0) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

}  // namespace cpfn::test
