#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mivhead/tape.hpp"
#include "mivhead/tensor.hpp"

namespace mivhead {

struct NamedTensor {
  std::string name;
  Tensor value;
};

// Builds a scalar on `tape` from the given parameter leaves (same order as
// the NamedTensor list handed to grad_check).
using ScalarFn = std::function<Var(Tape& tape, const std::vector<Var>& params)>;

struct GradMismatch {
  std::string name;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckReport {
  std::size_t checked = 0;
  // Coordinates whose +-eps evaluations straddle a kink of abs(); the
  // central difference is no oracle there, so they are not compared.
  std::size_t straddled = 0;
  double max_rel_error = 0.0;
  std::string worst_name;
  std::size_t worst_index = 0;
  std::vector<GradMismatch> failures;

  bool passed() const { return failures.empty(); }
};

// |a - b| / max(1e-6, |a| + |b|). Below the floor the comparison is in effect
// absolute: central differences carry about 1e-10 of rounding noise.
double gradient_rel_error(double analytic, double numeric);

// Compares tape gradients against central differences (f(p+eps)-f(p-eps))/2eps
// for every scalar of every parameter, except where the perturbation flips
// the sign of an abs() input. Throws NumericError when f is not
// finite at a perturbed point.
GradCheckReport grad_check(const ScalarFn& f, const std::vector<NamedTensor>& params, double eps = 1e-5,
                           double tol = 1e-4);

}  // namespace mivhead
