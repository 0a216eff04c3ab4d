#pragma once

#include <functional>
#include <string>
#include <vector>

#include "kd/tensor.hpp"

namespace kd {

struct GradCheckResult {
  double max_rel_error = 0.0;
  // Location of the worst element.
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t elements_checked = 0;
};

// Scalar-valued function of the checked inputs. It must build its result on
// the supplied graph from the inputs (which are leaves with requires_grad).
using GradCheckFn = std::function<Tensor<double>(Graph<double>&)>;

// Compares reverse-mode gradients of f with central differences
// (f(x+eps) - f(x-eps)) / (2 eps), elementwise over every input, and returns
// the max of |a - n| / max(1e-12, |a| + |n|). Throws NumericalError if f or
// a gradient is not finite.
GradCheckResult grad_check(const GradCheckFn& f, std::vector<Tensor<double>> inputs, double eps = 1e-5);

}  // namespace kd
