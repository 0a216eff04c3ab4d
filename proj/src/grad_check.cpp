#include "kd/grad_check.hpp"

#include <cmath>
#include <string>

namespace kd {
namespace {

double evaluate(const GradCheckFn& f) {
  Graph<double> g(false);
  return f(g).item();
}

std::string where(std::size_t input, std::size_t index) {
  return "input " + std::to_string(input) + " element " + std::to_string(index);
}

}  // namespace

GradCheckResult grad_check(const GradCheckFn& f, std::vector<Tensor<double>> inputs, double eps) {
  if (!(eps > 0.0)) throw NumericalError("grad_check: eps must be positive");
  for (auto& in : inputs) {
    in.set_requires_grad(true);
    in.zero_grad();
  }
  {
    Graph<double> g;
    Tensor<double> loss = f(g);
    if (!std::isfinite(loss.item())) throw NumericalError("grad_check: function value is not finite");
    g.backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  for (auto& in : inputs) {
    analytic.emplace_back(in.grad().begin(), in.grad().end());
  }

  GradCheckResult result;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto values = inputs[i].data();
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double a = analytic[i][j];
      if (!std::isfinite(a)) throw NumericalError("grad_check: non-finite analytic gradient at " + where(i, j));
      const double saved = values[j];
      values[j] = saved + eps;
      const double up = evaluate(f);
      values[j] = saved - eps;
      const double down = evaluate(f);
      values[j] = saved;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw NumericalError("grad_check: non-finite function value when perturbing " + where(i, j));
      }
      const double n = (up - down) / (2.0 * eps);
      const double rel = std::abs(a - n) / std::max(1e-12, std::abs(a) + std::abs(n));
      ++result.elements_checked;
      if (rel > result.max_rel_error || result.elements_checked == 1) {
        result.max_rel_error = rel;
        result.worst_input = i;
        result.worst_index = j;
        result.analytic = a;
        result.numeric = n;
      }
    }
  }
  return result;
}

}  // namespace kd
