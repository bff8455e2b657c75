#pragma once

// Central finite-difference gradient checking in double precision.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include "noisemap/tensor.hpp"

namespace noisemap {

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
};

// `f` maps the input list to a scalar Tensord. Every input is perturbed
// element by element; the error for one element is
// |analytic - numeric| / max(1, |analytic|).
template <typename F>
GradCheckReport grad_check_report(F&& f, std::vector<Tensord>& inputs, double eps = 1e-5) {
  if (!(eps >= 1e-6 && eps <= 1e-3)) {
    throw std::invalid_argument("grad_check: eps must lie in [1e-6, 1e-3]");
  }
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  Tensord loss = f(static_cast<const std::vector<Tensord>&>(inputs));
  if (!std::isfinite(loss.item())) throw NonFiniteError("grad_check: loss", 0);
  backward(loss);

  std::vector<std::vector<double>> analytic;
  analytic.reserve(inputs.size());
  for (auto& t : inputs) {
    analytic.emplace_back(t.grad().begin(), t.grad().end());
    t.set_requires_grad(false);
  }

  auto evaluate = [&]() {
    const double v = f(static_cast<const std::vector<Tensord>&>(inputs)).item();
    if (!std::isfinite(v)) throw NonFiniteError("grad_check: perturbed loss", 0);
    return v;
  };

  GradCheckReport report;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto values = inputs[k].data_mut();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + eps;
      const double up = evaluate();
      values[i] = saved - eps;
      const double down = evaluate();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[k][i];
      const double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
      if (err > report.max_relative_error) {
        report.max_relative_error = err;
        report.worst_input = k;
        report.worst_index = i;
      }
      ++report.checked;
    }
  }
  for (auto& t : inputs) t.set_requires_grad(true);
  return report;
}

template <typename F>
double grad_check(F&& f, std::vector<Tensord>& inputs, double eps = 1e-5) {
  return grad_check_report(std::forward<F>(f), inputs, eps).max_relative_error;
}

}  // namespace noisemap
