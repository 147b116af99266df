#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "pqe/autodiff.hpp"

namespace pqe::ad {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Scalar-valued program over a list of input tensors.
using Program = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

/// Compares reverse-mode gradients with central differences
/// (f(x+h) - f(x-h)) / 2h for every coordinate of every input. The relative
/// error uses max(|analytic|, |numeric|, 1e-8) as denominator. Returns the
/// worst coordinate of each input separately.
inline std::vector<GradCheckResult> check_gradients_per_input(const Program& f,
                                                              const std::vector<Tensor<double>>& inputs,
                                                              double h = 1e-5) {
  Tape<double> tape;
  std::vector<Var<double>> vars;
  for (const auto& x : inputs) vars.push_back(tape.leaf(x));
  const auto grads = tape.backward(f(tape, vars));

  const auto eval = [&](const std::vector<Tensor<double>>& xs) {
    Tape<double> t;
    std::vector<Var<double>> vs;
    for (const auto& x : xs) vs.push_back(t.constant(x));
    return f(t, vs).value()[0];
  };

  std::vector<GradCheckResult> out(inputs.size());
  std::vector<Tensor<double>> probe = inputs;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const auto& g = grads[vars[k]];
    out[k].worst_input = k;
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const double x0 = inputs[k][i];
      probe[k][i] = x0 + h;
      const double fp = eval(probe);
      probe[k][i] = x0 - h;
      const double fm = eval(probe);
      probe[k][i] = x0;
      const double numeric = (fp - fm) / (2.0 * h);
      const double analytic = g[i];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
      const double rel = std::abs(analytic - numeric) / denom;
      if (rel > out[k].max_rel_error || i == 0) out[k] = {rel, k, i, analytic, numeric};
    }
  }
  return out;
}

inline GradCheckResult check_gradients(const Program& f, const std::vector<Tensor<double>>& inputs,
                                       double h = 1e-5) {
  GradCheckResult worst;
  for (const auto& r : check_gradients_per_input(f, inputs, h)) {
    if (r.max_rel_error > worst.max_rel_error) worst = r;
  }
  return worst;
}

inline GradCheckResult check_gradients(const std::function<Var<double>(Var<double>)>& f, const Tensor<double>& x,
                                       double h = 1e-5) {
  return check_gradients([&](Tape<double>&, const std::vector<Var<double>>& v) { return f(v[0]); },
                         std::vector<Tensor<double>>{x}, h);
}

}  // namespace pqe::ad
