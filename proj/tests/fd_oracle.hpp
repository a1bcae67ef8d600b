#pragma once

// Central finite differences, kept independent of the tape so it can check it.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "civbalance/diffkit.hpp"

namespace civb::testing {

inline std::vector<double> central_differences(const std::function<double(const ParamSet&)>& f, ParamSet params,
                                               double h = 1e-5) {
  std::vector<double> flat = params.flatten();
  std::vector<double> grad(flat.size());
  for (std::size_t k = 0; k < flat.size(); ++k) {
    const double orig = flat[k];
    flat[k] = orig + h;
    params.unflatten(flat);
    const double up = f(params);
    flat[k] = orig - h;
    params.unflatten(flat);
    const double down = f(params);
    flat[k] = orig;
    grad[k] = (up - down) / (2.0 * h);
  }
  return grad;
}

// ||a - b|| / max(||a||, ||b||), with a floor so all-zero gradients compare equal.
inline double relative_error(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0.0;
  double na = 0.0;
  double nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), 1e-12});
}

// Evaluates the loss as a plain function of parameter values (fresh tape, no backward).
inline std::function<double(const ParamSet&)> as_function(const LossFn& loss) {
  return [loss](const ParamSet& p) {
    Tape tape;
    auto vars = register_params(tape, p);
    return tape.value(loss(tape, vars))[0];
  };
}

inline double gradient_check(const LossFn& loss, const ParamSet& params, double h = 1e-5) {
  const auto analytic = value_and_grad(loss, params).grads.flatten();
  const auto numeric = central_differences(as_function(loss), params, h);
  return relative_error(analytic, numeric);
}

}  // namespace civb::testing
