#pragma once

// Central-difference gradient checks for nn::Module implementations.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

#include "gepd/nn/module.hpp"

namespace gepd::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, scale);
  for (double& v : t.values()) v = dist(rng);
  return t;
}

inline double dot(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// max over entries of |analytic - numeric| / max(|analytic| + |numeric|, floor)
struct GradCheckResult {
  double input_rel_error = 0.0;
  double param_rel_error = 0.0;
  std::size_t checked = 0;
};

inline double rel_error(double a, double b, double floor) {
  return std::abs(a - b) / std::max(std::abs(a) + std::abs(b), floor);
}

// Checks d(sum(probe * f(x)))/dx and /dtheta. `max_entries` limits the number
// of perturbed entries per tensor (chosen deterministically).
inline GradCheckResult grad_check(nn::Module& module, const Tensor& input, std::mt19937_64& rng,
                                  double eps = 1e-6, std::size_t max_entries = 40,
                                  double floor = 1e-6) {
  GradCheckResult res;
  Tensor out = module.forward(input);
  const Tensor probe = random_tensor(out.shape(), rng);
  module.zero_grad();
  module.forward(input);
  const Tensor grad_in = module.backward(probe);
  std::vector<Tensor> param_grads;
  for (nn::Parameter* p : module.parameters()) param_grads.push_back(p->grad);

  auto objective = [&](const Tensor& x) { return dot(module.forward(x), probe); };

  const std::size_t stride_in = std::max<std::size_t>(1, input.size() / max_entries);
  for (std::size_t i = 0; i < input.size(); i += stride_in) {
    Tensor xp = input, xm = input;
    xp[i] += eps;
    xm[i] -= eps;
    const double num = (objective(xp) - objective(xm)) / (2 * eps);
    res.input_rel_error = std::max(res.input_rel_error, rel_error(grad_in[i], num, floor));
    ++res.checked;
  }
  auto params = module.parameters();
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& w = params[k]->value;
    const std::size_t stride = std::max<std::size_t>(1, w.size() / max_entries);
    for (std::size_t i = 0; i < w.size(); i += stride) {
      const double orig = w[i];
      w[i] = orig + eps;
      const double fp = objective(input);
      w[i] = orig - eps;
      const double fm = objective(input);
      w[i] = orig;
      const double num = (fp - fm) / (2 * eps);
      res.param_rel_error = std::max(res.param_rel_error, rel_error(param_grads[k][i], num, floor));
      ++res.checked;
    }
  }
  return res;
}

}  // namespace gepd::testing
