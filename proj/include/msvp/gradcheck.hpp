#pragma once

// Finite-difference gradient checking. Runs an op (or any composition
// producing a scalar) at 64-bit precision, compares tape gradients against
// central differences, and reports the max relative error
// |g_a - g_fd| / (|g_a| + |g_fd| + 1e-10). A function whose two forward
// evaluations differ bitwise is flagged as an invalid test rather than a
// gradient failure.

#include <cmath>
#include <cstring>
#include <functional>
#include <string>
#include <vector>

#include "msvp/tape.hpp"
#include "msvp/tensor.hpp"

namespace msvp {

struct GradCheckResult {
  double max_rel_err = 0.0;
  bool deterministic = true;
  bool pass = false;
  std::string detail;
};

// fn maps the inputs to a scalar loss. Inputs are mutated in place during
// probing and restored afterwards.
inline GradCheckResult grad_check(
    const std::function<Tensor<double>(const std::vector<Tensor<double>>&)>& fn,
    std::vector<Tensor<double>> inputs, double tolerance, double eps = 1e-5) {
  GradCheckResult res;

  const double base1 = fn(inputs).item();
  const double base2 = fn(inputs).item();
  if (std::memcmp(&base1, &base2, sizeof(double)) != 0) {
    res.deterministic = false;
    res.pass = false;
    res.detail = "non-deterministic forward: two evaluations differ";
    return res;
  }

  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  std::vector<std::vector<double>> analytic;
  {
    GradTape<double> tape;
    TapeScope<double> scope(tape);
    Tensor<double> loss = fn(inputs);
    MSVP_CHECK(loss.numel() == 1, "grad_check: fn must return a scalar");
    tape.backward(loss);
    for (auto& t : inputs) {
      t.ensure_grad();
      analytic.push_back(t.grad_vec());
    }
  }

  for (size_t ti = 0; ti < inputs.size(); ++ti) {
    auto& t = inputs[ti];
    t.set_requires_grad(false);
    for (int64_t i = 0; i < t.numel(); ++i) {
      const double saved = t.data()[i];
      t.data()[i] = saved + eps;
      const double fp = fn(inputs).item();
      t.data()[i] = saved - eps;
      const double fm = fn(inputs).item();
      t.data()[i] = saved;
      const double g_fd = (fp - fm) / (2.0 * eps);
      const double g_an = analytic[ti][static_cast<size_t>(i)];
      const double rel =
          std::abs(g_an - g_fd) / (std::abs(g_an) + std::abs(g_fd) + 1e-10);
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.detail = cat("input ", ti, " element ", i, ": analytic ", g_an,
                         " vs fd ", g_fd);
      }
    }
  }
  res.pass = res.max_rel_err < tolerance;
  return res;
}

}  // namespace msvp
