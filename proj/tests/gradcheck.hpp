#pragma once

// Finite-difference gradient checking harness shared by the unit tests and
// the acceptance suite. Checks directional derivatives against central
// differences: (f(x+hD) - f(x-hD)) / 2h vs <grad f, D>.

#include <cmath>
#include <functional>
#include <vector>

#include "lambo/autodiff.hpp"
#include "lambo/rng.hpp"

namespace lambo::test {

using ScalarFn = std::function<ad::Var(ad::Tape&, const std::vector<ad::Var>&)>;

struct GradCheckResult {
  double max_rel_err = 0.0;
  bool ok = true;
};

inline double eval_at(const ScalarFn& fn, const std::vector<Tensor>& inputs) {
  ad::Tape tape;
  std::vector<ad::Var> leaves;
  leaves.reserve(inputs.size());
  for (const auto& t : inputs) leaves.push_back(tape.leaf(t));
  return fn(tape, leaves).val()[0];
}

// Directional gradient check over all inputs at once. `symmetrize` marks
// inputs whose perturbation direction must be symmetric (Cholesky inputs).
inline GradCheckResult grad_check(const ScalarFn& fn, const std::vector<Tensor>& inputs,
                                  Rng& rng, double h = 1e-5, double tol = 1e-4,
                                  const std::vector<bool>& symmetrize = {}) {
  ad::Tape tape;
  std::vector<ad::Var> leaves;
  for (const auto& t : inputs) leaves.push_back(tape.leaf(t));
  ad::Var loss = fn(tape, leaves);
  tape.backward(loss);

  std::vector<Tensor> dirs;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    Tensor d = rng.normal_tensor(inputs[i].shape());
    if (i < symmetrize.size() && symmetrize[i]) {
      const std::size_t n = d.dim(0);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < r; ++c) {
          double avg = 0.5 * (d.at2(r, c) + d.at2(c, r));
          d.at2(r, c) = avg;
          d.at2(c, r) = avg;
        }
    }
    dirs.push_back(std::move(d));
  }

  double analytic = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    Tensor g = tape.grad_of(leaves[i]);
    for (std::size_t j = 0; j < g.numel(); ++j) analytic += g[j] * dirs[i][j];
  }

  auto shifted = [&](double sign) {
    std::vector<Tensor> xs = inputs;
    for (std::size_t i = 0; i < xs.size(); ++i)
      for (std::size_t j = 0; j < xs[i].numel(); ++j) xs[i][j] += sign * h * dirs[i][j];
    return eval_at(fn, xs);
  };
  const double fd = (shifted(1.0) - shifted(-1.0)) / (2.0 * h);

  GradCheckResult res;
  const double denom = std::max({std::abs(analytic), std::abs(fd), 1e-8});
  res.max_rel_err = std::abs(analytic - fd) / denom;
  res.ok = res.max_rel_err < tol;
  return res;
}

// Run `probes` random directional checks and return the worst relative error.
inline double grad_check_probes(const ScalarFn& fn, const std::vector<Tensor>& inputs,
                                Rng& rng, int probes, double h = 1e-5,
                                const std::vector<bool>& symmetrize = {}) {
  double worst = 0.0;
  for (int i = 0; i < probes; ++i) {
    auto r = grad_check(fn, inputs, rng, h, 1e30, symmetrize);
    worst = std::max(worst, r.max_rel_err);
  }
  return worst;
}

}  // namespace lambo::test
