#pragma once

// Central-difference gradient oracle.

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <vector>

#include "cpgc/rng.hpp"
#include "cpgc/tensor.hpp"

namespace cpgc {

/// Builds a scalar loss on the given tape from the current parameter values.
using LossBuilder = std::function<Var(Tape&)>;

struct GradCheckOptions {
  double eps = 1e-4;
  /// When set, only this many randomly chosen coordinates per tensor are probed.
  std::optional<std::size_t> coords_per_tensor;
  std::uint64_t seed = 0;
};

/// Max over probed coordinates of |analytic - central| / (|central| + 1e-8).
/// Each parameter must have requires_grad set; its grad is overwritten.
inline double finite_diff_check(const LossBuilder& f, const std::vector<Tensor*>& params,
                                GradCheckOptions opts = {}) {
  for (Tensor* p : params) {
    p->ensure_grad();
    p->zero_grad();
  }
  {
    Tape tape;
    Var loss = f(tape);
    tape.backward(loss);
  }
  auto evaluate = [&]() {
    Tape tape;
    return f(tape).item();
  };
  Rng rng(opts.seed);
  double worst = 0.0;
  for (Tensor* p : params) {
    std::vector<std::size_t> coords(p->values.size());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (opts.coords_per_tensor && *opts.coords_per_tensor < coords.size()) {
      rng.shuffle(std::span<std::size_t>(coords));
      coords.resize(*opts.coords_per_tensor);
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t i : coords) {
      const double saved = p->values[i];
      p->values[i] = saved + opts.eps;
      const double up = evaluate();
      p->values[i] = saved - opts.eps;
      const double down = evaluate();
      p->values[i] = saved;
      const double numeric = (up - down) / (2.0 * opts.eps);
      const double analytic = p->grad.empty() ? 0.0 : p->grad[i];
      worst = std::max(worst, std::abs(analytic - numeric) / (std::abs(numeric) + 1e-8));
    }
  }
  return worst;
}

}  // namespace cpgc
