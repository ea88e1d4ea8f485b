#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "cpgc/errors.hpp"
#include "cpgc/tensor.hpp"

namespace cpgc {

struct AdamHyper {
  double learning_rate = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Moment estimates for one parameter tensor.
struct AdamState {
  std::vector<double> first_moment;
  std::vector<double> second_moment;
  std::size_t step_count = 0;
  AdamHyper hyper;

  AdamState() = default;
  AdamState(std::size_t n, AdamHyper h) : first_moment(n, 0.0), second_moment(n, 0.0), hyper(h) {}
};

/// One bias-corrected Adam update of `param` from `param.grad`.
/// A parameter that received no gradient is treated as having a zero gradient.
inline void adam_step(Tensor& param, AdamState& state) {
  const std::size_t n = param.values.size();
  if (state.first_moment.size() != n || state.second_moment.size() != n) {
    throw ContractError("adam state has " + std::to_string(state.first_moment.size()) +
                        " entries for a parameter of " + std::to_string(n));
  }
  if (!param.grad.empty() && param.grad.size() != n) throw ContractError("gradient length mismatch");
  const auto& h = state.hyper;
  state.step_count += 1;
  const double t = static_cast<double>(state.step_count);
  const double c1 = 1.0 - std::pow(h.beta1, t);
  const double c2 = 1.0 - std::pow(h.beta2, t);
  const bool has_grad = !param.grad.empty();
  for (std::size_t i = 0; i < n; ++i) {
    const double g = has_grad ? param.grad[i] : 0.0;
    double& m = state.first_moment[i];
    double& v = state.second_moment[i];
    m = h.beta1 * m + (1.0 - h.beta1) * g;
    v = h.beta2 * v + (1.0 - h.beta2) * g * g;
    param.values[i] -= h.learning_rate * (m / c1) / (std::sqrt(v / c2) + h.epsilon);
  }
}

/// Adam over a fixed list of parameter tensors, one state per tensor.
class Adam {
 public:
  Adam(std::vector<Tensor*> params, AdamHyper hyper) : params_(std::move(params)) {
    states_.reserve(params_.size());
    for (Tensor* p : params_) states_.emplace_back(p->values.size(), hyper);
  }

  void step() {
    for (std::size_t i = 0; i < params_.size(); ++i) adam_step(*params_[i], states_[i]);
  }

  void zero_grad() {
    for (Tensor* p : params_) p->zero_grad();
  }

  const std::vector<AdamState>& states() const { return states_; }

 private:
  std::vector<Tensor*> params_;
  std::vector<AdamState> states_;
};

}  // namespace cpgc
