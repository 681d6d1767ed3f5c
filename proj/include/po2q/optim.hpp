#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <utility>

#include "po2q/error.hpp"
#include "po2q/tensor.hpp"

namespace po2q {

struct AdamState {
  RealTensor m;
  RealTensor v;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t step = 0;
};

inline AdamState make_adam_state(const Shape& shape, double beta1 = 0.9, double beta2 = 0.999,
                                 double epsilon = 1e-8) {
  return AdamState{RealTensor(shape, 0.0), RealTensor(shape, 0.0), beta1, beta2, epsilon, 0};
}

/// One bias-corrected Adam update. Returns the new parameter and state.
inline std::pair<RealTensor, AdamState> adam_step(RealTensor param, const RealTensor& grad,
                                                  AdamState state, double lr) {
  require_same_shape(param, grad, "adam_step");
  require_same_shape(param, state.m, "adam_step state");
  if (!(lr > 0.0)) throw InvalidConfig("learning rate must be > 0");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    if (!std::isfinite(g)) throw DomainError("adam_step: non-finite gradient");
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
    state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
    const double m_hat = state.m[i] / c1;
    const double v_hat = state.v[i] / c2;
    param[i] -= lr * m_hat / (std::sqrt(v_hat) + state.epsilon);
  }
  return {std::move(param), std::move(state)};
}

/// Scalar convenience used for learned scale exponents.
struct ScalarAdam {
  AdamState state = make_adam_state(Shape{1});

  double step(double param, double grad, double lr) {
    auto [p, s] = adam_step(RealTensor(Shape{1}, param), RealTensor(Shape{1}, grad),
                            std::move(state), lr);
    state = std::move(s);
    return p[0];
  }
};

/// Cosine decay without restarts: lr0 * ((1 - alpha) * 0.5 * (1 + cos(pi * t / T)) + alpha).
inline double cosine_decay(double lr0, std::uint64_t step, std::uint64_t total_steps,
                           double alpha = 0.001) {
  if (total_steps == 0) return lr0;
  const double p = std::min(1.0, static_cast<double>(step) / static_cast<double>(total_steps));
  const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * p));
  return lr0 * ((1.0 - alpha) * cosine + alpha);
}

}  // namespace po2q
