#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

namespace rlhflab {

// Bias-corrected Adam. One state instance per training loop; never shared.
struct AdamState {
  std::vector<double> first_moment;
  std::vector<double> second_moment;
  long step_count = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  static AdamState make(std::size_t n_params) {
    AdamState s;
    s.first_moment.assign(n_params, 0.0);
    s.second_moment.assign(n_params, 0.0);
    return s;
  }
};

inline void adam_step(std::vector<double>& params,
                      const std::vector<double>& grads, AdamState& state,
                      double learning_rate) {
  if (params.size() != grads.size() ||
      params.size() != state.first_moment.size() ||
      params.size() != state.second_moment.size()) {
    throw std::invalid_argument("adam_step: length mismatch");
  }
  if (!(learning_rate > 0.0)) {
    throw std::invalid_argument("adam_step: learning rate must be positive");
  }
  state.step_count += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, state.step_count);
  const double bc2 = 1.0 - std::pow(state.beta2, state.step_count);
  for (std::size_t i = 0; i < params.size(); ++i) {
    double& m = state.first_moment[i];
    double& v = state.second_moment[i];
    m = state.beta1 * m + (1.0 - state.beta1) * grads[i];
    v = state.beta2 * v + (1.0 - state.beta2) * grads[i] * grads[i];
    const double m_hat = m / bc1;
    const double v_hat = v / bc2;
    params[i] -= learning_rate * m_hat / (std::sqrt(v_hat) + state.epsilon);
  }
}

// Linear warm-up over the first warmup_fraction of steps, then cosine decay
// down to floor_fraction of the peak rate.
struct LrSchedule {
  double peak = 1e-2;
  int total_steps = 1;
  double warmup_fraction = 0.1;
  double floor_fraction = 0.1;

  double at(int step) const {
    if (total_steps <= 0) return peak;
    const int warmup =
        std::max(1, static_cast<int>(std::lround(warmup_fraction * total_steps)));
    if (step < warmup) {
      return peak * static_cast<double>(step + 1) / static_cast<double>(warmup);
    }
    if (total_steps <= warmup) return peak;
    const double progress = static_cast<double>(step - warmup) /
                            static_cast<double>(total_steps - warmup);
    const double floor = floor_fraction * peak;
    return floor + 0.5 * (peak - floor) * (1.0 + std::cos(3.14159265358979323846 * progress));
  }
};

}  // namespace rlhflab
