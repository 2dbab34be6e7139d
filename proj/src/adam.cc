#include "reflowtts/adam.h"

#include <cmath>
#include <string>

#include "reflowtts/error.h"

namespace rf {

Adam::Adam(std::vector<Tensor> params, AdamConfig config)
    : params_(std::move(params)), config_(config) {
  if (!(config_.lr > 0)) throw ValueError("Adam lr must be > 0");
  state_.m.reserve(params_.size());
  state_.v.reserve(params_.size());
  for (const Tensor& p : params_) {
    state_.m.emplace_back(p.numel(), 0.0);
    state_.v.emplace_back(p.numel(), 0.0);
  }
}

void Adam::set_lr(double lr) {
  if (!(lr > 0)) throw ValueError("Adam lr must be > 0");
  config_.lr = lr;
}

void Adam::zero_grad() {
  for (Tensor& p : params_) p.zero_grad();
}

void Adam::load_state(AdamState state) {
  if (state.m.size() != params_.size() || state.v.size() != params_.size()) {
    throw ShapeError("Adam state holds " + std::to_string(state.m.size()) +
                     " moments for " + std::to_string(params_.size()) +
                     " parameters");
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (state.m[i].size() != params_[i].numel() ||
        state.v[i].size() != params_[i].numel()) {
      throw ShapeError("Adam moment size mismatch for parameter " +
                       std::to_string(i));
    }
  }
  state_ = std::move(state);
}

void Adam::step() {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    for (double g : params_[i].grad()) {
      if (!std::isfinite(g)) {
        throw NumericError("non-finite gradient for parameter " +
                           std::to_string(i) + "; Adam step not applied");
      }
    }
  }
  state_.step += 1;
  const double t = static_cast<double>(state_.step);
  const double bc1 = 1.0 - std::pow(config_.beta1, t);
  const double bc2 = 1.0 - std::pow(config_.beta2, t);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto data = params_[i].mutable_data();
    auto grad = params_[i].grad();
    auto& m = state_.m[i];
    auto& v = state_.v[i];
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double g = grad.empty() ? 0.0 : grad[j];
      m[j] = config_.beta1 * m[j] + (1.0 - config_.beta1) * g;
      v[j] = config_.beta2 * v[j] + (1.0 - config_.beta2) * g * g;
      const double m_hat = m[j] / bc1;
      const double v_hat = v[j] / bc2;
      data[j] -= config_.lr * m_hat / (std::sqrt(v_hat) + config_.eps);
    }
  }
}

}  // namespace rf
