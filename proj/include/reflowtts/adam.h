#pragma once

#include <cstdint>
#include <vector>

#include "reflowtts/tensor.h"

namespace rf {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// First/second moments per parameter, aligned with the parameter list the
// optimizer was built with.
struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::int64_t step = 0;
};

class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamConfig config);

  // Bias-corrected update from the parameters' accumulated grads. A missing
  // grad counts as zero. Any non-finite grad rejects the whole step and
  // leaves parameters and state untouched.
  void step();
  void zero_grad();

  void set_lr(double lr);
  const AdamConfig& config() const { return config_; }
  const AdamState& state() const { return state_; }
  // Restores moments and step count (checkpoint resume); shapes must match.
  void load_state(AdamState state);
  const std::vector<Tensor>& params() const { return params_; }

 private:
  std::vector<Tensor> params_;
  AdamConfig config_;
  AdamState state_;
};

}  // namespace rf
