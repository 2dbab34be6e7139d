#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "reflowtts/decoder.h"
#include "reflowtts/random.h"
#include "reflowtts/tensor.h"

namespace rf {

// dz/dt = v(z, t), integrated from t = 0 (noise) to t = 1 (data).
using VelocityField = std::function<Tensor(const Tensor& z, double t)>;

enum class SolverKind { kEuler, kRk45 };

struct SolverSpec {
  SolverKind kind = SolverKind::kRk45;
  std::size_t steps = 1;  // euler only
  double rtol = 1e-5;
  double atol = 1e-5;
  std::size_t max_steps = 100000;  // rk45: accepted + rejected attempts
  double initial_step = 1e-2;

  static SolverSpec euler(std::size_t steps);
  static SolverSpec rk45(double rtol = 1e-5, double atol = 1e-5);
  void validate() const;
  // "euler-50", "rk45"
  std::string label() const;
};

struct SolveResult {
  Tensor z1;
  // (t, state) at t = 0, every accepted step, and t = 1.
  std::vector<std::pair<double, Tensor>> trajectory;
  std::size_t nfe = 0;
  double wall_time = 0.0;
  std::size_t accepted_steps = 0;
  std::size_t rejected_steps = 0;
};

struct SolveOptions {
  bool record_trajectory = false;
  // Sorted times in (0, 1) the integrator must land on exactly; states there
  // are recorded in `stops`. With stops, Euler no longer has nfe == steps.
  std::vector<double> stop_times;
};

struct SolveOutput {
  SolveResult result;
  std::vector<Tensor> stops;
};

// Forward Euler on the uniform grid t_k = k / steps; nfe == steps.
SolveResult solve_euler(const VelocityField& field, const Tensor& z0,
                        std::size_t steps);
SolveOutput solve_euler(const VelocityField& field, const Tensor& z0,
                        std::size_t steps, const SolveOptions& options);

// Dormand-Prince 5(4) with FSAL. nfe = 1 + 6 * (accepted + rejected).
SolveResult solve_rk45(const VelocityField& field, const Tensor& z0,
                       double rtol, double atol, std::size_t max_steps,
                       double initial_step = 1e-2);
SolveOutput solve_rk45(const VelocityField& field, const Tensor& z0,
                       const SolverSpec& spec, const SolveOptions& options);

SolveOutput integrate(const SolverSpec& spec, const VelocityField& field,
                      const Tensor& z0, const SolveOptions& options = {});

// Gradient-free field over a model. `cond` may be null for unconditional
// models; then z is a point set [N, mel_bins].
VelocityField model_field(const VelocityModel& model, const ConditionGrid* cond);

// z0 given: integrates the model's field from it.
SolveResult solve(const SolverSpec& spec, const VelocityModel& model,
                  const ConditionGrid* cond, const Tensor& z0);
// z0 drawn from N(0, I) shaped [cond->frames(), mel_bins], or [1, mel_bins]
// for an unconditional model.
SolveResult solve(const SolverSpec& spec, const VelocityModel& model,
                  const ConditionGrid* cond, Rng& rng);

}  // namespace rf
