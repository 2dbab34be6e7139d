#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "reflowtts/data.h"
#include "reflowtts/decoder.h"
#include "reflowtts/ode.h"
#include "reflowtts/training.h"

namespace rf {

// What a coupling pair is generated under. Unconditional models take an
// empty condition list.
struct FlowCondition {
  std::uint32_t ref = CouplingPair::kNoCondition;
  TokenSequence tokens;
  DurationPlan plan;
};

std::vector<FlowCondition> conditions_from_corpus(const SynthCorpus& corpus, Split split);

inline SolverSpec coupling_solver() { return SolverSpec::rk45(1e-6, 1e-9); }

struct CouplingReport {
  CouplingSet set;
  std::size_t requested = 0;
  std::size_t failures = 0;
  double failure_rate() const {
    return requested ? static_cast<double>(failures) / static_cast<double>(requested) : 0.0;
  }
};

// Pair i draws z0 ~ N(0, I) from stream derive_seed(seed, i), takes condition
// i mod |conditions|, and integrates to z1. Failed solves are dropped and
// counted; more than 10% failures throws SolverError.
//
// For unconditional models `batch` consecutive pairs are integrated as one
// [batch, dim] state sharing the adaptive step sequence. A failed batch drops
// all of its pairs. Conditional models always solve one pair at a time.
CouplingReport generate_coupling(const VelocityModel& model,
                                 const std::vector<FlowCondition>& conditions,
                                 std::size_t n, const SolverSpec& spec,
                                 std::uint64_t seed, std::size_t batch = 1);

struct ReflowOptions {
  TrainConfig train;
  // Start from the base weights instead of a fresh initialisation.
  bool fine_tune = false;
  // Keep the base frontend and do not update it.
  bool freeze_frontend = false;
  std::uint64_t init_seed = 0;
};

// Trains a new model on the fixed pairs of `coupling` (z0 in the source role,
// z1 in the target role). Its generation is coupling.generation.
VelocityModel reflow_round(const VelocityModel& base, const CouplingSet& coupling,
                           const ReflowOptions& options,
                           const std::function<void(const TrainStep&)>& on_step = {});

struct StraightnessReport {
  double value = 0.0;  // mean over kept paths
  std::vector<double> per_path;
  // per_t[j]: mean over kept paths of the deviation at t_j.
  std::vector<double> per_t;
  std::size_t dropped = 0;
  std::size_t n_time_points = 0;
};

// S = mean over paths and t_j = (j + 0.5) / n_time_points of
// ||(z1 - z0) - v(z_t, t_j)||^2 with z_t the solver state at t_j.
StraightnessReport straightness(const VelocityField& field,
                                const std::vector<Tensor>& z0s,
                                std::size_t n_time_points, const SolverSpec& spec);
StraightnessReport straightness(const VelocityModel& model,
                                const std::vector<FlowCondition>& conditions,
                                std::size_t n_paths, std::size_t n_time_points,
                                const SolverSpec& spec, std::uint64_t seed);

}  // namespace rf
