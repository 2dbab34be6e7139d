#include "reflowtts/reflow.h"

#include <algorithm>
#include <cmath>

#include "reflowtts/error.h"

namespace rf {

namespace {

constexpr double kMaxFailureRate = 0.10;

std::size_t frames_of(const FlowCondition* c) {
  return c ? c->plan.total_frames : 1;
}

// z0 for path i, plus the condition grid it runs under.
struct PathSetup {
  const FlowCondition* cond = nullptr;
  ConditionGrid grid;
  Tensor z0;
};

PathSetup setup_path(const VelocityModel& model,
                     const std::vector<FlowCondition>& conditions, std::size_t i,
                     std::uint64_t seed) {
  PathSetup p;
  const bool conditional = model.config().conditional;
  if (conditional) {
    if (conditions.empty()) throw ValueError("conditional model needs conditions");
    p.cond = &conditions[i % conditions.size()];
    NoGradGuard guard;
    p.grid = model.condition(p.cond->tokens, p.cond->plan);
  }
  Rng rng(derive_seed(seed, i));
  const std::size_t bins = model.config().decoder.mel_bins;
  const std::size_t frames = frames_of(p.cond);
  p.z0 = Tensor::from({frames, bins}, rng.normals(frames * bins));
  return p;
}

std::vector<float> to_float(const Tensor& t) {
  return {t.data().begin(), t.data().end()};
}

}  // namespace

std::vector<FlowCondition> conditions_from_corpus(const SynthCorpus& corpus, Split split) {
  std::vector<FlowCondition> out;
  for (const Utterance* u : corpus.split(split)) {
    out.push_back(FlowCondition{u->id, u->tokens, u->plan});
  }
  return out;
}

CouplingReport generate_coupling(const VelocityModel& model,
                                 const std::vector<FlowCondition>& conditions,
                                 std::size_t n, const SolverSpec& spec,
                                 std::uint64_t seed, std::size_t batch) {
  if (n < 1) throw ValueError("generate_coupling needs n >= 1");
  if (batch < 1) throw ValueError("generate_coupling needs batch >= 1");
  spec.validate();
  CouplingReport report;
  report.requested = n;
  CouplingSet& set = report.set;
  set.dim = model.config().decoder.mel_bins;
  set.vocab_size = model.config().conditional ? model.config().frontend.vocab_size : 0;
  set.generation = model.generation() + 1;
  set.solver = spec;
  set.seed = seed;
  if (!model.config().conditional) {
    const std::size_t dim = set.dim;
    for (std::size_t start = 0; start < n; start += batch) {
      const std::size_t count = std::min(batch, n - start);
      std::vector<double> z0;
      for (std::size_t i = start; i < start + count; ++i) {
        const Tensor one = setup_path(model, conditions, i, seed).z0;
        z0.insert(z0.end(), one.data().begin(), one.data().end());
      }
      try {
        const SolveResult r = solve(spec, model, nullptr, Tensor::from({count, dim}, z0));
        const auto& z1 = r.z1.data();
        for (std::size_t k = 0; k < count; ++k) {
          CouplingPair pair;
          pair.z0.assign(z0.begin() + k * dim, z0.begin() + (k + 1) * dim);
          pair.z1.assign(z1.begin() + k * dim, z1.begin() + (k + 1) * dim);
          set.pairs.push_back(std::move(pair));
        }
      } catch (const SolverError&) {
        report.failures += count;
      }
    }
  }
  for (std::size_t i = 0; i < n && model.config().conditional; ++i) {
    PathSetup p = setup_path(model, conditions, i, seed);
    try {
      const SolveResult r = solve(spec, model, &p.grid, p.z0);
      CouplingPair pair;
      pair.cond_ref = p.cond->ref;
      pair.tokens = p.cond->tokens;
      pair.plan = p.cond->plan;
      pair.z0 = to_float(p.z0);
      pair.z1 = to_float(r.z1);
      set.pairs.push_back(std::move(pair));
    } catch (const SolverError&) {
      ++report.failures;
    }
  }
  if (report.failure_rate() > kMaxFailureRate) {
    throw SolverError("coupling generation failed for " + std::to_string(report.failures) +
                      " of " + std::to_string(n) + " pairs (limit 10%)");
  }
  return report;
}

VelocityModel reflow_round(const VelocityModel& base, const CouplingSet& coupling,
                           const ReflowOptions& options,
                           const std::function<void(const TrainStep&)>& on_step) {
  if (coupling.pairs.empty()) throw ValueError("reflow needs at least one coupling pair");
  if (coupling.dim != base.config().decoder.mel_bins) {
    throw ShapeError("coupling dim " + std::to_string(coupling.dim) +
                     " != model mel_bins " +
                     std::to_string(base.config().decoder.mel_bins));
  }
  VelocityModel model(base.config(), options.init_seed);
  const bool conditional = base.config().conditional;
  for (const auto& [name, shape] : model.params().manifest()) {
    const bool is_frontend = name.rfind("frontend.", 0) == 0;
    if (options.fine_tune || (options.freeze_frontend && is_frontend)) {
      const Tensor& src = base.params().get(name);
      std::copy(src.data().begin(), src.data().end(),
                model.params().get(name).mutable_data().begin());
    }
  }
  model.set_generation(coupling.generation);
  TrainConfig train = options.train;
  if (options.freeze_frontend && conditional) train.freeze_prefix = "frontend.";
  Trainer trainer(model, train);
  trainer.run(training_set_from_coupling(coupling), on_step);
  return model;
}

StraightnessReport straightness(const VelocityField& field,
                                const std::vector<Tensor>& z0s,
                                std::size_t n_time_points, const SolverSpec& spec) {
  if (z0s.empty() || n_time_points < 1) {
    throw ValueError("straightness needs n_paths >= 1 and n_time_points >= 1");
  }
  SolveOptions opts;
  for (std::size_t j = 0; j < n_time_points; ++j) {
    opts.stop_times.push_back((static_cast<double>(j) + 0.5) /
                              static_cast<double>(n_time_points));
  }
  StraightnessReport report;
  report.n_time_points = n_time_points;
  report.per_t.assign(n_time_points, 0.0);
  for (const Tensor& z0 : z0s) {
    try {
      const SolveOutput out = integrate(spec, field, z0, opts);
      const auto& z1 = out.result.z1.data();
      std::vector<double> at(n_time_points, 0.0);
      for (std::size_t j = 0; j < n_time_points; ++j) {
        const Tensor v = field(out.stops[j], opts.stop_times[j]);
        const auto& vd = v.data();
        for (std::size_t i = 0; i < vd.size(); ++i) {
          const double d = (z1[i] - z0.data()[i]) - vd[i];
          at[j] += d * d;
        }
      }
      double acc = 0.0;
      for (std::size_t j = 0; j < n_time_points; ++j) {
        acc += at[j];
        report.per_t[j] += at[j];
      }
      report.per_path.push_back(acc / static_cast<double>(n_time_points));
    } catch (const SolverError&) {
      ++report.dropped;
    }
  }
  if (report.per_path.empty()) throw SolverError("straightness: every path failed");
  double total = 0.0;
  for (double s : report.per_path) total += s;
  report.value = total / static_cast<double>(report.per_path.size());
  for (double& s : report.per_t) s /= static_cast<double>(report.per_path.size());
  return report;
}

StraightnessReport straightness(const VelocityModel& model,
                                const std::vector<FlowCondition>& conditions,
                                std::size_t n_paths, std::size_t n_time_points,
                                const SolverSpec& spec, std::uint64_t seed) {
  if (n_paths < 1) throw ValueError("straightness needs n_paths >= 1");
  if (!model.config().conditional) {
    std::vector<Tensor> z0s;
    for (std::size_t i = 0; i < n_paths; ++i) {
      z0s.push_back(setup_path(model, conditions, i, seed).z0);
    }
    return straightness(model_field(model, nullptr), z0s, n_time_points, spec);
  }
  StraightnessReport total;
  total.n_time_points = n_time_points;
  total.per_t.assign(n_time_points, 0.0);
  for (std::size_t i = 0; i < n_paths; ++i) {
    PathSetup p = setup_path(model, conditions, i, seed);
    try {
      const StraightnessReport one = straightness(model_field(model, &p.grid), {p.z0},
                                                  n_time_points, spec);
      total.per_path.push_back(one.value);
      for (std::size_t j = 0; j < n_time_points; ++j) total.per_t[j] += one.per_t[j];
    } catch (const SolverError&) {
      ++total.dropped;
    }
  }
  if (total.per_path.empty()) throw SolverError("straightness: every path failed");
  double sum = 0.0;
  for (double s : total.per_path) sum += s;
  total.value = sum / static_cast<double>(total.per_path.size());
  for (double& s : total.per_t) s /= static_cast<double>(total.per_path.size());
  return total;
}

}  // namespace rf
