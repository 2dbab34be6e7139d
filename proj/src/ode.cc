#include "reflowtts/ode.h"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <string>

#include "reflowtts/error.h"

namespace rf {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

// Dormand-Prince 5(4) tableau.
constexpr std::array<double, 7> kC = {0.0, 1.0 / 5, 3.0 / 10, 4.0 / 5, 8.0 / 9, 1.0, 1.0};
constexpr double kA[7][6] = {
    {},
    {1.0 / 5},
    {3.0 / 40, 9.0 / 40},
    {44.0 / 45, -56.0 / 15, 32.0 / 9},
    {19372.0 / 6561, -25360.0 / 2187, 64448.0 / 6561, -212.0 / 729},
    {9017.0 / 3168, -355.0 / 33, 46732.0 / 5247, 49.0 / 176, -5103.0 / 18656},
    {35.0 / 384, 0.0, 500.0 / 1113, 125.0 / 192, -2187.0 / 6784, 11.0 / 84},
};
// Fifth-order weights minus embedded fourth-order weights.
constexpr std::array<double, 7> kE = {
    71.0 / 57600, 0.0, -71.0 / 16695, 71.0 / 1920, -17253.0 / 339200, 22.0 / 525,
    -1.0 / 40};

constexpr double kSafety = 0.9;
constexpr double kMinFactor = 0.2;
constexpr double kMaxFactor = 10.0;
constexpr double kMinStep = 1e-6;
constexpr double kMaxStep = 1.0;

class CountingField {
 public:
  CountingField(const VelocityField& field, const Shape& shape)
      : field_(field), shape_(shape) {}

  std::vector<double> operator()(const std::vector<double>& z, double t) {
    ++calls_;
    Tensor v = field_(Tensor::from(shape_, z), t);
    if (v.shape() != shape_) {
      throw ShapeError("velocity field returned " + shape_str(v.shape()) +
                       " for state " + shape_str(shape_));
    }
    return {v.data().begin(), v.data().end()};
  }

  std::size_t calls() const { return calls_; }

 private:
  const VelocityField& field_;
  Shape shape_;
  std::size_t calls_ = 0;
};

bool all_finite(const std::vector<double>& v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

void check_stop_times(const std::vector<double>& stops) {
  for (std::size_t i = 0; i < stops.size(); ++i) {
    if (!(stops[i] > 0.0 && stops[i] < 1.0) || (i > 0 && stops[i] <= stops[i - 1])) {
      throw ValueError("stop times must be strictly increasing inside (0, 1)");
    }
  }
}

}  // namespace

SolverSpec SolverSpec::euler(std::size_t steps) {
  SolverSpec spec;
  spec.kind = SolverKind::kEuler;
  spec.steps = steps;
  return spec;
}

SolverSpec SolverSpec::rk45(double rtol, double atol) {
  SolverSpec spec;
  spec.kind = SolverKind::kRk45;
  spec.rtol = rtol;
  spec.atol = atol;
  return spec;
}

void SolverSpec::validate() const {
  if (kind == SolverKind::kEuler && steps < 1) {
    throw ValueError("euler solver needs steps >= 1");
  }
  if (kind == SolverKind::kRk45) {
    if (!(rtol > 0) || !(atol > 0)) throw ValueError("rk45 needs rtol, atol > 0");
    if (max_steps < 1) throw ValueError("rk45 needs max_steps >= 1");
    if (!(initial_step > 0)) throw ValueError("rk45 needs initial_step > 0");
  }
}

std::string SolverSpec::label() const {
  return kind == SolverKind::kEuler ? "euler-" + std::to_string(steps) : "rk45";
}

SolveResult solve_euler(const VelocityField& field, const Tensor& z0,
                        std::size_t steps) {
  return solve_euler(field, z0, steps, SolveOptions{}).result;
}

SolveOutput solve_euler(const VelocityField& field, const Tensor& z0,
                        std::size_t steps, const SolveOptions& options) {
  if (steps < 1) throw ValueError("euler solver needs steps >= 1");
  check_stop_times(options.stop_times);
  const auto start = Clock::now();
  CountingField f(field, z0.shape());
  std::vector<double> z(z0.data().begin(), z0.data().end());

  // Grid = uniform nodes merged with the requested stop times.
  std::vector<double> grid;
  grid.reserve(steps + options.stop_times.size() + 1);
  for (std::size_t k = 0; k <= steps; ++k) {
    grid.push_back(static_cast<double>(k) / static_cast<double>(steps));
  }
  grid.insert(grid.end(), options.stop_times.begin(), options.stop_times.end());
  std::sort(grid.begin(), grid.end());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());

  SolveOutput out;
  if (options.record_trajectory) out.result.trajectory.emplace_back(0.0, z0.detach());
  std::size_t next_stop = 0;
  for (std::size_t k = 0; k + 1 < grid.size(); ++k) {
    const double t = grid[k];
    const double h = grid[k + 1] - t;
    std::vector<double> v;
    try {
      v = f(z, t);
    } catch (const NumericError& e) {
      throw SolverError("euler step " + std::to_string(k) + " at t=" +
                        std::to_string(t) + ": " + e.what());
    }
    for (std::size_t i = 0; i < z.size(); ++i) z[i] += h * v[i];
    if (!all_finite(z)) {
      throw SolverError("euler step " + std::to_string(k) +
                        " produced a non-finite state");
    }
    ++out.result.accepted_steps;
    const double t_next = grid[k + 1];
    if (next_stop < options.stop_times.size() &&
        t_next == options.stop_times[next_stop]) {
      out.stops.push_back(Tensor::from(z0.shape(), z));
      ++next_stop;
    }
    if (options.record_trajectory) {
      out.result.trajectory.emplace_back(t_next, Tensor::from(z0.shape(), z));
    }
  }
  out.result.z1 = Tensor::from(z0.shape(), std::move(z));
  out.result.nfe = f.calls();
  out.result.wall_time = seconds_since(start);
  return out;
}

SolveResult solve_rk45(const VelocityField& field, const Tensor& z0,
                       double rtol, double atol, std::size_t max_steps,
                       double initial_step) {
  SolverSpec spec = SolverSpec::rk45(rtol, atol);
  spec.max_steps = max_steps;
  spec.initial_step = initial_step;
  return solve_rk45(field, z0, spec, SolveOptions{}).result;
}

SolveOutput solve_rk45(const VelocityField& field, const Tensor& z0,
                       const SolverSpec& spec, const SolveOptions& options) {
  SolverSpec checked = spec;
  checked.kind = SolverKind::kRk45;
  checked.validate();
  check_stop_times(options.stop_times);
  const auto start = Clock::now();
  CountingField f(field, z0.shape());
  const std::size_t n = z0.numel();
  std::vector<double> y(z0.data().begin(), z0.data().end());
  std::vector<double> y_new(n), err(n), stage(n);
  std::array<std::vector<double>, 7> k;

  SolveOutput out;
  if (options.record_trajectory) out.result.trajectory.emplace_back(0.0, z0.detach());

  double t = 0.0;
  double h = std::clamp(spec.initial_step, kMinStep, kMaxStep);
  bool last_rejected = false;
  std::size_t next_stop = 0;
  std::size_t attempts = 0;

  auto fail = [&](const std::string& why) {
    throw SolverError("rk45 " + why + " (reached t=" + std::to_string(t) + ")");
  };

  try {
    k[0] = f(y, t);
    while (t < 1.0) {
      if (attempts >= spec.max_steps) {
        fail("exceeded max_steps=" + std::to_string(spec.max_steps));
      }
      ++attempts;
      const double target = next_stop < options.stop_times.size()
                                ? options.stop_times[next_stop]
                                : 1.0;
      const bool clipped = t + h >= target;
      const double step = clipped ? target - t : h;

      for (int s = 1; s < 7; ++s) {
        for (std::size_t i = 0; i < n; ++i) {
          double acc = 0.0;
          for (int j = 0; j < s; ++j) acc += kA[s][j] * k[j][i];
          stage[i] = y[i] + step * acc;
        }
        if (s == 6) y_new = stage;  // 7th row of A is the 5th-order solution
        k[s] = f(stage, t + kC[s] * step);
      }
      if (!all_finite(y_new)) fail("produced a non-finite state");

      double sq = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        double e = 0.0;
        for (int s = 0; s < 7; ++s) e += kE[s] * k[s][i];
        e *= step;
        const double sc = spec.atol + spec.rtol * std::max(std::abs(y[i]), std::abs(y_new[i]));
        sq += (e / sc) * (e / sc);
      }
      const double err_norm = std::sqrt(sq / static_cast<double>(n));
      const double factor =
          err_norm == 0.0
              ? kMaxFactor
              : std::clamp(kSafety * std::pow(err_norm, -0.2), kMinFactor, kMaxFactor);

      if (err_norm <= 1.0) {
        t = clipped ? target : t + step;
        y.swap(y_new);
        k[0] = k[6];  // FSAL
        ++out.result.accepted_steps;
        if (clipped && next_stop < options.stop_times.size()) {
          out.stops.push_back(Tensor::from(z0.shape(), y));
          ++next_stop;
        }
        if (options.record_trajectory) {
          out.result.trajectory.emplace_back(t, Tensor::from(z0.shape(), y));
        }
        // A clipped step says nothing about the size we could have taken.
        const double base = clipped ? std::max(h, step) : step;
        h = std::min(base * (last_rejected ? std::min(1.0, factor) : factor), kMaxStep);
        h = std::max(h, kMinStep);
        last_rejected = false;
      } else {
        ++out.result.rejected_steps;
        h = step * factor;
        if (h < kMinStep) fail("step size fell below " + std::to_string(kMinStep));
        last_rejected = true;
      }
    }
  } catch (const NumericError& e) {
    fail(std::string("velocity evaluation failed: ") + e.what());
  }
  out.result.z1 = Tensor::from(z0.shape(), std::move(y));
  out.result.nfe = f.calls();
  out.result.wall_time = seconds_since(start);
  return out;
}

SolveOutput integrate(const SolverSpec& spec, const VelocityField& field,
                      const Tensor& z0, const SolveOptions& options) {
  spec.validate();
  if (spec.kind == SolverKind::kEuler) {
    return solve_euler(field, z0, spec.steps, options);
  }
  return solve_rk45(field, z0, spec, options);
}

VelocityField model_field(const VelocityModel& model, const ConditionGrid* cond) {
  if (cond == nullptr) {
    return [&model](const Tensor& z, double t) {
      NoGradGuard guard;
      return model.velocity_points(z, t);
    };
  }
  return [&model, cond](const Tensor& z, double t) {
    NoGradGuard guard;
    return model.velocity(z, t, cond);
  };
}

SolveResult solve(const SolverSpec& spec, const VelocityModel& model,
                  const ConditionGrid* cond, const Tensor& z0) {
  return integrate(spec, model_field(model, cond), z0).result;
}

SolveResult solve(const SolverSpec& spec, const VelocityModel& model,
                  const ConditionGrid* cond, Rng& rng) {
  const std::size_t bins = model.config().decoder.mel_bins;
  const std::size_t frames = cond ? cond->frames() : 1;
  Tensor z0 = Tensor::from({frames, bins}, rng.normals(frames * bins));
  return solve(spec, model, cond, z0);
}

}  // namespace rf
