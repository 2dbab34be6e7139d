#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "reflowtts/random.h"
#include "reflowtts/tensor.h"

namespace rf {

// One training minibatch on the straight path between source and target
// draws. xt = t*x1 + (1-t)*x0 with t broadcast along all but axis 0.
struct FlowBatch {
  Tensor x0;
  Tensor x1;
  std::vector<double> t;
  Tensor xt;
  Tensor target;  // x1 - x0
};

// Per-sample t along axis 0 of x0/x1. Endpoints are exact: t=0 gives x0,
// t=1 gives x1.
Tensor interpolate(const Tensor& x0, const Tensor& x1,
                   std::span<const double> t);
Tensor interpolate(const Tensor& x0, const Tensor& x1, double t);

// i.i.d. U[0,1) draws, continuous (never snapped to a step grid).
std::vector<double> sample_time(std::size_t batch, Rng& rng);

FlowBatch make_flow_batch(const Tensor& x0, const Tensor& x1, Rng& rng);

// mean over every element of ((x1 - x0) - v_out)^2; differentiable in v_out.
Tensor rectified_flow_loss(const Tensor& v_out, const Tensor& x0,
                           const Tensor& x1);
// Same, averaged over cells where the broadcast `mask` is 1 only.
Tensor rectified_flow_loss(const Tensor& v_out, const Tensor& x0,
                           const Tensor& x1, const Tensor& mask);

struct Gaussian1d {
  double mean = 0.0;
  double stddev = 1.0;
};

// E[X1 - X0 | t X1 + (1-t) X0 = x] for independent X0 ~ source, X1 ~ target.
// This is the minimiser of the least-squares drift regression, used as a
// closed-form reference for trained 1D models.
double optimal_velocity_oracle(double x, double t, Gaussian1d source,
                               Gaussian1d target);

}  // namespace rf
