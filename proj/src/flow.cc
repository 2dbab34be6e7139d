#include "reflowtts/flow.h"

#include <string>

#include "reflowtts/error.h"

namespace rf {

namespace {

void check_time(double t) {
  if (!(t >= 0.0 && t <= 1.0)) {
    throw ValueError("t must lie in [0, 1], got " + std::to_string(t));
  }
}

void check_same_shape(const char* what, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shapes " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()) + " differ");
  }
}

}  // namespace

Tensor interpolate(const Tensor& x0, const Tensor& x1,
                   std::span<const double> t) {
  check_same_shape("interpolate", x0, x1);
  if (x0.ndim() == 0 || t.size() != x0.dim(0)) {
    throw ShapeError("interpolate: need one t per row of " +
                     shape_str(x0.shape()) + ", got " +
                     std::to_string(t.size()));
  }
  for (double ti : t) check_time(ti);
  const std::size_t row = x0.numel() / t.size();
  auto a = x0.data();
  auto b = x1.data();
  std::vector<double> out(a.size());
  for (std::size_t r = 0; r < t.size(); ++r) {
    const double w1 = t[r];
    const double w0 = 1.0 - t[r];
    for (std::size_t j = r * row; j < (r + 1) * row; ++j) {
      out[j] = w1 * b[j] + w0 * a[j];
    }
  }
  return Tensor::from(x0.shape(), std::move(out));
}

Tensor interpolate(const Tensor& x0, const Tensor& x1, double t) {
  check_same_shape("interpolate", x0, x1);
  check_time(t);
  auto a = x0.data();
  auto b = x1.data();
  std::vector<double> out(a.size());
  for (std::size_t j = 0; j < out.size(); ++j) {
    out[j] = t * b[j] + (1.0 - t) * a[j];
  }
  return Tensor::from(x0.shape(), std::move(out));
}

std::vector<double> sample_time(std::size_t batch, Rng& rng) {
  std::vector<double> t(batch);
  for (double& v : t) v = rng.uniform();
  return t;
}

FlowBatch make_flow_batch(const Tensor& x0, const Tensor& x1, Rng& rng) {
  check_same_shape("make_flow_batch", x0, x1);
  FlowBatch batch;
  batch.x0 = x0;
  batch.x1 = x1;
  batch.t = sample_time(x0.dim(0), rng);
  batch.xt = interpolate(x0, x1, batch.t);
  batch.target = sub(x1.detach(), x0.detach());
  return batch;
}

Tensor rectified_flow_loss(const Tensor& v_out, const Tensor& x0,
                           const Tensor& x1) {
  check_same_shape("rectified_flow_loss", v_out, x0);
  check_same_shape("rectified_flow_loss", x0, x1);
  const Tensor target = sub(x1.detach(), x0.detach());
  return mean(square(sub(target, v_out)));
}

Tensor rectified_flow_loss(const Tensor& v_out, const Tensor& x0,
                           const Tensor& x1, const Tensor& mask) {
  check_same_shape("rectified_flow_loss", v_out, x0);
  check_same_shape("rectified_flow_loss", x0, x1);
  const Tensor full_mask = broadcast_to(mask.detach(), v_out.shape());
  double cells = 0.0;
  for (double m : full_mask.data()) cells += m;
  if (cells <= 0.0) throw ValueError("rectified_flow_loss: mask selects nothing");
  const Tensor target = sub(x1.detach(), x0.detach());
  return scale(sum(mul(square(sub(target, v_out)), full_mask)), 1.0 / cells);
}

double optimal_velocity_oracle(double x, double t, Gaussian1d source,
                               Gaussian1d target) {
  check_time(t);
  if (!(source.stddev > 0.0) || !(target.stddev > 0.0)) {
    throw ValueError("optimal_velocity_oracle needs positive standard deviations");
  }
  const double v0 = source.stddev * source.stddev;
  const double v1 = target.stddev * target.stddev;
  // Xt = t X1 + (1-t) X0 and D = X1 - X0 are jointly Gaussian.
  const double mean_t = t * target.mean + (1.0 - t) * source.mean;
  const double var_t = t * t * v1 + (1.0 - t) * (1.0 - t) * v0;
  const double cov = t * v1 - (1.0 - t) * v0;
  return (target.mean - source.mean) + cov / var_t * (x - mean_t);
}

}  // namespace rf
