#include <doctest.h>

#include <cmath>

#include "gradcheck.h"
#include "reflowtts/error.h"
#include "reflowtts/flow.h"

using namespace rf;

TEST_CASE("interpolation endpoints are exact") {
  Rng rng(3);
  const Tensor x0 = Tensor::from({3, 2}, rng.normals(6));
  const Tensor x1 = Tensor::from({3, 2}, rng.normals(6));
  const Tensor at0 = interpolate(x0, x1, 0.0);
  const Tensor at1 = interpolate(x0, x1, 1.0);
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(at0.data()[i] == x0.data()[i]);
    CHECK(at1.data()[i] == x1.data()[i]);
  }
  const std::vector<double> t = {0.0, 0.25, 1.0};
  const Tensor mixed = interpolate(x0, x1, t);
  CHECK(mixed.data()[0] == x0.data()[0]);
  CHECK(mixed.data()[2] == doctest::Approx(0.25 * x1.data()[2] + 0.75 * x0.data()[2]));
  CHECK(mixed.data()[5] == x1.data()[5]);
  CHECK_THROWS_AS(interpolate(x0, x1, 1.5), ValueError);
  CHECK_THROWS_AS(interpolate(x0, Tensor::zeros({2, 2}), 0.5), ShapeError);
}

TEST_CASE("time samples are continuous in [0, 1)") {
  Rng rng(11);
  const auto t = sample_time(20000, rng);
  double lo = 1.0, hi = 0.0, mean = 0.0;
  std::size_t on_grid = 0;
  for (double v : t) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
    mean += v / static_cast<double>(t.size());
    if (std::abs(v * 1000.0 - std::round(v * 1000.0)) < 1e-12) ++on_grid;
  }
  CHECK(lo >= 0.0);
  CHECK(hi < 1.0);
  CHECK(std::abs(mean - 0.5) < 3.0 * std::sqrt(1.0 / 12.0 / 20000.0));
  CHECK(on_grid == 0);
}

TEST_CASE("loss is zero at the chord and has the analytic gradient") {
  Rng rng(5);
  const Tensor x0 = Tensor::from({4, 3}, rng.normals(12));
  const Tensor x1 = Tensor::from({4, 3}, rng.normals(12));
  CHECK(rectified_flow_loss(sub(x1, x0), x0, x1).item() == 0.0);

  const Tensor v = Tensor::from({4, 3}, rng.normals(12), true);
  const Tensor loss = rectified_flow_loss(v, x0, x1);
  backward(loss);
  for (std::size_t i = 0; i < 12; ++i) {
    const double target = x1.data()[i] - x0.data()[i];
    CHECK(v.grad()[i] == doctest::Approx(-2.0 * (target - v.data()[i]) / 12.0));
  }
}

TEST_CASE("masked loss averages selected cells only") {
  const Tensor x0 = Tensor::zeros({1, 2, 2});
  const Tensor x1 = Tensor::from({1, 2, 2}, {1, 2, 3, 4});
  const Tensor v = Tensor::zeros({1, 2, 2});
  const Tensor mask = Tensor::from({1, 1, 2}, {1, 0});
  // Cells (0,0)=1 and (1,0)=3 remain.
  CHECK(rectified_flow_loss(v, x0, x1, mask).item() == doctest::Approx(5.0));
  CHECK_THROWS_AS(rectified_flow_loss(v, x0, x1, Tensor::zeros({1, 1, 2})), ValueError);
}

TEST_CASE("flow batch pairs t with xt") {
  Rng rng(2);
  const Tensor x0 = Tensor::from({5, 2}, rng.normals(10));
  const Tensor x1 = Tensor::from({5, 2}, rng.normals(10));
  const FlowBatch b = make_flow_batch(x0, x1, rng);
  CHECK(b.t.size() == 5);
  for (std::size_t i = 0; i < 5; ++i) {
    const double want = b.t[i] * x1.data()[2 * i] + (1 - b.t[i]) * x0.data()[2 * i];
    CHECK(b.xt.data()[2 * i] == doctest::Approx(want));
    CHECK(b.target.data()[2 * i] == x1.data()[2 * i] - x0.data()[2 * i]);
  }
}

TEST_CASE("optimal velocity oracle at the endpoints") {
  const Gaussian1d src{0.3, 1.2};
  const Gaussian1d dst{-2.0, 0.5};
  // t = 0 conditions on X0 = x; t = 1 conditions on X1 = x.
  CHECK(optimal_velocity_oracle(0.7, 0.0, src, dst) == doctest::Approx(-2.0 - 0.7));
  CHECK(optimal_velocity_oracle(-1.1, 1.0, src, dst) == doctest::Approx(-1.1 - 0.3));
  CHECK_THROWS_AS(optimal_velocity_oracle(0.0, 0.5, {0.0, 0.0}, dst), ValueError);
}

TEST_CASE("optimal velocity oracle matches a Monte-Carlo regression") {
  // D = X1 - X0 regressed on Xt is exactly linear for Gaussians; estimate
  // slope and intercept from samples and compare.
  const Gaussian1d src{0.0, 1.0};
  const Gaussian1d dst{1.5, 0.4};
  Rng rng(21);
  const std::size_t n = 400000;
  for (double t : {0.2, 0.5, 0.8}) {
    double sx = 0, sd = 0, sxx = 0, sxd = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double a = rng.normal(src.mean, src.stddev);
      const double b = rng.normal(dst.mean, dst.stddev);
      const double x = t * b + (1 - t) * a;
      const double d = b - a;
      sx += x;
      sd += d;
      sxx += x * x;
      sxd += x * d;
    }
    const double mx = sx / n, md = sd / n;
    const double slope = (sxd / n - mx * md) / (sxx / n - mx * mx);
    const double intercept = md - slope * mx;
    for (double x : {-1.0, 0.0, 1.0, 2.0}) {
      CHECK(optimal_velocity_oracle(x, t, src, dst) ==
            doctest::Approx(intercept + slope * x).epsilon(0.02));
    }
  }
}
