#include <doctest.h>

#include <cmath>
#include <limits>

#include "reflowtts/adam.h"
#include "reflowtts/error.h"

using namespace rf;

namespace {

// Leaves grad g on p by differentiating g * sum(p).
void set_grad(Tensor& p, double g) {
  p.zero_grad();
  backward(scale(sum(p), g));
}

}  // namespace

TEST_CASE("adam matches hand-computed updates") {
  Tensor p = Tensor::from({1}, {1.0}, true);
  Adam opt({p}, AdamConfig{0.1, 0.9, 0.999, 1e-8});
  set_grad(p, 0.5);
  opt.step();
  CHECK(p.data()[0] == doctest::Approx(0.900000002).epsilon(1e-14));
  set_grad(p, -1.0);
  opt.step();
  CHECK(p.data()[0] == doctest::Approx(0.9366103542405654).epsilon(1e-14));
  set_grad(p, 2.0);
  opt.step();
  CHECK(p.data()[0] == doctest::Approx(0.8946447927181046).epsilon(1e-14));
  CHECK(opt.state().step == 3);
}

TEST_CASE("adam first step moves every coordinate by about lr") {
  Tensor p = Tensor::from({3}, {0.0, 0.0, 0.0}, true);
  Adam opt({p}, AdamConfig{0.01, 0.9, 0.999, 1e-8});
  p.zero_grad();
  backward(sum(mul(p, Tensor::from({3}, {3.0, -0.001, 40.0}))));
  opt.step();
  CHECK(p.data()[0] == doctest::Approx(-0.01).epsilon(1e-6));
  CHECK(p.data()[1] == doctest::Approx(0.01).epsilon(1e-4));
  CHECK(p.data()[2] == doctest::Approx(-0.01).epsilon(1e-6));
}

TEST_CASE("adam rejects non-finite gradients without touching state") {
  Tensor p = Tensor::from({2}, {1.0, 2.0}, true);
  Adam opt({p}, AdamConfig{});
  p.mutable_grad()[0] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(opt.step(), NumericError);
  CHECK(p.data()[0] == 1.0);
  CHECK(opt.state().step == 0);
  CHECK(opt.state().m[0][1] == 0.0);
}

TEST_CASE("adam config and state validation") {
  Tensor p = Tensor::from({2}, {1.0, 2.0}, true);
  CHECK_THROWS_AS(Adam({p}, AdamConfig{0.0}), ValueError);
  Adam opt({p}, AdamConfig{});
  CHECK_THROWS_AS(opt.set_lr(-1.0), ValueError);
  AdamState bad;
  bad.m = {{0.0}};
  bad.v = {{0.0}};
  CHECK_THROWS_AS(opt.load_state(bad), ShapeError);
}

TEST_CASE("adam state restore reproduces the trajectory") {
  auto run = [](int steps_before, bool restore) {
    Tensor p = Tensor::from({2}, {1.0, -1.0}, true);
    Adam opt({p}, AdamConfig{0.05});
    AdamState saved;
    std::vector<double> saved_p;
    for (int i = 0; i < 6; ++i) {
      if (restore && i == steps_before) {
        Tensor q = Tensor::from({2}, saved_p, true);
        Adam fresh({q}, AdamConfig{0.05});
        fresh.load_state(saved);
        for (int j = i; j < 6; ++j) {
          q.zero_grad();
          backward(sum(square(q)));
          fresh.step();
        }
        return std::vector<double>(q.data().begin(), q.data().end());
      }
      p.zero_grad();
      backward(sum(square(p)));
      opt.step();
      saved = opt.state();
      saved_p.assign(p.data().begin(), p.data().end());
    }
    return std::vector<double>(p.data().begin(), p.data().end());
  };
  CHECK(run(3, true) == run(3, false));
}
