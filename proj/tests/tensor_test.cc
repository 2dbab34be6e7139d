#include <doctest.h>

#include <cmath>
#include <limits>

#include "gradcheck.h"
#include "reflowtts/error.h"
#include "reflowtts/nn.h"
#include "reflowtts/tensor.h"

using namespace rf;
using rf::testing::grad_check;
using rf::testing::probe;
using rf::testing::random_tensor;

namespace {

constexpr double kTol = 1e-4;

void expect_grads(const std::function<Tensor()>& f, std::vector<Tensor> in,
                  std::vector<std::string> names) {
  const auto r = grad_check(f, std::move(in), names);
  INFO(r.worst);
  CHECK(r.checked > 0);
  CHECK(r.max_rel < kTol);
}

}  // namespace

TEST_CASE("broadcast shapes follow numpy rules") {
  CHECK(broadcast_shape({2, 3}, {3}) == Shape{2, 3});
  CHECK(broadcast_shape({4, 1, 5}, {3, 1}) == Shape{4, 3, 5});
  CHECK(broadcast_shape({}, {2, 2}) == Shape{2, 2});
  CHECK_THROWS_AS(broadcast_shape({2, 3}, {4}), ShapeError);
}

TEST_CASE("elementwise values") {
  const Tensor a = Tensor::from({2, 2}, {1, -2, 3, -4});
  const Tensor b = Tensor::from({2}, {10, 20});
  CHECK(add(a, b).data()[3] == 16.0);
  CHECK(sub(a, b).data()[0] == -9.0);
  CHECK(mul(a, b).data()[1] == -40.0);
  CHECK(relu(a).data()[1] == 0.0);
  CHECK(relu(a).data()[2] == 3.0);
  CHECK(square(a).data()[3] == 16.0);
  CHECK(sum(a).item() == -2.0);
  CHECK(mean(a).item() == -0.5);
  CHECK(sigmoid(Tensor::scalar(0.0)).item() == 0.5);
  CHECK(tanh(Tensor::scalar(0.5)).item() == doctest::Approx(std::tanh(0.5)));
}

TEST_CASE("matmul against hand computation") {
  const Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  const Tensor b = Tensor::from({3, 2}, {7, 8, 9, 10, 11, 12});
  const Tensor c = matmul(a, b);
  CHECK(c.shape() == Shape{2, 2});
  CHECK(c.data()[0] == 58.0);
  CHECK(c.data()[1] == 64.0);
  CHECK(c.data()[2] == 139.0);
  CHECK(c.data()[3] == 154.0);
  CHECK_THROWS_AS(matmul(a, a), ShapeError);
}

TEST_CASE("conv1d with zero same padding") {
  // One channel, kernel [1, 2, 3] over [1, 1, 1, 1]: edges lose one tap.
  const Tensor x = Tensor::from({1, 1, 4}, {1, 1, 1, 1});
  const Tensor w = Tensor::from({1, 1, 3}, {1, 2, 3});
  const Tensor y = conv1d(x, w, Tensor::from({1}, {0.5}));
  const std::vector<double> expected = {5.5, 6.5, 6.5, 3.5};
  for (std::size_t i = 0; i < 4; ++i) CHECK(y.data()[i] == expected[i]);

  const Tensor y2 = conv1d(Tensor::from({1, 1, 5}, {0, 0, 1, 0, 0}), w, {}, 2);
  const std::vector<double> dilated = {3, 0, 2, 0, 1};
  for (std::size_t i = 0; i < 5; ++i) CHECK(y2.data()[i] == dilated[i]);

  CHECK_THROWS_AS(conv1d(x, Tensor::zeros({1, 1, 2})), ShapeError);
  CHECK_THROWS_AS(conv1d(x, Tensor::zeros({1, 2, 3})), ShapeError);
}

TEST_CASE("structural ops") {
  const Tensor a = Tensor::from({2, 3}, {0, 1, 2, 3, 4, 5});
  CHECK(permute(a, {1, 0}).data()[1] == 3.0);
  CHECK(slice(a, 1, 1, 2).data()[2] == 4.0);
  CHECK(concat({a, a}, 0).shape() == Shape{4, 3});
  CHECK(concat({a, a}, 1).data()[3] == 0.0);
  CHECK(reshape(a, {3, 2}).data()[5] == 5.0);
  const std::vector<std::size_t> idx = {1, 1, 0};
  const Tensor picked = index_select(a, idx);
  CHECK(picked.shape() == Shape{3, 3});
  CHECK(picked.data()[3] == 3.0);
  CHECK(picked.data()[6] == 0.0);
  CHECK(broadcast_to(Tensor::from({3}, {1, 2, 3}), {2, 3}).data()[4] == 2.0);
  CHECK_THROWS_AS(reshape(a, {4}), ShapeError);
  CHECK_THROWS_AS(slice(a, 1, 2, 2), ShapeError);
  CHECK_THROWS_AS(index_select(a, std::vector<std::size_t>{2}), ShapeError);
}

TEST_CASE("finite-difference gradients of every op") {
  Rng rng(7);
  const Tensor a = random_tensor({3, 4}, rng);
  const Tensor b = random_tensor({3, 4}, rng);
  const Tensor row = random_tensor({4}, rng);

  SUBCASE("binary with broadcasting") {
    expect_grads([&] { return probe(add(a, row)); }, {a, row}, {"a", "row"});
    expect_grads([&] { return probe(sub(row, a)); }, {a, row}, {"a", "row"});
    expect_grads([&] { return probe(mul(a, b)); }, {a, b}, {"a", "b"});
    expect_grads([&] { return probe(mul(a, row)); }, {a, row}, {"a", "row"});
  }
  SUBCASE("unary") {
    expect_grads([&] { return probe(tanh(a)); }, {a}, {"a"});
    expect_grads([&] { return probe(sigmoid(a)); }, {a}, {"a"});
    expect_grads([&] { return probe(relu(a)); }, {a}, {"a"});
    expect_grads([&] { return probe(square(a)); }, {a}, {"a"});
    expect_grads([&] { return probe(scale(a, -1.7)); }, {a}, {"a"});
    expect_grads([&] { return probe(add_scalar(a, 0.3)); }, {a}, {"a"});
  }
  SUBCASE("reductions") {
    expect_grads([&] { return scale(sum(square(a)), 0.5); }, {a}, {"a"});
    expect_grads([&] { return mean(mul(a, b)); }, {a, b}, {"a", "b"});
  }
  SUBCASE("matmul and linear") {
    const Tensor w = random_tensor({4, 5}, rng);
    const Tensor bias = random_tensor({5}, rng);
    expect_grads([&] { return probe(matmul(a, w)); }, {a, w}, {"a", "w"});
    expect_grads([&] { return probe(linear(a, w, bias)); }, {a, w, bias}, {"a", "w", "bias"});
  }
  SUBCASE("conv1d") {
    const Tensor x = random_tensor({2, 3, 5}, rng);
    const Tensor w = random_tensor({4, 3, 3}, rng);
    const Tensor bias = random_tensor({4}, rng);
    expect_grads([&] { return probe(conv1d(x, w, bias)); }, {x, w, bias}, {"x", "w", "bias"});
    expect_grads([&] { return probe(conv1d(x, w, bias, 2)); }, {x, w, bias},
                 {"x", "w", "bias"});
    const Tensor one_frame = random_tensor({3, 3, 1}, rng);
    expect_grads([&] { return probe(conv1d(one_frame, w, bias)); }, {one_frame, w, bias},
                 {"x", "w", "bias"});
  }
  SUBCASE("structural") {
    expect_grads([&] { return probe(permute(a, {1, 0})); }, {a}, {"a"});
    expect_grads([&] { return probe(slice(a, 1, 1, 2)); }, {a}, {"a"});
    expect_grads([&] { return probe(concat({a, b}, 1)); }, {a, b}, {"a", "b"});
    expect_grads([&] { return probe(reshape(a, {2, 6})); }, {a}, {"a"});
    expect_grads([&] { return probe(broadcast_to(row, {3, 4})); }, {row}, {"row"});
    const std::vector<std::size_t> idx = {2, 0, 2, 1};
    expect_grads([&] { return probe(index_select(a, idx)); }, {a}, {"a"});
  }
  SUBCASE("shared subexpressions accumulate") {
    expect_grads(
        [&] {
          const Tensor h = tanh(a);
          return probe(add(mul(h, h), h));
        },
        {a}, {"a"});
  }
}

TEST_CASE("backward releases the graph") {
  const Tensor x = Tensor::from({2}, {1.0, 2.0}, true);
  const Tensor loss = sum(square(x));
  backward(loss);
  CHECK(x.grad()[0] == 2.0);
  CHECK(x.grad()[1] == 4.0);
  CHECK_THROWS_AS(backward(loss), ValueError);

  backward(sum(square(x)));
  CHECK(x.grad()[1] == 8.0);
}

TEST_CASE("backward preconditions") {
  const Tensor x = Tensor::from({2}, {1.0, 2.0}, true);
  CHECK_THROWS_AS(backward(square(x)), ShapeError);
  CHECK_THROWS_AS(backward(sum(Tensor::from({2}, {1, 2}))), ValueError);
}

TEST_CASE("no-grad mode records nothing") {
  const Tensor x = Tensor::from({2}, {1.0, 2.0}, true);
  Tensor y;
  {
    NoGradGuard guard;
    CHECK_FALSE(grad_enabled());
    y = sum(square(x));
  }
  CHECK(grad_enabled());
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("non-finite results are rejected") {
  const double inf = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(mul(Tensor::scalar(inf), Tensor::scalar(0.0)), NumericError);
  CHECK_THROWS_AS(scale(Tensor::scalar(1e300), 1e300), NumericError);
}

TEST_CASE("detach and clone") {
  const Tensor x = Tensor::from({2}, {1.0, 2.0}, true);
  const Tensor d = square(x).detach();
  CHECK_FALSE(d.requires_grad());
  CHECK(d.is_leaf());
  Tensor c = x.clone();
  c.mutable_data()[0] = 5.0;
  CHECK(x.data()[0] == 1.0);
}
