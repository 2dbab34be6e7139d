#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "reflowtts/random.h"
#include "reflowtts/tensor.h"

namespace rf::testing {

struct GradCheckResult {
  double max_rel = 0.0;
  std::string worst;
  std::size_t checked = 0;
};

inline double rel_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
  return std::abs(analytic - numeric) / denom;
}

// Central differences with step h on `coords` entries of each input (all
// entries when coords == 0), against one backward pass of f. f must build
// a scalar from the inputs.
inline GradCheckResult grad_check(const std::function<Tensor()>& f,
                                  std::vector<Tensor> inputs,
                                  const std::vector<std::string>& names,
                                  std::size_t coords = 0, double h = 1e-5,
                                  std::uint64_t seed = 1) {
  for (Tensor& in : inputs) in.zero_grad();
  backward(f());
  std::vector<std::vector<double>> analytic;
  for (const Tensor& in : inputs) {
    std::vector<double> g(in.numel(), 0.0);
    if (in.has_grad()) std::copy(in.grad().begin(), in.grad().end(), g.begin());
    analytic.push_back(std::move(g));
  }
  GradCheckResult out;
  Rng rng(seed);
  NoGradGuard guard;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto data = inputs[k].mutable_data();
    std::vector<std::size_t> idx;
    if (coords == 0 || coords >= data.size()) {
      for (std::size_t i = 0; i < data.size(); ++i) idx.push_back(i);
    } else {
      for (std::size_t i = 0; i < coords; ++i) idx.push_back(rng.below(data.size()));
    }
    for (std::size_t i : idx) {
      const double saved = data[i];
      data[i] = saved + h;
      const double up = f().item();
      data[i] = saved - h;
      const double down = f().item();
      data[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double r = rel_error(analytic[k][i], numeric);
      ++out.checked;
      if (r > out.max_rel) {
        out.max_rel = r;
        out.worst = names[k] + "[" + std::to_string(i) + "] analytic=" +
                    std::to_string(analytic[k][i]) + " numeric=" + std::to_string(numeric);
      }
    }
  }
  return out;
}

inline Tensor random_tensor(Shape shape, Rng& rng, bool requires_grad = true) {
  const std::size_t n = numel(shape);
  return Tensor::from(std::move(shape), rng.normals(n), requires_grad);
}

// Contracts an output with fixed random weights so every element matters.
inline Tensor probe(const Tensor& out, std::uint64_t seed = 99) {
  Rng rng(seed);
  const Tensor w = Tensor::from(out.shape(), rng.normals(out.numel()));
  return sum(mul(out, w));
}

}  // namespace rf::testing
