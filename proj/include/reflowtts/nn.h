#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "reflowtts/random.h"
#include "reflowtts/tensor.h"

namespace rf {

// Named trainable tensors in registration order.
class ParameterStore {
 public:
  enum class Init { kKaimingUniform, kZeros };

  // Kaiming-uniform draws from U(-b, b) with b = sqrt(6 / fan_in).
  Tensor& add(const std::string& name, Shape shape, Init init,
              std::size_t fan_in, Rng& rng);
  Tensor& add(const std::string& name, Tensor value);

  const Tensor& get(const std::string& name) const;
  Tensor& get(const std::string& name);
  bool contains(const std::string& name) const;

  const std::vector<std::pair<std::string, Tensor>>& entries() const {
    return entries_;
  }
  std::vector<Tensor> tensors() const;
  // name -> shape
  std::vector<std::pair<std::string, Shape>> manifest() const;
  std::size_t count() const;
  std::size_t size() const { return entries_.size(); }

  void zero_grad();

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::map<std::string, std::size_t> index_;
};

// x [N, in] @ w [in, out] + b [out]
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

}  // namespace rf
