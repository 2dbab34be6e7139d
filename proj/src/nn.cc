#include "reflowtts/nn.h"

#include <cmath>

#include "reflowtts/error.h"

namespace rf {

Tensor& ParameterStore::add(const std::string& name, Shape shape, Init init,
                            std::size_t fan_in, Rng& rng) {
  std::vector<double> values(rf::numel(shape), 0.0);
  if (init == Init::kKaimingUniform) {
    if (fan_in == 0) throw ValueError("fan_in must be > 0 for " + name);
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (double& v : values) v = rng.uniform(-bound, bound);
  }
  return add(name, Tensor::from(std::move(shape), std::move(values), true));
}

Tensor& ParameterStore::add(const std::string& name, Tensor value) {
  if (index_.count(name)) throw ValueError("duplicate parameter " + name);
  value.set_requires_grad(true);
  index_[name] = entries_.size();
  entries_.emplace_back(name, std::move(value));
  return entries_.back().second;
}

const Tensor& ParameterStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ValueError("unknown parameter " + name);
  return entries_[it->second].second;
}

Tensor& ParameterStore::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ValueError("unknown parameter " + name);
  return entries_[it->second].second;
}

bool ParameterStore::contains(const std::string& name) const {
  return index_.count(name) != 0;
}

std::vector<Tensor> ParameterStore::tensors() const {
  std::vector<Tensor> out;
  out.reserve(entries_.size());
  for (const auto& [name, t] : entries_) out.push_back(t);
  return out;
}

std::vector<std::pair<std::string, Shape>> ParameterStore::manifest() const {
  std::vector<std::pair<std::string, Shape>> out;
  out.reserve(entries_.size());
  for (const auto& [name, t] : entries_) out.emplace_back(name, t.shape());
  return out;
}

std::size_t ParameterStore::count() const {
  std::size_t total = 0;
  for (const auto& [name, t] : entries_) total += t.numel();
  return total;
}

void ParameterStore::zero_grad() {
  for (auto& [name, t] : entries_) t.zero_grad();
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  return add(matmul(x, weight), bias);
}

}  // namespace rf
