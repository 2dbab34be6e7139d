#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace rf {

// mt19937_64 with hand-rolled uniform/normal transforms, so draws do not
// depend on the standard library's distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  // Uniform on [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi);
  // Standard normal via Box-Muller; the second variate is cached.
  double normal();
  double normal(double mean, double stddev);
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  std::vector<double> normals(std::size_t n);

  // Full engine state including the cached normal, for checkpoints.
  std::string serialize() const;
  static Rng deserialize(const std::string& text);

  bool operator==(const Rng& other) const;

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Mixes (seed, stream) into an independent seed; used to derive per-sample
// streams so results do not depend on evaluation order.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace rf
