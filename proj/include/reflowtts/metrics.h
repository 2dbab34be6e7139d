#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "reflowtts/tensor.h"

namespace rf {

// Row-major [n, d] feature matrix.
struct FeatureSet {
  std::size_t n = 0;
  std::size_t d = 0;
  std::vector<double> values;
  std::string label;

  // Rejects ragged input and non-finite entries.
  static FeatureSet from(std::size_t d, std::vector<double> values, std::string label = {});
  static FeatureSet from(const Tensor& matrix, std::string label = {});
};

struct GaussianStats {
  std::size_t d = 0;
  std::vector<double> mean;  // [d]
  std::vector<double> cov;   // [d, d] row-major
};

// Sample mean and unbiased covariance. Needs n >= d + 1, else
// MetricPreconditionError naming the required count.
GaussianStats gaussian_stats(const FeatureSet& features);

struct FdOptions {
  // Add eps * I to both covariances when either has an eigenvalue below
  // threshold. When off, such input is rejected.
  bool regularize = true;
  double eps = 1e-6;
  double threshold = 1e-10;
};

// ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2), >= 0.
double frechet_distance(const GaussianStats& a, const GaussianStats& b,
                        const FdOptions& options = {});
double frechet_distance(const FeatureSet& a, const FeatureSet& b,
                        const FdOptions& options = {});

inline constexpr std::size_t kDefaultHop = 256;
inline constexpr double kDefaultSampleRate = 22050.0;

// synthesis_seconds / (frames * hop / sample_rate)
double rtf(double synthesis_seconds, std::size_t frames,
           std::size_t hop = kDefaultHop, double sample_rate = kDefaultSampleRate);

// Mean squared error over all cells; shapes must match.
double mse_to_oracle(std::span<const double> generated, std::span<const double> oracle);
double mse_to_oracle(const Tensor& generated, const Tensor& oracle);

struct EvalReport {
  double fd = 0.0;
  std::optional<double> mse_oracle;
  double mean_nfe = 0.0;
  double rtf = 0.0;
  std::optional<double> straightness;
  // Echo of the inputs and settings that produced the numbers.
  std::map<std::string, std::string> config;

  void validate() const;
  // "key=value" lines in a fixed order.
  std::string to_text() const;
  std::string to_json() const;
  static EvalReport from_json(const std::string& text);
  // Every field except the wall-time derived ones (rtf).
  bool same_non_timing(const EvalReport& other) const;
};

}  // namespace rf
