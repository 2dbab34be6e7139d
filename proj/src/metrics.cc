#include "reflowtts/metrics.h"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <sstream>

#include "reflowtts/error.h"

namespace rf {

namespace {

using Matrix = Eigen::MatrixXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Matrix cov_matrix(const GaussianStats& s) {
  return Eigen::Map<const RowMatrix>(s.cov.data(), static_cast<Eigen::Index>(s.d),
                                     static_cast<Eigen::Index>(s.d));
}

double min_eigenvalue(const Matrix& m) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(m, Eigen::EigenvaluesOnly);
  return es.eigenvalues().minCoeff();
}

// Principal square root of a symmetric PSD matrix, negative eigenvalues
// clamped to zero.
Matrix sqrt_psd(const Matrix& m) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(m);
  const Eigen::VectorXd root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

FeatureSet FeatureSet::from(std::size_t d, std::vector<double> values, std::string label) {
  if (d == 0) throw ValueError("feature dimension must be >= 1");
  if (values.size() % d != 0) {
    throw ShapeError(std::to_string(values.size()) + " values do not form rows of " +
                     std::to_string(d));
  }
  for (double v : values) {
    if (!std::isfinite(v)) throw NumericError("feature set '" + label + "' holds a non-finite value");
  }
  FeatureSet f;
  f.d = d;
  f.n = values.size() / d;
  f.values = std::move(values);
  f.label = std::move(label);
  return f;
}

FeatureSet FeatureSet::from(const Tensor& matrix, std::string label) {
  if (matrix.ndim() != 2) {
    throw ShapeError("feature matrix must be [n, d], got " + shape_str(matrix.shape()));
  }
  return from(matrix.dim(1), {matrix.data().begin(), matrix.data().end()}, std::move(label));
}

GaussianStats gaussian_stats(const FeatureSet& f) {
  if (f.n < f.d + 1) {
    throw MetricPreconditionError("feature set '" + f.label + "' has " + std::to_string(f.n) +
                                  " samples; FD in dimension " + std::to_string(f.d) +
                                  " needs at least " + std::to_string(f.d + 1));
  }
  const Eigen::Map<const RowMatrix> x(f.values.data(), static_cast<Eigen::Index>(f.n),
                                      static_cast<Eigen::Index>(f.d));
  const Eigen::RowVectorXd mu = x.colwise().mean();
  const Matrix centered = x.rowwise() - mu;
  const Matrix cov = (centered.transpose() * centered) / static_cast<double>(f.n - 1);
  GaussianStats s;
  s.d = f.d;
  s.mean.assign(mu.data(), mu.data() + f.d);
  s.cov.resize(f.d * f.d);
  for (std::size_t i = 0; i < f.d; ++i) {
    for (std::size_t j = 0; j < f.d; ++j) {
      // Exact symmetry so the eigensolver sees a symmetric matrix.
      s.cov[i * f.d + j] = 0.5 * (cov(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) +
                                  cov(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)));
    }
  }
  return s;
}

double frechet_distance(const GaussianStats& a, const GaussianStats& b,
                        const FdOptions& options) {
  if (a.d != b.d || a.d == 0) {
    throw ShapeError("FD needs equal, nonzero feature dims (got " + std::to_string(a.d) +
                     " and " + std::to_string(b.d) + ")");
  }
  if (a.mean.size() != a.d || b.mean.size() != b.d || a.cov.size() != a.d * a.d ||
      b.cov.size() != b.d * b.d) {
    throw ShapeError("malformed Gaussian statistics");
  }
  Matrix sa = cov_matrix(a);
  Matrix sb = cov_matrix(b);
  if (!sa.allFinite() || !sb.allFinite()) throw NumericError("FD input covariance is non-finite");
  const double low = std::min(min_eigenvalue(sa), min_eigenvalue(sb));
  if (low < options.threshold) {
    if (!options.regularize) {
      throw MetricPreconditionError(
          "covariance is rank-deficient (min eigenvalue " + fmt(low) +
          "); enable epsilon regularization (--fd-eps)");
    }
    const Matrix reg = options.eps * Matrix::Identity(sa.rows(), sa.cols());
    sa += reg;
    sb += reg;
    if (std::min(min_eigenvalue(sa), min_eigenvalue(sb)) < options.threshold) {
      throw MetricPreconditionError("covariance is rank-deficient beyond eps=" +
                                    fmt(options.eps) + " regularization");
    }
  }
  const Matrix ra = sqrt_psd(sa);
  Matrix m = ra * sb * ra;
  m = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Matrix> es(m, Eigen::EigenvaluesOnly);
  const double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  double mean_term = 0.0;
  for (std::size_t i = 0; i < a.d; ++i) {
    const double diff = a.mean[i] - b.mean[i];
    mean_term += diff * diff;
  }
  const double fd = mean_term + sa.trace() + sb.trace() - 2.0 * tr_sqrt;
  if (!std::isfinite(fd)) throw NumericError("FD evaluated to a non-finite value");
  return std::max(0.0, fd);
}

double frechet_distance(const FeatureSet& a, const FeatureSet& b, const FdOptions& options) {
  if (a.d != b.d) {
    throw ShapeError("FD feature dims differ: " + std::to_string(a.d) + " vs " +
                     std::to_string(b.d));
  }
  return frechet_distance(gaussian_stats(a), gaussian_stats(b), options);
}

double rtf(double synthesis_seconds, std::size_t frames, std::size_t hop, double sample_rate) {
  if (!(synthesis_seconds > 0) || !(sample_rate > 0) || hop == 0 || frames == 0) {
    throw ValueError("rtf needs positive synthesis time, frames, hop and sample rate");
  }
  const double audio = static_cast<double>(frames) * static_cast<double>(hop) / sample_rate;
  return synthesis_seconds / audio;
}

double mse_to_oracle(std::span<const double> generated, std::span<const double> oracle) {
  if (generated.size() != oracle.size()) {
    throw ShapeError("mse_to_oracle: " + std::to_string(generated.size()) + " vs " +
                     std::to_string(oracle.size()) + " cells");
  }
  if (generated.empty()) throw ValueError("mse_to_oracle: empty input");
  double acc = 0.0;
  for (std::size_t i = 0; i < generated.size(); ++i) {
    const double d = generated[i] - oracle[i];
    acc += d * d;
  }
  return acc / static_cast<double>(generated.size());
}

double mse_to_oracle(const Tensor& generated, const Tensor& oracle) {
  if (generated.shape() != oracle.shape()) {
    throw ShapeError("mse_to_oracle: " + shape_str(generated.shape()) + " vs " +
                     shape_str(oracle.shape()));
  }
  return mse_to_oracle(std::span<const double>(generated.data()),
                       std::span<const double>(oracle.data()));
}

void EvalReport::validate() const {
  auto finite = [](double v) { return std::isfinite(v); };
  if (!finite(fd) || fd < 0) throw NumericError("report fd must be finite and >= 0");
  if (!finite(mean_nfe) || !finite(rtf)) throw NumericError("report holds non-finite values");
  if (mse_oracle && !finite(*mse_oracle)) throw NumericError("report mse_oracle is non-finite");
  if (straightness && !finite(*straightness)) {
    throw NumericError("report straightness is non-finite");
  }
}

std::string EvalReport::to_text() const {
  std::ostringstream os;
  os << "fd=" << fmt(fd) << '\n';
  if (mse_oracle) os << "mse_oracle=" << fmt(*mse_oracle) << '\n';
  os << "mean_nfe=" << fmt(mean_nfe) << '\n';
  os << "rtf=" << fmt(rtf) << '\n';
  if (straightness) os << "straightness=" << fmt(*straightness) << '\n';
  for (const auto& [k, v] : config) os << "config." << k << '=' << v << '\n';
  return os.str();
}

std::string EvalReport::to_json() const {
  nlohmann::ordered_json j;
  j["fd"] = fd;
  j["mse_oracle"] = mse_oracle ? nlohmann::ordered_json(*mse_oracle) : nullptr;
  j["mean_nfe"] = mean_nfe;
  j["rtf"] = rtf;
  j["straightness"] = straightness ? nlohmann::ordered_json(*straightness) : nullptr;
  j["config"] = config;
  return j.dump(2) + "\n";
}

EvalReport EvalReport::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("eval report is not valid JSON: ") + e.what());
  }
  EvalReport r;
  try {
    r.fd = j.at("fd").get<double>();
    if (!j.at("mse_oracle").is_null()) r.mse_oracle = j["mse_oracle"].get<double>();
    r.mean_nfe = j.at("mean_nfe").get<double>();
    r.rtf = j.at("rtf").get<double>();
    if (!j.at("straightness").is_null()) r.straightness = j["straightness"].get<double>();
    r.config = j.at("config").get<std::map<std::string, std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("eval report is malformed: ") + e.what());
  }
  return r;
}

bool EvalReport::same_non_timing(const EvalReport& other) const {
  return fd == other.fd && mse_oracle == other.mse_oracle && mean_nfe == other.mean_nfe &&
         straightness == other.straightness && config == other.config;
}

}  // namespace rf
