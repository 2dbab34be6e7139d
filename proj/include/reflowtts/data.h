#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "reflowtts/frontend.h"
#include "reflowtts/ode.h"
#include "reflowtts/tensor.h"

namespace rf {

// ---- toy distributions ------------------------------------------------------

enum class ToyKind { kEightGaussians, kTwoMoons, kSingleGaussian };

ToyKind parse_toy_kind(const std::string& name);
std::string toy_kind_name(ToyKind kind);

struct ToySpec {
  ToyKind kind = ToyKind::kEightGaussians;
  std::size_t n = 4096;
  std::uint64_t seed = 0;
  double scale = 2.0;
};

// Row-major [n, dim] points stored in fp32, the on-disk precision.
struct PointSet {
  std::size_t dim = 2;
  std::vector<float> values;

  std::size_t size() const { return dim ? values.size() / dim : 0; }
  Tensor to_tensor() const;  // [n, dim] fp64
  static PointSet from_tensor(const Tensor& t);
};

// eight_gaussians: centers scale*(cos(k pi/4), sin(k pi/4)), std 0.1*scale.
// two_moons: interleaved half circles of radius scale/2, noise 0.05*scale.
// single_gaussian: N(0, scale^2 I).
PointSet gen_toy(const ToySpec& spec);
std::array<std::array<double, 2>, 8> eight_gaussian_centers(double scale);
double eight_gaussian_std(double scale);

// ---- synthetic token -> mel corpus ------------------------------------------

enum class Split : std::uint8_t { kTrain = 0, kVal = 1, kTest = 2 };

struct Utterance {
  std::uint32_t id = 0;
  Split split = Split::kTrain;
  TokenSequence tokens;
  DurationPlan plan;
  std::vector<float> mel;  // [frames, mel_bins], raw (un-normalised)

  std::size_t frames() const { return plan.total_frames; }
};

struct NormStats {
  std::vector<float> mean;  // per mel bin
  std::vector<float> std;
};

struct CorpusSpec {
  std::size_t vocab_size = 16;
  std::size_t mel_bins = 16;
  std::size_t n_train = 512;
  std::size_t n_val = 32;
  std::size_t n_test = 64;
  std::uint64_t seed = 0;
  std::size_t min_tokens = 4;
  std::size_t max_tokens = 10;
  double jitter = 0.05;
};

struct SynthCorpus {
  std::size_t vocab_size = 0;
  std::size_t mel_bins = 0;
  std::uint64_t seed = 0;
  NormStats norm;  // from the train split
  std::vector<Utterance> utterances;

  std::vector<const Utterance*> split(Split which) const;
  std::size_t count(Split which) const;
};

// Spectral template emitted by token k: a Gaussian bump at bin
// (k mod mel_bins), width 1.5 bins, amplitude 1 + 0.5 * floor(k / mel_bins).
std::vector<double> token_template(std::size_t token, std::size_t mel_bins);
// Per-token durations in [2, 8], fixed by the corpus seed.
std::vector<std::size_t> token_durations(std::size_t vocab_size, std::uint64_t seed);
// Template frames plus i.i.d. N(0, jitter^2) noise from a per-utterance
// stream; a pure function of its arguments.
std::vector<float> render_oracle_mel(const TokenSequence& tokens,
                                     const DurationPlan& plan,
                                     std::size_t mel_bins, double jitter,
                                     std::uint64_t corpus_seed,
                                     std::uint32_t utterance_id);

SynthCorpus gen_corpus(const CorpusSpec& spec);
// Splits n_utts in the default 16:1:2 train/val/test proportion.
SynthCorpus gen_corpus(std::size_t vocab_size, std::size_t mel_bins,
                       std::size_t n_utts, std::uint64_t seed);

// x -> (x - mean) / std per bin, and back.
std::vector<double> normalize_mel(const std::vector<float>& mel, const NormStats& s);
std::vector<double> denormalize_mel(std::span<const double> mel, const NormStats& s);

// ---- couplings --------------------------------------------------------------

// A pair (z0, z1) plus the condition it was generated under. Point couplings
// have no tokens and one frame.
struct CouplingPair {
  std::uint32_t cond_ref = kNoCondition;
  TokenSequence tokens;
  DurationPlan plan;
  std::vector<float> z0;  // [frames, dim]
  std::vector<float> z1;

  static constexpr std::uint32_t kNoCondition = 0xFFFFFFFFu;
};

struct CouplingSet {
  std::size_t dim = 0;
  std::size_t vocab_size = 0;
  // 1 = independent data coupling; k = drawn from the (k-1)-rectified flow.
  std::uint64_t generation = 1;
  SolverSpec solver;
  std::uint64_t seed = 0;
  NormStats norm;
  std::vector<CouplingPair> pairs;
};

// ---- RFDS dataset files --------------------------------------------------------

inline constexpr std::uint32_t kDatasetVersion = 1;

enum class DatasetKind : std::uint32_t { kCorpus = 1, kPoints = 2, kCoupling = 3 };

std::vector<std::uint8_t> encode_corpus(const SynthCorpus& corpus);
std::vector<std::uint8_t> encode_points(const PointSet& points, std::uint64_t seed);
std::vector<std::uint8_t> encode_coupling(const CouplingSet& coupling);

SynthCorpus decode_corpus(const std::vector<std::uint8_t>& bytes);
PointSet decode_points(const std::vector<std::uint8_t>& bytes);
CouplingSet decode_coupling(const std::vector<std::uint8_t>& bytes);
DatasetKind peek_dataset_kind(const std::vector<std::uint8_t>& bytes);

void save_corpus(const std::string& path, const SynthCorpus& corpus);
void save_points(const std::string& path, const PointSet& points, std::uint64_t seed);
void save_coupling(const std::string& path, const CouplingSet& coupling);
SynthCorpus load_corpus(const std::string& path);
PointSet load_points(const std::string& path);
CouplingSet load_coupling(const std::string& path);
DatasetKind dataset_kind(const std::string& path);

bool operator==(const SynthCorpus& a, const SynthCorpus& b);
bool operator==(const CouplingSet& a, const CouplingSet& b);

}  // namespace rf
