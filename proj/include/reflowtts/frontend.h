#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "reflowtts/nn.h"
#include "reflowtts/random.h"
#include "reflowtts/tensor.h"

namespace rf {

inline constexpr std::size_t kStepChannels = 256;
// Continuous t in [0,1] is stretched onto the integer-position range the
// sinusoidal table was designed for.
inline constexpr double kStepScale = 1000.0;

struct FrontendConfig {
  std::size_t vocab_size = 16;
  std::size_t max_tokens = 64;
  std::size_t channels = 32;
  std::size_t encoder_layers = 3;
  std::size_t duration_channels = 32;
  std::size_t kernel_size = 3;
};

struct TokenSequence {
  std::vector<std::size_t> ids;
  std::size_t size() const { return ids.size(); }
};

struct DurationPlan {
  std::vector<std::size_t> durations;
  std::size_t total_frames = 0;

  // Rejects empty plans and zero durations.
  static DurationPlan from(std::vector<std::size_t> durations);
};

// Frame-level condition c: one row per output frame.
struct ConditionGrid {
  Tensor features;  // [frames, channels]
  std::size_t frames() const { return features.dim(0); }
  std::size_t channels() const { return features.dim(1); }
};

struct StepEmbedding {
  Tensor vector;  // [256]
};

// Interleaved (sin, cos) pairs at frequencies 10000^(-2k/256), k < 128.
StepEmbedding embed_step(double t);
// [B, 256], one row per t.
Tensor embed_steps(std::span<const double> t);

// exp(log_duration) rounded half-to-even, then clamped to >= 1 frame.
std::size_t frames_from_log_duration(double log_duration);
DurationPlan plan_from_log_durations(std::span<const double> log_durations);

// Repeats row k of hidden [tokens, C] durations[k] times.
ConditionGrid length_regulate(const Tensor& hidden, const DurationPlan& plan);

// Padded batch of token sequences. Pads use id 0 and are zeroed by `mask`.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t max_len = 0;
  std::vector<std::size_t> ids;      // [batch * max_len]
  std::vector<std::size_t> lengths;  // [batch]
  Tensor mask;                       // [batch, 1, max_len]
};

TokenBatch make_token_batch(std::span<const TokenSequence> seqs,
                            const FrontendConfig& config);

// Batched length regulation: hidden [B, C, L] -> [B, C, max_frames] with
// frames past each plan's total zeroed.
Tensor length_regulate_batch(const Tensor& hidden,
                             std::span<const DurationPlan> plans,
                             std::size_t max_frames);
// [B, 1, max_frames] with ones on valid frames.
Tensor frame_mask(std::span<const std::size_t> frames, std::size_t max_frames);

void register_frontend_params(ParameterStore& params,
                              const FrontendConfig& config, Rng& rng);

// Token encoder + duration predictor evaluated against weights held in a
// ParameterStore. A view: the store must outlive it.
class Frontend {
 public:
  Frontend(const ParameterStore& params, const FrontendConfig& config);

  // [B, C, L], zero on padded tokens.
  Tensor encode_batch(const TokenBatch& tokens) const;
  // [B, L] log-durations.
  Tensor predict_log_durations_batch(const Tensor& hidden,
                                     const Tensor& token_mask) const;

  // [tokens, C]
  Tensor encode_tokens(const TokenSequence& seq) const;
  // hidden [tokens, C] -> [tokens] log-durations
  Tensor predict_durations(const Tensor& hidden) const;

  const FrontendConfig& config() const { return config_; }

 private:
  const ParameterStore* params_;
  FrontendConfig config_;
};

}  // namespace rf
