#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>

#include "reflowtts/frontend.h"
#include "reflowtts/nn.h"
#include "reflowtts/tensor.h"

namespace rf {

struct DecoderConfig {
  std::size_t n_blocks = 4;
  std::size_t channels = 64;
  std::size_t mel_bins = 16;
  // 0 for an unconditional field.
  std::size_t condition_channels = 0;
  std::size_t kernel_size = 3;
  // DiffWave-style zero output projection: v == 0 at initialisation.
  bool zero_output_head = true;

  // 20 residual blocks, 256 channels, 80 mel bins.
  static DecoderConfig full_scale();
  static DecoderConfig desk_scale();
  void validate() const;
};

struct ModelConfig {
  bool conditional = false;
  FrontendConfig frontend;
  DecoderConfig decoder;

  void validate() const;
};

// The drift field v(x_t, t, c): optional token frontend plus a stack of
// gated residual conv blocks over the frame axis, mel bins as channels.
class VelocityModel {
 public:
  VelocityModel(const ModelConfig& config, std::uint64_t init_seed);

  VelocityModel(VelocityModel&&) noexcept = default;
  VelocityModel& operator=(VelocityModel&&) noexcept = default;

  // Batched evaluation. xt [B, mel_bins, T], one t per batch row, cond
  // [B, condition_channels, T] (undefined when unconditional), frame_mask
  // [B, 1, T] (undefined means every frame is valid). Returns [B, mel_bins, T].
  // Counts one function evaluation per call.
  Tensor decode(const Tensor& xt, std::span<const double> t, const Tensor& cond,
                const Tensor& frame_mask) const;

  // Single utterance: xt [frames, mel_bins] -> [frames, mel_bins].
  Tensor velocity(const Tensor& xt, double t, const ConditionGrid* cond) const;
  // Unconditional points: z [N, mel_bins], each row a one-frame sample.
  Tensor velocity_points(const Tensor& z, double t) const;

  Frontend frontend() const;
  // Encodes tokens and expands them with `plan` into the condition grid.
  ConditionGrid condition(const TokenSequence& seq, const DurationPlan& plan) const;
  // Same, with durations taken from the predictor.
  ConditionGrid condition(const TokenSequence& seq) const;

  const ModelConfig& config() const { return config_; }
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }
  std::size_t param_count() const { return params_.count(); }

  std::uint64_t generation() const { return generation_; }
  void set_generation(std::uint64_t g) { generation_ = g; }

  std::uint64_t nfe() const { return nfe_->load(); }
  void reset_nfe() { nfe_->store(0); }

 private:
  ModelConfig config_;
  ParameterStore params_;
  std::uint64_t generation_ = 1;
  std::unique_ptr<std::atomic<std::uint64_t>> nfe_;
};

std::size_t param_count(const VelocityModel& model);

}  // namespace rf
