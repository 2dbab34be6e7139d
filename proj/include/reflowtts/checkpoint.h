#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "reflowtts/config.h"
#include "reflowtts/data.h"
#include "reflowtts/decoder.h"
#include "reflowtts/training.h"

namespace rf {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TensorRecord {
  std::string name;
  Shape shape;
  std::uint64_t offset = 0;  // from the start of the payload
  std::uint64_t nbytes = 0;
};

struct CheckpointContents {
  RunConfig config;
  VelocityModel model;
  // Per-bin mel statistics of the training data (empty for toy tasks).
  NormStats norm;
  // Present for checkpoints written by the trainer.
  std::optional<TrainerState> trainer;
  std::vector<TensorRecord> manifest;
};

// "RFTT" | u32 version | u64 header bytes | JSON header | u32 tensor count |
// manifest | f64 payload. Layout details in docs/format.md.
std::vector<std::uint8_t> encode_checkpoint(const RunConfig& config,
                                            const VelocityModel& model,
                                            const NormStats& norm,
                                            const TrainerState* trainer,
                                            const std::vector<std::string>& trainable = {});
CheckpointContents decode_checkpoint(const std::vector<std::uint8_t>& bytes);

// Writes to a temporary sibling and renames it into place.
void save_checkpoint(const std::string& path, const RunConfig& config,
                     const VelocityModel& model, const NormStats& norm,
                     const TrainerState* trainer,
                     const std::vector<std::string>& trainable = {});
CheckpointContents load_checkpoint(const std::string& path);

// Names of the parameters a trainer with `freeze_prefix` updates, in order.
std::vector<std::string> trainable_names(const VelocityModel& model,
                                         const std::string& freeze_prefix);

}  // namespace rf
