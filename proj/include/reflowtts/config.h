#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "reflowtts/decoder.h"
#include "reflowtts/ode.h"
#include "reflowtts/training.h"

namespace rf {

enum class Task { kToy2d, kSynthTts };

Task parse_task(const std::string& name);
std::string task_name(Task task);

// Everything a training run needs besides the data file. Data-dependent
// dims (mel_bins, vocab_size) come from the dataset at train time.
struct RunConfig {
  Task task = Task::kSynthTts;

  // decoder
  std::size_t channels = 64;
  std::size_t n_blocks = 4;
  std::size_t kernel_size = 3;
  bool zero_output_head = true;
  // frontend (synth_tts only)
  std::size_t frontend_channels = 32;
  std::size_t encoder_layers = 3;
  std::size_t duration_channels = 32;
  std::size_t max_tokens = 64;

  // optimizer
  double lr = 1e-3;
  double lr_min = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t batch_size = 64;
  std::size_t iterations = 20000;
  std::size_t warmup = 0;
  double duration_weight = 1.0;

  // default sampling solver
  SolverSpec solver = SolverSpec::rk45();

  std::uint64_t seed = 0;       // minibatch / noise stream
  std::uint64_t init_seed = 0;  // weight initialisation
  std::size_t checkpoint_every = 1000;
  std::size_t log_every = 1;

  // reflow
  bool reflow_fine_tune = false;
  bool reflow_freeze_frontend = false;

  // Optional default data path; load() checks that it exists.
  std::string data;

  void validate() const;
  ModelConfig model_config(std::size_t mel_bins, std::size_t vocab_size) const;
  TrainConfig train_config() const;

  nlohmann::ordered_json to_json() const;
  // Missing keys keep their defaults; unknown keys throw UsageError naming
  // the key (with its dotted path).
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::string& path);
};

// Dotted keys whose values differ, ignoring bookkeeping-only keys
// (log_every, checkpoint_every, data).
std::vector<std::string> config_differences(const RunConfig& a, const RunConfig& b);

nlohmann::ordered_json model_config_to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

}  // namespace rf
