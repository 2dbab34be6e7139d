#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "reflowtts/adam.h"
#include "reflowtts/data.h"
#include "reflowtts/decoder.h"
#include "reflowtts/random.h"

namespace rf {

// One (X0, X1) training pair. x1 is [frames, dim] row-major; an empty x0
// means "draw fresh N(0, I) noise every time the item is used" (the
// independent coupling). Unconditional items have no tokens and one frame.
struct TrainingItem {
  TokenSequence tokens;
  DurationPlan plan;
  std::vector<double> x1;
  std::vector<double> x0;

  std::size_t frames(std::size_t dim) const { return x1.size() / dim; }
};

struct TrainingSet {
  std::size_t dim = 0;
  bool conditional = false;
  std::vector<TrainingItem> items;
};

// Normalised mels of one split, independent coupling.
TrainingSet training_set_from_corpus(const SynthCorpus& corpus, Split split);
TrainingSet training_set_from_points(const PointSet& points);
// Fixed (z0, z1) pairs.
TrainingSet training_set_from_coupling(const CouplingSet& coupling);

struct TrainConfig {
  AdamConfig adam;
  std::size_t batch_size = 64;
  std::size_t iterations = 20000;
  // Cosine decay from adam.lr to lr_min over `iterations`.
  double lr_min = 1e-4;
  std::size_t warmup = 0;
  double duration_weight = 1.0;
  std::uint64_t seed = 0;
  // Parameters whose names start with this prefix are not updated, and the
  // duration loss is skipped when it covers the frontend.
  std::string freeze_prefix;

  void validate() const;
};

struct TrainStep {
  std::size_t iter = 0;  // 1-based count of completed updates
  double loss = 0.0;
  double flow_loss = 0.0;
  double dur_loss = 0.0;
  double lr = 0.0;
  double wall = 0.0;  // seconds since the trainer was constructed
};

// "iter=100 loss=... flow_loss=... dur_loss=... lr=... wall=..."
std::string format_log_line(const TrainStep& step);

struct TrainerState {
  std::size_t iteration = 0;
  std::string rng;  // Rng::serialize()
  AdamState adam;
};

class Trainer {
 public:
  Trainer(VelocityModel& model, TrainConfig config);

  double lr_at(std::size_t iter) const;
  // One minibatch update.
  TrainStep step(const TrainingSet& data);
  // Steps until `iteration() == config.iterations`. `on_step` sees each step.
  void run(const TrainingSet& data,
           const std::function<void(const TrainStep&)>& on_step = {});

  std::size_t iteration() const { return iteration_; }
  TrainerState state() const;
  void load_state(const TrainerState& state);
  const TrainConfig& config() const { return config_; }

 private:
  VelocityModel* model_;
  TrainConfig config_;
  Rng rng_;
  Adam adam_;
  std::size_t iteration_ = 0;
  bool train_durations_ = false;
  double start_time_ = 0.0;
};

// Mean squared flow loss over a whole set with fixed noise/time draws from
// `seed`; no parameter updates.
double evaluate_flow_loss(const VelocityModel& model, const TrainingSet& data,
                          std::size_t batch_size, std::uint64_t seed);

}  // namespace rf
