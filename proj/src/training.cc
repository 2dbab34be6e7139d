#include "reflowtts/training.h"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <sstream>

#include "reflowtts/error.h"
#include "reflowtts/flow.h"

namespace rf {

namespace {

double now_seconds() {
  return std::chrono::duration<double>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

std::vector<Tensor> trainable(const VelocityModel& model, const std::string& frozen) {
  std::vector<Tensor> out;
  for (const auto& [name, t] : model.params().entries()) {
    if (frozen.empty() || name.rfind(frozen, 0) != 0) out.push_back(t);
  }
  if (out.empty()) throw ValueError("every parameter is frozen by '" + frozen + "'");
  return out;
}

// A padded minibatch in decoder layout.
struct Minibatch {
  Tensor x0;    // [B, M, F]
  Tensor x1;
  Tensor mask;  // [B, 1, F], undefined when every item has F frames
  std::vector<double> t;
  std::vector<std::size_t> picks;
};

// Draw order per iteration is fixed: item indices, then t, then noise per item.
Minibatch draw_minibatch(const TrainingSet& data, std::size_t batch, Rng& rng) {
  const std::size_t m = data.dim;
  Minibatch mb;
  mb.picks.resize(batch);
  for (auto& p : mb.picks) p = rng.below(data.items.size());
  mb.t = sample_time(batch, rng);
  std::size_t max_frames = 0;
  bool ragged = false;
  for (std::size_t p : mb.picks) {
    const std::size_t f = data.items[p].frames(m);
    if (max_frames != 0 && f != max_frames) ragged = true;
    max_frames = std::max(max_frames, f);
  }
  std::vector<double> x0(batch * m * max_frames, 0.0);
  std::vector<double> x1(batch * m * max_frames, 0.0);
  std::vector<std::size_t> frames(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    const TrainingItem& item = data.items[mb.picks[b]];
    const std::size_t f = item.frames(m);
    frames[b] = f;
    std::vector<double> noise;
    const std::vector<double>* src0 = &item.x0;
    if (item.x0.empty()) {
      noise = rng.normals(f * m);
      src0 = &noise;
    }
    // [frames, M] -> [M, max_frames] slot of the batch
    for (std::size_t i = 0; i < f; ++i) {
      for (std::size_t j = 0; j < m; ++j) {
        const std::size_t dst = (b * m + j) * max_frames + i;
        x0[dst] = (*src0)[i * m + j];
        x1[dst] = item.x1[i * m + j];
      }
    }
  }
  mb.x0 = Tensor::from({batch, m, max_frames}, std::move(x0));
  mb.x1 = Tensor::from({batch, m, max_frames}, std::move(x1));
  if (ragged) mb.mask = frame_mask(frames, max_frames);
  return mb;
}

struct Losses {
  Tensor total;
  double flow = 0.0;
  double dur = 0.0;
};

Losses batch_losses(const VelocityModel& model, const TrainingSet& data,
                    const Minibatch& mb, bool with_durations, double dur_weight) {
  const std::size_t batch = mb.picks.size();
  Tensor cond;
  Tensor dur_loss;
  if (data.conditional) {
    std::vector<TokenSequence> seqs;
    std::vector<DurationPlan> plans;
    seqs.reserve(batch);
    plans.reserve(batch);
    for (std::size_t p : mb.picks) {
      seqs.push_back(data.items[p].tokens);
      plans.push_back(data.items[p].plan);
    }
    const Frontend fe = model.frontend();
    const TokenBatch tb = make_token_batch(seqs, fe.config());
    const Tensor hidden = fe.encode_batch(tb);
    cond = length_regulate_batch(hidden, plans, mb.x1.dim(2));
    if (with_durations) {
      // The predictor reads a detached copy so its loss does not steer the
      // encoder.
      const Tensor log_dur = fe.predict_log_durations_batch(hidden.detach(), tb.mask);
      std::vector<double> target(batch * tb.max_len, 0.0);
      for (std::size_t b = 0; b < batch; ++b) {
        const auto& d = plans[b].durations;
        for (std::size_t k = 0; k < d.size(); ++k) {
          target[b * tb.max_len + k] = std::log(static_cast<double>(d[k]));
        }
      }
      const Tensor mask2 = reshape(tb.mask, {batch, tb.max_len});
      double cells = 0.0;
      for (double v : mask2.data()) cells += v;
      const Tensor diff = sub(log_dur, Tensor::from({batch, tb.max_len}, std::move(target)));
      dur_loss = scale(sum(mul(square(diff), mask2)), 1.0 / cells);
    }
  }
  const Tensor xt = interpolate(mb.x0, mb.x1, mb.t);
  const Tensor v = model.decode(xt, mb.t, cond, mb.mask);
  const Tensor flow = mb.mask.defined() ? rectified_flow_loss(v, mb.x0, mb.x1, mb.mask)
                                        : rectified_flow_loss(v, mb.x0, mb.x1);
  Losses out;
  out.flow = flow.item();
  if (dur_loss.defined()) {
    out.dur = dur_loss.item();
    out.total = add(flow, scale(dur_loss, dur_weight));
  } else {
    out.total = flow;
  }
  return out;
}

TrainingItem point_item(const float* row, std::size_t dim) {
  TrainingItem item;
  item.x1.assign(row, row + dim);
  return item;
}

}  // namespace

TrainingSet training_set_from_corpus(const SynthCorpus& corpus, Split split) {
  TrainingSet set;
  set.dim = corpus.mel_bins;
  set.conditional = true;
  for (const Utterance* u : corpus.split(split)) {
    TrainingItem item;
    item.tokens = u->tokens;
    item.plan = u->plan;
    item.x1 = normalize_mel(u->mel, corpus.norm);
    set.items.push_back(std::move(item));
  }
  if (set.items.empty()) throw ValueError("corpus split holds no utterances");
  return set;
}

TrainingSet training_set_from_points(const PointSet& points) {
  TrainingSet set;
  set.dim = points.dim;
  set.conditional = false;
  for (std::size_t i = 0; i < points.size(); ++i) {
    set.items.push_back(point_item(points.values.data() + i * points.dim, points.dim));
  }
  if (set.items.empty()) throw ValueError("point set is empty");
  return set;
}

TrainingSet training_set_from_coupling(const CouplingSet& coupling) {
  TrainingSet set;
  set.dim = coupling.dim;
  set.conditional = coupling.vocab_size > 0;
  for (const auto& p : coupling.pairs) {
    TrainingItem item;
    item.tokens = p.tokens;
    item.plan = p.plan;
    item.x0.assign(p.z0.begin(), p.z0.end());
    item.x1.assign(p.z1.begin(), p.z1.end());
    set.items.push_back(std::move(item));
  }
  if (set.items.empty()) throw ValueError("coupling set is empty");
  return set;
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw ValueError("batch_size must be >= 1");
  if (!(adam.lr > 0)) throw ValueError("lr must be > 0");
  if (!(lr_min >= 0) || lr_min > adam.lr) throw ValueError("lr_min must lie in [0, lr]");
  if (!(adam.beta1 >= 0 && adam.beta1 < 1) || !(adam.beta2 >= 0 && adam.beta2 < 1)) {
    throw ValueError("adam betas must lie in [0, 1)");
  }
  if (!(adam.eps > 0)) throw ValueError("adam eps must be > 0");
  if (!(duration_weight >= 0)) throw ValueError("duration_weight must be >= 0");
}

std::string format_log_line(const TrainStep& s) {
  std::ostringstream os;
  os.precision(17);
  os << "iter=" << s.iter << " loss=" << s.loss << " flow_loss=" << s.flow_loss
     << " dur_loss=" << s.dur_loss << " lr=" << s.lr;
  os.precision(6);
  os << " wall=" << s.wall;
  return os.str();
}

Trainer::Trainer(VelocityModel& model, TrainConfig config)
    : model_(&model),
      config_(std::move(config)),
      rng_(config_.seed),
      adam_(trainable(model, config_.freeze_prefix), config_.adam),
      start_time_(now_seconds()) {
  config_.validate();
  train_durations_ = model.config().conditional &&
                     !(!config_.freeze_prefix.empty() &&
                       std::string("frontend.").rfind(config_.freeze_prefix, 0) == 0);
}

double Trainer::lr_at(std::size_t iter) const {
  const double lr = config_.adam.lr;
  if (config_.warmup > 0 && iter < config_.warmup) {
    return lr * static_cast<double>(iter + 1) / static_cast<double>(config_.warmup);
  }
  if (config_.iterations <= config_.warmup) return lr;
  const double progress =
      std::min(1.0, static_cast<double>(iter - config_.warmup) /
                        static_cast<double>(config_.iterations - config_.warmup));
  return config_.lr_min +
         0.5 * (lr - config_.lr_min) * (1.0 + std::cos(std::numbers::pi * progress));
}

TrainStep Trainer::step(const TrainingSet& data) {
  if (data.items.empty()) throw ValueError("training set is empty");
  if (data.dim != model_->config().decoder.mel_bins) {
    throw ShapeError("training data dim " + std::to_string(data.dim) +
                     " != model mel_bins " +
                     std::to_string(model_->config().decoder.mel_bins));
  }
  if (data.conditional != model_->config().conditional) {
    throw ValueError(data.conditional ? "conditional data needs a conditional model"
                                      : "unconditional data needs an unconditional model");
  }
  const Minibatch mb = draw_minibatch(data, config_.batch_size, rng_);
  Losses losses = batch_losses(*model_, data, mb, train_durations_, config_.duration_weight);
  model_->params().zero_grad();
  backward(losses.total);
  const double lr = lr_at(iteration_);
  adam_.set_lr(lr);
  adam_.step();
  ++iteration_;
  TrainStep s;
  s.iter = iteration_;
  s.flow_loss = losses.flow;
  s.dur_loss = losses.dur;
  s.loss = losses.flow + config_.duration_weight * losses.dur;
  s.lr = lr;
  s.wall = now_seconds() - start_time_;
  return s;
}

void Trainer::run(const TrainingSet& data,
                  const std::function<void(const TrainStep&)>& on_step) {
  while (iteration_ < config_.iterations) {
    const TrainStep s = step(data);
    if (on_step) on_step(s);
  }
}

TrainerState Trainer::state() const {
  TrainerState s;
  s.iteration = iteration_;
  s.rng = rng_.serialize();
  s.adam = adam_.state();
  return s;
}

void Trainer::load_state(const TrainerState& state) {
  iteration_ = state.iteration;
  rng_ = Rng::deserialize(state.rng);
  adam_.load_state(state.adam);
}

double evaluate_flow_loss(const VelocityModel& model, const TrainingSet& data,
                          std::size_t batch_size, std::uint64_t seed) {
  if (data.items.empty() || batch_size < 1) throw ValueError("nothing to evaluate");
  NoGradGuard guard;
  Rng rng(seed);
  double total = 0.0;
  std::size_t batches = 0;
  const std::size_t rounds = (data.items.size() + batch_size - 1) / batch_size;
  for (std::size_t r = 0; r < rounds; ++r) {
    const Minibatch mb = draw_minibatch(data, batch_size, rng);
    total += batch_losses(model, data, mb, false, 0.0).flow;
    ++batches;
  }
  return total / static_cast<double>(batches);
}

}  // namespace rf
