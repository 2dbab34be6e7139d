#include "reflowtts/frontend.h"

#include <algorithm>
#include <array>
#include <cfenv>
#include <cmath>
#include <string>

#include "reflowtts/error.h"

namespace rf {

namespace {

// Per-token cap so a diverged predictor cannot request unbounded memory.
constexpr double kMaxFramesPerToken = 1000.0;

std::string layer_name(const char* prefix, std::size_t i, const char* leaf) {
  return std::string(prefix) + std::to_string(i) + leaf;
}

}  // namespace

DurationPlan DurationPlan::from(std::vector<std::size_t> durations) {
  if (durations.empty()) throw ValueError("duration plan is empty");
  DurationPlan plan;
  for (std::size_t d : durations) {
    if (d < 1) throw ValueError("every duration must be >= 1 frame");
    plan.total_frames += d;
  }
  plan.durations = std::move(durations);
  return plan;
}

StepEmbedding embed_step(double t) {
  return StepEmbedding{reshape(embed_steps(std::span<const double>(&t, 1)),
                               {kStepChannels})};
}

Tensor embed_steps(std::span<const double> t) {
  constexpr std::size_t half = kStepChannels / 2;
  static const std::array<double, half> freqs = [] {
    std::array<double, half> f{};
    for (std::size_t k = 0; k < half; ++k) {
      f[k] = std::pow(10000.0, -2.0 * static_cast<double>(k) / kStepChannels);
    }
    return f;
  }();
  std::vector<double> out(t.size() * kStepChannels);
  for (std::size_t b = 0; b < t.size(); ++b) {
    if (!(t[b] >= 0.0 && t[b] <= 1.0)) {
      throw ValueError("step t must lie in [0, 1], got " + std::to_string(t[b]));
    }
    const double pos = t[b] * kStepScale;
    for (std::size_t k = 0; k < half; ++k) {
      const double freq = freqs[k];
      out[b * kStepChannels + 2 * k] = std::sin(pos * freq);
      out[b * kStepChannels + 2 * k + 1] = std::cos(pos * freq);
    }
  }
  return Tensor::from({t.size(), kStepChannels}, std::move(out));
}

std::size_t frames_from_log_duration(double log_duration) {
  const double frames = std::exp(std::min(log_duration, std::log(kMaxFramesPerToken)));
  const int saved = std::fegetround();
  std::fesetround(FE_TONEAREST);
  const double rounded = std::nearbyint(frames);
  std::fesetround(saved);
  return static_cast<std::size_t>(std::max(1.0, rounded));
}

DurationPlan plan_from_log_durations(std::span<const double> log_durations) {
  std::vector<std::size_t> durations;
  durations.reserve(log_durations.size());
  for (double ld : log_durations) durations.push_back(frames_from_log_duration(ld));
  return DurationPlan::from(std::move(durations));
}

ConditionGrid length_regulate(const Tensor& hidden, const DurationPlan& plan) {
  if (hidden.ndim() != 2 || hidden.dim(0) != plan.durations.size()) {
    throw ShapeError("length_regulate: hidden " + shape_str(hidden.shape()) +
                     " vs " + std::to_string(plan.durations.size()) +
                     " durations");
  }
  std::vector<std::size_t> rows;
  rows.reserve(plan.total_frames);
  for (std::size_t k = 0; k < plan.durations.size(); ++k) {
    if (plan.durations[k] < 1) {
      throw ValueError("length_regulate: duration of token " +
                       std::to_string(k) + " is < 1");
    }
    rows.insert(rows.end(), plan.durations[k], k);
  }
  return ConditionGrid{index_select(hidden, rows)};
}

TokenBatch make_token_batch(std::span<const TokenSequence> seqs,
                            const FrontendConfig& config) {
  if (seqs.empty()) throw ValueError("token batch is empty");
  TokenBatch batch;
  batch.batch = seqs.size();
  for (const auto& s : seqs) {
    if (s.ids.empty() || s.ids.size() > config.max_tokens) {
      throw ValueError("token sequence length " + std::to_string(s.ids.size()) +
                       " outside [1, " + std::to_string(config.max_tokens) + "]");
    }
    for (std::size_t id : s.ids) {
      if (id >= config.vocab_size) {
        throw ValueError("token id " + std::to_string(id) +
                         " out of vocabulary of size " +
                         std::to_string(config.vocab_size));
      }
    }
    batch.max_len = std::max(batch.max_len, s.ids.size());
  }
  batch.ids.assign(batch.batch * batch.max_len, 0);
  std::vector<double> mask(batch.batch * batch.max_len, 0.0);
  for (std::size_t b = 0; b < seqs.size(); ++b) {
    batch.lengths.push_back(seqs[b].ids.size());
    for (std::size_t i = 0; i < seqs[b].ids.size(); ++i) {
      batch.ids[b * batch.max_len + i] = seqs[b].ids[i];
      mask[b * batch.max_len + i] = 1.0;
    }
  }
  batch.mask = Tensor::from({batch.batch, 1, batch.max_len}, std::move(mask));
  return batch;
}

Tensor frame_mask(std::span<const std::size_t> frames, std::size_t max_frames) {
  std::vector<double> mask(frames.size() * max_frames, 0.0);
  for (std::size_t b = 0; b < frames.size(); ++b) {
    if (frames[b] > max_frames) throw ShapeError("frame count exceeds max_frames");
    std::fill_n(mask.begin() + b * max_frames, frames[b], 1.0);
  }
  return Tensor::from({frames.size(), 1, max_frames}, std::move(mask));
}

Tensor length_regulate_batch(const Tensor& hidden,
                             std::span<const DurationPlan> plans,
                             std::size_t max_frames) {
  if (hidden.ndim() != 3 || hidden.dim(0) != plans.size()) {
    throw ShapeError("length_regulate_batch: hidden " +
                     shape_str(hidden.shape()) + " vs " +
                     std::to_string(plans.size()) + " plans");
  }
  const std::size_t batch = hidden.dim(0);
  const std::size_t channels = hidden.dim(1);
  const std::size_t max_len = hidden.dim(2);
  std::vector<std::size_t> rows(batch * max_frames, 0);
  std::vector<std::size_t> frames;
  for (std::size_t b = 0; b < batch; ++b) {
    const DurationPlan& plan = plans[b];
    if (plan.durations.size() > max_len || plan.total_frames > max_frames) {
      throw ShapeError("length_regulate_batch: plan " + std::to_string(b) +
                       " does not fit the padded batch");
    }
    std::size_t f = 0;
    for (std::size_t k = 0; k < plan.durations.size(); ++k) {
      if (plan.durations[k] < 1) throw ValueError("duration < 1 in plan");
      for (std::size_t r = 0; r < plan.durations[k]; ++r) {
        rows[b * max_frames + f++] = b * max_len + k;
      }
    }
    frames.push_back(plan.total_frames);
  }
  Tensor flat = reshape(permute(hidden, {0, 2, 1}), {batch * max_len, channels});
  Tensor picked = reshape(index_select(flat, rows), {batch, max_frames, channels});
  return mul(permute(picked, {0, 2, 1}), frame_mask(frames, max_frames));
}

void register_frontend_params(ParameterStore& params,
                              const FrontendConfig& config, Rng& rng) {
  using Init = ParameterStore::Init;
  const std::size_t c = config.channels;
  const std::size_t cd = config.duration_channels;
  const std::size_t k = config.kernel_size;
  params.add("frontend.embed", {config.vocab_size, c}, Init::kKaimingUniform, c,
             rng);
  for (std::size_t l = 0; l < config.encoder_layers; ++l) {
    params.add(layer_name("frontend.enc.", l, ".weight"), {c, c, k},
               Init::kKaimingUniform, c * k, rng);
    params.add(layer_name("frontend.enc.", l, ".bias"), {c}, Init::kZeros, 0, rng);
  }
  params.add("frontend.dur.0.weight", {cd, c, k}, Init::kKaimingUniform, c * k, rng);
  params.add("frontend.dur.0.bias", {cd}, Init::kZeros, 0, rng);
  params.add("frontend.dur.1.weight", {cd, cd, k}, Init::kKaimingUniform, cd * k, rng);
  params.add("frontend.dur.1.bias", {cd}, Init::kZeros, 0, rng);
  params.add("frontend.dur.head.weight", {1, cd, 1}, Init::kKaimingUniform, cd, rng);
  params.add("frontend.dur.head.bias", {1}, Init::kZeros, 0, rng);
}

Frontend::Frontend(const ParameterStore& params, const FrontendConfig& config)
    : params_(&params), config_(config) {}

Tensor Frontend::encode_batch(const TokenBatch& tokens) const {
  const std::size_t c = config_.channels;
  Tensor h = index_select(params_->get("frontend.embed"), tokens.ids);
  h = permute(reshape(h, {tokens.batch, tokens.max_len, c}), {0, 2, 1});
  h = mul(h, tokens.mask);
  for (std::size_t l = 0; l < config_.encoder_layers; ++l) {
    Tensor conv = conv1d(h, params_->get(layer_name("frontend.enc.", l, ".weight")),
                         params_->get(layer_name("frontend.enc.", l, ".bias")));
    h = mul(add(h, relu(conv)), tokens.mask);
  }
  return h;
}

Tensor Frontend::predict_log_durations_batch(const Tensor& hidden,
                                             const Tensor& token_mask) const {
  Tensor h = relu(conv1d(hidden, params_->get("frontend.dur.0.weight"),
                         params_->get("frontend.dur.0.bias")));
  h = mul(h, token_mask);
  h = relu(conv1d(h, params_->get("frontend.dur.1.weight"),
                  params_->get("frontend.dur.1.bias")));
  h = mul(h, token_mask);
  Tensor out = conv1d(h, params_->get("frontend.dur.head.weight"),
                      params_->get("frontend.dur.head.bias"));
  return reshape(out, {hidden.dim(0), hidden.dim(2)});
}

Tensor Frontend::encode_tokens(const TokenSequence& seq) const {
  const TokenBatch batch =
      make_token_batch(std::span<const TokenSequence>(&seq, 1), config_);
  Tensor h = encode_batch(batch);  // [1, C, L]
  return reshape(permute(h, {0, 2, 1}), {seq.size(), config_.channels});
}

Tensor Frontend::predict_durations(const Tensor& hidden) const {
  if (hidden.ndim() != 2 || hidden.dim(1) != config_.channels) {
    throw ShapeError("predict_durations: hidden " + shape_str(hidden.shape()) +
                     " is not [tokens, " + std::to_string(config_.channels) + "]");
  }
  const std::size_t len = hidden.dim(0);
  Tensor h = permute(reshape(hidden, {1, len, config_.channels}), {0, 2, 1});
  Tensor mask = Tensor::full({1, 1, len}, 1.0);
  return reshape(predict_log_durations_batch(h, mask), {len});
}

}  // namespace rf
