#include "reflowtts/decoder.h"

#include <cmath>
#include <string>

#include "reflowtts/error.h"

namespace rf {

namespace {

std::string block_param(std::size_t k, const char* leaf) {
  return "decoder.blocks." + std::to_string(k) + "." + leaf;
}

void register_decoder_params(ParameterStore& params, const DecoderConfig& cfg,
                             Rng& rng) {
  using Init = ParameterStore::Init;
  const std::size_t c = cfg.channels;
  const std::size_t m = cfg.mel_bins;
  const std::size_t k = cfg.kernel_size;
  params.add("decoder.input.weight", {c, m, 1}, Init::kKaimingUniform, m, rng);
  params.add("decoder.input.bias", {c}, Init::kZeros, 0, rng);
  params.add("decoder.step.0.weight", {kStepChannels, c}, Init::kKaimingUniform,
             kStepChannels, rng);
  params.add("decoder.step.0.bias", {c}, Init::kZeros, 0, rng);
  params.add("decoder.step.1.weight", {c, c}, Init::kKaimingUniform, c, rng);
  params.add("decoder.step.1.bias", {c}, Init::kZeros, 0, rng);
  for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
    params.add(block_param(b, "step.weight"), {c, c}, Init::kKaimingUniform, c, rng);
    params.add(block_param(b, "step.bias"), {c}, Init::kZeros, 0, rng);
    params.add(block_param(b, "conv.weight"), {2 * c, c, k},
               Init::kKaimingUniform, c * k, rng);
    params.add(block_param(b, "conv.bias"), {2 * c}, Init::kZeros, 0, rng);
    if (cfg.condition_channels > 0) {
      params.add(block_param(b, "cond.weight"), {2 * c, cfg.condition_channels, 1},
                 Init::kKaimingUniform, cfg.condition_channels, rng);
      params.add(block_param(b, "cond.bias"), {2 * c}, Init::kZeros, 0, rng);
    }
    params.add(block_param(b, "res.weight"), {c, c, 1}, Init::kKaimingUniform, c, rng);
    params.add(block_param(b, "res.bias"), {c}, Init::kZeros, 0, rng);
    params.add(block_param(b, "skip.weight"), {c, c, 1}, Init::kKaimingUniform, c, rng);
    params.add(block_param(b, "skip.bias"), {c}, Init::kZeros, 0, rng);
  }
  params.add("decoder.skip_proj.weight", {c, c, 1}, Init::kKaimingUniform, c, rng);
  params.add("decoder.skip_proj.bias", {c}, Init::kZeros, 0, rng);
  params.add("decoder.output.weight", {m, c, 1},
             cfg.zero_output_head ? Init::kZeros : Init::kKaimingUniform, c, rng);
  params.add("decoder.output.bias", {m}, Init::kZeros, 0, rng);
}

}  // namespace

DecoderConfig DecoderConfig::full_scale() {
  DecoderConfig cfg;
  cfg.n_blocks = 20;
  cfg.channels = 256;
  cfg.mel_bins = 80;
  return cfg;
}

DecoderConfig DecoderConfig::desk_scale() { return DecoderConfig{}; }

void DecoderConfig::validate() const {
  if (n_blocks < 1) throw ValueError("decoder n_blocks must be >= 1");
  if (channels < 1) throw ValueError("decoder channels must be >= 1");
  if (mel_bins < 1) throw ValueError("decoder mel_bins must be >= 1");
  if (kernel_size % 2 == 0) throw ValueError("decoder kernel_size must be odd");
}

void ModelConfig::validate() const {
  decoder.validate();
  if (conditional) {
    if (frontend.vocab_size < 2) throw ValueError("frontend vocab_size must be >= 2");
    if (frontend.channels < 1 || frontend.duration_channels < 1) {
      throw ValueError("frontend channels must be >= 1");
    }
    if (frontend.kernel_size % 2 == 0) {
      throw ValueError("frontend kernel_size must be odd");
    }
    if (decoder.condition_channels != frontend.channels) {
      throw ValueError("decoder condition_channels must equal frontend channels");
    }
  } else if (decoder.condition_channels != 0) {
    throw ValueError("unconditional model must have condition_channels = 0");
  }
}

VelocityModel::VelocityModel(const ModelConfig& config, std::uint64_t init_seed)
    : config_(config), nfe_(std::make_unique<std::atomic<std::uint64_t>>(0)) {
  config_.validate();
  Rng rng(init_seed);
  if (config_.conditional) register_frontend_params(params_, config_.frontend, rng);
  register_decoder_params(params_, config_.decoder, rng);
}

Frontend VelocityModel::frontend() const {
  if (!config_.conditional) throw ValueError("model has no text frontend");
  return Frontend(params_, config_.frontend);
}

ConditionGrid VelocityModel::condition(const TokenSequence& seq,
                                       const DurationPlan& plan) const {
  return length_regulate(frontend().encode_tokens(seq), plan);
}

ConditionGrid VelocityModel::condition(const TokenSequence& seq) const {
  const Frontend fe = frontend();
  const Tensor hidden = fe.encode_tokens(seq);
  const Tensor log_dur = fe.predict_durations(hidden);
  return length_regulate(hidden, plan_from_log_durations(log_dur.data()));
}

Tensor VelocityModel::decode(const Tensor& xt, std::span<const double> t,
                             const Tensor& cond, const Tensor& mask) const {
  const DecoderConfig& cfg = config_.decoder;
  if (xt.ndim() != 3 || xt.dim(1) != cfg.mel_bins || xt.dim(0) != t.size()) {
    throw ShapeError("decode: xt " + shape_str(xt.shape()) + " is not [" +
                     std::to_string(t.size()) + ", " +
                     std::to_string(cfg.mel_bins) + ", T]");
  }
  const std::size_t batch = xt.dim(0);
  const std::size_t frames = xt.dim(2);
  const std::size_t c = cfg.channels;
  if (cfg.condition_channels > 0) {
    if (!cond.defined() || cond.ndim() != 3 || cond.dim(0) != batch ||
        cond.dim(1) != cfg.condition_channels) {
      throw ShapeError("decode: condition is missing or mis-shaped");
    }
    if (cond.dim(2) != frames) {
      throw ShapeError("decode: condition has " + std::to_string(cond.dim(2)) +
                       " frames but xt has " + std::to_string(frames));
    }
  }
  nfe_->fetch_add(1);
  const ParameterStore& p = params_;

  Tensor x = relu(conv1d(xt, p.get("decoder.input.weight"), p.get("decoder.input.bias")));
  Tensor s = embed_steps(t);
  s = relu(linear(s, p.get("decoder.step.0.weight"), p.get("decoder.step.0.bias")));
  s = relu(linear(s, p.get("decoder.step.1.weight"), p.get("decoder.step.1.bias")));

  Tensor skip_total;
  for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
    try {
      Tensor sp = reshape(linear(s, p.get(block_param(b, "step.weight")),
                                 p.get(block_param(b, "step.bias"))),
                          {batch, c, 1});
      Tensor y = add(x, sp);
      if (mask.defined()) y = mul(y, mask);
      y = conv1d(y, p.get(block_param(b, "conv.weight")),
                 p.get(block_param(b, "conv.bias")));
      if (cfg.condition_channels > 0) {
        y = add(y, conv1d(cond, p.get(block_param(b, "cond.weight")),
                          p.get(block_param(b, "cond.bias"))));
      }
      Tensor gated = mul(sigmoid(slice(y, 1, 0, c)), tanh(slice(y, 1, c, c)));
      Tensor res = conv1d(gated, p.get(block_param(b, "res.weight")),
                          p.get(block_param(b, "res.bias")));
      Tensor skip = conv1d(gated, p.get(block_param(b, "skip.weight")),
                           p.get(block_param(b, "skip.bias")));
      x = scale(add(x, res), std::sqrt(0.5));
      skip_total = skip_total.defined() ? add(skip_total, skip) : skip;
    } catch (const NumericError& e) {
      throw NumericError("decoder block " + std::to_string(b) + ": " + e.what());
    }
  }
  try {
    Tensor out = scale(skip_total, 1.0 / std::sqrt(static_cast<double>(cfg.n_blocks)));
    out = relu(out);
    out = relu(conv1d(out, p.get("decoder.skip_proj.weight"),
                      p.get("decoder.skip_proj.bias")));
    out = conv1d(out, p.get("decoder.output.weight"), p.get("decoder.output.bias"));
    if (mask.defined()) out = mul(out, mask);
    return out;
  } catch (const NumericError& e) {
    throw NumericError(std::string("decoder output head: ") + e.what());
  }
}

Tensor VelocityModel::velocity(const Tensor& xt, double t,
                               const ConditionGrid* cond) const {
  if (xt.ndim() != 2 || xt.dim(1) != config_.decoder.mel_bins) {
    throw ShapeError("velocity: xt " + shape_str(xt.shape()) + " is not [frames, " +
                     std::to_string(config_.decoder.mel_bins) + "]");
  }
  if (!(t >= 0.0 && t <= 1.0)) {
    throw ValueError("velocity: t must lie in [0, 1], got " + std::to_string(t));
  }
  const std::size_t frames = xt.dim(0);
  Tensor c;
  if (config_.decoder.condition_channels > 0) {
    if (cond == nullptr) throw ValueError("velocity: conditional model needs a condition");
    if (cond->frames() != frames) {
      throw ShapeError("velocity: condition has " + std::to_string(cond->frames()) +
                       " frames but xt has " + std::to_string(frames));
    }
    c = permute(reshape(cond->features, {1, frames, cond->channels()}), {0, 2, 1});
  }
  Tensor x = permute(reshape(xt, {1, frames, config_.decoder.mel_bins}), {0, 2, 1});
  Tensor v = decode(x, std::span<const double>(&t, 1), c, Tensor());
  return reshape(permute(v, {0, 2, 1}), {frames, config_.decoder.mel_bins});
}

Tensor VelocityModel::velocity_points(const Tensor& z, double t) const {
  if (z.ndim() != 2 || z.dim(1) != config_.decoder.mel_bins) {
    throw ShapeError("velocity_points: z " + shape_str(z.shape()) + " is not [N, " +
                     std::to_string(config_.decoder.mel_bins) + "]");
  }
  if (config_.decoder.condition_channels > 0) {
    throw ValueError("velocity_points needs an unconditional model");
  }
  const std::size_t n = z.dim(0);
  std::vector<double> ts(n, t);
  Tensor v = decode(reshape(z, {n, config_.decoder.mel_bins, 1}), ts, Tensor(), Tensor());
  return reshape(v, {n, config_.decoder.mel_bins});
}

std::size_t param_count(const VelocityModel& model) { return model.param_count(); }

}  // namespace rf
