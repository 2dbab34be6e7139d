#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include "reflowtts/checkpoint.h"
#include "reflowtts/config.h"
#include "reflowtts/error.h"

using namespace rf;
using nlohmann::json;

namespace {

RunConfig small_synth() {
  RunConfig c;
  c.channels = 6;
  c.n_blocks = 2;
  c.frontend_channels = 5;
  c.duration_channels = 4;
  c.encoder_layers = 1;
  c.zero_output_head = false;
  c.init_seed = 9;
  return c;
}

std::string usage_error(const json& j) {
  try {
    (void)RunConfig::from_json(j);
  } catch (const UsageError& e) {
    return e.what();
  }
  return "";
}

std::string format_error(const std::vector<std::uint8_t>& bytes) {
  try {
    (void)decode_checkpoint(bytes);
  } catch (const FormatError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("config json round trip") {
  RunConfig c = small_synth();
  c.lr = 2e-4;
  c.solver = SolverSpec::euler(50);
  c.reflow_fine_tune = true;
  const RunConfig back = RunConfig::from_json(json::parse(c.to_json().dump()));
  CHECK(back.to_json() == c.to_json());
  CHECK(config_differences(c, back).empty());
  CHECK(RunConfig::from_json(json::object()).to_json() == RunConfig{}.to_json());
}

TEST_CASE("config rejects unknown keys and wrong types") {
  CHECK(usage_error({{"chanels", 3}}).find("'chanels'") != std::string::npos);
  CHECK(usage_error({{"model", {{"widht", 3}}}}).find("'model.widht'") != std::string::npos);
  CHECK(usage_error({{"model", {{"channels", "64"}}}}).find("model.channels") !=
        std::string::npos);
  CHECK(usage_error({{"model", {{"channels", -1}}}}).find("wrong type") != std::string::npos);
  CHECK_FALSE(usage_error({{"optimizer", {{"lr", -1.0}}}}).empty());
  CHECK_FALSE(usage_error({{"task", "speech"}}).empty());
  CHECK_FALSE(usage_error({{"solver", {{"kind", "rk4"}}}}).empty());
  CHECK_FALSE(usage_error({{"optimizer", {{"iterations", 0}}}}).empty());
  CHECK_FALSE(usage_error({{"model", 3}}).empty());
  CHECK_THROWS_AS(RunConfig::load("/nonexistent/config.json"), IoError);
}

TEST_CASE("config differences name dotted keys") {
  const RunConfig a = small_synth();
  RunConfig b = a;
  b.lr = 5e-4;
  b.channels = 7;
  b.log_every = 100;
  b.checkpoint_every = 3;
  const auto diff = config_differences(a, b);
  CHECK(diff == std::vector<std::string>{"model.channels", "optimizer.lr"});
}

TEST_CASE("model config json round trip") {
  const ModelConfig m = small_synth().model_config(4, 6);
  const ModelConfig back = model_config_from_json(model_config_to_json(m));
  CHECK(model_config_to_json(back) == model_config_to_json(m));
  json broken = model_config_to_json(m);
  broken["decoder"]["condition_channels"] = 2;
  CHECK_THROWS_AS(model_config_from_json(broken), FormatError);
}

TEST_CASE("checkpoint round trip is exact") {
  const RunConfig run = small_synth();
  VelocityModel model(run.model_config(4, 6), run.init_seed);
  model.set_generation(3);
  const NormStats norm{{0.1f, 0.2f, 0.3f, 0.4f}, {1.0f, 2.0f, 3.0f, 4.0f}};
  const auto bytes = encode_checkpoint(run, model, norm, nullptr);
  const CheckpointContents c = decode_checkpoint(bytes);
  CHECK(c.model.generation() == 3);
  CHECK(c.norm.mean == norm.mean);
  CHECK(c.norm.std == norm.std);
  CHECK_FALSE(c.trainer.has_value());
  CHECK(c.config.to_json() == run.to_json());
  CHECK(c.manifest.size() == model.params().size());
  for (std::size_t i = 0; i < c.manifest.size(); ++i) {
    CHECK(c.manifest[i].name == model.params().entries()[i].first);
    CHECK(c.manifest[i].nbytes == 8 * c.model.params().entries()[i].second.numel());
  }

  const TokenSequence seq{{1, 5, 2}};
  const DurationPlan plan = DurationPlan::from({2, 1, 2});
  const ConditionGrid g1 = model.condition(seq, plan);
  const ConditionGrid g2 = c.model.condition(seq, plan);
  Rng rng(1);
  const Tensor x = Tensor::from({5, 4}, rng.normals(20));
  const Tensor v1 = model.velocity(x, 0.4, &g1);
  const Tensor v2 = c.model.velocity(x, 0.4, &g2);
  for (std::size_t i = 0; i < v1.numel(); ++i) CHECK(v1.data()[i] == v2.data()[i]);
  CHECK(encode_checkpoint(c.config, c.model, c.norm, nullptr) == bytes);
}

TEST_CASE("checkpoint corruption is reported") {
  const RunConfig run = small_synth();
  const VelocityModel model(run.model_config(4, 6), run.init_seed);
  const auto bytes = encode_checkpoint(run, model, NormStats{}, nullptr);
  for (std::size_t n = 0; n < bytes.size(); n += 97) {
    const std::vector<std::uint8_t> prefix(bytes.begin(), bytes.begin() + n);
    CHECK_THROWS_AS(decode_checkpoint(prefix), FormatError);
  }
  CHECK_THROWS_AS(
      decode_checkpoint(std::vector<std::uint8_t>(bytes.begin(), bytes.end() - 1)),
      FormatError);
  auto bad = bytes;
  bad[4] = 7;
  const std::string msg = format_error(bad);
  CHECK(msg.find("found 7") != std::string::npos);
  CHECK(msg.find("expected 1") != std::string::npos);
  bad = bytes;
  bad[1] = 'X';
  CHECK(format_error(bad).find("magic") != std::string::npos);
  auto longer = bytes;
  longer.push_back(0);
  CHECK_THROWS_AS(decode_checkpoint(longer), FormatError);
}

TEST_CASE("checkpoint files are written atomically") {
  const auto dir = std::filesystem::temp_directory_path() / "reflowtts_ckpt_test";
  std::filesystem::create_directories(dir);
  const std::string path = (dir / "model.rftt").string();
  const RunConfig run = small_synth();
  const VelocityModel model(run.model_config(4, 6), run.init_seed);
  save_checkpoint(path, run, model, NormStats{}, nullptr);
  CHECK(std::filesystem::exists(path));
  CHECK_FALSE(std::filesystem::exists(path + ".tmp"));
  CHECK(load_checkpoint(path).model.param_count() == model.param_count());
  CHECK_THROWS_AS(load_checkpoint((dir / "missing.rftt").string()), IoError);
  CHECK_THROWS_AS(save_checkpoint((dir / "no" / "such" / "dir.rftt").string(), run, model,
                                  NormStats{}, nullptr),
                  IoError);
  std::filesystem::remove_all(dir);
}
