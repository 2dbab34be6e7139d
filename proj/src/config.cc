#include "reflowtts/config.h"

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "reflowtts/error.h"

namespace rf {

namespace {

using json = nlohmann::json;

// Walks one JSON object, handing known keys to setters and rejecting the
// rest.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw UsageError("config: '" + display() + "' must be an object");
    for (const auto& [key, value] : j_.items()) unknown_.insert(key);
  }

  template <typename T>
  void read(const char* key, T& out) {
    if (!j_.contains(key)) return;
    unknown_.erase(key);
    const json& v = j_.at(key);
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw UsageError("");
      } else if constexpr (std::is_unsigned_v<T>) {
        if (!v.is_number_unsigned()) throw UsageError("");
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw UsageError("");
      } else {
        if (!v.is_string()) throw UsageError("");
      }
      out = v.get<T>();
    } catch (const std::exception&) {
      throw UsageError("config: key '" + name(key) + "' has the wrong type (" +
                       std::string(v.type_name()) + ")");
    }
  }

  const json* child(const char* key) {
    if (!j_.contains(key)) return nullptr;
    unknown_.erase(key);
    return &j_.at(key);
  }

  std::string name(const std::string& key) const {
    return path_.empty() ? key : path_ + "." + key;
  }

  void finish() const {
    if (!unknown_.empty()) {
      throw UsageError("config: unknown key '" + name(*unknown_.begin()) + "'");
    }
  }

 private:
  std::string display() const { return path_.empty() ? "<root>" : path_; }
  const json& j_;
  std::string path_;
  std::set<std::string> unknown_;
};

SolverKind parse_solver_kind(const std::string& s) {
  if (s == "euler") return SolverKind::kEuler;
  if (s == "rk45") return SolverKind::kRk45;
  throw UsageError("config: solver.kind must be 'euler' or 'rk45', got '" + s + "'");
}

void flatten(const json& j, const std::string& prefix,
             std::vector<std::pair<std::string, json>>& out) {
  if (j.is_object()) {
    for (const auto& [k, v] : j.items()) {
      flatten(v, prefix.empty() ? k : prefix + "." + k, out);
    }
  } else {
    out.emplace_back(prefix, j);
  }
}

}  // namespace

Task parse_task(const std::string& name) {
  if (name == "toy2d") return Task::kToy2d;
  if (name == "synth_tts") return Task::kSynthTts;
  throw UsageError("unknown task '" + name + "' (expected toy2d or synth_tts)");
}

std::string task_name(Task task) {
  return task == Task::kToy2d ? "toy2d" : "synth_tts";
}

void RunConfig::validate() const {
  try {
    train_config().validate();
    model_config(2, 2).validate();
    solver.validate();
  } catch (const ValueError& e) {
    throw UsageError(std::string("config: ") + e.what());
  }
  if (iterations < 1) throw UsageError("config: optimizer.iterations must be >= 1");
  if (checkpoint_every < 1) throw UsageError("config: checkpoint_every must be >= 1");
  if (log_every < 1) throw UsageError("config: log_every must be >= 1");
}

ModelConfig RunConfig::model_config(std::size_t mel_bins, std::size_t vocab_size) const {
  ModelConfig m;
  m.conditional = task == Task::kSynthTts;
  m.decoder.channels = channels;
  m.decoder.n_blocks = n_blocks;
  m.decoder.kernel_size = kernel_size;
  m.decoder.zero_output_head = zero_output_head;
  m.decoder.mel_bins = mel_bins;
  if (m.conditional) {
    m.frontend.vocab_size = vocab_size;
    m.frontend.channels = frontend_channels;
    m.frontend.encoder_layers = encoder_layers;
    m.frontend.duration_channels = duration_channels;
    m.frontend.max_tokens = max_tokens;
    m.frontend.kernel_size = kernel_size;
    m.decoder.condition_channels = frontend_channels;
  }
  return m;
}

TrainConfig RunConfig::train_config() const {
  TrainConfig t;
  t.adam.lr = lr;
  t.adam.beta1 = beta1;
  t.adam.beta2 = beta2;
  t.adam.eps = eps;
  t.batch_size = batch_size;
  t.iterations = iterations;
  t.lr_min = lr_min;
  t.warmup = warmup;
  t.duration_weight = duration_weight;
  t.seed = seed;
  return t;
}

nlohmann::ordered_json RunConfig::to_json() const {
  nlohmann::ordered_json j;
  j["task"] = task_name(task);
  j["model"] = {{"channels", channels},
                {"n_blocks", n_blocks},
                {"kernel_size", kernel_size},
                {"zero_output_head", zero_output_head},
                {"frontend_channels", frontend_channels},
                {"encoder_layers", encoder_layers},
                {"duration_channels", duration_channels},
                {"max_tokens", max_tokens}};
  j["optimizer"] = {{"lr", lr},
                    {"lr_min", lr_min},
                    {"beta1", beta1},
                    {"beta2", beta2},
                    {"eps", eps},
                    {"batch_size", batch_size},
                    {"iterations", iterations},
                    {"warmup", warmup},
                    {"duration_weight", duration_weight}};
  j["solver"] = {{"kind", solver.kind == SolverKind::kEuler ? "euler" : "rk45"},
                 {"steps", solver.steps},
                 {"rtol", solver.rtol},
                 {"atol", solver.atol},
                 {"max_steps", solver.max_steps},
                 {"initial_step", solver.initial_step}};
  j["seed"] = seed;
  j["init_seed"] = init_seed;
  j["checkpoint_every"] = checkpoint_every;
  j["log_every"] = log_every;
  j["reflow"] = {{"fine_tune", reflow_fine_tune},
                 {"freeze_frontend", reflow_freeze_frontend}};
  j["data"] = data;
  return j;
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  RunConfig c;
  Section root(j, "");
  std::string task = task_name(c.task);
  root.read("task", task);
  c.task = parse_task(task);
  if (const json* m = root.child("model")) {
    Section s(*m, "model");
    s.read("channels", c.channels);
    s.read("n_blocks", c.n_blocks);
    s.read("kernel_size", c.kernel_size);
    s.read("zero_output_head", c.zero_output_head);
    s.read("frontend_channels", c.frontend_channels);
    s.read("encoder_layers", c.encoder_layers);
    s.read("duration_channels", c.duration_channels);
    s.read("max_tokens", c.max_tokens);
    s.finish();
  }
  if (const json* o = root.child("optimizer")) {
    Section s(*o, "optimizer");
    s.read("lr", c.lr);
    s.read("lr_min", c.lr_min);
    s.read("beta1", c.beta1);
    s.read("beta2", c.beta2);
    s.read("eps", c.eps);
    s.read("batch_size", c.batch_size);
    s.read("iterations", c.iterations);
    s.read("warmup", c.warmup);
    s.read("duration_weight", c.duration_weight);
    s.finish();
  }
  if (const json* o = root.child("solver")) {
    Section s(*o, "solver");
    std::string kind = c.solver.kind == SolverKind::kEuler ? "euler" : "rk45";
    s.read("kind", kind);
    c.solver.kind = parse_solver_kind(kind);
    s.read("steps", c.solver.steps);
    s.read("rtol", c.solver.rtol);
    s.read("atol", c.solver.atol);
    s.read("max_steps", c.solver.max_steps);
    s.read("initial_step", c.solver.initial_step);
    s.finish();
  }
  root.read("seed", c.seed);
  root.read("init_seed", c.init_seed);
  root.read("checkpoint_every", c.checkpoint_every);
  root.read("log_every", c.log_every);
  if (const json* r = root.child("reflow")) {
    Section s(*r, "reflow");
    s.read("fine_tune", c.reflow_fine_tune);
    s.read("freeze_frontend", c.reflow_freeze_frontend);
    s.finish();
  }
  root.read("data", c.data);
  root.finish();
  c.validate();
  return c;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  json j;
  try {
    j = json::parse(ss.str());
  } catch (const json::parse_error& e) {
    throw UsageError("config " + path + " is not valid JSON: " + e.what());
  }
  RunConfig c = from_json(j);
  if (!c.data.empty() && !std::filesystem::exists(c.data)) {
    throw UsageError("config: data path '" + c.data + "' does not exist");
  }
  return c;
}

std::vector<std::string> config_differences(const RunConfig& a, const RunConfig& b) {
  static const std::set<std::string> kIgnored = {"log_every", "checkpoint_every", "data"};
  std::vector<std::pair<std::string, json>> fa, fb;
  flatten(json(a.to_json()), "", fa);
  flatten(json(b.to_json()), "", fb);
  std::vector<std::string> diff;
  for (std::size_t i = 0; i < fa.size(); ++i) {
    if (kIgnored.count(fa[i].first)) continue;
    if (fa[i].second != fb[i].second) diff.push_back(fa[i].first);
  }
  return diff;
}

nlohmann::ordered_json model_config_to_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["conditional"] = c.conditional;
  j["frontend"] = {{"vocab_size", c.frontend.vocab_size},
                   {"max_tokens", c.frontend.max_tokens},
                   {"channels", c.frontend.channels},
                   {"encoder_layers", c.frontend.encoder_layers},
                   {"duration_channels", c.frontend.duration_channels},
                   {"kernel_size", c.frontend.kernel_size}};
  j["decoder"] = {{"n_blocks", c.decoder.n_blocks},
                  {"channels", c.decoder.channels},
                  {"mel_bins", c.decoder.mel_bins},
                  {"condition_channels", c.decoder.condition_channels},
                  {"kernel_size", c.decoder.kernel_size},
                  {"zero_output_head", c.decoder.zero_output_head}};
  return j;
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.conditional = j.at("conditional").get<bool>();
    const json& f = j.at("frontend");
    c.frontend.vocab_size = f.at("vocab_size").get<std::size_t>();
    c.frontend.max_tokens = f.at("max_tokens").get<std::size_t>();
    c.frontend.channels = f.at("channels").get<std::size_t>();
    c.frontend.encoder_layers = f.at("encoder_layers").get<std::size_t>();
    c.frontend.duration_channels = f.at("duration_channels").get<std::size_t>();
    c.frontend.kernel_size = f.at("kernel_size").get<std::size_t>();
    const json& d = j.at("decoder");
    c.decoder.n_blocks = d.at("n_blocks").get<std::size_t>();
    c.decoder.channels = d.at("channels").get<std::size_t>();
    c.decoder.mel_bins = d.at("mel_bins").get<std::size_t>();
    c.decoder.condition_channels = d.at("condition_channels").get<std::size_t>();
    c.decoder.kernel_size = d.at("kernel_size").get<std::size_t>();
    c.decoder.zero_output_head = d.at("zero_output_head").get<bool>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("model config is malformed: ") + e.what());
  }
  try {
    c.validate();
  } catch (const ValueError& e) {
    throw FormatError(std::string("model config is invalid: ") + e.what());
  }
  return c;
}

}  // namespace rf
