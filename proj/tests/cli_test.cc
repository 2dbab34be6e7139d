#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "reflowtts/checkpoint.h"
#include "reflowtts/cli.h"
#include "reflowtts/data.h"
#include "reflowtts/metrics.h"

using namespace rf;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = 0;
  std::string out;
  std::string err;
};

Run cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  Run r;
  r.code = run_cli(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

class TempDir {
 public:
  explicit TempDir(const std::string& name)
      : path_(fs::temp_directory_path() / ("reflowtts_cli_" + name)) {
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  std::string operator/(const std::string& leaf) const { return (path_ / leaf).string(); }

 private:
  fs::path path_;
};

void write_file(const std::string& path, const std::string& text) {
  std::ofstream(path) << text;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const char* kToyConfig =
    R"({"task": "toy2d", "model": {"channels": 8, "n_blocks": 2},
        "optimizer": {"iterations": 20, "batch_size": 32},
        "checkpoint_every": 10, "log_every": 5})";

const char* kSynthConfig =
    R"({"task": "synth_tts",
        "model": {"channels": 8, "n_blocks": 1, "frontend_channels": 6,
                  "duration_channels": 6, "encoder_layers": 1},
        "optimizer": {"iterations": 6, "batch_size": 4},
        "solver": {"kind": "euler", "steps": 3}})";

}  // namespace

TEST_CASE("cli usage errors exit 2") {
  CHECK(cli({}).code == kExitUsage);
  CHECK(cli({"frobnicate"}).code == kExitUsage);
  CHECK(cli({"gen-data", "--task", "toy2d"}).code == kExitUsage);
  CHECK(cli({"gen-data", "--task", "speech", "--out", "/tmp/x.rfds"}).code == kExitUsage);
  CHECK(cli({"gen-data", "--task", "toy2d", "--n", "abc", "--out", "/tmp/x.rfds"}).code ==
        kExitUsage);
  CHECK(cli({"--help"}).code == kExitOk);
}

TEST_CASE("cli toy pipeline") {
  const TempDir dir("toy");
  write_file(dir / "cfg.json", kToyConfig);

  Run r = cli({"gen-data", "--task", "toy2d", "--n", "300", "--seed", "4", "--out",
               dir / "toy.rfds"});
  REQUIRE(r.code == kExitOk);
  CHECK(load_points(dir / "toy.rfds").size() == 300);

  r = cli({"train", "--config", dir / "cfg.json", "--data", dir / "toy.rfds", "--out",
           dir / "m.rftt"});
  REQUIRE_MESSAGE(r.code == kExitOk, r.err);
  const std::string log = read_file(dir / "m.rftt.log");
  CHECK(log.find("iter=5 loss=") == 0);
  CHECK(log.find("iter=20 loss=") != std::string::npos);
  CHECK(load_checkpoint(dir / "m.rftt").trainer->iteration == 20);

  r = cli({"sample", "--ckpt", dir / "m.rftt", "--solver", "euler", "--steps", "4", "--n",
           "50", "--out", dir / "s.rfds"});
  REQUIRE_MESSAGE(r.code == kExitOk, r.err);
  CHECK(load_points(dir / "s.rfds").size() == 50);
  CHECK(fs::exists(dir / "s.rfds.metrics.json"));

  r = cli({"eval", "--gen", dir / "s.rfds", "--ref", dir / "toy.rfds", "--out",
           dir / "report.json"});
  REQUIRE_MESSAGE(r.code == kExitOk, r.err);
  const EvalReport report = EvalReport::from_json(read_file(dir / "report.json"));
  CHECK(report.mean_nfe == 4.0);
  CHECK(report.fd >= 0.0);
  CHECK(r.out.find("fd=") == 0);

  // Too few generated points for a 2-D covariance.
  r = cli({"sample", "--ckpt", dir / "m.rftt", "--solver", "euler", "--steps", "1", "--n",
           "2", "--out", dir / "few.rfds"});
  REQUIRE(r.code == kExitOk);
  r = cli({"eval", "--gen", dir / "few.rfds", "--ref", dir / "toy.rfds", "--out",
           dir / "few.json"});
  CHECK(r.code == kExitMetric);
  CHECK(r.err.find("at least 3") != std::string::npos);

  r = cli({"reflow", "--ckpt", dir / "m.rftt", "--data", dir / "toy.rfds", "--pairs", "0",
           "--out", dir / "r.rftt"});
  CHECK(r.code == kExitUsage);

  r = cli({"reflow", "--ckpt", dir / "m.rftt", "--data", dir / "toy.rfds", "--pairs", "16",
           "--rtol", "1e-4", "--atol", "1e-4", "--straightness-paths", "4", "--out",
           dir / "r.rftt", "--couplings", dir / "c.rfds"});
  REQUIRE_MESSAGE(r.code == kExitOk, r.err);
  CHECK(load_checkpoint(dir / "r.rftt").model.generation() == 2);
  CHECK(load_coupling(dir / "c.rfds").pairs.size() == 16);
  CHECK(r.out.find("generation=2 pairs=16 failures=0") != std::string::npos);
  CHECK(r.out.find("straightness_before=") != std::string::npos);
}

TEST_CASE("cli resume") {
  const TempDir dir("resume");
  write_file(dir / "cfg.json", kToyConfig);
  REQUIRE(cli({"gen-data", "--task", "toy2d", "--n", "200", "--out", dir / "toy.rfds"}).code ==
          kExitOk);
  REQUIRE(cli({"train", "--config", dir / "cfg.json", "--data", dir / "toy.rfds", "--out",
               dir / "full.rftt"})
              .code == kExitOk);
  REQUIRE(cli({"train", "--config", dir / "cfg.json", "--data", dir / "toy.rfds", "--out",
               dir / "half.rftt", "--until", "10"})
              .code == kExitOk);
  REQUIRE(cli({"train", "--config", dir / "cfg.json", "--data", dir / "toy.rfds", "--out",
               dir / "resumed.rftt", "--resume", dir / "half.rftt"})
              .code == kExitOk);
  const CheckpointContents a = load_checkpoint(dir / "full.rftt");
  const CheckpointContents b = load_checkpoint(dir / "resumed.rftt");
  for (std::size_t i = 0; i < a.model.params().size(); ++i) {
    const auto& x = a.model.params().entries()[i].second.data();
    const auto& y = b.model.params().entries()[i].second.data();
    CHECK(std::equal(x.begin(), x.end(), y.begin()));
  }

  write_file(dir / "other.json",
             R"({"task": "toy2d", "model": {"channels": 8, "n_blocks": 2},
                 "optimizer": {"iterations": 20, "batch_size": 64, "lr": 0.002}})");
  const Run r = cli({"train", "--config", dir / "other.json", "--data", dir / "toy.rfds",
                     "--out", dir / "bad.rftt", "--resume", dir / "half.rftt"});
  CHECK(r.code == kExitUsage);
  CHECK(r.err.find("optimizer.batch_size") != std::string::npos);
  CHECK(r.err.find("optimizer.lr") != std::string::npos);
}

TEST_CASE("cli io, format and solver failures") {
  const TempDir dir("errors");
  Run r = cli({"train", "--data", dir / "missing.rfds", "--out", dir / "m.rftt"});
  CHECK(r.code == kExitIo);
  write_file(dir / "junk.rfds", "not a dataset");
  r = cli({"train", "--data", dir / "junk.rfds", "--out", dir / "m.rftt"});
  CHECK(r.code == kExitIo);
  CHECK(r.err.find("magic") != std::string::npos);
  write_file(dir / "bad.json", R"({"optimizer": {"learning_rate": 1}})");
  r = cli({"train", "--config", dir / "bad.json", "--out", dir / "m.rftt"});
  CHECK(r.code == kExitUsage);
  CHECK(r.err.find("optimizer.learning_rate") != std::string::npos);

  // A toy corpus handed to a synth_tts run.
  REQUIRE(cli({"gen-data", "--task", "toy2d", "--n", "64", "--out", dir / "toy.rfds"}).code ==
          kExitOk);
  r = cli({"train", "--data", dir / "toy.rfds", "--out", dir / "m.rftt"});
  CHECK(r.code == kExitUsage);

  write_file(dir / "cfg.json",
             R"({"task": "toy2d", "model": {"channels": 4, "n_blocks": 1,
                 "zero_output_head": false},
                 "optimizer": {"iterations": 1, "batch_size": 8},
                 "solver": {"kind": "rk45", "rtol": 1e-12, "atol": 1e-14, "max_steps": 2}})");
  REQUIRE(cli({"train", "--config", dir / "cfg.json", "--data", dir / "toy.rfds", "--out",
               dir / "m.rftt"})
              .code == kExitOk);
  r = cli({"sample", "--ckpt", dir / "m.rftt", "--n", "8", "--out", dir / "s.rfds"});
  CHECK(r.code == kExitSolver);
}

TEST_CASE("cli synth pipeline") {
  const TempDir dir("synth");
  write_file(dir / "cfg.json", kSynthConfig);
  Run r = cli({"gen-data", "--task", "synth_tts", "--vocab", "6", "--mel-bins", "4",
               "--n-train", "12", "--n-val", "1", "--n-test", "3", "--seed", "2", "--out",
               dir / "c.rfds"});
  REQUIRE_MESSAGE(r.code == kExitOk, r.err);
  CHECK(r.out.find("norm.mean=") != std::string::npos);

  r = cli({"train", "--config", dir / "cfg.json", "--data", dir / "c.rfds", "--out",
           dir / "m.rftt"});
  REQUIRE_MESSAGE(r.code == kExitOk, r.err);

  r = cli({"sample", "--ckpt", dir / "m.rftt", "--data", dir / "c.rfds", "--out",
           dir / "s.rfds"});
  REQUIRE_MESSAGE(r.code == kExitOk, r.err);
  const SynthCorpus gen = load_corpus(dir / "s.rfds");
  const SynthCorpus ref = load_corpus(dir / "c.rfds");
  REQUIRE(gen.utterances.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    const Utterance& want = *ref.split(Split::kTest)[i];
    CHECK(gen.utterances[i].id == want.id);
    CHECK(gen.utterances[i].frames() == want.frames());
  }

  r = cli({"eval", "--gen", dir / "s.rfds", "--ref", dir / "c.rfds", "--oracle",
           dir / "c.rfds", "--out", dir / "report.json"});
  REQUIRE_MESSAGE(r.code == kExitOk, r.err);
  const EvalReport report = EvalReport::from_json(read_file(dir / "report.json"));
  CHECK(report.mse_oracle.has_value());
  CHECK(report.mean_nfe == 3.0);
  CHECK(report.config.at("mse_units") == "normalized");

  r = cli({"sample", "--ckpt", dir / "m.rftt", "--out", dir / "s2.rfds"});
  CHECK(r.code == kExitUsage);
}

TEST_CASE("installed binary maps errors to exit codes") {
  const std::string bin = REFLOWTTS_CLI;
  const auto status = [&](const std::string& args) {
    const int s = std::system((bin + " " + args + " >/dev/null 2>&1").c_str());
    return WEXITSTATUS(s);
  };
  CHECK(status("--help") == 0);
  CHECK(status("nonsense") == 2);
  CHECK(status("sample --ckpt /nonexistent.rftt --out /tmp/x.rfds") == 3);
}
