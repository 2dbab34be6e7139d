#include "reflowtts/cli.h"

#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>

#include "reflowtts/checkpoint.h"
#include "reflowtts/config.h"
#include "reflowtts/data.h"
#include "reflowtts/error.h"
#include "reflowtts/metrics.h"
#include "reflowtts/ode.h"
#include "reflowtts/reflow.h"
#include "reflowtts/training.h"

namespace rf {

namespace {

using json = nlohmann::ordered_json;

constexpr double kMaxFailureRate = 0.10;

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

std::string join(const std::vector<std::string>& parts, const char* sep) {
  std::string s;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) s += sep;
    s += parts[i];
  }
  return s;
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "test") return Split::kTest;
  throw UsageError("unknown split '" + s + "' (expected train, val or test)");
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f << text;
  if (!f) throw IoError("error while writing " + path);
}

std::string read_text(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open " + path + " for reading");
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// Re-throws the in-flight library error with `stage` prepended, keeping its
// type so the exit code is preserved.
[[noreturn]] void rethrow_in_stage(const std::string& stage) {
  const std::string p = stage + ": ";
  try {
    throw;
  } catch (const UsageError& e) {
    throw UsageError(p + e.what());
  } catch (const ShapeError& e) {
    throw ShapeError(p + e.what());
  } catch (const NumericError& e) {
    throw NumericError(p + e.what());
  } catch (const ValueError& e) {
    throw ValueError(p + e.what());
  } catch (const IoError& e) {
    throw IoError(p + e.what());
  } catch (const FormatError& e) {
    throw FormatError(p + e.what());
  } catch (const SolverError& e) {
    throw SolverError(p + e.what());
  } catch (const MetricPreconditionError& e) {
    throw MetricPreconditionError(p + e.what());
  } catch (const Error& e) {
    throw Error(p + e.what());
  }
}

template <typename Fn>
auto in_stage(const std::string& stage, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const Error&) {
    rethrow_in_stage(stage);
  }
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const UsageError*>(&e) || dynamic_cast<const ValueError*>(&e) ||
      dynamic_cast<const ShapeError*>(&e)) {
    return kExitUsage;
  }
  if (dynamic_cast<const IoError*>(&e) || dynamic_cast<const FormatError*>(&e)) return kExitIo;
  if (dynamic_cast<const SolverError*>(&e)) return kExitSolver;
  if (dynamic_cast<const MetricPreconditionError*>(&e)) return kExitMetric;
  return kExitInternal;
}

// ---- gen-data ---------------------------------------------------------------------

struct GenDataArgs {
  std::string task = "synth_tts";
  std::uint64_t seed = 0;
  std::string out;
  std::string kind = "eight_gaussians";
  std::size_t n = 4096;
  double scale = 2.0;
  CorpusSpec corpus;
};

void cmd_gen_data(const GenDataArgs& a, std::ostream& out) {
  const Task task = parse_task(a.task);
  if (task == Task::kToy2d) {
    ToySpec spec;
    spec.kind = parse_toy_kind(a.kind);
    spec.n = a.n;
    spec.seed = a.seed;
    spec.scale = a.scale;
    const PointSet points = gen_toy(spec);
    save_points(a.out, points, a.seed);
    out << "task=toy2d kind=" << toy_kind_name(spec.kind) << " n=" << points.size()
        << " dim=" << points.dim << " seed=" << a.seed << " scale=" << fmt(a.scale) << '\n';
    return;
  }
  CorpusSpec spec = a.corpus;
  spec.seed = a.seed;
  const SynthCorpus corpus = gen_corpus(spec);
  save_corpus(a.out, corpus);
  std::size_t frames = 0;
  for (const auto& u : corpus.utterances) frames += u.frames();
  out << "task=synth_tts utterances=" << corpus.utterances.size()
      << " train=" << corpus.count(Split::kTrain) << " val=" << corpus.count(Split::kVal)
      << " test=" << corpus.count(Split::kTest) << " vocab=" << corpus.vocab_size
      << " mel_bins=" << corpus.mel_bins << " frames=" << frames << " seed=" << a.seed << '\n';
  std::vector<std::string> m, s;
  for (float v : corpus.norm.mean) m.push_back(fmt(v));
  for (float v : corpus.norm.std) s.push_back(fmt(v));
  out << "norm.mean=" << join(m, ",") << '\n' << "norm.std=" << join(s, ",") << '\n';
}

// ---- train ------------------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::string data;
  std::string out;
  std::string resume;
  std::string log;
  std::size_t until = 0;  // 0: run to config iterations
};

struct LoadedData {
  TrainingSet set;
  NormStats norm;
  std::size_t mel_bins = 0;
  std::size_t vocab = 0;
};

LoadedData load_training_data(const std::string& path, Task task) {
  const DatasetKind kind = dataset_kind(path);
  LoadedData d;
  if (task == Task::kSynthTts) {
    if (kind != DatasetKind::kCorpus) {
      throw UsageError("task synth_tts needs a corpus dataset, " + path + " holds another kind");
    }
    const SynthCorpus corpus = load_corpus(path);
    d.set = training_set_from_corpus(corpus, Split::kTrain);
    d.norm = corpus.norm;
    d.mel_bins = corpus.mel_bins;
    d.vocab = corpus.vocab_size;
  } else {
    if (kind != DatasetKind::kPoints) {
      throw UsageError("task toy2d needs a point dataset, " + path + " holds another kind");
    }
    const PointSet points = load_points(path);
    d.set = training_set_from_points(points);
    d.mel_bins = points.dim;
  }
  return d;
}

void cmd_train(const TrainArgs& a, std::ostream& out) {
  const RunConfig config = a.config.empty() ? RunConfig{} : RunConfig::load(a.config);
  const std::string data_path = a.data.empty() ? config.data : a.data;
  if (data_path.empty()) throw UsageError("train needs --data (or a data path in the config)");
  const LoadedData data = in_stage("data", [&] { return load_training_data(data_path, config.task); });

  std::optional<CheckpointContents> resumed;
  if (!a.resume.empty()) {
    resumed.emplace(load_checkpoint(a.resume));
    const auto diff = config_differences(resumed->config, config);
    if (!diff.empty()) {
      throw UsageError("resume config mismatch; differing keys: " + join(diff, ", "));
    }
    if (!resumed->trainer) throw UsageError("checkpoint " + a.resume + " has no trainer state");
    if (resumed->model.config().decoder.mel_bins != data.mel_bins) {
      throw UsageError("checkpoint mel_bins differ from the data");
    }
  }
  VelocityModel model = resumed ? std::move(resumed->model)
                                : VelocityModel(config.model_config(data.mel_bins, data.vocab),
                                                config.init_seed);
  Trainer trainer(model, config.train_config());
  if (resumed) trainer.load_state(*resumed->trainer);

  const std::string log_path = a.log.empty() ? a.out + ".log" : a.log;
  std::ofstream log(log_path, std::ios::app);
  if (!log) throw IoError("cannot open training log " + log_path);

  const std::size_t stop = a.until ? std::min(a.until, config.iterations) : config.iterations;
  TrainStep last;
  while (trainer.iteration() < stop) {
    last = trainer.step(data.set);
    if (last.iter % config.log_every == 0 || last.iter == stop) {
      log << format_log_line(last) << '\n';
    }
    if (last.iter % config.checkpoint_every == 0 && last.iter != stop) {
      log.flush();
      const TrainerState st = trainer.state();
      save_checkpoint(a.out, config, model, data.norm, &st);
    }
  }
  log.flush();
  if (!log) throw IoError("error while writing " + log_path);
  const TrainerState st = trainer.state();
  save_checkpoint(a.out, config, model, data.norm, &st);
  out << "trained iter=" << trainer.iteration() << " params=" << model.param_count();
  if (last.iter) out << " loss=" << fmt(last.loss);
  out << " checkpoint=" << a.out << '\n';
}

// ---- sample -----------------------------------------------------------------------

struct SampleArgs {
  std::string ckpt;
  std::string solver;  // empty: checkpoint default
  std::size_t steps = 0;
  double rtol = 0.0;
  double atol = 0.0;
  std::size_t n = 0;  // 0: split size (synth) or 4096 (toy)
  std::uint64_t seed = 0;
  std::string out;
  std::string data;
  std::string split = "test";
  std::string durations = "oracle";
  std::size_t batch = 1;
};

SolverSpec solver_from_args(const SolverSpec& base, const std::string& kind,
                            std::size_t steps, double rtol, double atol) {
  SolverSpec spec = base;
  if (!kind.empty()) {
    if (kind == "euler") {
      spec.kind = SolverKind::kEuler;
    } else if (kind == "rk45") {
      spec.kind = SolverKind::kRk45;
    } else {
      throw UsageError("--solver must be euler or rk45, got '" + kind + "'");
    }
  }
  if (steps) spec.steps = steps;
  if (rtol > 0) spec.rtol = rtol;
  if (atol > 0) spec.atol = atol;
  try {
    spec.validate();
  } catch (const ValueError& e) {
    throw UsageError(e.what());
  }
  return spec;
}

struct SampleStat {
  std::size_t index = 0;
  std::size_t nfe = 0;
  double wall = 0.0;
  std::size_t frames = 0;
};

void write_sample_metrics(const std::string& path, const SolverSpec& spec, std::size_t requested,
                          std::size_t failures, const std::vector<SampleStat>& stats) {
  json j;
  j["solver"] = spec.label();
  j["steps"] = spec.steps;
  j["rtol"] = spec.rtol;
  j["atol"] = spec.atol;
  j["requested"] = requested;
  j["failures"] = failures;
  double nfe = 0.0, r = 0.0, wall = 0.0;
  json samples = json::array();
  for (const auto& s : stats) {
    const double x = rtf(std::max(s.wall, 1e-9), s.frames);
    nfe += static_cast<double>(s.nfe);
    r += x;
    wall += s.wall;
    samples.push_back({{"index", s.index}, {"nfe", s.nfe}, {"frames", s.frames},
                       {"wall", s.wall}, {"rtf", x}});
  }
  const double n = stats.empty() ? 1.0 : static_cast<double>(stats.size());
  j["mean_nfe"] = nfe / n;
  j["mean_rtf"] = r / n;
  j["total_wall"] = wall;
  j["samples"] = std::move(samples);
  write_text(path, j.dump(2) + "\n");
}

void check_failure_rate(std::size_t failures, std::size_t requested) {
  if (static_cast<double>(failures) > kMaxFailureRate * static_cast<double>(requested)) {
    throw SolverError(std::to_string(failures) + " of " + std::to_string(requested) +
                      " samples failed to integrate (limit 10%)");
  }
}

void cmd_sample(const SampleArgs& a, std::ostream& out) {
  CheckpointContents ck = load_checkpoint(a.ckpt);
  const VelocityModel& model = ck.model;
  const SolverSpec spec = solver_from_args(ck.config.solver, a.solver, a.steps, a.rtol, a.atol);
  if (a.batch < 1) throw UsageError("--batch must be >= 1");
  const std::size_t bins = model.config().decoder.mel_bins;
  std::vector<SampleStat> stats;
  std::size_t failures = 0;
  std::size_t requested = 0;

  if (!model.config().conditional) {
    requested = a.n ? a.n : 4096;
    PointSet points;
    points.dim = bins;
    for (std::size_t start = 0; start < requested; start += a.batch) {
      const std::size_t count = std::min(a.batch, requested - start);
      std::vector<double> z0;
      for (std::size_t i = start; i < start + count; ++i) {
        Rng rng(derive_seed(a.seed, i));
        const auto v = rng.normals(bins);
        z0.insert(z0.end(), v.begin(), v.end());
      }
      try {
        const SolveResult r = solve(spec, model, nullptr, Tensor::from({count, bins}, z0));
        points.values.insert(points.values.end(), r.z1.data().begin(), r.z1.data().end());
        for (std::size_t i = start; i < start + count; ++i) {
          stats.push_back({i, r.nfe, r.wall_time / static_cast<double>(count), 1});
        }
      } catch (const SolverError&) {
        failures += count;
      }
    }
    check_failure_rate(failures, requested);
    save_points(a.out, points, a.seed);
  } else {
    if (a.data.empty()) throw UsageError("sampling a synth_tts checkpoint needs --data (corpus)");
    const SynthCorpus corpus = load_corpus(a.data);
    const auto conds = conditions_from_corpus(corpus, parse_split(a.split));
    if (conds.empty()) throw UsageError("split '" + a.split + "' holds no utterances");
    const bool predicted = a.durations == "predicted";
    if (!predicted && a.durations != "oracle") {
      throw UsageError("--durations must be oracle or predicted");
    }
    requested = a.n ? a.n : conds.size();
    SynthCorpus gen;
    gen.vocab_size = model.config().frontend.vocab_size;
    gen.mel_bins = bins;
    gen.seed = a.seed;
    gen.norm = ck.norm;
    const auto ids_split = corpus.split(parse_split(a.split));
    for (std::size_t i = 0; i < requested; ++i) {
      const FlowCondition& c = conds[i % conds.size()];
      NoGradGuard guard;
      const auto start = std::chrono::steady_clock::now();
      ConditionGrid grid;
      DurationPlan plan = c.plan;
      if (predicted) {
        const Frontend fe = model.frontend();
        const Tensor hidden = fe.encode_tokens(c.tokens);
        plan = plan_from_log_durations(fe.predict_durations(hidden).data());
        grid = length_regulate(hidden, plan);
      } else {
        grid = model.condition(c.tokens, plan);
      }
      Rng rng(derive_seed(a.seed, i));
      try {
        const SolveResult r = solve(spec, model, &grid, rng);
        const double wall =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        Utterance u;
        u.id = c.ref;
        u.split = ids_split[i % ids_split.size()]->split;
        u.tokens = c.tokens;
        u.plan = plan;
        const auto mel = ck.norm.mean.empty()
                             ? std::vector<double>(r.z1.data().begin(), r.z1.data().end())
                             : denormalize_mel(r.z1.data(), ck.norm);
        u.mel.assign(mel.begin(), mel.end());
        gen.utterances.push_back(std::move(u));
        stats.push_back({i, r.nfe, wall, plan.total_frames});
      } catch (const SolverError&) {
        ++failures;
      }
    }
    check_failure_rate(failures, requested);
    save_corpus(a.out, gen);
  }
  write_sample_metrics(a.out + ".metrics.json", spec, requested, failures, stats);
  double nfe = 0.0;
  for (const auto& s : stats) nfe += static_cast<double>(s.nfe);
  out << "samples=" << stats.size() << " failures=" << failures << " solver=" << spec.label()
      << " mean_nfe=" << fmt(stats.empty() ? 0.0 : nfe / static_cast<double>(stats.size()))
      << " out=" << a.out << '\n';
}

// ---- reflow -----------------------------------------------------------------------

struct ReflowArgs {
  std::string ckpt;
  std::string data;
  std::string out;
  std::string config;
  std::string couplings;
  std::string log;
  std::optional<std::size_t> pairs;
  std::uint64_t seed = 1;
  double rtol = 1e-6;
  double atol = 1e-9;
  bool fine_tune = false;
  bool freeze_frontend = false;
  std::size_t straightness_paths = 64;
  std::size_t straightness_points = 16;
  std::size_t batch = 1;
};

void cmd_reflow(const ReflowArgs& a, std::ostream& out) {
  if (a.pairs && *a.pairs == 0) throw UsageError("--pairs must be >= 1");
  if (a.batch < 1) throw UsageError("--batch must be >= 1");
  CheckpointContents ck = in_stage("load", [&] { return load_checkpoint(a.ckpt); });
  RunConfig config = a.config.empty() ? ck.config : RunConfig::load(a.config);
  const LoadedData data = in_stage("data", [&] { return load_training_data(a.data, ck.config.task); });
  std::vector<FlowCondition> train_conds, held_conds;
  if (ck.model.config().conditional) {
    const SynthCorpus corpus = load_corpus(a.data);
    train_conds = conditions_from_corpus(corpus, Split::kTrain);
    held_conds = conditions_from_corpus(corpus, Split::kTest);
    if (held_conds.empty()) held_conds = train_conds;
  }
  const std::size_t pairs = a.pairs ? *a.pairs : data.set.items.size();
  SolverSpec coupling_spec = SolverSpec::rk45(a.rtol, a.atol);
  try {
    coupling_spec.validate();
  } catch (const ValueError& e) {
    throw UsageError(e.what());
  }

  CouplingReport report = in_stage("coupling", [&] {
    return generate_coupling(ck.model, train_conds, pairs, coupling_spec, a.seed, a.batch);
  });
  report.set.norm = ck.norm;
  if (!a.couplings.empty()) save_coupling(a.couplings, report.set);

  const std::uint64_t probe_seed = derive_seed(a.seed, 0x5354524149474854ull);
  const StraightnessReport before = in_stage("straightness", [&] {
    return straightness(ck.model, held_conds, a.straightness_paths, a.straightness_points,
                        ck.config.solver, probe_seed);
  });

  ReflowOptions opts;
  opts.train = config.train_config();
  opts.fine_tune = a.fine_tune || config.reflow_fine_tune;
  opts.freeze_frontend = a.freeze_frontend || config.reflow_freeze_frontend;
  opts.init_seed = derive_seed(config.init_seed, report.set.generation);
  const std::string log_path = a.log.empty() ? a.out + ".log" : a.log;
  std::ofstream log(log_path, std::ios::app);
  if (!log) throw IoError("cannot open training log " + log_path);
  VelocityModel next = in_stage("retrain", [&] {
    return reflow_round(ck.model, report.set, opts, [&](const TrainStep& s) {
      if (s.iter % config.log_every == 0 || s.iter == opts.train.iterations) {
        log << format_log_line(s) << '\n';
      }
    });
  });
  log.flush();

  const StraightnessReport after = in_stage("straightness", [&] {
    return straightness(next, held_conds, a.straightness_paths, a.straightness_points,
                        ck.config.solver, probe_seed);
  });
  save_checkpoint(a.out, config, next, ck.norm, nullptr);
  out << "generation=" << next.generation() << " pairs=" << report.set.pairs.size()
      << " failures=" << report.failures << " failure_rate=" << fmt(report.failure_rate())
      << '\n'
      << "straightness_before=" << fmt(before.value) << " straightness_after=" << fmt(after.value)
      << '\n';
  auto per_t = [](const StraightnessReport& r) {
    std::vector<std::string> v;
    for (double x : r.per_t) v.push_back(fmt(x));
    return join(v, ",");
  };
  out << "straightness_before_per_t=" << per_t(before) << '\n'
      << "straightness_after_per_t=" << per_t(after) << '\n';
}

// ---- eval -------------------------------------------------------------------------

struct EvalArgs {
  std::string gen;
  std::string ref;
  std::string oracle;
  std::string out;
  std::string split = "test";
  std::string gen_metrics;
  bool no_regularize = false;
};

FeatureSet features_of(const std::string& path, const std::optional<Split>& split,
                       const std::string& label) {
  const DatasetKind kind = dataset_kind(path);
  if (kind == DatasetKind::kPoints) {
    const PointSet p = load_points(path);
    return FeatureSet::from(p.dim, {p.values.begin(), p.values.end()}, label);
  }
  if (kind != DatasetKind::kCorpus) {
    throw UsageError(path + " is not a point set or mel corpus");
  }
  const SynthCorpus c = load_corpus(path);
  std::vector<double> values;
  for (const auto& u : c.utterances) {
    if (split && u.split != *split) continue;
    values.insert(values.end(), u.mel.begin(), u.mel.end());
  }
  return FeatureSet::from(c.mel_bins, std::move(values), label);
}

void cmd_eval(const EvalArgs& a, std::ostream& out) {
  const bool gen_is_corpus = dataset_kind(a.gen) == DatasetKind::kCorpus;
  const bool ref_is_corpus = dataset_kind(a.ref) == DatasetKind::kCorpus;
  if (gen_is_corpus != ref_is_corpus) {
    throw UsageError("--gen and --ref must both be point sets or both be mel corpora");
  }
  const FeatureSet gen = features_of(a.gen, std::nullopt, "gen");
  const std::optional<Split> ref_split =
      ref_is_corpus ? std::optional<Split>(parse_split(a.split)) : std::nullopt;
  const FeatureSet ref = features_of(a.ref, ref_split, "ref");
  if (gen.d != ref.d) {
    throw UsageError("feature dims differ: gen " + std::to_string(gen.d) + ", ref " +
                     std::to_string(ref.d));
  }
  FdOptions fd_opts;
  fd_opts.regularize = !a.no_regularize;
  EvalReport report;
  report.fd = frechet_distance(gen, ref, fd_opts);
  report.config["kind"] = gen_is_corpus ? "mel" : "points";
  report.config["dim"] = std::to_string(gen.d);
  report.config["n_gen"] = std::to_string(gen.n);
  report.config["n_ref"] = std::to_string(ref.n);
  if (ref_split) report.config["ref_split"] = a.split;
  report.config["fd_regularize"] = fd_opts.regularize ? "true" : "false";

  if (!a.oracle.empty()) {
    if (!gen_is_corpus) throw UsageError("--oracle needs mel corpora");
    const SynthCorpus g = load_corpus(a.gen);
    const SynthCorpus o = load_corpus(a.oracle);
    std::map<std::uint32_t, const Utterance*> by_id;
    for (const auto& u : o.utterances) by_id[u.id] = &u;
    std::vector<double> gen_cells, oracle_cells;
    for (const auto& u : g.utterances) {
      const auto it = by_id.find(u.id);
      if (it == by_id.end()) {
        throw UsageError("generated utterance " + std::to_string(u.id) + " has no oracle");
      }
      if (it->second->mel.size() != u.mel.size()) {
        throw ShapeError("utterance " + std::to_string(u.id) + ": generated " +
                         std::to_string(u.frames()) + " frames, oracle " +
                         std::to_string(it->second->frames()));
      }
      const auto gn = normalize_mel(u.mel, o.norm);
      const auto on = normalize_mel(it->second->mel, o.norm);
      gen_cells.insert(gen_cells.end(), gn.begin(), gn.end());
      oracle_cells.insert(oracle_cells.end(), on.begin(), on.end());
    }
    report.mse_oracle = mse_to_oracle(gen_cells, oracle_cells);
    double mean = 0.0, sq = 0.0;
    for (double v : oracle_cells) {
      mean += v;
      sq += v * v;
    }
    const double n = static_cast<double>(oracle_cells.size());
    report.config["oracle_variance"] = fmt(sq / n - (mean / n) * (mean / n));
    report.config["mse_units"] = "normalized";
  }

  const std::string metrics_path = a.gen_metrics.empty() ? a.gen + ".metrics.json" : a.gen_metrics;
  if (std::filesystem::exists(metrics_path)) {
    nlohmann::json m;
    try {
      m = nlohmann::json::parse(read_text(metrics_path));
      report.mean_nfe = m.at("mean_nfe").get<double>();
      report.rtf = m.at("mean_rtf").get<double>();
      report.config["solver"] = m.at("solver").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("sample metrics " + metrics_path + " are malformed: " + e.what());
    }
  } else if (!a.gen_metrics.empty()) {
    throw IoError("cannot open " + metrics_path);
  }
  report.validate();
  write_text(a.out, report.to_json());
  out << report.to_text();
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Rectified-flow text-to-mel toolkit", "reflowtts"};
  app.require_subcommand(1);

  GenDataArgs gd;
  auto* gen = app.add_subcommand("gen-data", "Generate a toy point set or synthetic mel corpus");
  gen->add_option("--task", gd.task, "toy2d | synth_tts")->capture_default_str();
  gen->add_option("--seed", gd.seed, "Generation seed")->capture_default_str();
  gen->add_option("--out", gd.out, "Output dataset file")->required();
  gen->add_option("--kind", gd.kind, "toy2d: eight_gaussians | two_moons | single_gaussian")
      ->capture_default_str();
  gen->add_option("--n", gd.n, "toy2d: number of points")->capture_default_str();
  gen->add_option("--scale", gd.scale, "toy2d: distribution scale")->capture_default_str();
  gen->add_option("--vocab", gd.corpus.vocab_size, "synth_tts: vocabulary size")->capture_default_str();
  gen->add_option("--mel-bins", gd.corpus.mel_bins, "synth_tts: mel bins")->capture_default_str();
  gen->add_option("--n-train", gd.corpus.n_train, "synth_tts: train utterances")->capture_default_str();
  gen->add_option("--n-val", gd.corpus.n_val, "synth_tts: validation utterances")->capture_default_str();
  gen->add_option("--n-test", gd.corpus.n_test, "synth_tts: test utterances")->capture_default_str();
  gen->add_option("--jitter", gd.corpus.jitter, "synth_tts: mel jitter stddev")->capture_default_str();

  TrainArgs tr;
  auto* train = app.add_subcommand("train", "Train a velocity model");
  train->add_option("--config", tr.config, "JSON run config (defaults when omitted)");
  train->add_option("--data", tr.data, "Dataset file");
  train->add_option("--out", tr.out, "Checkpoint path")->required();
  train->add_option("--resume", tr.resume, "Continue from this checkpoint");
  train->add_option("--log", tr.log, "Training log (default <out>.log)");
  train->add_option("--until", tr.until, "Stop after this iteration");

  SampleArgs sa;
  auto* sample = app.add_subcommand("sample", "Draw samples from a checkpoint");
  sample->add_option("--ckpt", sa.ckpt, "Checkpoint")->required();
  sample->add_option("--solver", sa.solver, "euler | rk45 (default: checkpoint config)");
  sample->add_option("--steps", sa.steps, "Euler steps");
  sample->add_option("--rtol", sa.rtol, "RK45 relative tolerance");
  sample->add_option("--atol", sa.atol, "RK45 absolute tolerance");
  sample->add_option("--n", sa.n, "Number of samples");
  sample->add_option("--seed", sa.seed, "Noise seed")->capture_default_str();
  sample->add_option("--out", sa.out, "Output dataset file")->required();
  sample->add_option("--data", sa.data, "synth_tts: corpus supplying the conditions");
  sample->add_option("--split", sa.split, "synth_tts: condition split")->capture_default_str();
  sample->add_option("--durations", sa.durations, "synth_tts: oracle | predicted")
      ->capture_default_str();
  sample->add_option("--batch", sa.batch, "toy2d: samples integrated jointly")
      ->capture_default_str();

  ReflowArgs ra;
  std::size_t pairs = 0;
  auto* reflow = app.add_subcommand("reflow", "Generate couplings and retrain on them");
  reflow->add_option("--ckpt", ra.ckpt, "Base checkpoint")->required();
  reflow->add_option("--data", ra.data, "Training dataset")->required();
  auto* pairs_opt = reflow->add_option("--pairs", pairs, "Coupling pairs (default: training set size)");
  reflow->add_option("--out", ra.out, "Output checkpoint")->required();
  reflow->add_option("--config", ra.config, "Run config for retraining (default: checkpoint's)");
  reflow->add_option("--couplings", ra.couplings, "Also write the coupling set here");
  reflow->add_option("--log", ra.log, "Training log (default <out>.log)");
  reflow->add_option("--seed", ra.seed, "Coupling noise seed")->capture_default_str();
  reflow->add_option("--rtol", ra.rtol, "Coupling RK45 rtol")->capture_default_str();
  reflow->add_option("--atol", ra.atol, "Coupling RK45 atol")->capture_default_str();
  reflow->add_flag("--fine-tune", ra.fine_tune, "Start from the base weights");
  reflow->add_flag("--freeze-frontend", ra.freeze_frontend, "Keep the base text frontend");
  reflow->add_option("--straightness-paths", ra.straightness_paths, "Paths for straightness")
      ->capture_default_str();
  reflow->add_option("--straightness-points", ra.straightness_points,
                     "Time points for straightness")
      ->capture_default_str();
  reflow->add_option("--batch", ra.batch, "toy2d: coupling pairs integrated jointly")
      ->capture_default_str();

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "Score generated samples");
  eval->add_option("--gen", ea.gen, "Generated samples")->required();
  eval->add_option("--ref", ea.ref, "Reference dataset")->required();
  eval->add_option("--oracle", ea.oracle, "Oracle corpus for mse_to_oracle");
  eval->add_option("--out", ea.out, "Report JSON path")->required();
  eval->add_option("--split", ea.split, "Reference corpus split")->capture_default_str();
  eval->add_option("--gen-metrics", ea.gen_metrics, "Sample metrics (default <gen>.metrics.json)");
  eval->add_flag("--no-fd-regularize", ea.no_regularize, "Reject rank-deficient covariances");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    const CLI::App* sub = nullptr;
    for (const auto* s : app.get_subcommands()) sub = s;
    err << (sub ? sub->help() : app.help());
    return kExitUsage;
  }

  try {
    if (gen->parsed()) {
      cmd_gen_data(gd, out);
    } else if (train->parsed()) {
      cmd_train(tr, out);
    } else if (sample->parsed()) {
      cmd_sample(sa, out);
    } else if (reflow->parsed()) {
      if (pairs_opt->count()) ra.pairs = pairs;
      cmd_reflow(ra, out);
    } else if (eval->parsed()) {
      cmd_eval(ea, out);
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return exit_code_for(e);
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << '\n';
    return kExitInternal;
  }
  return kExitOk;
}

}  // namespace rf
