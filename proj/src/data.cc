#include "reflowtts/data.h"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "binio.h"
#include "reflowtts/error.h"
#include "reflowtts/random.h"

namespace rf {

namespace {

constexpr char kMagic[4] = {'R', 'F', 'D', 'S'};
constexpr double kTemplateWidth = 1.5;
constexpr std::size_t kMinDuration = 2;
constexpr std::size_t kMaxDuration = 8;
constexpr float kStdFloor = 1e-3f;

// Stream ids for derive_seed; fixed forever so corpora stay reproducible.
constexpr std::uint64_t kDurationStream = 0x6475720000000000ull;
constexpr std::uint64_t kLayoutStream = 0x6c61790000000000ull;
constexpr std::uint64_t kJitterStream = 0x6a69740000000000ull;

void write_header(binio::Writer& w, DatasetKind kind, std::uint64_t seed,
                  std::size_t dim, std::size_t vocab, std::size_t count,
                  const NormStats& norm) {
  w.bytes(kMagic, 4);
  w.u32(kDatasetVersion);
  w.u32(static_cast<std::uint32_t>(kind));
  w.u64(seed);
  w.u32(static_cast<std::uint32_t>(dim));
  w.u32(static_cast<std::uint32_t>(vocab));
  w.u32(static_cast<std::uint32_t>(count));
  if (norm.mean.size() != norm.std.size()) {
    throw ValueError("normalization mean/std lengths differ");
  }
  w.u32(static_cast<std::uint32_t>(norm.mean.size()));
  for (float m : norm.mean) w.f32(m);
  for (float s : norm.std) w.f32(s);
}

struct Header {
  DatasetKind kind;
  std::uint64_t seed;
  std::size_t dim;
  std::size_t vocab;
  std::size_t count;
  NormStats norm;
};

std::string kind_name(DatasetKind kind) {
  switch (kind) {
    case DatasetKind::kCorpus: return "corpus";
    case DatasetKind::kPoints: return "points";
    case DatasetKind::kCoupling: return "coupling";
  }
  return "unknown";
}

Header read_header(binio::Reader& r, DatasetKind expected) {
  char magic[4];
  r.bytes(magic, 4);
  if (!std::equal(magic, magic + 4, kMagic)) {
    throw FormatError("not a dataset file: bad magic (expected \"RFDS\")");
  }
  const std::uint32_t version = r.u32();
  if (version != kDatasetVersion) {
    throw FormatError("unsupported dataset version: found " + std::to_string(version) +
                      ", expected " + std::to_string(kDatasetVersion));
  }
  Header h;
  const std::uint32_t kind = r.u32();
  if (kind < 1 || kind > 3) {
    throw FormatError("unknown dataset kind " + std::to_string(kind));
  }
  h.kind = static_cast<DatasetKind>(kind);
  if (h.kind != expected) {
    throw FormatError("dataset holds " + kind_name(h.kind) + " records, expected " +
                      kind_name(expected));
  }
  h.seed = r.u64();
  h.dim = r.u32();
  h.vocab = r.u32();
  h.count = r.u32();
  const std::uint32_t n_norm = r.u32();
  r.need(std::size_t{8} * n_norm);
  h.norm.mean.resize(n_norm);
  h.norm.std.resize(n_norm);
  for (auto& m : h.norm.mean) m = r.f32();
  for (auto& s : h.norm.std) s = r.f32();
  if (h.dim == 0) throw FormatError("dataset dim is 0");
  return h;
}

void write_floats(binio::Writer& w, const std::vector<float>& v) {
  for (float x : v) w.f32(x);
}

std::vector<float> read_floats(binio::Reader& r, std::size_t n) {
  r.need(4 * n);
  std::vector<float> v(n);
  for (auto& x : v) x = r.f32();
  return v;
}

void write_condition(binio::Writer& w, const TokenSequence& tokens,
                     const DurationPlan& plan, std::size_t frames) {
  w.u32(static_cast<std::uint32_t>(tokens.size()));
  for (std::size_t id : tokens.ids) w.u32(static_cast<std::uint32_t>(id));
  for (std::size_t d : plan.durations) w.u32(static_cast<std::uint32_t>(d));
  w.u32(static_cast<std::uint32_t>(frames));
}

// Reads tokens, durations and frame count; validates their consistency.
std::size_t read_condition(binio::Reader& r, std::size_t vocab,
                           TokenSequence& tokens, DurationPlan& plan) {
  const std::uint32_t n = r.u32();
  r.need(std::size_t{8} * n);
  tokens.ids.resize(n);
  for (auto& id : tokens.ids) {
    id = r.u32();
    if (vocab > 0 && id >= vocab) {
      throw FormatError("token id " + std::to_string(id) + " outside vocab " +
                        std::to_string(vocab));
    }
  }
  std::vector<std::size_t> durations(n);
  for (auto& d : durations) d = r.u32();
  const std::size_t frames = r.u32();
  if (n > 0) {
    try {
      plan = DurationPlan::from(std::move(durations));
    } catch (const ValueError& e) {
      throw FormatError(std::string("bad duration plan: ") + e.what());
    }
    if (plan.total_frames != frames) {
      throw FormatError("frame count " + std::to_string(frames) +
                        " != sum of durations " + std::to_string(plan.total_frames));
    }
  } else {
    plan = DurationPlan{};
  }
  return frames;
}

void check_consumed(const binio::Reader& r) {
  if (r.remaining() != 0) {
    throw FormatError(std::to_string(r.remaining()) + " trailing bytes after last record");
  }
}

bool same_bits(const std::vector<float>& a, const std::vector<float>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (std::bit_cast<std::uint32_t>(a[i]) != std::bit_cast<std::uint32_t>(b[i])) return false;
  }
  return true;
}

bool same_norm(const NormStats& a, const NormStats& b) {
  return same_bits(a.mean, b.mean) && same_bits(a.std, b.std);
}

}  // namespace

// ---- toy ----------------------------------------------------------------------

ToyKind parse_toy_kind(const std::string& name) {
  if (name == "eight_gaussians") return ToyKind::kEightGaussians;
  if (name == "two_moons") return ToyKind::kTwoMoons;
  if (name == "single_gaussian") return ToyKind::kSingleGaussian;
  throw ValueError("unknown toy distribution '" + name +
                   "' (expected eight_gaussians, two_moons or single_gaussian)");
}

std::string toy_kind_name(ToyKind kind) {
  switch (kind) {
    case ToyKind::kEightGaussians: return "eight_gaussians";
    case ToyKind::kTwoMoons: return "two_moons";
    case ToyKind::kSingleGaussian: return "single_gaussian";
  }
  throw ValueError("invalid toy kind");
}

Tensor PointSet::to_tensor() const {
  return Tensor::from({size(), dim}, std::vector<double>(values.begin(), values.end()));
}

PointSet PointSet::from_tensor(const Tensor& t) {
  if (t.ndim() != 2) throw ShapeError("point set tensor must be [n, dim], got " + shape_str(t.shape()));
  PointSet p;
  p.dim = t.dim(1);
  p.values.assign(t.data().begin(), t.data().end());
  return p;
}

std::array<std::array<double, 2>, 8> eight_gaussian_centers(double scale) {
  std::array<std::array<double, 2>, 8> c{};
  for (int k = 0; k < 8; ++k) {
    const double a = k * std::numbers::pi / 4.0;
    c[k] = {scale * std::cos(a), scale * std::sin(a)};
  }
  return c;
}

double eight_gaussian_std(double scale) { return 0.1 * scale; }

PointSet gen_toy(const ToySpec& spec) {
  if (spec.n < 1) throw ValueError("toy set needs n >= 1");
  if (!(spec.scale > 0) || !std::isfinite(spec.scale)) {
    throw ValueError("toy scale must be positive");
  }
  Rng rng(spec.seed);
  PointSet out;
  out.dim = 2;
  out.values.reserve(2 * spec.n);
  const auto centers = eight_gaussian_centers(spec.scale);
  for (std::size_t i = 0; i < spec.n; ++i) {
    double x = 0, y = 0;
    switch (spec.kind) {
      case ToyKind::kEightGaussians: {
        const auto& c = centers[rng.below(8)];
        const double s = eight_gaussian_std(spec.scale);
        x = c[0] + s * rng.normal();
        y = c[1] + s * rng.normal();
        break;
      }
      case ToyKind::kTwoMoons: {
        const bool upper = rng.below(2) == 0;
        const double th = rng.uniform() * std::numbers::pi;
        double mx = upper ? std::cos(th) : 1.0 - std::cos(th);
        double my = upper ? std::sin(th) : 0.5 - std::sin(th);
        mx -= 0.5;
        my -= 0.25;
        const double r = spec.scale / 2.0;
        const double noise = 0.05 * spec.scale;
        x = r * mx + noise * rng.normal();
        y = r * my + noise * rng.normal();
        break;
      }
      case ToyKind::kSingleGaussian:
        x = spec.scale * rng.normal();
        y = spec.scale * rng.normal();
        break;
    }
    out.values.push_back(static_cast<float>(x));
    out.values.push_back(static_cast<float>(y));
  }
  return out;
}

// ---- corpus -------------------------------------------------------------------

std::vector<double> token_template(std::size_t token, std::size_t mel_bins) {
  const double center = static_cast<double>(token % mel_bins);
  const double amp = 1.0 + 0.5 * static_cast<double>(token / mel_bins);
  std::vector<double> t(mel_bins);
  for (std::size_t b = 0; b < mel_bins; ++b) {
    const double d = static_cast<double>(b) - center;
    t[b] = amp * std::exp(-d * d / (2.0 * kTemplateWidth * kTemplateWidth));
  }
  return t;
}

std::vector<std::size_t> token_durations(std::size_t vocab_size, std::uint64_t seed) {
  Rng rng(derive_seed(seed, kDurationStream));
  std::vector<std::size_t> d(vocab_size);
  for (auto& x : d) x = kMinDuration + rng.below(kMaxDuration - kMinDuration + 1);
  return d;
}

std::vector<float> render_oracle_mel(const TokenSequence& tokens,
                                     const DurationPlan& plan,
                                     std::size_t mel_bins, double jitter,
                                     std::uint64_t corpus_seed,
                                     std::uint32_t utterance_id) {
  if (tokens.size() != plan.durations.size()) {
    throw ShapeError("tokens (" + std::to_string(tokens.size()) + ") and durations (" +
                     std::to_string(plan.durations.size()) + ") differ in length");
  }
  Rng rng(derive_seed(corpus_seed, kJitterStream + utterance_id));
  std::vector<float> mel;
  mel.reserve(plan.total_frames * mel_bins);
  for (std::size_t k = 0; k < tokens.size(); ++k) {
    const auto tmpl = token_template(tokens.ids[k], mel_bins);
    for (std::size_t f = 0; f < plan.durations[k]; ++f) {
      for (std::size_t b = 0; b < mel_bins; ++b) {
        mel.push_back(static_cast<float>(tmpl[b] + jitter * rng.normal()));
      }
    }
  }
  return mel;
}

std::vector<const Utterance*> SynthCorpus::split(Split which) const {
  std::vector<const Utterance*> out;
  for (const auto& u : utterances) {
    if (u.split == which) out.push_back(&u);
  }
  return out;
}

std::size_t SynthCorpus::count(Split which) const {
  return static_cast<std::size_t>(std::count_if(
      utterances.begin(), utterances.end(), [which](const Utterance& u) { return u.split == which; }));
}

SynthCorpus gen_corpus(const CorpusSpec& spec) {
  if (spec.vocab_size < 2) throw ValueError("corpus needs vocab_size >= 2");
  if (spec.mel_bins < 4) throw ValueError("corpus needs mel_bins >= 4");
  if (spec.n_train < 1) throw ValueError("corpus needs at least one train utterance");
  if (spec.min_tokens < 1 || spec.max_tokens < spec.min_tokens) {
    throw ValueError("corpus needs 1 <= min_tokens <= max_tokens");
  }
  if (!(spec.jitter >= 0) || !std::isfinite(spec.jitter)) {
    throw ValueError("corpus jitter must be finite and >= 0");
  }
  SynthCorpus c;
  c.vocab_size = spec.vocab_size;
  c.mel_bins = spec.mel_bins;
  c.seed = spec.seed;
  const auto durations = token_durations(spec.vocab_size, spec.seed);
  Rng layout(derive_seed(spec.seed, kLayoutStream));
  const std::size_t total = spec.n_train + spec.n_val + spec.n_test;
  c.utterances.reserve(total);
  for (std::size_t i = 0; i < total; ++i) {
    Utterance u;
    u.id = static_cast<std::uint32_t>(i);
    u.split = i < spec.n_train ? Split::kTrain
              : i < spec.n_train + spec.n_val ? Split::kVal
                                              : Split::kTest;
    const std::size_t len =
        spec.min_tokens + layout.below(spec.max_tokens - spec.min_tokens + 1);
    std::vector<std::size_t> d(len);
    u.tokens.ids.resize(len);
    for (std::size_t k = 0; k < len; ++k) {
      u.tokens.ids[k] = layout.below(spec.vocab_size);
      d[k] = durations[u.tokens.ids[k]];
    }
    u.plan = DurationPlan::from(std::move(d));
    u.mel = render_oracle_mel(u.tokens, u.plan, spec.mel_bins, spec.jitter, spec.seed, u.id);
    c.utterances.push_back(std::move(u));
  }

  // Per-bin statistics over all train frames.
  std::vector<double> sum(spec.mel_bins, 0.0), sq(spec.mel_bins, 0.0);
  std::size_t frames = 0;
  for (const auto* u : c.split(Split::kTrain)) {
    for (std::size_t f = 0; f < u->frames(); ++f) {
      for (std::size_t b = 0; b < spec.mel_bins; ++b) {
        const double v = u->mel[f * spec.mel_bins + b];
        sum[b] += v;
        sq[b] += v * v;
      }
    }
    frames += u->frames();
  }
  c.norm.mean.resize(spec.mel_bins);
  c.norm.std.resize(spec.mel_bins);
  for (std::size_t b = 0; b < spec.mel_bins; ++b) {
    const double m = sum[b] / static_cast<double>(frames);
    const double var = std::max(0.0, sq[b] / static_cast<double>(frames) - m * m);
    c.norm.mean[b] = static_cast<float>(m);
    c.norm.std[b] = std::max(kStdFloor, static_cast<float>(std::sqrt(var)));
  }
  return c;
}

SynthCorpus gen_corpus(std::size_t vocab_size, std::size_t mel_bins,
                       std::size_t n_utts, std::uint64_t seed) {
  if (n_utts < 1) throw ValueError("corpus needs n_utts >= 1");
  CorpusSpec spec;
  spec.vocab_size = vocab_size;
  spec.mel_bins = mel_bins;
  spec.seed = seed;
  spec.n_val = static_cast<std::size_t>(std::llround(static_cast<double>(n_utts) / 19.0));
  spec.n_test = static_cast<std::size_t>(std::llround(2.0 * static_cast<double>(n_utts) / 19.0));
  if (spec.n_val + spec.n_test >= n_utts) {
    spec.n_val = 0;
    spec.n_test = 0;
  }
  spec.n_train = n_utts - spec.n_val - spec.n_test;
  return gen_corpus(spec);
}

std::vector<double> normalize_mel(const std::vector<float>& mel, const NormStats& s) {
  const std::size_t bins = s.mean.size();
  if (bins == 0 || mel.size() % bins != 0) {
    throw ShapeError("mel of " + std::to_string(mel.size()) +
                     " values does not tile " + std::to_string(bins) + " bins");
  }
  std::vector<double> out(mel.size());
  for (std::size_t i = 0; i < mel.size(); ++i) {
    const std::size_t b = i % bins;
    out[i] = (static_cast<double>(mel[i]) - s.mean[b]) / s.std[b];
  }
  return out;
}

std::vector<double> denormalize_mel(std::span<const double> mel, const NormStats& s) {
  const std::size_t bins = s.mean.size();
  if (bins == 0 || mel.size() % bins != 0) {
    throw ShapeError("mel of " + std::to_string(mel.size()) +
                     " values does not tile " + std::to_string(bins) + " bins");
  }
  std::vector<double> out(mel.size());
  for (std::size_t i = 0; i < mel.size(); ++i) {
    const std::size_t b = i % bins;
    out[i] = mel[i] * s.std[b] + s.mean[b];
  }
  return out;
}

// ---- encoding -----------------------------------------------------------------

std::vector<std::uint8_t> encode_corpus(const SynthCorpus& corpus) {
  binio::Writer w;
  write_header(w, DatasetKind::kCorpus, corpus.seed, corpus.mel_bins,
               corpus.vocab_size, corpus.utterances.size(), corpus.norm);
  for (const auto& u : corpus.utterances) {
    if (u.mel.size() != u.frames() * corpus.mel_bins) {
      throw ShapeError("utterance " + std::to_string(u.id) + " mel has " +
                       std::to_string(u.mel.size()) + " values, expected " +
                       std::to_string(u.frames() * corpus.mel_bins));
    }
    w.u32(u.id);
    w.u8(static_cast<std::uint8_t>(u.split));
    write_condition(w, u.tokens, u.plan, u.frames());
    write_floats(w, u.mel);
  }
  return std::move(w.buffer());
}

std::vector<std::uint8_t> encode_points(const PointSet& points, std::uint64_t seed) {
  if (points.dim == 0 || points.values.size() % points.dim != 0) {
    throw ShapeError("point set values do not tile dim " + std::to_string(points.dim));
  }
  binio::Writer w;
  write_header(w, DatasetKind::kPoints, seed, points.dim, 0, points.size(), NormStats{});
  write_floats(w, points.values);
  return std::move(w.buffer());
}

std::vector<std::uint8_t> encode_coupling(const CouplingSet& coupling) {
  binio::Writer w;
  write_header(w, DatasetKind::kCoupling, coupling.seed, coupling.dim,
               coupling.vocab_size, coupling.pairs.size(), coupling.norm);
  w.u32(static_cast<std::uint32_t>(coupling.generation));
  w.u32(coupling.solver.kind == SolverKind::kEuler ? 0u : 1u);
  w.u32(static_cast<std::uint32_t>(coupling.solver.steps));
  w.f64(coupling.solver.rtol);
  w.f64(coupling.solver.atol);
  w.u64(coupling.solver.max_steps);
  w.f64(coupling.solver.initial_step);
  for (const auto& p : coupling.pairs) {
    const std::size_t frames = p.tokens.size() ? p.plan.total_frames : 1;
    if (p.z0.size() != frames * coupling.dim || p.z1.size() != p.z0.size()) {
      throw ShapeError("coupling pair holds " + std::to_string(p.z0.size()) + "/" +
                       std::to_string(p.z1.size()) + " values, expected " +
                       std::to_string(frames * coupling.dim));
    }
    w.u32(p.cond_ref);
    write_condition(w, p.tokens, p.plan, frames);
    write_floats(w, p.z0);
    write_floats(w, p.z1);
  }
  return std::move(w.buffer());
}

DatasetKind peek_dataset_kind(const std::vector<std::uint8_t>& bytes) {
  binio::Reader r(bytes);
  char magic[4];
  r.bytes(magic, 4);
  if (!std::equal(magic, magic + 4, kMagic)) {
    throw FormatError("not a dataset file: bad magic (expected \"RFDS\")");
  }
  const std::uint32_t version = r.u32();
  if (version != kDatasetVersion) {
    throw FormatError("unsupported dataset version: found " + std::to_string(version) +
                      ", expected " + std::to_string(kDatasetVersion));
  }
  const std::uint32_t kind = r.u32();
  if (kind < 1 || kind > 3) throw FormatError("unknown dataset kind " + std::to_string(kind));
  return static_cast<DatasetKind>(kind);
}

SynthCorpus decode_corpus(const std::vector<std::uint8_t>& bytes) {
  binio::Reader r(bytes);
  Header h = read_header(r, DatasetKind::kCorpus);
  SynthCorpus c;
  c.seed = h.seed;
  c.mel_bins = h.dim;
  c.vocab_size = h.vocab;
  c.norm = std::move(h.norm);
  c.utterances.reserve(std::min<std::size_t>(h.count, r.remaining()));
  for (std::size_t i = 0; i < h.count; ++i) {
    Utterance u;
    u.id = r.u32();
    const std::uint8_t split = r.u8();
    if (split > 2) throw FormatError("bad split tag " + std::to_string(split));
    u.split = static_cast<Split>(split);
    const std::size_t frames = read_condition(r, c.vocab_size, u.tokens, u.plan);
    if (u.tokens.size() == 0) throw FormatError("utterance with no tokens");
    u.mel = read_floats(r, frames * c.mel_bins);
    c.utterances.push_back(std::move(u));
  }
  check_consumed(r);
  return c;
}

PointSet decode_points(const std::vector<std::uint8_t>& bytes) {
  binio::Reader r(bytes);
  Header h = read_header(r, DatasetKind::kPoints);
  PointSet p;
  p.dim = h.dim;
  p.values = read_floats(r, h.count * h.dim);
  check_consumed(r);
  return p;
}

CouplingSet decode_coupling(const std::vector<std::uint8_t>& bytes) {
  binio::Reader r(bytes);
  Header h = read_header(r, DatasetKind::kCoupling);
  CouplingSet c;
  c.seed = h.seed;
  c.dim = h.dim;
  c.vocab_size = h.vocab;
  c.norm = std::move(h.norm);
  c.generation = r.u32();
  const std::uint32_t kind = r.u32();
  if (kind > 1) throw FormatError("unknown solver kind " + std::to_string(kind));
  c.solver.kind = kind == 0 ? SolverKind::kEuler : SolverKind::kRk45;
  c.solver.steps = r.u32();
  c.solver.rtol = r.f64();
  c.solver.atol = r.f64();
  c.solver.max_steps = r.u64();
  c.solver.initial_step = r.f64();
  c.pairs.reserve(std::min<std::size_t>(h.count, r.remaining()));
  for (std::size_t i = 0; i < h.count; ++i) {
    CouplingPair p;
    p.cond_ref = r.u32();
    const std::size_t frames = read_condition(r, c.vocab_size, p.tokens, p.plan);
    p.z0 = read_floats(r, frames * c.dim);
    p.z1 = read_floats(r, frames * c.dim);
    c.pairs.push_back(std::move(p));
  }
  check_consumed(r);
  return c;
}

void save_corpus(const std::string& path, const SynthCorpus& corpus) {
  binio::write_file(path, encode_corpus(corpus));
}

void save_points(const std::string& path, const PointSet& points, std::uint64_t seed) {
  binio::write_file(path, encode_points(points, seed));
}

void save_coupling(const std::string& path, const CouplingSet& coupling) {
  binio::write_file(path, encode_coupling(coupling));
}

SynthCorpus load_corpus(const std::string& path) {
  return decode_corpus(binio::read_file(path));
}

PointSet load_points(const std::string& path) {
  return decode_points(binio::read_file(path));
}

CouplingSet load_coupling(const std::string& path) {
  return decode_coupling(binio::read_file(path));
}

DatasetKind dataset_kind(const std::string& path) {
  return peek_dataset_kind(binio::read_file(path));
}

bool operator==(const SynthCorpus& a, const SynthCorpus& b) {
  if (a.vocab_size != b.vocab_size || a.mel_bins != b.mel_bins || a.seed != b.seed ||
      !same_norm(a.norm, b.norm) || a.utterances.size() != b.utterances.size()) {
    return false;
  }
  for (std::size_t i = 0; i < a.utterances.size(); ++i) {
    const auto& x = a.utterances[i];
    const auto& y = b.utterances[i];
    if (x.id != y.id || x.split != y.split || x.tokens.ids != y.tokens.ids ||
        x.plan.durations != y.plan.durations || !same_bits(x.mel, y.mel)) {
      return false;
    }
  }
  return true;
}

bool operator==(const CouplingSet& a, const CouplingSet& b) {
  if (a.dim != b.dim || a.vocab_size != b.vocab_size || a.generation != b.generation ||
      a.seed != b.seed || !same_norm(a.norm, b.norm) || a.solver.kind != b.solver.kind ||
      a.solver.steps != b.solver.steps || a.solver.rtol != b.solver.rtol ||
      a.solver.atol != b.solver.atol || a.solver.max_steps != b.solver.max_steps ||
      a.solver.initial_step != b.solver.initial_step || a.pairs.size() != b.pairs.size()) {
    return false;
  }
  for (std::size_t i = 0; i < a.pairs.size(); ++i) {
    const auto& x = a.pairs[i];
    const auto& y = b.pairs[i];
    if (x.cond_ref != y.cond_ref || x.tokens.ids != y.tokens.ids ||
        x.plan.durations != y.plan.durations || !same_bits(x.z0, y.z0) ||
        !same_bits(x.z1, y.z1)) {
      return false;
    }
  }
  return true;
}

}  // namespace rf
