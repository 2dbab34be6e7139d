#include <doctest.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>

#include "reflowtts/data.h"
#include "reflowtts/error.h"

using namespace rf;

namespace {

std::string format_error(const std::vector<std::uint8_t>& bytes) {
  try {
    (void)decode_corpus(bytes);
  } catch (const FormatError& e) {
    return e.what();
  }
  return "";
}

CouplingSet sample_coupling() {
  CouplingSet c;
  c.dim = 3;
  c.vocab_size = 5;
  c.generation = 2;
  c.solver = SolverSpec::rk45(1e-6, 1e-9);
  c.seed = 42;
  c.norm = NormStats{{0.5f, 0.25f, -1.0f}, {1.0f, 2.0f, 0.5f}};
  for (std::uint32_t i = 0; i < 3; ++i) {
    CouplingPair p;
    p.cond_ref = i;
    p.tokens = TokenSequence{{i, 4}};
    p.plan = DurationPlan::from({1, i + 1});
    const std::size_t n = p.plan.total_frames * 3;
    for (std::size_t k = 0; k < n; ++k) {
      p.z0.push_back(static_cast<float>(k) * 0.5f - static_cast<float>(i));
      p.z1.push_back(static_cast<float>(k) * -0.25f + 1.0f);
    }
    c.pairs.push_back(p);
  }
  return c;
}

}  // namespace

TEST_CASE("toy sets are deterministic per seed") {
  ToySpec spec;
  spec.n = 500;
  spec.seed = 9;
  for (ToyKind kind : {ToyKind::kEightGaussians, ToyKind::kTwoMoons, ToyKind::kSingleGaussian}) {
    spec.kind = kind;
    const PointSet a = gen_toy(spec);
    const PointSet b = gen_toy(spec);
    CHECK(a.values == b.values);
    ToySpec other = spec;
    other.seed = 10;
    CHECK(gen_toy(other).values != a.values);
    CHECK(a.size() == 500);
  }
  CHECK(parse_toy_kind("two_moons") == ToyKind::kTwoMoons);
  CHECK(toy_kind_name(parse_toy_kind("eight_gaussians")) == "eight_gaussians");
  CHECK_THROWS_AS(parse_toy_kind("nine_gaussians"), ValueError);
  spec.n = 0;
  CHECK_THROWS_AS(gen_toy(spec), ValueError);
}

TEST_CASE("eight gaussians sit on their centers") {
  ToySpec spec;
  spec.n = 8192;
  spec.seed = 3;
  const PointSet p = gen_toy(spec);
  const auto centers = eight_gaussian_centers(spec.scale);
  const double s = eight_gaussian_std(spec.scale);
  std::size_t within4 = 0;
  std::array<std::size_t, 8> hits{};
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double x = p.values[2 * i], y = p.values[2 * i + 1];
    mx += x;
    my += y;
    double best = 1e300;
    std::size_t arg = 0;
    for (std::size_t k = 0; k < 8; ++k) {
      const double d = std::hypot(x - centers[k][0], y - centers[k][1]);
      if (d < best) best = d, arg = k;
    }
    within4 += best < 4 * s;
    ++hits[arg];
    CHECK(best < 6 * s);
  }
  // Radius beyond 4 sigma in 2-D has probability exp(-8).
  CHECK(static_cast<double>(within4) / p.size() > 0.995);
  for (std::size_t h : hits) CHECK(std::abs(static_cast<double>(h) - 1024.0) < 5 * 30.0);
  // Per-coordinate variance is scale^2 / 2 + s^2; bound the mean at 5 sd.
  const double sd = std::sqrt((spec.scale * spec.scale / 2 + s * s) / p.size());
  CHECK(std::abs(mx / p.size()) < 5 * sd);
  CHECK(std::abs(my / p.size()) < 5 * sd);
}

TEST_CASE("single gaussian moments") {
  ToySpec spec;
  spec.kind = ToyKind::kSingleGaussian;
  spec.n = 20000;
  spec.scale = 1.5;
  const PointSet p = gen_toy(spec);
  double m = 0, v = 0;
  for (float x : p.values) m += x;
  m /= p.values.size();
  for (float x : p.values) v += (x - m) * (x - m);
  v /= p.values.size() - 1;
  CHECK(std::abs(m) < 5 * 1.5 / std::sqrt(40000.0));
  CHECK(v == doctest::Approx(2.25).epsilon(0.05));
}

TEST_CASE("corpus structure") {
  CorpusSpec spec;
  spec.vocab_size = 11;
  spec.mel_bins = 8;
  spec.n_train = 40;
  spec.n_val = 3;
  spec.n_test = 5;
  spec.seed = 21;
  const SynthCorpus c = gen_corpus(spec);
  CHECK(c.count(Split::kTrain) == 40);
  CHECK(c.count(Split::kVal) == 3);
  CHECK(c.count(Split::kTest) == 5);
  const auto durs = token_durations(11, 21);
  for (std::size_t d : durs) CHECK((d >= 2 && d <= 8));
  for (const Utterance& u : c.utterances) {
    CHECK(u.tokens.size() >= spec.min_tokens);
    CHECK(u.tokens.size() <= spec.max_tokens);
    std::size_t frames = 0;
    for (std::size_t k = 0; k < u.tokens.size(); ++k) {
      CHECK(u.tokens.ids[k] < 11);
      CHECK(u.plan.durations[k] == durs[u.tokens.ids[k]]);
      frames += u.plan.durations[k];
    }
    CHECK(u.frames() == frames);
    CHECK(u.mel.size() == frames * 8);
    CHECK(u.mel == render_oracle_mel(u.tokens, u.plan, 8, spec.jitter, 21, u.id));
  }

  // Norm stats are the train-split per-bin moments.
  for (std::size_t b = 0; b < 8; ++b) {
    double s = 0, q = 0;
    std::size_t n = 0;
    for (const Utterance* u : c.split(Split::kTrain)) {
      for (std::size_t f = 0; f < u->frames(); ++f, ++n) {
        const double v = u->mel[f * 8 + b];
        s += v;
        q += v * v;
      }
    }
    const double mean = s / n;
    CHECK(c.norm.mean[b] == doctest::Approx(mean).epsilon(1e-6));
    CHECK(c.norm.std[b] == doctest::Approx(std::sqrt(q / n - mean * mean)).epsilon(1e-5));
  }
}

TEST_CASE("default split proportions") {
  const SynthCorpus c = gen_corpus(6, 4, 190, 1);
  CHECK(c.count(Split::kTrain) == 160);
  CHECK(c.count(Split::kVal) == 10);
  CHECK(c.count(Split::kTest) == 20);
  CHECK(gen_corpus(6, 4, 1, 1).count(Split::kTrain) == 1);
}

TEST_CASE("oracle mel for one token is its template") {
  const TokenSequence seq{{13}};
  const DurationPlan plan = DurationPlan::from({3});
  const auto mel = render_oracle_mel(seq, plan, 10, 0.0, 5, 0);
  const auto tmpl = token_template(13, 10);
  // Token 13 over 10 bins: center bin 3, amplitude 1.5.
  CHECK(std::max_element(tmpl.begin(), tmpl.end()) - tmpl.begin() == 3);
  CHECK(tmpl[3] == 1.5);
  CHECK(tmpl[4] == doctest::Approx(1.5 * std::exp(-1.0 / 4.5)));
  for (std::size_t f = 0; f < 3; ++f) {
    for (std::size_t b = 0; b < 10; ++b) CHECK(mel[f * 10 + b] == static_cast<float>(tmpl[b]));
  }
  CHECK_THROWS_AS(render_oracle_mel(seq, DurationPlan::from({1, 1}), 10, 0.0, 5, 0), ShapeError);
}

TEST_CASE("token templates are linearly independent across one octave") {
  const std::size_t bins = 12;
  Eigen::MatrixXd m(bins, bins);
  for (std::size_t k = 0; k < bins; ++k) {
    const auto t = token_template(k, bins);
    for (std::size_t b = 0; b < bins; ++b) m(k, b) = t[b];
  }
  CHECK(Eigen::FullPivLU<Eigen::MatrixXd>(m).rank() == static_cast<Eigen::Index>(bins));
}

TEST_CASE("normalization round trip") {
  const NormStats s{{1.0f, -2.0f}, {0.5f, 4.0f}};
  const std::vector<float> mel = {2.0f, 6.0f, 1.0f, -2.0f};
  const auto z = normalize_mel(mel, s);
  CHECK(z == std::vector<double>{2.0, 2.0, 0.0, 0.0});
  const auto back = denormalize_mel(z, s);
  for (std::size_t i = 0; i < 4; ++i) CHECK(back[i] == mel[i]);
  CHECK_THROWS_AS(normalize_mel({1.0f, 2.0f, 3.0f}, s), ShapeError);
}

TEST_CASE("dataset round trips") {
  CorpusSpec spec;
  spec.vocab_size = 7;
  spec.mel_bins = 5;
  spec.n_train = 6;
  spec.n_val = 1;
  spec.n_test = 2;
  const SynthCorpus c = gen_corpus(spec);
  CHECK(decode_corpus(encode_corpus(c)) == c);

  ToySpec ts;
  ts.n = 33;
  const PointSet p = gen_toy(ts);
  const PointSet q = decode_points(encode_points(p, 4));
  CHECK(q.dim == 2);
  CHECK(q.values == p.values);

  const CouplingSet cs = sample_coupling();
  const CouplingSet back = decode_coupling(encode_coupling(cs));
  CHECK(back == cs);
  CHECK(back.generation == 2);
  CHECK(back.solver.label() == "rk45");

  CHECK(peek_dataset_kind(encode_coupling(cs)) == DatasetKind::kCoupling);
  CHECK_THROWS_AS(decode_points(encode_corpus(c)), FormatError);
  CHECK_THROWS_AS(decode_coupling(encode_points(p, 4)), FormatError);
}

TEST_CASE("every truncation is rejected") {
  CorpusSpec spec;
  spec.vocab_size = 4;
  spec.mel_bins = 4;
  spec.n_train = 2;
  spec.n_val = 0;
  spec.n_test = 1;
  spec.max_tokens = 5;
  const auto bytes = encode_corpus(gen_corpus(spec));
  for (std::size_t n = 0; n < bytes.size(); ++n) {
    const std::vector<std::uint8_t> prefix(bytes.begin(), bytes.begin() + n);
    CHECK_THROWS_AS(decode_corpus(prefix), FormatError);
  }
  auto extra = bytes;
  extra.push_back(0);
  CHECK(format_error(extra).find("trailing") != std::string::npos);

  const auto coupling = encode_coupling(sample_coupling());
  for (std::size_t n = 0; n < coupling.size(); n += 7) {
    const std::vector<std::uint8_t> prefix(coupling.begin(), coupling.begin() + n);
    CHECK_THROWS_AS(decode_coupling(prefix), FormatError);
  }
}

TEST_CASE("header corruption is reported") {
  const auto good = encode_corpus(gen_corpus(4, 4, 3, 2));
  auto bad = good;
  bad[4] = 2;
  const std::string msg = format_error(bad);
  CHECK(msg.find("found 2") != std::string::npos);
  CHECK(msg.find("expected 1") != std::string::npos);
  bad = good;
  bad[0] = 'X';
  CHECK(format_error(bad).find("magic") != std::string::npos);
  bad = good;
  bad[8] = 9;
  CHECK(format_error(bad).find("kind") != std::string::npos);
}

TEST_CASE("committed fixture decodes to the regenerated corpus") {
  const SynthCorpus fixture = load_corpus(std::string(REFLOWTTS_FIXTURE_DIR) + "/corpus_v1.rfds");
  CorpusSpec spec;
  spec.vocab_size = 6;
  spec.mel_bins = 4;
  spec.n_train = 3;
  spec.n_val = 1;
  spec.n_test = 1;
  spec.seed = 7;
  CHECK(fixture == gen_corpus(spec));
  CHECK(dataset_kind(std::string(REFLOWTTS_FIXTURE_DIR) + "/corpus_v1.rfds") ==
        DatasetKind::kCorpus);
  CHECK_THROWS_AS(load_corpus("/nonexistent/corpus.rfds"), IoError);
}
