#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include <unistd.h>

#include "ptat/continual.hpp"
#include "ptat/data.hpp"
#include "ptat/errors.hpp"
#include "test_util.hpp"

using namespace ptat;
using namespace ptat::data;

namespace {

SequenceOptions small_options() { return testing::tiny_sequence_options(); }

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() /
           ("ptat_test_" + tag + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

// Full-parameter step-1 model on `train`, tiny encoders.
continual::ModelState train_step1(const PairedDataset& train) {
  const ModelConfig cfg = testing::tiny_config();
  std::mt19937_64 rng(11);
  ParameterStore backbone;
  init_audio_encoder(backbone, cfg.audio, rng);
  init_text_encoder(backbone, cfg.text, rng);
  const Strategy ft = build_strategy(StrategyTag::finetune_sequential);
  continual::ModelState state = continual::init_state(cfg, ft, backbone, 5, {});
  continual::TrainConfig tc;
  tc.learning_rate = 3e-3;
  tc.epochs = 12;
  tc.seed = 5;
  return continual::run_step(state, train, nullptr, tc).state;
}

double mean_r10(const eval::RetrievalScores& s) {
  return 0.5 * (s.at(eval::Direction::a2t, 10) + s.at(eval::Direction::t2a, 10));
}

}  // namespace

TEST_CASE("generation is deterministic per seed") {
  const SequenceOptions o = small_options();
  const SequenceSpec a = make_sequence(o, 3);
  const SequenceSpec b = make_sequence(o, 3);
  REQUIRE(a.domains.size() == 2);
  for (std::size_t m = 0; m < 2; ++m) {
    CHECK(a.domains[m].audio_map == b.domains[m].audio_map);
    CHECK(a.domains[m].text_logit_map == b.domains[m].text_logit_map);
    const DomainData x = generate_domain(a.domains[m]);
    const DomainData y = generate_domain(b.domains[m]);
    CHECK(x.train == y.train);
    CHECK(x.test == y.test);
  }
  CHECK_FALSE(make_sequence(o, 4).domains[0].audio_map == a.domains[0].audio_map);
}

TEST_CASE("overlap 1 reproduces the predecessor's maps") {
  SequenceOptions o = small_options();
  o.overlap = 1.0;
  const SequenceSpec seq = make_sequence(o, 9);
  CHECK(seq.domains[1].audio_map == seq.domains[0].audio_map);
  CHECK(seq.domains[1].text_logit_map == seq.domains[0].text_logit_map);

  // Same generating law: first two moments of the spectrogram entries agree.
  auto moments = [](const PairedDataset& ds) {
    double s = 0, ss = 0, n = 0;
    for (const auto& p : ds.samples)
      for (double v : p.audio.spectrogram.values()) {
        s += v;
        ss += v * v;
        ++n;
      }
    return std::pair{s / n, ss / n - (s / n) * (s / n)};
  };
  const auto [m0, v0] = moments(generate_domain(seq.domains[0]).train);
  const auto [m1, v1] = moments(generate_domain(seq.domains[1]).train);
  CHECK(std::abs(m0 - m1) < 0.02);
  CHECK(std::abs(v0 / v1 - 1.0) < 0.05);
}

TEST_CASE("overlap copies exactly round(rho k) columns") {
  SequenceOptions o = small_options();
  o.latent_dim = 8;
  o.pool_size = 24;
  o.overlap = 0.3;
  o.num_domains = 3;
  const SequenceSpec seq = make_sequence(o, 1);
  for (std::size_t m = 1; m < 3; ++m) {
    const Matrix& prev = seq.domains[m - 1].audio_map;
    const Matrix& cur = seq.domains[m].audio_map;
    std::size_t same = 0;
    for (std::size_t c = 0; c < cur.cols(); ++c) {
      bool eq = true;
      for (std::size_t r = 0; r < cur.rows() && eq; ++r) eq = cur(r, c) == prev(r, c);
      same += eq;
    }
    CHECK(same == 2);  // lround(0.3 * 8)
  }
}

TEST_CASE("degenerate specs are rejected") {
  DomainSpec s = make_sequence(small_options(), 2).domains[0];
  DomainSpec zero = s;
  zero.audio_map = Matrix(s.audio_map.rows(), s.audio_map.cols());
  CHECK_THROWS_AS(generate_domain(zero), ValidationError);
  zero = s;
  zero.text_logit_map = Matrix(s.text_logit_map.rows(), s.text_logit_map.cols());
  CHECK_THROWS_AS(generate_domain(zero), ValidationError);
  DomainSpec bad = s;
  bad.overlap = 1.5;
  CHECK_THROWS_AS(generate_domain(bad), ValidationError);
  bad = s;
  bad.audio_map = Matrix(3, 3, 1.0);
  CHECK_THROWS_AS(generate_domain(bad), ShapeError);

  SequenceOptions o = small_options();
  o.pool_size = 5;  // needs 2k - shared = 7 concepts
  o.overlap = 0.3;
  CHECK_THROWS_AS(make_sequence(o, 1), ValidationError);
}

TEST_CASE("pairing integrity and split disjointness") {
  const DomainSpec spec = make_sequence(small_options(), 4).domains[1];
  const DomainData d = generate_domain(spec);
  CHECK(d.train.size() == spec.num_train);
  CHECK(d.test.size() == spec.num_test);
  std::set<std::uint64_t> train_ids;
  for (const auto& s : d.train.samples) {
    train_ids.insert(s.latent_id);
    CHECK(generate_sample(spec, s.latent_id) == s);
    CHECK(s.audio.spectrogram.rows() == spec.spec_rows);
    CHECK(s.audio.spectrogram.cols() == spec.spec_cols);
    CHECK(s.text.tokens.size() == spec.text_len);
  }
  CHECK(train_ids.size() == d.train.size());
  for (const auto& s : d.test.samples) {
    CHECK(train_ids.count(s.latent_id) == 0);
    CHECK(generate_sample(spec, s.latent_id) == s);
  }

  // Tokens are the argmax of the logits at each position.
  const PairedSample& s = d.test.samples.front();
  const auto z = latent_vector(spec, s.latent_id);
  for (std::size_t p = 0; p < spec.text_len; ++p) {
    std::vector<double> logits(spec.vocab_size, 0.0);
    for (std::size_t t = 0; t < spec.vocab_size; ++t)
      for (std::size_t j = 0; j < z.size(); ++j)
        logits[t] += spec.text_logit_map(p * spec.vocab_size + t, j) * z[j];
    const auto best = std::max_element(logits.begin(), logits.end()) - logits.begin();
    CHECK(s.text.tokens[p] == best);
  }
}

TEST_CASE("crop_or_pad") {
  std::mt19937_64 rng(1);
  Matrix m32 = testing::random_matrix(32, 16, rng);
  CHECK(crop_or_pad(m32, 32, rng).spectrogram == m32);

  Matrix m40 = testing::random_matrix(40, 16, rng);
  const Matrix cropped = crop_or_pad(m40, 32, rng).spectrogram;
  REQUIRE(cropped.rows() == 32);
  bool found = false;
  for (std::size_t start = 0; start + 32 <= 40 && !found; ++start) {
    bool eq = true;
    for (std::size_t r = 0; r < 32 && eq; ++r)
      for (std::size_t c = 0; c < 16 && eq; ++c) eq = cropped(r, c) == m40(start + r, c);
    found = eq;
  }
  CHECK(found);

  Matrix m20 = testing::random_matrix(20, 16, rng);
  const Matrix padded = crop_or_pad(m20, 32, rng).spectrogram;
  REQUIRE(padded.rows() == 32);
  for (std::size_t r = 0; r < 20; ++r)
    for (std::size_t c = 0; c < 16; ++c) CHECK(padded(r, c) == m20(r, c));
  for (std::size_t r = 20; r < 32; ++r)
    for (std::size_t c = 0; c < 16; ++c) CHECK(padded(r, c) == 0.0);

  CHECK_THROWS_AS(crop_or_pad(Matrix(), 32, rng), ValidationError);
  CHECK_THROWS_AS(crop_or_pad(m20, 0, rng), ValidationError);

  // Seeded: the same stream state picks the same window.
  std::mt19937_64 a(77), b(77);
  CHECK(crop_or_pad(m40, 32, a).spectrogram == crop_or_pad(m40, 32, b).spectrogram);
}

TEST_CASE("manifest round trip and error classes") {
  TempDir dir("manifest");
  const DomainSpec spec = make_sequence(small_options(), 6).domains[0];
  const DomainData d = generate_domain(spec);
  const auto path = dir.path / (spec.name + ".tsv");
  write_manifest(d.test, path);
  CHECK(load_manifest(path) == d.test);
  CHECK(load_manifest(path, spec.spec_cols) == d.test);

  auto kind_of = [](const std::filesystem::path& p, std::optional<std::size_t> cols = {}) {
    try {
      load_manifest(p, cols);
    } catch (const DataError& e) {
      return static_cast<int>(e.kind());
    }
    return -1;
  };
  CHECK(kind_of(path, spec.spec_cols + 1) ==
        static_cast<int>(DataError::Kind::dimension_mismatch));

  const auto blobs = dir.path / (spec.name + "_blobs");
  const auto first_blob = blobs / (std::to_string(d.test.samples[0].latent_id) + ".f32");
  const auto second_blob = blobs / (std::to_string(d.test.samples[1].latent_id) + ".f32");

  std::filesystem::resize_file(second_blob, std::filesystem::file_size(second_blob) - 3);
  CHECK(kind_of(path) == static_cast<int>(DataError::Kind::checksum));

  std::filesystem::remove(first_blob);
  CHECK(kind_of(path) == static_cast<int>(DataError::Kind::missing_blob));

  // Declared rows disagree with an intact blob.
  write_manifest(d.test, path);
  std::ifstream in(path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  in.close();
  const std::string needle = "\t" + std::to_string(spec.spec_rows) + "\t";
  const auto at = text.find(needle);
  REQUIRE(at != std::string::npos);
  text.replace(at, needle.size(), "\t" + std::to_string(spec.spec_rows + 1) + "\t");
  std::ofstream(path) << text;
  CHECK(kind_of(path) == static_cast<int>(DataError::Kind::dimension_mismatch));

  std::ofstream(path) << "not a manifest\n";
  CHECK(kind_of(path) == static_cast<int>(DataError::Kind::format));
}

TEST_CASE("independent maps: step-1 model scores near chance on domain 2") {
  SequenceOptions o = small_options();
  o.overlap = 0.0;
  o.domain_gap = 1.0;  // fresh columns carry no pool signature
  const SequenceSpec seq = make_sequence(o, 21);
  const DomainData d1 = generate_domain(seq.domains[0]);
  const DomainData d2 = generate_domain(seq.domains[1]);
  const continual::ModelState s = train_step1(d1.train);

  const double n = static_cast<double>(d2.test.size());
  const double chance = 1.0 / n, band = 3.0 * std::sqrt(1.0 / n);
  const auto own = eval::evaluate_retrieval(s.params, s.config, s.strategy, d1.test);
  const auto other = eval::evaluate_retrieval(s.params, s.config, s.strategy, d2.test);
  for (auto dir : {eval::Direction::a2t, eval::Direction::t2a}) {
    CHECK(std::abs(other.at(dir, 1) - chance) <= band);
  }
  // The model did learn its own domain: R@10 well above the 10/N chance level.
  CHECK(mean_r10(own) > 2.0 * 10.0 / n);
}

TEST_CASE("text gap: same sounds, differently worded captions") {
  SequenceOptions o = small_options();
  o.overlap = 0.0;
  o.num_domains = 3;
  o.pool_size = 2 * o.latent_dim;  // domain 3 must reuse domain 1's concepts
  o.domain_gap = 0.0;
  o.text_gap = 1.0;
  const SequenceSpec seq = make_sequence(o, 5);
  const auto& d1 = seq.domains[0];
  const auto& d3 = seq.domains[2];
  auto column = [](const Matrix& m, std::size_t c) {
    std::vector<double> v(m.rows());
    for (std::size_t r = 0; r < m.rows(); ++r) v[r] = m(r, c);
    return v;
  };
  for (std::size_t c = 0; c < o.latent_dim; ++c) {
    bool audio_match = false, text_match = false;
    for (std::size_t c1 = 0; c1 < o.latent_dim; ++c1) {
      audio_match = audio_match || column(d3.audio_map, c) == column(d1.audio_map, c1);
      text_match = text_match || column(d3.text_logit_map, c) == column(d1.text_logit_map, c1);
    }
    CHECK(audio_match);
    CHECK_FALSE(text_match);
  }
  // Negative text_gap follows domain_gap: at gap 0 the captions repeat too.
  o.text_gap = -1.0;
  const SequenceSpec same = make_sequence(o, 5);
  for (std::size_t c = 0; c < o.latent_dim; ++c) {
    bool text_match = false;
    for (std::size_t c1 = 0; c1 < o.latent_dim; ++c1)
      text_match = text_match || column(same.domains[2].text_logit_map, c) ==
                                     column(same.domains[0].text_logit_map, c1);
    CHECK(text_match);
  }
  o.text_gap = 1.5;
  CHECK_THROWS_AS(make_sequence(o, 5), ValidationError);
}

TEST_CASE("gap monotonicity over rho in {0, 0.5, 1}") {
  std::vector<double> recall;
  for (double rho : {0.0, 0.5, 1.0}) {
    SequenceOptions o = small_options();
    o.overlap = rho;
    o.domain_gap = 1.0;
    const SequenceSpec seq = make_sequence(o, 8);
    const DomainData d1 = generate_domain(seq.domains[0]);
    const DomainData d2 = generate_domain(seq.domains[1]);
    const continual::ModelState s = train_step1(d1.train);
    recall.push_back(mean_r10(eval::evaluate_retrieval(s.params, s.config, s.strategy, d2.test)));
    MESSAGE("rho " << rho << ": domain-2 R@10 " << recall.back());
  }
  CHECK(recall[0] <= recall[1]);
  CHECK(recall[1] <= recall[2]);
}
