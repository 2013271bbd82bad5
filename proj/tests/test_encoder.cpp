#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <random>

#include "ptat/baselines.hpp"
#include "ptat/errors.hpp"
#include "ptat/losses.hpp"
#include "test_util.hpp"

using namespace ptat;
using namespace ptat::testing;
using diffmath::Graph;
using diffmath::NodeId;

namespace {

double norm(const Matrix& row) {
  double s = 0.0;
  for (double v : row.values()) s += v * v;
  return std::sqrt(s);
}

ParameterStore backbone(const ModelConfig& cfg, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ParameterStore s;
  init_audio_encoder(s, cfg.audio, rng);
  init_text_encoder(s, cfg.text, rng);
  return s;
}

}  // namespace

TEST_CASE("encode_audio: zero projection head is a normalization error") {
  const ModelConfig cfg;
  ParameterStore s = backbone(cfg, 1);
  s.at("audio.proj.w") = Matrix(cfg.audio.embed_dim, cfg.audio.shared_dim);
  std::mt19937_64 rng(2);
  CHECK_THROWS_WITH_AS(encode_audio(random_audio(cfg.audio, rng), nullptr, 1, s, cfg.audio),
                       doctest::Contains("1e-12"), NumericError);
}

TEST_CASE("encoders: unit norm, purity, prompt sensitivity") {
  const ModelConfig cfg;
  const ParameterStore s = backbone(cfg, 3);
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 5; ++trial) {
    const AudioSample a = random_audio(cfg.audio, rng);
    const TextSample t = random_text(cfg.text_len, cfg.text.vocab_size, rng);
    const Matrix prompts = random_matrix(cfg.prompt_len, cfg.audio.embed_dim, rng, 0.5);

    const Matrix ea = encode_audio(a, nullptr, 1, s, cfg.audio);
    CHECK(ea.rows() == 1);
    CHECK(ea.cols() == cfg.audio.shared_dim);
    CHECK(std::abs(norm(ea) - 1.0) < 1e-9);
    CHECK(encode_audio(a, nullptr, 1, s, cfg.audio) == ea);

    const Matrix ep = encode_audio(a, &prompts, 1, s, cfg.audio);
    CHECK(std::abs(norm(ep) - 1.0) < 1e-9);
    CHECK(max_abs_diff(ea, ep) > 1e-6);
    CHECK(max_abs_diff(ep, encode_audio(a, &prompts, 2, s, cfg.audio)) > 1e-9);

    const Matrix et = encode_text(t, nullptr, nullptr, s, cfg.text);
    CHECK(std::abs(norm(et) - 1.0) < 1e-9);
    CHECK(encode_text(t, nullptr, nullptr, s, cfg.text) == et);
  }
}

TEST_CASE("encode_text: empty prompts, prompt row order, sequence bounds") {
  const ModelConfig cfg;
  const ParameterStore s = backbone(cfg, 5);
  std::mt19937_64 rng(6);
  const TextSample t = random_text(10, cfg.text.vocab_size, rng);
  const Matrix empty(0, cfg.text.embed_dim);
  CHECK(encode_text(t, &empty, &empty, s, cfg.text) == encode_text(t, nullptr, nullptr, s, cfg.text));

  const Matrix pre = random_matrix(12, cfg.text.embed_dim, rng, 0.5);
  const Matrix post = random_matrix(12, cfg.text.embed_dim, rng, 0.5);
  Matrix swapped = pre;
  for (std::size_t c = 0; c < swapped.cols(); ++c) std::swap(swapped(0, c), swapped(5, c));
  const Matrix base = encode_text(t, &pre, &post, s, cfg.text);
  CHECK(max_abs_diff(base, encode_text(t, &swapped, &post, s, cfg.text)) > 1e-9);

  // 10 tokens + 12 + 12 prompts = 34 rows; fits 34, overflows 33
  EncoderConfig tight = cfg.text;
  tight.max_seq_len = 34;
  ParameterStore s34;
  std::mt19937_64 r34(7);
  init_text_encoder(s34, tight, r34);
  CHECK_NOTHROW(encode_text(t, &pre, &post, s34, tight));
  tight.max_seq_len = 33;
  ParameterStore s33;
  init_text_encoder(s33, tight, r34);
  CHECK_THROWS_AS(encode_text(t, &pre, &post, s33, tight), ShapeError);

  const Matrix wrong = random_matrix(12, cfg.text.embed_dim + 1, rng);
  CHECK_THROWS_AS(encode_text(t, &wrong, nullptr, s, cfg.text), ShapeError);
}

TEST_CASE("encode_audio: prompt width and overflow are rejected") {
  const ModelConfig cfg;
  const ParameterStore s = backbone(cfg, 8);
  std::mt19937_64 rng(9);
  const AudioSample a = random_audio(cfg.audio, rng);
  const Matrix wrong = random_matrix(12, cfg.audio.embed_dim + 1, rng);
  CHECK_THROWS_AS(encode_audio(a, &wrong, 1, s, cfg.audio), ShapeError);
  const Matrix too_many = random_matrix(cfg.audio.max_seq_len, cfg.audio.embed_dim, rng);
  CHECK_THROWS_AS(encode_audio(a, &too_many, 1, s, cfg.audio), ShapeError);
  const AudioSample bad{Matrix(31, 16)};
  CHECK_THROWS_AS(encode_audio(bad, nullptr, 1, s, cfg.audio), ShapeError);
}

TEST_CASE("batched encoding equals per-sample encoding") {
  const ModelConfig cfg = tiny_config();
  std::mt19937_64 rng(10);
  const ParameterStore s = build_model(cfg, build_strategy(StrategyTag::prompt_shallow), rng);
  std::vector<AudioSample> audio;
  std::vector<TextSample> text;
  for (int i = 0; i < 3; ++i) {
    audio.push_back(random_audio(cfg.audio, rng));
    text.push_back(random_text(cfg.text_len, cfg.text.vocab_size, rng));
  }
  std::vector<const AudioSample*> ap;
  std::vector<const TextSample*> tp;
  for (int i = 0; i < 3; ++i) {
    ap.push_back(&audio[i]);
    tp.push_back(&text[i]);
  }
  Graph g;
  const BoundParams p(g, s);
  const auto emb = embed_batch(g, p, cfg, build_strategy(StrategyTag::prompt_shallow),
                               make_audio_batch(cfg.audio, ap), make_text_batch(cfg.text, tp));
  const Matrix& prompts = s.at(atpg::kAudioPrompts);
  for (std::size_t i = 0; i < 3; ++i) {
    const Matrix one = encode_audio(audio[i], &prompts, 1, s, cfg.audio);
    for (std::size_t c = 0; c < one.cols(); ++c)
      CHECK(g.value(emb.audio)(i, c) == doctest::Approx(one(0, c)).epsilon(1e-12));
    const Matrix t1 = encode_text(text[i], nullptr, nullptr, s, cfg.text);
    for (std::size_t c = 0; c < t1.cols(); ++c)
      CHECK(g.value(emb.text)(i, c) == doctest::Approx(t1(0, c)).epsilon(1e-12));
  }
}

TEST_CASE("gradients reach the audio prompts through both encoders") {
  const ModelConfig cfg;
  const Strategy ptat_s = build_strategy(StrategyTag::ptat);
  std::mt19937_64 rng(12);
  const ParameterStore s = build_model(cfg, ptat_s, rng);
  std::vector<AudioSample> audio;
  std::vector<TextSample> text;
  std::vector<const AudioSample*> ap;
  std::vector<const TextSample*> tp;
  for (int i = 0; i < 4; ++i) {
    audio.push_back(random_audio(cfg.audio, rng));
    text.push_back(random_text(cfg.text_len, cfg.text.vocab_size, rng));
  }
  for (int i = 0; i < 4; ++i) {
    ap.push_back(&audio[i]);
    tp.push_back(&text[i]);
  }
  Graph g;
  const BoundParams p(g, s);
  const auto emb = embed_batch(g, p, cfg, ptat_s, make_audio_batch(cfg.audio, ap),
                               make_text_batch(cfg.text, tp));
  const losses::BatchEmbeddings b{emb.audio, emb.text};
  const auto terms = losses::total_loss(g, b, losses::similarity_matrices(g, b.audio, b.text, 0.07),
                                        std::nullopt, losses::LossWeights{});
  const auto grads = g.backward(terms.total);
  const NodeId a = p[atpg::kAudioPrompts];
  REQUIRE(grads.contains(a));
  double mag = 0.0;
  for (double v : grads.at(a).values()) mag += std::abs(v);
  CHECK(mag > 0.0);
  // frozen backbone entries are graph constants: no gradient slot at all
  CHECK_FALSE(grads.contains(p["audio.l1.wq"]));
  CHECK_FALSE(grads.contains(p["text.embed"]));
}
