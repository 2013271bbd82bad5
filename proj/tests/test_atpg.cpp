#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <random>

#include "ptat/atpg.hpp"
#include "ptat/baselines.hpp"
#include "ptat/errors.hpp"
#include "test_util.hpp"

using namespace ptat;
using namespace ptat::testing;
using diffmath::Graph;
using diffmath::NodeId;

TEST_CASE("generate_text_prompts: identity and constant maps") {
  std::mt19937_64 rng(1);
  const atpg::PromptSet ps = atpg::init_prompt_set(12, 32, 1, rng);
  CHECK(ps.length() == 12);
  const auto [pre, post] = atpg::generate_text_prompts(ps);
  CHECK(pre == ps.audio);
  CHECK(post == ps.audio);

  atpg::PromptSet c = ps;
  c.post_weight = Matrix(32, 32);
  c.post_bias = random_matrix(1, 32, rng);
  const auto [pre2, post2] = atpg::generate_text_prompts(c);
  for (std::size_t r = 0; r < 12; ++r)
    for (std::size_t k = 0; k < 32; ++k) CHECK(post2(r, k) == c.post_bias(0, k));

  atpg::PromptSet bad = ps;
  bad.pre_weight = Matrix(31, 32);
  CHECK_THROWS_AS(atpg::generate_text_prompts(bad), ShapeError);
}

TEST_CASE("generate_text_prompts: linearity and coupling") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    atpg::PromptSet ps = atpg::init_prompt_set(5, 6, 1, rng);
    ps.pre_weight = random_matrix(6, 6, rng);
    ps.post_weight = random_matrix(6, 6, rng);
    const Matrix a1 = random_matrix(5, 6, rng), a2 = random_matrix(5, 6, rng);
    const double alpha = 0.7, beta = -1.3;
    Matrix mix(5, 6);
    for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = alpha * a1[i] + beta * a2[i];
    auto gen = [&](const Matrix& a) {
      atpg::PromptSet p = ps;
      p.audio = a;
      return atpg::generate_text_prompts(p);
    };
    const auto g1 = gen(a1), g2 = gen(a2), gm = gen(mix);
    for (std::size_t i = 0; i < mix.size(); ++i) {
      CHECK(std::abs(gm.first[i] - (alpha * g1.first[i] + beta * g2.first[i])) < 1e-10);
      CHECK(std::abs(gm.second[i] - (alpha * g1.second[i] + beta * g2.second[i])) < 1e-10);
    }
    // one entry of A moves both prompt sets
    Matrix bumped = a1;
    bumped(2, 3) += 0.1;
    const auto gb = gen(bumped);
    CHECK(max_abs_diff(gb.first, g1.first) > 0.0);
    CHECK(max_abs_diff(gb.second, g1.second) > 0.0);
  }
}

TEST_CASE("text-side loss reaches A through the coupling maps") {
  const ModelConfig cfg = tiny_config();
  std::mt19937_64 rng(3);
  ParameterStore s;
  init_text_encoder(s, cfg.text, rng);
  atpg::PromptSet ps = atpg::init_prompt_set(cfg.prompt_len, cfg.text.embed_dim, 1, rng);
  ps.pre_weight = random_matrix(8, 8, rng, 0.5);
  ps.post_weight = random_matrix(8, 8, rng, 0.5);
  const TextSample t = random_text(cfg.text_len, cfg.text.vocab_size, rng);
  const TextSample* one[] = {&t};
  const TextBatch batch = make_text_batch(cfg.text, one);
  const Matrix probe = random_matrix(cfg.text.shared_dim, 1, rng);

  // audio encoder absent: the only path from A to the loss is S_pre/S_post
  const diffmath::LossBuilder builder = [&](Graph& g, std::span<const NodeId> p) {
    const BoundParams bp(g, s);
    const auto [pre, post] = atpg::generate_text_prompts(
        g, p[0], g.constant(ps.pre_weight), g.constant(ps.pre_bias), g.constant(ps.post_weight),
        g.constant(ps.post_bias));
    const NodeId e = encode_text_batch(g, bp, cfg.text, batch, pre, post);
    return g.mean_all(g.matmul(e, g.constant(probe)));
  };
  const std::vector<Matrix> params{random_matrix(cfg.prompt_len, 8, rng, 0.5)};
  CHECK(diffmath::finite_difference_check(builder, params, 1e-6) < 1e-6);

  Graph g;
  const NodeId a = g.parameter(params[0]);
  const std::array<NodeId, 1> in{a};
  const auto grads = g.backward(builder(g, in));
  double mag = 0.0;
  for (double v : grads.at(a).values()) mag += std::abs(v);
  CHECK(mag > 1e-8);
}

TEST_CASE("inject_audio_prompts: shapes, empty prompts, policy") {
  Graph g;
  std::mt19937_64 rng(4);
  // 32x16 spectrogram in 4x4 patches = 32 tokens, d = 16, 12 prompts
  const NodeId state = g.constant(random_matrix(2 * 32, 16, rng));
  const NodeId prompts = g.constant(random_matrix(12, 16, rng));
  std::vector<std::size_t> lengths{32, 32};
  const NodeId out = atpg::inject_audio_prompts(g, state, lengths, prompts);
  CHECK(g.value(out).rows() == 2 * 44);
  CHECK(lengths == std::vector<std::size_t>{44, 44});
  CHECK(g.value(out)(0, 0) == g.value(prompts)(0, 0));
  CHECK(g.value(out)(44, 3) == g.value(prompts)(0, 3));
  CHECK(g.value(out)(12, 5) == g.value(state)(0, 5));
  CHECK(g.value(out)(56, 5) == g.value(state)(32, 5));

  std::vector<std::size_t> same{32, 32};
  const NodeId none = g.constant(Matrix(0, 16));
  CHECK(atpg::inject_audio_prompts(g, state, same, none) == state);
  CHECK(same == std::vector<std::size_t>{32, 32});

  const NodeId narrow = g.constant(Matrix(12, 15));
  CHECK_THROWS_AS(atpg::inject_audio_prompts(g, state, same, narrow), ShapeError);

  atpg::InjectionSchedule sched(2);
  sched.inject(1, prompts);
  CHECK(sched.at(1) == prompts);
  CHECK_FALSE(sched.at(2).has_value());
  CHECK_THROWS_AS(sched.inject(2, prompts), ValidationError);
  CHECK_THROWS_AS(sched.inject(1, prompts), ValidationError);
  atpg::InjectionSchedule other(2);
  CHECK_THROWS_AS(other.inject(0, prompts), ValidationError);
  CHECK_THROWS_AS(other.inject(3, prompts), ValidationError);
  atpg::InjectionSchedule deep(2, true);
  deep.inject(1, prompts);
  CHECK_NOTHROW(deep.inject(2, prompts));
}

TEST_CASE("count_trainable: closed forms on the desk config") {
  const ModelConfig cfg;
  std::mt19937_64 rng(5);
  const ParameterStore ptat_model = build_model(cfg, build_strategy(StrategyTag::ptat), rng);
  const auto part = trainable_partition(ptat_model, build_strategy(StrategyTag::ptat));
  const std::size_t ptat_count = atpg::count_trainable(ptat_model, part);
  CHECK(ptat_count == 12 * 32 + 2 * (1024 + 32) + 2 * 1056);
  CHECK(ptat_count == 4608);
  CHECK(ptat_model.trainable_count() == 4608);

  const ParameterStore ft = build_model(cfg, build_strategy(StrategyTag::finetune_sequential), rng);
  const std::size_t ft_count =
      atpg::count_trainable(ft, trainable_partition(ft, build_strategy(StrategyTag::finetune_sequential)));
  CHECK(ft_count == ft.total_count());
  CHECK(static_cast<double>(ptat_count) / static_cast<double>(ft_count) < 0.03);
}
