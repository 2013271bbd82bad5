#include "ptat/checks.hpp"

#include <unistd.h>

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include "ptat/config.hpp"
#include "ptat/continual.hpp"
#include "ptat/errors.hpp"

namespace ptat::checks {

namespace fs = std::filesystem;

namespace {

void say(const Log& log, const std::string& msg) {
  if (log) log(msg);
}

std::string fmt(const char* pattern, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, pattern, v);
  return buf;
}

Matrix gaussian(std::size_t r, std::size_t c, double sigma, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, sigma);
  Matrix m(r, c);
  for (double& v : m.values()) v = dist(rng);
  return m;
}

Matrix unit_rows(Matrix m) {
  for (std::size_t r = 0; r < m.rows(); ++r) {
    double ss = 0.0;
    for (double v : m.row(r)) ss += v * v;
    for (double& v : m.row(r)) v /= std::sqrt(ss);
  }
  return m;
}

// Small shapes for the property suites.
ModelConfig small_model() {
  ModelConfig c;
  for (EncoderConfig* e : {&c.audio, &c.text}) {
    e->embed_dim = 8;
    e->num_layers = 2;
    e->num_heads = 2;
    e->mlp_hidden = 16;
    e->shared_dim = 6;
    e->max_seq_len = 16;
    e->vocab_size = 10;
  }
  c.audio.input_rows = 8;
  c.audio.input_cols = 4;
  c.audio.patch_rows = 4;
  c.audio.patch_cols = 2;
  c.text_len = 4;
  c.prompt_len = 3;
  c.lora_rank = 2;
  return c;
}

data::SequenceOptions small_sequence(std::size_t domains = 2) {
  data::SequenceOptions o;
  o.num_domains = domains;
  o.latent_dim = 4;
  o.pool_size = 12;
  o.num_train = 96;
  o.num_test = 40;
  o.spec_rows = 8;
  o.spec_cols = 4;
  o.text_len = 4;
  o.vocab_size = 10;
  o.noise_sigma = 0.05;
  return o;
}

continual::TrainConfig small_train() {
  continual::TrainConfig tc;
  tc.learning_rate = 3e-3;
  tc.epochs = 2;
  tc.batch_size = 16;
  tc.seed = 4;
  return tc;
}

struct SmallWorld {
  ModelConfig cfg = small_model();
  ParameterStore backbone;
  std::vector<data::DomainData> domains;
  continual::ConfigHash hash = continual::hash_config("selftest");

  SmallWorld() {
    std::mt19937_64 rng(17);
    init_audio_encoder(backbone, cfg.audio, rng);
    init_text_encoder(backbone, cfg.text, rng);
    backbone.round_to_float();
    for (const auto& spec : data::make_sequence(small_sequence(), 3).domains)
      domains.push_back(data::generate_domain(spec));
  }

  continual::ModelState state(StrategyTag tag) const {
    return continual::init_state(cfg, build_strategy(tag), backbone, 1, hash);
  }
};

// Plain-loop oracles, independent of the graph.
std::vector<double> softmax_row(const Matrix& m, std::size_t r) {
  double mx = m(r, 0);
  for (std::size_t c = 1; c < m.cols(); ++c) mx = std::max(mx, m(r, c));
  std::vector<double> p(m.cols());
  double sum = 0.0;
  for (std::size_t c = 0; c < m.cols(); ++c) sum += p[c] = std::exp(m(r, c) - mx);
  for (double& v : p) v /= sum;
  return p;
}

double kl_rows(const Matrix& p_logits, const Matrix& q_logits) {
  double total = 0.0;
  for (std::size_t r = 0; r < p_logits.rows(); ++r) {
    const auto p = softmax_row(p_logits, r);
    const auto q = softmax_row(q_logits, r);
    for (std::size_t c = 0; c < p.size(); ++c)
      if (p[c] > 0) total += p[c] * std::log(p[c] / q[c]);
  }
  return total / static_cast<double>(p_logits.rows());
}

Matrix scaled_dots(const Matrix& a, const Matrix& b, double tau) {
  Matrix c(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.rows(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(j, k);
      c(i, j) = s / tau;
    }
  return c;
}

double cross_entropy_diag(const Matrix& c) {
  double total = 0.0;
  for (std::size_t i = 0; i < c.rows(); ++i) total -= std::log(softmax_row(c, i)[i]);
  return total / static_cast<double>(c.rows());
}

std::size_t sort_oracle_hits(const Matrix& c, std::size_t k) {
  std::size_t hits = 0;
  for (std::size_t i = 0; i < c.rows(); ++i) {
    std::vector<std::size_t> order(c.cols());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return c(i, a) > c(i, b); });
    hits += static_cast<std::size_t>(std::find(order.begin(), order.end(), i) - order.begin()) < k;
  }
  return hits;
}

template <typename F>
CheckResult guarded(const std::string& name, F&& body) {
  CheckResult r;
  r.name = name;
  try {
    body(r);
  } catch (const std::exception& e) {
    r.passed = false;
    r.detail = std::string("exception: ") + e.what();
  }
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const fs::path& p, const std::string& bytes) {
  std::ofstream(p, std::ios::binary | std::ios::trunc) << bytes;
}

// ---- gradcheck -----------------------------------------------------------

struct Batch {
  AudioBatch audio;
  TextBatch text;
};

constexpr std::array<const char*, 5> kTerms{"kl", "contrast", "fd", "sd", "total"};

struct Forward {
  std::array<double, 5> values{};
  std::map<std::string, std::array<Matrix, 5>> grads;
};

Forward forward(const ParameterStore& store, const ModelConfig& cfg, const Strategy& strategy,
                const Batch& b, const Matrix& teacher_audio, const Matrix& teacher_text,
                bool with_grads) {
  diffmath::Graph g;
  const BoundParams p(g, store);
  const EmbeddingNodes e = embed_batch(g, p, cfg, strategy, b.audio, b.text);
  const losses::BatchEmbeddings student{e.audio, e.text};
  const losses::BatchEmbeddings teacher{g.constant(teacher_audio), g.constant(teacher_text)};
  const losses::LossWeights w;
  const losses::LossTerms t = losses::total_loss(
      g, student, losses::similarity_matrices(g, student.audio, student.text, w.tau), teacher, w);
  const std::array<diffmath::NodeId, 5> ids{t.kl, t.contrast, t.fd, t.sd, t.total};
  Forward out;
  for (std::size_t i = 0; i < 5; ++i) out.values[i] = g.scalar(ids[i]);
  if (with_grads) {
    for (std::size_t i = 0; i < 5; ++i) {
      const diffmath::GradientMap gm = g.backward(ids[i]);
      for (const auto& [name, id] : p.ids()) {
        auto& slot = out.grads[name][i];
        const Matrix& v = store.at(name);
        slot = gm.contains(id) ? gm.at(id) : Matrix(v.rows(), v.cols());
      }
    }
  }
  return out;
}

CheckResult gradcheck_strategy(const std::string& tag, const GradcheckOptions& opts,
                               const Log& log, std::vector<CheckResult>& per_term) {
  const auto start = std::chrono::steady_clock::now();
  const Strategy strategy = build_strategy(tag);
  const ModelConfig& cfg = opts.model;
  std::mt19937_64 rng(opts.seed);

  ParameterStore store;
  init_audio_encoder(store, cfg.audio, rng);
  init_text_encoder(store, cfg.text, rng);
  install_strategy(store, strategy, cfg, rng);
  store.set_trainable(trainable_partition(store, strategy).names);
  // Move off the structured initial point (zero adapters, identity maps).
  for (const auto& name : store.trainable_names())
    for (double& v : store.at(name).values()) v += std::normal_distribution<double>(0, 0.05)(rng);

  // Teacher: a perturbed copy evaluated once; its outputs are constants.
  ParameterStore teacher_store = store;
  for (const auto& name : teacher_store.trainable_names())
    for (double& v : teacher_store.at(name).values())
      v += std::normal_distribution<double>(0, 0.05)(rng);

  std::vector<AudioSample> audio;
  std::vector<TextSample> text;
  std::uniform_int_distribution<int> tok(0, static_cast<int>(cfg.text.vocab_size) - 1);
  for (std::size_t i = 0; i < opts.batch; ++i) {
    audio.push_back({gaussian(cfg.audio.input_rows, cfg.audio.input_cols, 1.0, rng)});
    TextSample t;
    for (std::size_t j = 0; j < cfg.text_len; ++j) t.tokens.push_back(tok(rng));
    text.push_back(t);
  }
  std::vector<const AudioSample*> ap;
  std::vector<const TextSample*> tp;
  for (std::size_t i = 0; i < opts.batch; ++i) {
    ap.push_back(&audio[i]);
    tp.push_back(&text[i]);
  }
  const Batch b{make_audio_batch(cfg.audio, ap), make_text_batch(cfg.text, tp)};

  Matrix t_audio, t_text;
  {
    diffmath::Graph g;
    const BoundParams p(g, teacher_store);
    const EmbeddingNodes e = embed_batch(g, p, cfg, strategy, b.audio, b.text);
    t_audio = g.value(e.audio);
    t_text = g.value(e.text);
  }

  const Forward base = forward(store, cfg, strategy, b, t_audio, t_text, true);
  const Forward again = forward(store, cfg, strategy, b, t_audio, t_text, false);
  if (base.values != again.values) throw ValidationError("loss evaluation is not deterministic");

  std::array<double, 5> worst{};
  std::size_t entries = 0;
  for (const auto& name : store.trainable_names()) {
    Matrix& m = store.at(name);
    for (std::size_t k = 0; k < m.size(); ++k) {
      const double orig = m.values()[k];
      m.values()[k] = orig + opts.epsilon;
      const auto up = forward(store, cfg, strategy, b, t_audio, t_text, false).values;
      m.values()[k] = orig - opts.epsilon;
      const auto down = forward(store, cfg, strategy, b, t_audio, t_text, false).values;
      m.values()[k] = orig;
      for (std::size_t i = 0; i < 5; ++i) {
        const double numeric = (up[i] - down[i]) / (2.0 * opts.epsilon);
        const double analytic = base.grads.at(name)[i].values()[k];
        worst[i] = std::max(worst[i],
                            std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric)));
      }
      ++entries;
    }
  }

  bool ok = true;
  for (std::size_t i = 0; i < 5; ++i) {
    CheckResult r;
    r.name = "gradcheck " + tag + " " + kTerms[i];
    r.passed = worst[i] < opts.tolerance;
    r.detail = "max rel error " + fmt("%.3e", worst[i]) + " (value " + fmt("%.6g", base.values[i]) + ")";
    ok = ok && r.passed;
    per_term.push_back(r);
  }
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  CheckResult summary;
  summary.name = "gradcheck " + tag;
  summary.passed = ok;
  summary.detail = std::to_string(entries) + " entries, " + fmt("%.1f s", secs);
  say(log, summary.name + ": " + summary.detail);
  return summary;
}

}  // namespace

std::vector<CheckResult> gradcheck(const GradcheckOptions& opts, const Log& log) {
  opts.model.validate();
  if (opts.batch < 2) throw ValidationError("gradcheck batch must be >= 2");
  std::vector<CheckResult> out;
  for (const auto& tag : opts.strategies) {
    std::vector<CheckResult> terms;
    gradcheck_strategy(tag, opts, log, terms);
    for (auto& t : terms) out.push_back(std::move(t));
  }
  return out;
}

CheckResult check_recall_oracle() {
  return guarded("recall@k equals the sort oracle", [](CheckResult& r) {
    std::mt19937_64 rng(2024);
    std::size_t mismatches = 0;
    for (int trial = 0; trial < 100; ++trial) {
      Matrix c = gaussian(50, 50, 1.0, rng);
      if (trial % 4 == 0)
        for (double& v : c.values()) v = std::round(v * 2.0) / 2.0;  // exact ties
      for (std::size_t k : eval::kRecallKs) {
        const double oracle = static_cast<double>(sort_oracle_hits(c, k)) / 50.0;
        mismatches += eval::recall_at_k(c, k) != oracle;
      }
    }
    r.passed = mismatches == 0;
    r.detail = std::to_string(mismatches) + " mismatches over 100 matrices x 3 cutoffs";
  });
}

CheckResult check_loss_oracles() {
  return guarded("KL/softmax losses equal direct summation", [](CheckResult& r) {
    std::mt19937_64 rng(91);
    double worst = 0.0;
    auto track = [&](double got, double want) { worst = std::max(worst, std::abs(got - want)); };
    for (int trial = 0; trial < 20; ++trial) {
      const std::size_t n = 3 + trial % 6, d = 4 + trial % 5;
      const Matrix a = unit_rows(gaussian(n, d, 1.0, rng));
      const Matrix t = unit_rows(gaussian(n, d, 1.0, rng));
      const Matrix ta = unit_rows(gaussian(n, d, 1.0, rng));
      const Matrix tt = unit_rows(gaussian(n, d, 1.0, rng));
      const double tau = 0.07;

      diffmath::Graph g;
      const losses::BatchEmbeddings s{g.constant(a), g.constant(t)};
      const losses::BatchEmbeddings te{g.constant(ta), g.constant(tt)};
      const auto sp = losses::similarity_matrices(g, s.audio, s.text, tau);
      const auto tp = losses::similarity_matrices(g, te.audio, te.text, tau);
      const Matrix c = scaled_dots(a, t, tau), ct = scaled_dots(t, a, tau);
      const Matrix tc = scaled_dots(ta, tt, tau), tct = scaled_dots(tt, ta, tau);

      track(g.scalar(losses::row_kl(g, s.audio, s.text)), kl_rows(a, t));
      track(g.scalar(losses::kl_alignment_loss(g, s)), kl_rows(a, t) + kl_rows(t, a));
      track(g.scalar(losses::contrastive_loss(g, sp)), cross_entropy_diag(c) + cross_entropy_diag(ct));
      track(g.scalar(losses::feature_distillation_loss(g, s, te)), kl_rows(a, ta) + kl_rows(t, tt));
      track(g.scalar(losses::similarity_distillation_loss(g, sp, tp)),
            kl_rows(c, tc) + kl_rows(ct, tct));
      const losses::LossWeights w;
      const auto terms = losses::total_loss(g, s, sp, te, w);
      track(g.scalar(terms.total), kl_rows(a, t) + kl_rows(t, a) +
                                       w.lambda * (cross_entropy_diag(c) + cross_entropy_diag(ct)) +
                                       kl_rows(a, ta) + kl_rows(t, tt) +
                                       w.alpha * (kl_rows(c, tc) + kl_rows(ct, tct)));
    }
    r.passed = worst <= 1e-9;
    r.detail = "max abs difference " + fmt("%.3e", worst) + " (tolerance 1e-9)";
  });
}

CheckResult check_zero_at_teacher() {
  return guarded("distillation is zero at the teacher", [](CheckResult& r) {
    const SmallWorld w;
    double worst = 0.0;
    for (StrategyTag tag : {StrategyTag::ptat, StrategyTag::prompt_shallow, StrategyTag::low_rank}) {
      // One trained step so the student differs from the initial point.
      const auto out = continual::run_step(w.state(tag), w.domains[0].train, nullptr, small_train());
      const Strategy s = build_strategy(tag);
      const auto& ds = w.domains[1].train;
      const eval::DatasetEmbeddings te = eval::embed_dataset(out.snapshot.params, w.cfg, s, ds);

      std::vector<const AudioSample*> ap;
      std::vector<const TextSample*> tp;
      for (std::size_t i = 0; i < 16; ++i) {
        ap.push_back(&ds.samples[i].audio);
        tp.push_back(&ds.samples[i].text);
      }
      Matrix ta(16, te.audio.cols()), tt(16, te.text.cols());
      for (std::size_t i = 0; i < 16; ++i)
        for (std::size_t c = 0; c < ta.cols(); ++c) {
          ta(i, c) = te.audio(i, c);
          tt(i, c) = te.text(i, c);
        }
      diffmath::Graph g;
      const BoundParams p(g, out.state.params);
      const EmbeddingNodes e = embed_batch(g, p, w.cfg, s, make_audio_batch(w.cfg.audio, ap),
                                           make_text_batch(w.cfg.text, tp));
      const losses::BatchEmbeddings student{e.audio, e.text};
      const losses::BatchEmbeddings teacher{g.constant(ta), g.constant(tt)};
      const double tau = losses::LossWeights{}.tau;
      const double fd = g.scalar(losses::feature_distillation_loss(g, student, teacher));
      const double sd = g.scalar(losses::similarity_distillation_loss(
          g, losses::similarity_matrices(g, student.audio, student.text, tau),
          losses::similarity_matrices(g, teacher.audio, teacher.text, tau)));
      worst = std::max({worst, std::abs(fd), std::abs(sd)});
    }
    r.passed = worst <= 1e-12;
    r.detail = "max |L_FD|, |L_SD| = " + fmt("%.3e", worst) + " (tolerance 1e-12)";
  });
}

CheckResult check_partition_law() {
  return guarded("frozen parameters stay bit-identical", [](CheckResult& r) {
    const SmallWorld w;
    std::string problems;
    for (StrategyTag tag : {StrategyTag::ptat, StrategyTag::prompt_shallow, StrategyTag::prompt_deep,
                            StrategyTag::text_prompt_only, StrategyTag::low_rank,
                            StrategyTag::finetune_sequential}) {
      continual::ModelState st = w.state(tag);
      std::optional<continual::ModelSnapshot> teacher;
      for (std::size_t m = 0; m < w.domains.size(); ++m) {
        const ParameterStore before = st.params;
        const bool distill = st.strategy.distillation && m > 0;
        auto out = continual::run_step(st, w.domains[m].train, distill ? &*teacher : nullptr,
                                       small_train());
        for (const auto& [name, entry] : before) {
          const bool same = entry.value == out.state.params.at(name);
          if (!entry.trainable && !same)
            problems += " " + std::string(to_string(tag)) + ":" + name + " moved";
          if (entry.trainable && same)
            problems += " " + std::string(to_string(tag)) + ":" + name + " never updated";
        }
        st = std::move(out.state);
        teacher = continual::make_snapshot(st);
      }
    }
    r.passed = problems.empty();
    r.detail = problems.empty() ? "6 strategies x 2 steps" : problems;
  });
}

CheckResult check_parameter_efficiency() {
  return guarded("PTAT trains < 5% of the finetune parameters", [](CheckResult& r) {
    const ModelConfig cfg;  // desk configuration
    std::mt19937_64 rng(0);
    auto count = [&](StrategyTag tag) {
      ParameterStore s;
      init_audio_encoder(s, cfg.audio, rng);
      init_text_encoder(s, cfg.text, rng);
      const Strategy st = build_strategy(tag);
      install_strategy(s, st, cfg, rng);
      s.set_trainable(trainable_partition(s, st).names);
      return s.trainable_count();
    };
    const std::size_t ptat = count(StrategyTag::ptat);
    const std::size_t full = count(StrategyTag::finetune_sequential);
    const double ratio = static_cast<double>(ptat) / static_cast<double>(full);
    r.passed = ratio < 0.05;
    r.detail = std::to_string(ptat) + " / " + std::to_string(full) + " = " + fmt("%.4f", ratio);
  });
}

CheckResult check_determinism() {
  return guarded("identical config and seed give identical metrics bytes", [](CheckResult& r) {
    const SmallWorld w;
    std::string first;
    for (int rep = 0; rep < 2; ++rep) {
      const auto h = continual::run_sequence(w.domains, w.cfg, build_strategy(StrategyTag::ptat),
                                             small_train(), w.backbone, w.hash);
      std::ostringstream out;
      eval::write_jsonl(h, out);
      if (rep == 0) {
        first = out.str();
      } else {
        r.passed = out.str() == first;
        r.detail = std::to_string(first.size()) + " bytes of JSONL compared";
      }
    }
  });
}

CheckResult check_snapshot_integrity() {
  return guarded("snapshot round trip and corruption classes", [](CheckResult& r) {
    const SmallWorld w;
    const auto out = continual::run_step(w.state(StrategyTag::ptat), w.domains[0].train, nullptr,
                                         small_train());
    const fs::path path = fs::temp_directory_path() /
                          ("ptat_selftest_" + std::to_string(::getpid()) + ".snap");
    struct Cleanup {
      fs::path p;
      ~Cleanup() { fs::remove(p); }
    } cleanup{path};
    continual::save_snapshot(out.snapshot, path);
    const auto back = continual::load_snapshot(path, w.hash);
    const Strategy s = build_strategy(StrategyTag::ptat);
    const auto a = eval::evaluate_retrieval(out.snapshot.params, w.cfg, s, w.domains[0].test);
    const auto b = eval::evaluate_retrieval(back.params, w.cfg, s, w.domains[0].test);
    std::string problems;
    if (!(back.params == out.snapshot.params)) problems += " parameters differ;";
    if (a.a2t != b.a2t || a.t2a != b.t2a) problems += " recalls differ;";

    const std::string good = slurp(path);
    auto kind_of = [&](const std::string& bytes,
                       std::optional<continual::ConfigHash> expect) -> int {
      spit(path, bytes);
      try {
        continual::load_snapshot(path, expect);
      } catch (const SnapshotError& e) {
        return static_cast<int>(e.kind());
      }
      return -1;
    };
    using K = SnapshotError::Kind;
    std::string flipped = good;
    flipped[flipped.size() - 10] ^= 0x5a;
    std::string version = good;
    version[8] = 0;  // first byte of the version field
    std::string bad_magic = good;
    bad_magic[0] = 'X';
    continual::ConfigHash other = w.hash;
    other[0] ^= 1;
    const std::vector<std::tuple<std::string, std::string, std::optional<continual::ConfigHash>, K>>
        cases{{"flipped payload byte", flipped, std::nullopt, K::hash},
              {"version 0", version, std::nullopt, K::version},
              {"truncated", good.substr(0, good.size() - 100), std::nullopt, K::truncated},
              {"bad magic", bad_magic, std::nullopt, K::format},
              {"wrong config hash", good, other, K::hash}};
    for (const auto& [label, bytes, expect, kind] : cases)
      if (kind_of(bytes, expect) != static_cast<int>(kind)) problems += " " + label + " misclassified;";
    fs::remove(path);
    try {
      continual::load_snapshot(path);
      problems += " missing file accepted;";
    } catch (const SnapshotError& e) {
      if (e.kind() != K::io) problems += " missing file misclassified;";
    }
    r.passed = problems.empty();
    r.detail = problems.empty() ? "bit-identical recalls; 6 corruption cases classified" : problems;
  });
}

CheckResult check_config_round_trip() {
  return guarded("config echo re-parses identically", [](CheckResult& r) {
    config::RunConfig c;
    c.strategies = {"ptat", "finetune_sequential", "low_rank"};
    c.seeds = {0, 1, 7};
    c.order = {2, 1, 4, 3};
    c.train.learning_rate = 1.0 / 3.0;
    c.train.toggles.feature_distillation = false;
    c.sequence.domain_gap = 0.1 + 0.2;
    c.backbone_cache = "cache/bb.snap";
    const config::RunConfig back = config::parse_config(config::to_ini(c));
    const config::RunConfig plain = config::parse_config(config::to_ini(config::RunConfig{}));
    r.passed = back == c && plain == config::RunConfig{} &&
               config::to_ini(back) == config::to_ini(c);
    r.detail = r.passed ? "default and edited configs round-trip" : "round trip changed the config";
  });
}

std::vector<CheckResult> selftest(const Log& log) {
  std::vector<CheckResult> out;
  for (auto* fn : {check_recall_oracle, check_loss_oracles, check_zero_at_teacher,
                   check_partition_law, check_parameter_efficiency, check_determinism,
                   check_snapshot_integrity, check_config_round_trip}) {
    out.push_back(fn());
    const auto& r = out.back();
    say(log, std::string(r.passed ? "PASS " : "FAIL ") + r.name + ": " + r.detail);
  }
  return out;
}

}  // namespace ptat::checks
