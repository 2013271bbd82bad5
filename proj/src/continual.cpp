#include "ptat/continual.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include <openssl/evp.h>
#include <unistd.h>

#include "ptat/errors.hpp"

namespace ptat::continual {

static_assert(std::endian::native == std::endian::little,
              "snapshot I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'P', 'T', 'A', 'T', 'S', 'N', 'A', 'P'};
// The step index travels as a reserved 1x1 tensor so the layout stays plain.
constexpr const char* kStepTensor = "@step";

std::mt19937_64 stream(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(a),    static_cast<std::uint32_t>(a >> 32),
                    static_cast<std::uint32_t>(b),    static_cast<std::uint32_t>(b >> 32)};
  return std::mt19937_64(seq);
}

template <typename T>
void put(std::string& buf, T v) {
  char bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  buf.append(bytes, sizeof(T));
}

class Reader {
 public:
  Reader(const std::string& bytes, std::size_t end) : bytes_(bytes), end_(end) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  const char* take(std::size_t n) {
    need(n);
    const char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::size_t pos() const { return pos_; }

  struct Short {};

 private:
  void need(std::size_t n) const {
    if (pos_ + n > end_) throw Short{};
  }
  const std::string& bytes_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

struct Batch {
  AudioBatch audio;
  TextBatch text;
};

Batch make_batch(const ModelConfig& cfg, const data::PairedDataset& ds,
                 std::span<const std::size_t> idx) {
  std::vector<const AudioSample*> a;
  std::vector<const TextSample*> t;
  for (std::size_t i : idx) {
    a.push_back(&ds.samples[i].audio);
    t.push_back(&ds.samples[i].text);
  }
  return {make_audio_batch(cfg.audio, a), make_text_batch(cfg.text, t)};
}

Matrix gather_rows(const Matrix& m, std::span<const std::size_t> idx) {
  Matrix out(idx.size(), m.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    std::copy(m.row(idx[r]).begin(), m.row(idx[r]).end(), out.row(r).begin());
  }
  return out;
}

struct EpochTotals {
  double loss = 0.0;
  double distill = 0.0;
};

// One pass of mini-batch training; returns mean batch losses.
EpochTotals train_epoch(ModelState& state, AdamW& opt, const data::PairedDataset& train,
                        const eval::DatasetEmbeddings* teacher, const TrainConfig& cfg,
                        std::size_t step, std::size_t epoch) {
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  auto rng = stream(cfg.seed, 0x73687566u + step, epoch);  // "shuf"
  std::shuffle(order.begin(), order.end(), rng);

  EpochTotals totals;
  std::size_t batches = 0;
  for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
    const std::size_t count = std::min(cfg.batch_size, order.size() - start);
    if (count < 2) break;  // contrastive terms need a negative
    const std::span<const std::size_t> idx(order.data() + start, count);
    const Batch b = make_batch(state.config, train, idx);

    std::map<std::string, Matrix> named;
    try {
      diffmath::Graph g;
      const BoundParams p(g, state.params);
      const EmbeddingNodes e = embed_batch(g, p, state.config, state.strategy, b.audio, b.text);
      const losses::BatchEmbeddings student{e.audio, e.text};
      std::optional<losses::BatchEmbeddings> t;
      if (teacher != nullptr) {
        t = losses::BatchEmbeddings{g.constant(gather_rows(teacher->audio, idx)),
                                    g.constant(gather_rows(teacher->text, idx))};
      }
      const losses::LossTerms terms = losses::total_loss(
          g, student, losses::similarity_matrices(g, student.audio, student.text, cfg.weights.tau),
          t, cfg.weights, cfg.toggles);
      totals.loss += g.scalar(terms.total);
      totals.distill += g.scalar(terms.fd) + cfg.weights.alpha * g.scalar(terms.sd);

      const diffmath::GradientMap grads = g.backward(terms.total);
      for (const auto& [name, id] : p.ids()) {
        if (grads.contains(id)) named.emplace(name, grads.at(id));
      }
    } catch (const NumericError& err) {
      throw NumericError("step " + std::to_string(step) + ", epoch " + std::to_string(epoch + 1) +
                         ", batch " + std::to_string(batches + 1) + ": " + err.what());
    }
    opt.step(state.params, named);
    ++batches;
  }
  if (batches == 0) throw ValidationError("training split " + train.domain + " has < 2 pairs");
  totals.loss /= static_cast<double>(batches);
  totals.distill /= static_cast<double>(batches);
  return totals;
}

data::PairedDataset union_of(const std::vector<data::DomainData>& domains) {
  data::PairedDataset all;
  all.domain = "joint";
  all.split = data::Split::train;
  for (const auto& d : domains)
    all.samples.insert(all.samples.end(), d.train.samples.begin(), d.train.samples.end());
  return all;
}

}  // namespace

ConfigHash hash_config(std::string_view canonical) {
  ConfigHash out{};
  unsigned int len = 0;
  if (EVP_Digest(canonical.data(), canonical.size(), out.data(), &len, EVP_sha256(), nullptr) != 1 ||
      len != out.size()) {
    throw Error("SHA-256 digest failed");
  }
  return out;
}

std::string to_hex(const ConfigHash& hash) {
  static const char* digits = "0123456789abcdef";
  std::string s;
  for (std::uint8_t b : hash) {
    s += digits[b >> 4];
    s += digits[b & 15];
  }
  return s;
}

void TrainConfig::validate() const {
  auto require = [](bool ok, const char* what) {
    if (!ok) throw ValidationError(what);
  };
  require(learning_rate > 0.0 && std::isfinite(learning_rate), "train.learning_rate must be > 0");
  require(weight_decay >= 0.0 && std::isfinite(weight_decay), "train.weight_decay must be >= 0");
  require(batch_size >= 2, "train.batch_size must be >= 2");
  require(weights.lambda >= 0.0, "loss.lambda must be >= 0");
  require(weights.alpha >= 0.0, "loss.alpha must be >= 0");
  require(weights.tau > 0.0, "loss.tau must be > 0");
}

ModelState init_state(const ModelConfig& cfg, const Strategy& strategy,
                      const ParameterStore& backbone, std::uint64_t seed, const ConfigHash& hash) {
  cfg.validate();
  ModelState s;
  s.config = cfg;
  s.strategy = strategy;
  s.params = backbone;
  s.config_hash = hash;
  auto rng = stream(seed, 0x696e6974u);  // "init"
  install_strategy(s.params, strategy, cfg, rng);
  s.params.round_to_float();
  s.params.set_trainable(trainable_partition(s.params, strategy).names);
  return s;
}

ModelSnapshot make_snapshot(const ModelState& state) {
  ModelSnapshot snap;
  snap.params = state.params;
  snap.params.round_to_float();
  snap.config_hash = state.config_hash;
  snap.step = static_cast<std::uint32_t>(state.step);
  return snap;
}

void save_snapshot(const ModelSnapshot& snap, const std::filesystem::path& path) {
  std::string buf(kMagic, sizeof kMagic);
  put<std::uint32_t>(buf, snap.version);
  buf.append(reinterpret_cast<const char*>(snap.config_hash.data()), snap.config_hash.size());
  put<std::uint32_t>(buf, static_cast<std::uint32_t>(snap.params.size() + 1));
  put<std::uint16_t>(buf, static_cast<std::uint16_t>(std::strlen(kStepTensor)));
  buf += kStepTensor;
  put<std::uint32_t>(buf, 1);
  put<std::uint32_t>(buf, 1);
  put<float>(buf, static_cast<float>(snap.step));
  for (const auto& [name, entry] : snap.params) {
    put<std::uint16_t>(buf, static_cast<std::uint16_t>(name.size()));
    buf += name;
    put<std::uint32_t>(buf, static_cast<std::uint32_t>(entry.value.rows()));
    put<std::uint32_t>(buf, static_cast<std::uint32_t>(entry.value.cols()));
    for (double v : entry.value.values()) put<float>(buf, static_cast<float>(v));
  }
  put<std::uint32_t>(buf, data::crc32(buf.data(), buf.size()));

  std::filesystem::path tmp = path;
  tmp += ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    out.flush();
    if (!out) throw SnapshotError(SnapshotError::Kind::io, "cannot write " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw SnapshotError(SnapshotError::Kind::io, "cannot rename onto " + path.string() + ": " +
                                                     ec.message());
  }
}

ModelSnapshot load_snapshot(const std::filesystem::path& path,
                            const std::optional<ConfigHash>& expected_hash) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw SnapshotError(SnapshotError::Kind::io, "cannot open snapshot " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string where = path.string() + ": ";

  if (bytes.size() < sizeof kMagic || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw SnapshotError(SnapshotError::Kind::format, where + "not a PTATSNAP file");
  }
  Reader header(bytes, bytes.size());
  header.take(sizeof kMagic);
  std::uint32_t version = 0;
  try {
    version = header.get<std::uint32_t>();
  } catch (const Reader::Short&) {
    throw SnapshotError(SnapshotError::Kind::truncated, where + "truncated header");
  }
  if (version != kSnapshotVersion) {
    throw SnapshotError(SnapshotError::Kind::version,
                        where + "format version " + std::to_string(version) + ", reader expects " +
                            std::to_string(kSnapshotVersion));
  }

  // Parse the structure up to the trailing CRC, then verify the CRC. A
  // structure that runs past the end of the file is a truncation.
  ModelSnapshot snap;
  snap.version = version;
  const std::size_t body_end = bytes.size() >= 4 ? bytes.size() - 4 : 0;
  bool structure_ok = true;
  try {
    Reader r(bytes, body_end);
    r.take(sizeof kMagic + sizeof(std::uint32_t));
    const char* h = r.take(snap.config_hash.size());
    std::memcpy(snap.config_hash.data(), h, snap.config_hash.size());
    const auto count = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < count; ++i) {
      const auto name_len = r.get<std::uint16_t>();
      std::string name = r.str(name_len);
      const auto rows = r.get<std::uint32_t>();
      const auto cols = r.get<std::uint32_t>();
      const std::size_t n = static_cast<std::size_t>(rows) * cols;
      const char* raw = r.take(n * sizeof(float));
      std::vector<double> values(n);
      for (std::size_t k = 0; k < n; ++k) {
        float f;
        std::memcpy(&f, raw + k * sizeof(float), sizeof f);
        values[k] = f;
      }
      if (name == kStepTensor && n == 1) {
        snap.step = static_cast<std::uint32_t>(values[0]);
        continue;
      }
      if (snap.params.contains(name)) {
        structure_ok = false;
        break;
      }
      snap.params.add(name, Matrix(rows, cols, std::move(values)));
    }
    if (r.pos() != body_end) structure_ok = false;
  } catch (const Reader::Short&) {
    throw SnapshotError(SnapshotError::Kind::truncated, where + "file ends inside the payload");
  } catch (const NumericError&) {
    structure_ok = false;
  }
  std::uint32_t stored_crc = 0;
  std::memcpy(&stored_crc, bytes.data() + body_end, sizeof stored_crc);
  if (!structure_ok || data::crc32(bytes.data(), body_end) != stored_crc) {
    throw SnapshotError(SnapshotError::Kind::hash, where + "payload CRC32 mismatch");
  }
  if (expected_hash && *expected_hash != snap.config_hash) {
    throw SnapshotError(SnapshotError::Kind::hash,
                        where + "config hash " + to_hex(snap.config_hash) + " does not match " +
                            to_hex(*expected_hash));
  }
  return snap;
}

AdamW::AdamW(double learning_rate, double weight_decay, double beta1, double beta2, double eps)
    : lr_(learning_rate), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {}

void AdamW::step(ParameterStore& params, const std::map<std::string, Matrix>& grads) {
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (const auto& [name, g] : grads) {
    if (!params.trainable(name)) continue;
    Matrix& w = params.at(name);
    if (!g.same_shape(w)) throw ShapeError("AdamW: gradient for " + name + " is " + g.shape());
    auto [mit, m_new] = m_.try_emplace(name, w.rows(), w.cols());
    auto [vit, v_new] = v_.try_emplace(name, w.rows(), w.cols());
    Matrix& m = mit->second;
    Matrix& v = vit->second;
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = b1_ * m[i] + (1.0 - b1_) * g[i];
      v[i] = b2_ * v[i] + (1.0 - b2_) * g[i] * g[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      w[i] -= lr_ * (mhat / (std::sqrt(vhat) + eps_) + wd_ * w[i]);
    }
  }
}

StepOutput run_step(const ModelState& state, const data::PairedDataset& train,
                    const ModelSnapshot* teacher, const TrainConfig& cfg) {
  cfg.validate();
  const std::size_t step = state.step + 1;
  if (teacher != nullptr && step == 1) {
    throw ValidationError("step 1 has no previous model; a teacher was supplied");
  }
  const bool distill = state.strategy.distillation && step > 1 &&
                       (cfg.toggles.feature_distillation || cfg.toggles.similarity_distillation);
  if (distill && teacher == nullptr) {
    throw ValidationError("step " + std::to_string(step) + " needs the step " +
                          std::to_string(step - 1) + " snapshot as teacher");
  }
  if (teacher != nullptr && teacher->config_hash != state.config_hash) {
    throw ValidationError("teacher snapshot config hash " + to_hex(teacher->config_hash) +
                          " does not match " + to_hex(state.config_hash));
  }

  std::optional<eval::DatasetEmbeddings> targets;
  if (distill) {
    // Teacher outputs are fixed for the whole step; computing them once
    // keeps the teacher out of every training graph.
    targets = eval::embed_dataset(teacher->params, state.config, state.strategy, train);
  }

  StepOutput out{state, {}, {}, {}};
  AdamW opt(cfg.learning_rate, cfg.weight_decay);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const EpochTotals t =
        train_epoch(out.state, opt, train, targets ? &*targets : nullptr, cfg, step, epoch);
    out.epoch_losses.push_back(t.loss);
    out.distillation_per_epoch.push_back(t.distill);
  }
  out.state.params.round_to_float();
  out.state.step = step;
  out.snapshot = make_snapshot(out.state);
  return out;
}

eval::MetricsHistory run_sequence(const std::vector<data::DomainData>& domains,
                                  const ModelConfig& model, const Strategy& strategy,
                                  const TrainConfig& cfg, const ParameterStore& backbone,
                                  const ConfigHash& hash, const SequenceHooks& hooks) {
  if (domains.empty()) throw ValidationError("sequence has no domains");
  const ModelState initial = init_state(model, strategy, backbone, cfg.seed, hash);
  eval::MetricsHistory history(std::string(to_string(strategy.tag)), cfg.seed,
                               initial.params.trainable_count());
  auto log = [&](const std::string& msg) {
    if (hooks.log) hooks.log(msg);
  };

  // Trains (or restores) the model for `step` starting from `from`.
  auto advance = [&](const ModelState& from, const data::PairedDataset& train,
                     const ModelSnapshot* teacher, std::size_t step) -> ModelState {
    if (hooks.load) {
      if (auto snap = hooks.load(step)) {
        ModelState s = from;
        for (const auto& [name, entry] : snap->params) s.params.at(name) = entry.value;
        s.step = from.step + 1;
        log("step " + std::to_string(step) + ": restored from snapshot");
        return s;
      }
    }
    StepOutput o = run_step(from, train, teacher, cfg);
    std::string losses;
    char buf[32];
    for (double l : o.epoch_losses) {
      std::snprintf(buf, sizeof buf, "%s%.4f", losses.empty() ? "" : " ", l);
      losses += buf;
    }
    log("step " + std::to_string(step) + " (" + train.domain + "): epoch losses " + losses);
    ModelSnapshot snap = o.snapshot;
    snap.step = static_cast<std::uint32_t>(step);
    if (hooks.save) hooks.save(step, snap);
    return std::move(o.state);
  };

  auto evaluate = [&](const ModelState& s, std::size_t step, std::size_t dataset) {
    history.add_scores(step, domains[dataset].test.domain,
                       eval::evaluate_retrieval(s.params, model, strategy, domains[dataset].test));
  };
  auto report = [&] {
    if (hooks.progress) hooks.progress(history);
  };

  if (strategy.joint) {
    const ModelState trained = advance(initial, union_of(domains), nullptr, 1);
    for (std::size_t m = 0; m < domains.size(); ++m)
      for (std::size_t j = 0; j <= m; ++j) evaluate(trained, m + 1, j);
    report();
    return history;
  }
  if (strategy.independent) {
    std::vector<ModelState> own;
    for (std::size_t m = 0; m < domains.size(); ++m) {
      own.push_back(advance(initial, domains[m].train, nullptr, m + 1));
      for (std::size_t j = 0; j <= m; ++j) evaluate(own[j], m + 1, j);
      report();
    }
    return history;
  }

  ModelState state = initial;
  std::optional<ModelSnapshot> previous;
  for (std::size_t m = 0; m < domains.size(); ++m) {
    const bool needs_teacher = strategy.distillation && m > 0;
    state = advance(state, domains[m].train, needs_teacher ? &*previous : nullptr, m + 1);
    previous = make_snapshot(state);
    for (std::size_t j = 0; j <= m; ++j) evaluate(state, m + 1, j);
    report();
  }
  return history;
}

ParameterStore pretrain_backbone(const ModelConfig& model, const PretrainConfig& cfg,
                                 const std::function<void(const std::string&)>& log) {
  model.validate();
  auto rng = stream(cfg.seed, 0x62616b65u);  // "bake"
  ParameterStore backbone;
  init_audio_encoder(backbone, model.audio, rng);
  init_text_encoder(backbone, model.text, rng);

  data::SequenceOptions opts = cfg.data;
  opts.name_prefix = "warmup";
  const data::SequenceSpec seq = data::make_sequence(opts, cfg.seed ^ 0x5eedu);
  data::PairedDataset all;
  all.domain = "warmup";
  for (const auto& spec : seq.domains) {
    data::DomainData d = data::generate_domain(spec);
    all.samples.insert(all.samples.end(), d.train.samples.begin(), d.train.samples.end());
  }

  ModelState state = init_state(model, build_strategy(StrategyTag::finetune_sequential), backbone,
                                cfg.seed, ConfigHash{});
  TrainConfig tc;
  tc.learning_rate = cfg.learning_rate;
  tc.epochs = cfg.epochs;
  tc.batch_size = cfg.batch_size;
  tc.seed = cfg.seed;
  AdamW opt(tc.learning_rate, tc.weight_decay);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const EpochTotals t = train_epoch(state, opt, all, nullptr, tc, 0, epoch);
    if (log) {
      char buf[96];
      std::snprintf(buf, sizeof buf, "warm-up epoch %zu/%zu: loss %.4f", epoch + 1, cfg.epochs,
                    t.loss);
      log(buf);
    }
  }
  state.params.round_to_float();
  state.params.set_trainable({});
  return state.params;
}

}  // namespace ptat::continual
