#include "ptat/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "ptat/errors.hpp"

namespace ptat::config {

namespace {

namespace pt = boost::property_tree;

std::string trim(std::string s) {
  const auto issp = [](unsigned char c) { return std::isspace(c) != 0; };
  s.erase(s.begin(), std::find_if_not(s.begin(), s.end(), issp));
  s.erase(std::find_if_not(s.rbegin(), s.rend(), issp).base(), s.end());
  return s;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string fmt(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

template <typename T>
std::string join(const std::vector<T>& xs) {
  std::string s;
  for (const auto& x : xs) {
    if (!s.empty()) s += ", ";
    if constexpr (std::is_same_v<T, std::string>) {
      s += x;
    } else {
      s += std::to_string(x);
    }
  }
  return s;
}

// One key: how to read it from text and how to print it back.
struct Field {
  std::string key;
  std::function<void(const std::string&)> read;
  std::function<std::string()> write;
  bool hashed = true;
};

struct Section {
  std::string name;
  std::vector<Field> fields;
};

template <typename T>
T parse_number(const std::string& where, const std::string& text) {
  T v{};
  const char* end = text.data() + text.size();
  const auto res = std::from_chars(text.data(), end, v);
  if (res.ec != std::errc() || res.ptr != end) {
    throw ValidationError(where + ": cannot parse '" + text + "' as " +
                          (std::is_floating_point_v<T> ? "a number" : "a non-negative integer"));
  }
  return v;
}

Field count_field(const std::string& sec, const std::string& key, std::size_t& ref) {
  return {key, [&ref, w = sec + "." + key](const std::string& t) { ref = parse_number<std::size_t>(w, t); },
          [&ref] { return std::to_string(ref); }};
}

Field u64_field(const std::string& sec, const std::string& key, std::uint64_t& ref) {
  return {key, [&ref, w = sec + "." + key](const std::string& t) { ref = parse_number<std::uint64_t>(w, t); },
          [&ref] { return std::to_string(ref); }};
}

Field real_field(const std::string& sec, const std::string& key, double& ref) {
  return {key, [&ref, w = sec + "." + key](const std::string& t) { ref = parse_number<double>(w, t); },
          [&ref] { return fmt(ref); }};
}

Field bool_field(const std::string& sec, const std::string& key, bool& ref) {
  return {key,
          [&ref, w = sec + "." + key](const std::string& t) {
            if (t == "true" || t == "1" || t == "on") {
              ref = true;
            } else if (t == "false" || t == "0" || t == "off") {
              ref = false;
            } else {
              throw ValidationError(w + ": expected true or false, got '" + t + "'");
            }
          },
          [&ref] { return std::string(ref ? "true" : "false"); }};
}

Field text_field(const std::string& key, std::string& ref) {
  return {key, [&ref](const std::string& t) { ref = t; }, [&ref] { return ref; }};
}

Field path_field(const std::string& key, std::filesystem::path& ref) {
  return {key, [&ref](const std::string& t) { ref = t; }, [&ref] { return ref.string(); }};
}

// Audio and text encoders share every size except depth.
struct ModelView {
  std::size_t embed_dim, audio_layers, text_layers, num_heads, mlp_hidden, shared_dim;
  std::size_t audio_seq_len, text_seq_len, patch_rows, patch_cols;
};

std::vector<Section> sections(RunConfig& c, ModelView& mv) {
  std::vector<Section> out;

  Section run{"run", {}};
  run.fields.push_back({"strategies", [&c](const std::string& t) { c.strategies = split_list(t); },
                        [&c] { return join(c.strategies); }, false});
  run.fields.push_back({"seeds",
                        [&c](const std::string& t) {
                          c.seeds.clear();
                          for (const auto& s : split_list(t))
                            c.seeds.push_back(parse_number<std::uint64_t>("run.seeds", s));
                        },
                        [&c] { return join(c.seeds); }, false});
  run.fields.push_back({"out", [&c](const std::string& t) { c.out = t; },
                        [&c] { return c.out.string(); }, false});
  out.push_back(std::move(run));

  auto& q = c.sequence;
  Section seq{"sequence", {}};
  seq.fields.push_back(count_field("sequence", "num_domains", q.num_domains));
  seq.fields.push_back({"order",
                        [&c](const std::string& t) {
                          c.order.clear();
                          for (const auto& s : split_list(t))
                            c.order.push_back(parse_number<std::size_t>("sequence.order", s));
                        },
                        [&c] { return join(c.order); }});
  seq.fields.push_back(count_field("sequence", "latent_dim", q.latent_dim));
  seq.fields.push_back(count_field("sequence", "num_train", q.num_train));
  seq.fields.push_back(count_field("sequence", "num_test", q.num_test));
  seq.fields.push_back(count_field("sequence", "spec_rows", q.spec_rows));
  seq.fields.push_back(count_field("sequence", "spec_cols", q.spec_cols));
  seq.fields.push_back(count_field("sequence", "text_len", q.text_len));
  seq.fields.push_back(count_field("sequence", "vocab_size", q.vocab_size));
  seq.fields.push_back(real_field("sequence", "noise_sigma", q.noise_sigma));
  seq.fields.push_back(real_field("sequence", "overlap", q.overlap));
  seq.fields.push_back(count_field("sequence", "pool_size", q.pool_size));
  seq.fields.push_back(real_field("sequence", "domain_gap", q.domain_gap));
  seq.fields.push_back(real_field("sequence", "text_gap", q.text_gap));
  seq.fields.push_back(u64_field("sequence", "world_seed", q.world_seed));
  seq.fields.push_back(text_field("name_prefix", q.name_prefix));
  out.push_back(std::move(seq));

  Section model{"model", {}};
  model.fields.push_back(count_field("model", "embed_dim", mv.embed_dim));
  model.fields.push_back(count_field("model", "audio_layers", mv.audio_layers));
  model.fields.push_back(count_field("model", "text_layers", mv.text_layers));
  model.fields.push_back(count_field("model", "num_heads", mv.num_heads));
  model.fields.push_back(count_field("model", "mlp_hidden", mv.mlp_hidden));
  model.fields.push_back(count_field("model", "shared_dim", mv.shared_dim));
  model.fields.push_back(count_field("model", "audio_max_seq_len", mv.audio_seq_len));
  model.fields.push_back(count_field("model", "text_max_seq_len", mv.text_seq_len));
  model.fields.push_back(count_field("model", "patch_rows", mv.patch_rows));
  model.fields.push_back(count_field("model", "patch_cols", mv.patch_cols));
  model.fields.push_back(count_field("model", "prompt_len", c.model.prompt_len));
  model.fields.push_back(count_field("model", "inject_layer", c.model.inject_layer));
  model.fields.push_back(count_field("model", "lora_rank", c.model.lora_rank));
  out.push_back(std::move(model));

  auto& tr = c.train;
  Section train{"train", {}};
  train.fields.push_back(real_field("train", "learning_rate", tr.learning_rate));
  train.fields.push_back(real_field("train", "weight_decay", tr.weight_decay));
  train.fields.push_back(count_field("train", "epochs", tr.epochs));
  train.fields.push_back(count_field("train", "batch_size", tr.batch_size));
  train.fields.push_back(real_field("train", "lambda", tr.weights.lambda));
  train.fields.push_back(real_field("train", "alpha", tr.weights.alpha));
  train.fields.push_back(real_field("train", "tau", tr.weights.tau));
  train.fields.push_back(bool_field("train", "feature_distillation", tr.toggles.feature_distillation));
  train.fields.push_back(
      bool_field("train", "similarity_distillation", tr.toggles.similarity_distillation));
  out.push_back(std::move(train));

  auto& bb = c.backbone;
  Section back{"backbone", {}};
  back.fields.push_back(count_field("backbone", "epochs", bb.epochs));
  back.fields.push_back(real_field("backbone", "learning_rate", bb.learning_rate));
  back.fields.push_back(count_field("backbone", "batch_size", bb.batch_size));
  back.fields.push_back(u64_field("backbone", "seed", bb.seed));
  back.fields.push_back(count_field("backbone", "num_domains", bb.data.num_domains));
  back.fields.push_back(count_field("backbone", "num_train", bb.data.num_train));
  back.fields.push_back(real_field("backbone", "domain_gap", bb.data.domain_gap));
  Field cache = path_field("cache", c.backbone_cache);
  cache.hashed = false;
  back.fields.push_back(std::move(cache));
  out.push_back(std::move(back));
  return out;
}

ModelView view_of(const ModelConfig& m) {
  return {m.audio.embed_dim,  m.audio.num_layers,  m.text.num_layers,  m.audio.num_heads,
          m.audio.mlp_hidden, m.audio.shared_dim,  m.audio.max_seq_len, m.text.max_seq_len,
          m.audio.patch_rows, m.audio.patch_cols};
}

void apply_view(ModelConfig& m, const ModelView& v) {
  for (EncoderConfig* e : {&m.audio, &m.text}) {
    e->embed_dim = v.embed_dim;
    e->num_heads = v.num_heads;
    e->mlp_hidden = v.mlp_hidden;
    e->shared_dim = v.shared_dim;
  }
  m.audio.num_layers = v.audio_layers;
  m.text.num_layers = v.text_layers;
  m.audio.max_seq_len = v.audio_seq_len;
  m.text.max_seq_len = v.text_seq_len;
  m.audio.patch_rows = v.patch_rows;
  m.audio.patch_cols = v.patch_cols;
}

// Emits the sections in order; `hashed_only` drops [run] and unhashed keys.
std::string render(const RunConfig& cfg, bool hashed_only) {
  RunConfig copy = cfg;
  ModelView mv = view_of(cfg.model);
  std::string out;
  for (const Section& s : sections(copy, mv)) {
    if (hashed_only && s.name == "run") continue;
    if (!out.empty()) out += "\n";
    out += "[" + s.name + "]\n";
    for (const Field& f : s.fields) {
      if (hashed_only && !f.hashed) continue;
      out += f.key + " = " + f.write() + "\n";
    }
  }
  return out;
}

}  // namespace

RunConfig parse_config(const std::string& text) {
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ValidationError("config line " + std::to_string(e.line()) + ": " + e.message());
  }

  RunConfig cfg;
  ModelView mv = view_of(cfg.model);
  const std::vector<Section> secs = sections(cfg, mv);
  std::vector<std::string> problems;
  for (const auto& [name, body] : tree) {
    const auto sec = std::find_if(secs.begin(), secs.end(),
                                  [&](const Section& s) { return s.name == name; });
    if (sec == secs.end()) {
      problems.push_back(!body.data().empty() ? "key '" + name + "' outside any section"
                                      : "unknown section [" + name + "]");
      continue;
    }
    for (const auto& [key, value] : body) {
      const auto f = std::find_if(sec->fields.begin(), sec->fields.end(),
                                  [&](const Field& x) { return x.key == key; });
      if (f == sec->fields.end()) {
        problems.push_back(name + "." + key + ": unknown key");
        continue;
      }
      try {
        f->read(trim(value.data()));
      } catch (const ValidationError& e) {
        problems.push_back(e.what());
      }
    }
  }
  if (!problems.empty()) {
    std::string msg = "invalid config:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ValidationError(msg);
  }
  apply_view(cfg.model, mv);
  cfg.model = resolved_model(cfg);
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read config " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

std::string to_ini(const RunConfig& cfg) { return render(cfg, false); }

ModelConfig resolved_model(const RunConfig& cfg) {
  ModelConfig m = cfg.model;
  m.audio.input_rows = cfg.sequence.spec_rows;
  m.audio.input_cols = cfg.sequence.spec_cols;
  m.text.vocab_size = cfg.sequence.vocab_size;
  m.text_len = cfg.sequence.text_len;
  return m;
}

void validate(const RunConfig& cfg) {
  std::vector<std::string> problems;
  auto check = [&](bool ok, const std::string& what) {
    if (!ok) problems.push_back(what);
  };

  check(!cfg.strategies.empty(), "run.strategies: at least one strategy required");
  std::set<std::string> seen;
  for (const auto& s : cfg.strategies) {
    try {
      parse_strategy(s);
    } catch (const ValidationError& e) {
      problems.push_back(std::string("run.strategies: ") + e.what());
    }
    check(seen.insert(s).second, "run.strategies: '" + s + "' listed twice");
  }
  check(!cfg.seeds.empty(), "run.seeds: at least one seed required");
  check(std::set<std::uint64_t>(cfg.seeds.begin(), cfg.seeds.end()).size() == cfg.seeds.size(),
        "run.seeds: duplicate seed");
  check(!cfg.out.empty(), "run.out: output directory required");

  const auto& q = cfg.sequence;
  check(q.num_domains >= 1, "sequence.num_domains must be >= 1");
  check(q.latent_dim >= 1, "sequence.latent_dim must be >= 1");
  check(q.num_train >= 2, "sequence.num_train must be >= 2");
  check(q.num_test >= 2, "sequence.num_test must be >= 2");
  check(q.spec_rows >= 1 && q.spec_cols >= 1, "sequence.spec_rows/spec_cols must be >= 1");
  check(q.text_len >= 1, "sequence.text_len must be >= 1");
  check(q.vocab_size >= 2, "sequence.vocab_size must be >= 2");
  check(q.noise_sigma >= 0.0 && std::isfinite(q.noise_sigma), "sequence.noise_sigma must be >= 0");
  check(q.overlap >= 0.0 && q.overlap <= 1.0, "sequence.overlap must lie in [0, 1]");
  check(q.domain_gap >= 0.0 && q.domain_gap <= 1.0, "sequence.domain_gap must lie in [0, 1]");
  check(q.text_gap <= 1.0 && std::isfinite(q.text_gap),
        "sequence.text_gap must be <= 1 (negative: same as domain_gap)");
  check(q.pool_size >= q.latent_dim, "sequence.pool_size must be >= latent_dim");
  check(!q.name_prefix.empty(), "sequence.name_prefix must not be empty");
  if (!cfg.order.empty()) {
    std::vector<std::size_t> sorted = cfg.order;
    std::sort(sorted.begin(), sorted.end());
    bool perm = sorted.size() == q.num_domains;
    for (std::size_t i = 0; perm && i < sorted.size(); ++i) perm = sorted[i] == i + 1;
    check(perm, "sequence.order must be a permutation of 1.." + std::to_string(q.num_domains));
  }

  try {
    resolved_model(cfg).validate();
  } catch (const ValidationError& e) {
    problems.push_back(std::string("model: ") + e.what());
  }
  try {
    cfg.train.validate();
  } catch (const ValidationError& e) {
    problems.push_back(e.what());
  }
  check(cfg.train.epochs >= 1, "train.epochs must be >= 1");

  const auto& bb = cfg.backbone;
  check(bb.learning_rate > 0.0, "backbone.learning_rate must be > 0");
  check(bb.batch_size >= 2, "backbone.batch_size must be >= 2");
  check(bb.data.num_domains >= 1, "backbone.num_domains must be >= 1");
  check(bb.data.num_train >= 2, "backbone.num_train must be >= 2");
  check(bb.data.domain_gap >= 0.0 && bb.data.domain_gap <= 1.0,
        "backbone.domain_gap must lie in [0, 1]");

  if (!problems.empty()) {
    std::string msg = "invalid config:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ValidationError(msg);
  }
}

continual::ConfigHash config_hash(const RunConfig& cfg) {
  return continual::hash_config(render(cfg, true));
}

continual::PretrainConfig resolved_backbone(const RunConfig& cfg) {
  continual::PretrainConfig p = cfg.backbone;
  // Warm-up domains share the sequence's shapes and concept pool.
  data::SequenceOptions d = cfg.sequence;
  d.num_domains = p.data.num_domains;
  d.num_train = p.data.num_train;
  d.domain_gap = p.data.domain_gap;
  d.text_gap = -1.0;
  d.overlap = 0.0;
  p.data = d;
  return p;
}

continual::ConfigHash backbone_hash(const RunConfig& cfg) {
  RunConfig shape;
  shape.model = resolved_model(cfg);
  // The warm-up trains the plain encoders; prompt and adapter settings do not reach it.
  const ModelConfig plain;
  shape.model.prompt_len = plain.prompt_len;
  shape.model.inject_layer = plain.inject_layer;
  shape.model.lora_rank = plain.lora_rank;
  const continual::PretrainConfig p = resolved_backbone(cfg);
  shape.sequence = p.data;
  shape.backbone = p;
  shape.backbone.data = p.data;
  // Model and warm-up fields only; train settings stay at their defaults.
  shape.train = continual::TrainConfig{};
  return continual::hash_config("backbone\n" + render(shape, true));
}

}  // namespace ptat::config
