#include "ptat/encoder.hpp"

#include <cmath>

#include "ptat/errors.hpp"

namespace ptat {

using diffmath::Graph;
using diffmath::NodeId;

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw ValidationError(what);
}

void validate_encoder(const EncoderConfig& c, const std::string& which, bool audio) {
  require(c.embed_dim > 0, which + ".embed_dim must be > 0");
  require(c.num_layers > 0, which + ".num_layers must be > 0");
  require(c.num_heads > 0 && c.embed_dim % c.num_heads == 0,
          which + ".embed_dim must be divisible by num_heads");
  require(c.mlp_hidden > 0, which + ".mlp_hidden must be > 0");
  require(c.shared_dim > 0, which + ".shared_dim must be > 0");
  if (audio) {
    require(c.patch_rows > 0 && c.patch_cols > 0, which + ".patch dims must be > 0");
    require(c.input_rows % c.patch_rows == 0 && c.input_cols % c.patch_cols == 0,
            which + ": spectrogram shape must tile into patches");
  } else {
    require(c.vocab_size > 0, which + ".vocab_size must be > 0");
  }
}

Matrix normal(std::size_t r, std::size_t c, double sigma, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, sigma);
  Matrix m(r, c);
  for (double& v : m.values()) v = dist(rng);
  return m;
}

void init_common(ParameterStore& s, const std::string& pre, const EncoderConfig& cfg,
                 std::mt19937_64& rng) {
  const std::size_t d = cfg.embed_dim;
  const double wd = 1.0 / std::sqrt(static_cast<double>(d));
  const double wh = 1.0 / std::sqrt(static_cast<double>(cfg.mlp_hidden));
  s.add(pre + ".pos", normal(cfg.max_seq_len, d, 0.1, rng));
  for (std::size_t l = 1; l <= cfg.num_layers; ++l) {
    const std::string lp = pre + ".l" + std::to_string(l);
    s.add(lp + ".ln1.g", Matrix(1, d, 1.0));
    s.add(lp + ".ln1.b", Matrix(1, d));
    s.add(lp + ".wq", normal(d, d, wd, rng));
    s.add(lp + ".wk", normal(d, d, wd, rng));
    s.add(lp + ".wv", normal(d, d, wd, rng));
    s.add(lp + ".wo", normal(d, d, wd, rng));
    s.add(lp + ".ln2.g", Matrix(1, d, 1.0));
    s.add(lp + ".ln2.b", Matrix(1, d));
    s.add(lp + ".mlp.w1", normal(d, cfg.mlp_hidden, wd, rng));
    s.add(lp + ".mlp.b1", Matrix(1, cfg.mlp_hidden));
    s.add(lp + ".mlp.w2", normal(cfg.mlp_hidden, d, wh, rng));
    s.add(lp + ".mlp.b2", Matrix(1, d));
  }
  s.add(pre + ".ln_f.g", Matrix(1, d, 1.0));
  s.add(pre + ".ln_f.b", Matrix(1, d));
  s.add(pre + ".proj.w", normal(d, cfg.shared_dim, wd, rng));
  s.add(pre + ".proj.b", Matrix(1, cfg.shared_dim));
}

// Columns [offset, offset+count) of a weight matrix.
NodeId weight_cols(Graph& g, NodeId w, std::size_t offset, std::size_t count) {
  return g.transpose(g.slice_rows(g.transpose(w), offset, count));
}

// W, or W + down * up when a low-rank adapter is bound for it.
NodeId adapted_weight(Graph& g, const BoundParams& p, const std::string& weight,
                      const std::string& adapter) {
  const NodeId w = p[weight];
  if (!p.has(adapter + ".down")) return w;
  return g.add(w, g.matmul(p[adapter + ".down"], p[adapter + ".up"]));
}

NodeId affine_norm(Graph& g, const BoundParams& p, const std::string& name, NodeId x) {
  return g.add(g.mul(g.layer_norm_rows(x), p[name + ".g"]), p[name + ".b"]);
}

NodeId transformer_block(Graph& g, const BoundParams& p, const EncoderConfig& cfg,
                         const std::string& encoder, std::size_t layer, NodeId x,
                         const std::vector<std::size_t>& lengths) {
  const std::string lp = encoder + ".l" + std::to_string(layer);
  const std::string lora = "lora." + lp;
  const std::size_t dh = cfg.head_dim();
  const double score_scale = 1.0 / std::sqrt(static_cast<double>(dh));

  const NodeId h = affine_norm(g, p, lp + ".ln1", x);
  const NodeId wq = adapted_weight(g, p, lp + ".wq", lora + ".q");
  const NodeId wk = p[lp + ".wk"];
  const NodeId wv = adapted_weight(g, p, lp + ".wv", lora + ".v");
  const NodeId wo = p[lp + ".wo"];

  NodeId attn = 0;
  for (std::size_t head = 0; head < cfg.num_heads; ++head) {
    const std::size_t off = head * dh;
    const NodeId q = g.matmul(h, weight_cols(g, wq, off, dh));
    const NodeId k = g.matmul(h, weight_cols(g, wk, off, dh));
    const NodeId v = g.matmul(h, weight_cols(g, wv, off, dh));
    std::vector<NodeId> outs;
    outs.reserve(lengths.size());
    std::size_t row = 0;
    for (std::size_t len : lengths) {
      const NodeId qs = g.slice_rows(q, row, len);
      const NodeId ks = g.slice_rows(k, row, len);
      const NodeId vs = g.slice_rows(v, row, len);
      const NodeId scores = g.scale(g.matmul(qs, ks, true), score_scale);
      outs.push_back(g.matmul(g.row_softmax(scores), vs));
      row += len;
    }
    const NodeId merged = g.matmul(g.concat_rows(outs), g.slice_rows(wo, off, dh));
    attn = head == 0 ? merged : g.add(attn, merged);
  }
  const NodeId x1 = g.add(x, attn);

  const NodeId h2 = affine_norm(g, p, lp + ".ln2", x1);
  const NodeId hidden = g.affine(h2, p[lp + ".mlp.w1"], p[lp + ".mlp.b1"], true);
  const NodeId mlp = g.affine(hidden, p[lp + ".mlp.w2"], p[lp + ".mlp.b2"]);
  return g.add(x1, mlp);
}

// Final norm, per-sample mean over all rows, projection, unit rows.
NodeId pool_and_project(Graph& g, const BoundParams& p, const std::string& encoder, NodeId x,
                        const std::vector<std::size_t>& lengths) {
  const NodeId normed = affine_norm(g, p, encoder + ".ln_f", x);
  std::vector<NodeId> pooled;
  pooled.reserve(lengths.size());
  std::size_t row = 0;
  for (std::size_t len : lengths) {
    pooled.push_back(g.mean_rows(g.slice_rows(normed, row, len)));
    row += len;
  }
  const NodeId stacked = g.concat_rows(pooled);
  const NodeId projected = g.affine(stacked, p[encoder + ".proj.w"], p[encoder + ".proj.b"]);
  return g.l2_normalize_rows(projected);
}

}  // namespace

void ModelConfig::validate() const {
  validate_encoder(audio, "audio", true);
  validate_encoder(text, "text", false);
  require(audio.embed_dim == text.embed_dim, "audio and text embed_dim must match");
  require(audio.shared_dim == text.shared_dim, "audio and text shared_dim must match");
  require(text_len > 0, "text_len must be > 0");
  require(prompt_len > 0, "prompt_len must be >= 1");
  require(inject_layer >= 1 && inject_layer <= audio.num_layers,
          "inject_layer must lie in [1, audio.num_layers]");
  require(lora_rank >= 1 && lora_rank <= audio.embed_dim, "lora_rank must lie in [1, embed_dim]");
  require(audio.max_seq_len >= audio.num_patches() + prompt_len,
          "audio.max_seq_len must cover patches + prompts");
  require(text.max_seq_len >= text_len + 2 * prompt_len,
          "text.max_seq_len must cover tokens + prefix + postfix prompts");
}

AudioBatch make_audio_batch(const EncoderConfig& cfg, std::span<const AudioSample* const> samples) {
  const std::size_t np = cfg.num_patches();
  const std::size_t ps = cfg.patch_size();
  const std::size_t grid_cols = cfg.input_cols / cfg.patch_cols;
  AudioBatch out;
  out.batch = samples.size();
  out.tokens_per_sample = np;
  out.patches = Matrix(samples.size() * np, ps);
  for (std::size_t s = 0; s < samples.size(); ++s) {
    const Matrix& spec = samples[s]->spectrogram;
    if (spec.rows() != cfg.input_rows || spec.cols() != cfg.input_cols) {
      throw ShapeError("audio sample " + spec.shape() + " does not match encoder input " +
                       std::to_string(cfg.input_rows) + "x" + std::to_string(cfg.input_cols));
    }
    for (std::size_t patch = 0; patch < np; ++patch) {
      const std::size_t r0 = (patch / grid_cols) * cfg.patch_rows;
      const std::size_t c0 = (patch % grid_cols) * cfg.patch_cols;
      auto dst = out.patches.row(s * np + patch);
      for (std::size_t r = 0; r < cfg.patch_rows; ++r)
        for (std::size_t c = 0; c < cfg.patch_cols; ++c)
          dst[r * cfg.patch_cols + c] = spec(r0 + r, c0 + c);
    }
  }
  return out;
}

TextBatch make_text_batch(const EncoderConfig& cfg, std::span<const TextSample* const> samples) {
  TextBatch out;
  std::size_t total = 0;
  for (const auto* s : samples) {
    if (s->tokens.empty()) throw ShapeError("text sample has no tokens");
    out.lengths.push_back(s->tokens.size());
    total += s->tokens.size();
  }
  out.one_hot = Matrix(total, cfg.vocab_size);
  std::size_t row = 0;
  for (const auto* s : samples) {
    for (int t : s->tokens) {
      if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab_size) {
        throw ValidationError("token " + std::to_string(t) + " outside [0, " +
                              std::to_string(cfg.vocab_size) + ")");
      }
      out.one_hot(row++, static_cast<std::size_t>(t)) = 1.0;
    }
  }
  return out;
}

void init_audio_encoder(ParameterStore& store, const EncoderConfig& cfg, std::mt19937_64& rng) {
  store.add(kAudio + ".patch.w",
            normal(cfg.patch_size(), cfg.embed_dim,
                   1.0 / std::sqrt(static_cast<double>(cfg.patch_size())), rng));
  store.add(kAudio + ".patch.b", Matrix(1, cfg.embed_dim));
  init_common(store, kAudio, cfg, rng);
}

void init_text_encoder(ParameterStore& store, const EncoderConfig& cfg, std::mt19937_64& rng) {
  store.add(kText + ".embed", normal(cfg.vocab_size, cfg.embed_dim, 1.0, rng));
  init_common(store, kText, cfg, rng);
}

NodeId encode_audio_batch(Graph& g, const BoundParams& p, const EncoderConfig& cfg,
                          const AudioBatch& batch, const atpg::InjectionSchedule& prompts) {
  const std::size_t np = batch.tokens_per_sample;
  const NodeId pos = p[kAudio + ".pos"];
  std::size_t longest_prompt = 0;
  for (const auto& [layer, node] : prompts.entries()) {
    const Matrix& pm = g.value(node);
    if (pm.cols() != cfg.embed_dim) {
      throw ShapeError("audio prompts " + pm.shape() + " do not match embed_dim " +
                       std::to_string(cfg.embed_dim));
    }
    longest_prompt = std::max(longest_prompt, pm.rows());
  }
  if (np + longest_prompt > cfg.max_seq_len) {
    throw ShapeError("audio sequence overflow: " + std::to_string(np) + " patches + " +
                     std::to_string(longest_prompt) + " prompts > max_seq_len " +
                     std::to_string(cfg.max_seq_len));
  }
  if (prompts.num_layers() != cfg.num_layers) {
    throw ValidationError("injection schedule built for " + std::to_string(prompts.num_layers()) +
                          " layers, encoder has " + std::to_string(cfg.num_layers));
  }

  const NodeId tokens =
      g.affine(g.constant(batch.patches), p[kAudio + ".patch.w"], p[kAudio + ".patch.b"]);
  const NodeId token_pos = g.slice_rows(pos, 0, np);
  std::vector<NodeId> tiled(batch.batch, token_pos);
  NodeId x = g.add(tokens, g.concat_rows(tiled));
  std::vector<std::size_t> lengths(batch.batch, np);

  std::size_t current_prompts = 0;
  for (std::size_t layer = 1; layer <= cfg.num_layers; ++layer) {
    if (auto prompt = prompts.at(layer)) {
      const std::size_t n = g.value(*prompt).rows();
      NodeId placed = *prompt;
      if (n > 0) placed = g.add(*prompt, g.slice_rows(pos, np, n));
      x = atpg::inject_audio_prompts(g, x, lengths, placed, current_prompts);
      current_prompts = n;
    }
    x = transformer_block(g, p, cfg, kAudio, layer, x, lengths);
  }
  return pool_and_project(g, p, kAudio, x, lengths);
}

NodeId encode_text_batch(Graph& g, const BoundParams& p, const EncoderConfig& cfg,
                         const TextBatch& batch, std::optional<NodeId> prefix,
                         std::optional<NodeId> postfix) {
  const NodeId pos = p[kText + ".pos"];
  const std::size_t n_pre = prefix ? g.value(*prefix).rows() : 0;
  const std::size_t n_post = postfix ? g.value(*postfix).rows() : 0;
  for (auto opt : {prefix, postfix}) {
    if (opt && g.value(*opt).cols() != cfg.embed_dim) {
      throw ShapeError("text prompts " + g.value(*opt).shape() + " do not match embed_dim " +
                       std::to_string(cfg.embed_dim));
    }
  }
  std::size_t longest = 0;
  for (std::size_t len : batch.lengths) longest = std::max(longest, len);
  if (longest + n_pre + n_post > cfg.max_seq_len) {
    throw ShapeError("text sequence overflow: " + std::to_string(longest) + " tokens + " +
                     std::to_string(n_pre + n_post) + " prompts > max_seq_len " +
                     std::to_string(cfg.max_seq_len));
  }

  const NodeId embedded = g.matmul(g.constant(batch.one_hot), p[kText + ".embed"]);
  // Tokens keep positions [0, len); prompt rows take the trailing slots of
  // the position table, prefix first.
  const std::size_t prompt_base = cfg.max_seq_len - n_pre - n_post;
  std::optional<NodeId> pre_placed, post_placed;
  if (n_pre > 0) pre_placed = g.add(*prefix, g.slice_rows(pos, prompt_base, n_pre));
  if (n_post > 0) post_placed = g.add(*postfix, g.slice_rows(pos, prompt_base + n_pre, n_post));

  std::vector<NodeId> parts;
  std::vector<std::size_t> lengths;
  std::size_t row = 0;
  for (std::size_t len : batch.lengths) {
    if (pre_placed) parts.push_back(*pre_placed);
    parts.push_back(g.add(g.slice_rows(embedded, row, len), g.slice_rows(pos, 0, len)));
    if (post_placed) parts.push_back(*post_placed);
    lengths.push_back(len + n_pre + n_post);
    row += len;
  }
  NodeId x = g.concat_rows(parts);
  for (std::size_t layer = 1; layer <= cfg.num_layers; ++layer) {
    x = transformer_block(g, p, cfg, kText, layer, x, lengths);
  }
  return pool_and_project(g, p, kText, x, lengths);
}

Matrix encode_audio(const AudioSample& sample, const Matrix* prompts, std::size_t inject_layer,
                    const ParameterStore& state, const EncoderConfig& cfg) {
  Graph g;
  ParameterStore frozen = state;
  frozen.set_trainable({});
  const BoundParams p(g, frozen);
  atpg::InjectionSchedule schedule(cfg.num_layers);
  if (prompts != nullptr) schedule.inject(inject_layer, g.constant(*prompts));
  const AudioSample* one[] = {&sample};
  return g.value(encode_audio_batch(g, p, cfg, make_audio_batch(cfg, one), schedule));
}

Matrix encode_text(const TextSample& sample, const Matrix* prefix, const Matrix* postfix,
                   const ParameterStore& state, const EncoderConfig& cfg) {
  Graph g;
  ParameterStore frozen = state;
  frozen.set_trainable({});
  const BoundParams p(g, frozen);
  std::optional<NodeId> pre, post;
  if (prefix != nullptr) pre = g.constant(*prefix);
  if (postfix != nullptr) post = g.constant(*postfix);
  const TextSample* one[] = {&sample};
  return g.value(encode_text_batch(g, p, cfg, make_text_batch(cfg, one), pre, post));
}

}  // namespace ptat
