#include "ptat/baselines.hpp"

#include <cmath>

#include "ptat/errors.hpp"

namespace ptat {

using diffmath::Graph;
using diffmath::NodeId;

namespace {

struct TagName {
  StrategyTag tag;
  const char* name;
};

constexpr TagName kTags[] = {
    {StrategyTag::ptat, "ptat"},
    {StrategyTag::finetune_sequential, "finetune_sequential"},
    {StrategyTag::finetune_joint, "finetune_joint"},
    {StrategyTag::prompt_shallow, "prompt_shallow"},
    {StrategyTag::prompt_deep, "prompt_deep"},
    {StrategyTag::text_prompt_only, "text_prompt_only"},
    {StrategyTag::low_rank, "low_rank"},
    {StrategyTag::upper_bound, "upper_bound"},
};

Matrix small_normal(std::size_t r, std::size_t c, double sigma, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, sigma);
  Matrix m(r, c);
  for (double& v : m.values()) v = dist(rng);
  return m;
}

bool is_backbone(const std::string& name) {
  return name.rfind(kAudio + ".", 0) == 0 || name.rfind(kText + ".", 0) == 0;
}

const char* kHeads[] = {"audio.proj.w", "audio.proj.b", "text.proj.w", "text.proj.b"};

}  // namespace

std::string_view to_string(StrategyTag tag) {
  for (const auto& t : kTags)
    if (t.tag == tag) return t.name;
  return "unknown";
}

const std::vector<std::string>& strategy_tags() {
  static const std::vector<std::string> tags = [] {
    std::vector<std::string> v;
    for (const auto& t : kTags) v.emplace_back(t.name);
    return v;
  }();
  return tags;
}

StrategyTag parse_strategy(std::string_view tag) {
  for (const auto& t : kTags)
    if (tag == t.name) return t.tag;
  std::string valid;
  for (const auto& t : kTags) valid += std::string(valid.empty() ? "" : ", ") + t.name;
  throw ValidationError("unknown strategy '" + std::string(tag) + "' (valid: " + valid + ")");
}

Strategy build_strategy(StrategyTag tag) {
  Strategy s;
  s.tag = tag;
  switch (tag) {
    case StrategyTag::ptat:
      s.audio_prompts = true;
      s.coupled_text_prompts = true;
      s.distillation = true;
      break;
    case StrategyTag::finetune_sequential:
      s.full_finetune = true;
      break;
    case StrategyTag::finetune_joint:
      s.full_finetune = true;
      s.joint = true;
      break;
    case StrategyTag::upper_bound:
      s.full_finetune = true;
      s.independent = true;
      break;
    case StrategyTag::prompt_shallow:
      s.audio_prompts = true;
      break;
    case StrategyTag::prompt_deep:
      s.audio_prompts = true;
      s.deep_prompts = true;
      break;
    case StrategyTag::text_prompt_only:
      s.text_prompts = true;
      break;
    case StrategyTag::low_rank:
      s.low_rank = true;
      break;
  }
  return s;
}

std::string deep_prompt_name(std::size_t layer) {
  return layer == 1 ? atpg::kAudioPrompts : atpg::kAudioPrompts + ".l" + std::to_string(layer);
}

std::string lora_name(std::size_t layer, char which, const char* part) {
  return "lora.audio.l" + std::to_string(layer) + "." + which + "." + part;
}

void apply_low_rank(ParameterStore& store, const ModelConfig& cfg, std::size_t rank,
                    std::mt19937_64& rng) {
  const std::size_t d = cfg.audio.embed_dim;
  if (rank < 1 || rank > d) {
    throw ValidationError("low-rank adapter rank " + std::to_string(rank) + " outside [1, " +
                          std::to_string(d) + "]");
  }
  const double sigma = 1.0 / std::sqrt(static_cast<double>(d));
  for (std::size_t l = 1; l <= cfg.audio.num_layers; ++l) {
    for (char which : {'q', 'v'}) {
      store.add(lora_name(l, which, "down"), small_normal(d, rank, sigma, rng));
      store.add(lora_name(l, which, "up"), Matrix(rank, d));
    }
  }
}

void install_strategy(ParameterStore& store, const Strategy& strategy, const ModelConfig& cfg,
                      std::mt19937_64& rng) {
  const std::size_t d = cfg.audio.embed_dim;
  const std::size_t n = cfg.prompt_len;
  if (strategy.coupled_text_prompts) {
    atpg::add_to_store(store, atpg::init_prompt_set(n, d, cfg.inject_layer, rng));
  } else if (strategy.audio_prompts) {
    const std::size_t layers = strategy.deep_prompts ? cfg.audio.num_layers : 1;
    for (std::size_t l = 1; l <= layers; ++l) {
      store.add(deep_prompt_name(l), small_normal(n, d, 0.02, rng));
    }
  }
  if (strategy.text_prompts) {
    store.add(kTextPrefix, small_normal(n, d, 0.02, rng));
    store.add(kTextPostfix, small_normal(n, d, 0.02, rng));
  }
  if (strategy.low_rank) apply_low_rank(store, cfg, cfg.lora_rank, rng);
}

atpg::TrainablePartition trainable_partition(const ParameterStore& store,
                                             const Strategy& strategy) {
  atpg::TrainablePartition part;
  for (const auto& [name, entry] : store) {
    const bool backbone = is_backbone(name);
    if (strategy.full_finetune ? backbone : !backbone) part.names.insert(name);
  }
  if (!strategy.full_finetune) {
    for (const char* head : kHeads) part.names.insert(head);
  }
  return part;
}

std::size_t expected_trainable_count(const Strategy& s, const ModelConfig& cfg,
                                     std::size_t backbone_params) {
  if (s.full_finetune) return backbone_params;
  const std::size_t d = cfg.audio.embed_dim;
  const std::size_t ds = cfg.audio.shared_dim;
  const std::size_t n = cfg.prompt_len;
  std::size_t count = 2 * (d * ds + ds);  // projection heads
  if (s.coupled_text_prompts) count += n * d + 2 * (d * d + d);
  else if (s.deep_prompts) count += cfg.audio.num_layers * n * d;
  else if (s.audio_prompts) count += n * d;
  if (s.text_prompts) count += 2 * n * d;
  if (s.low_rank) count += cfg.audio.num_layers * 2 * (2 * cfg.lora_rank * d);
  return count;
}

EmbeddingNodes embed_batch(Graph& g, const BoundParams& p, const ModelConfig& cfg,
                           const Strategy& strategy, const AudioBatch& audio,
                           const TextBatch& text) {
  atpg::InjectionSchedule schedule(cfg.audio.num_layers, strategy.deep_prompts);
  std::optional<NodeId> prefix, postfix;
  if (strategy.coupled_text_prompts) {
    const NodeId a = p[atpg::kAudioPrompts];
    schedule.inject(cfg.inject_layer, a);
    const auto [pre, post] = atpg::generate_text_prompts(
        g, a, p[atpg::kPreWeight], p[atpg::kPreBias], p[atpg::kPostWeight], p[atpg::kPostBias]);
    prefix = pre;
    postfix = post;
  } else if (strategy.audio_prompts) {
    const std::size_t layers = strategy.deep_prompts ? cfg.audio.num_layers : 1;
    for (std::size_t l = 1; l <= layers; ++l) schedule.inject(l, p[deep_prompt_name(l)]);
  }
  if (strategy.text_prompts) {
    prefix = p[kTextPrefix];
    postfix = p[kTextPostfix];
  }
  EmbeddingNodes out;
  out.audio = encode_audio_batch(g, p, cfg.audio, audio, schedule);
  out.text = encode_text_batch(g, p, cfg.text, text, prefix, postfix);
  return out;
}

}  // namespace ptat
