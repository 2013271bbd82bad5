#pragma once

#include <cstddef>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "ptat/atpg.hpp"
#include "ptat/encoder.hpp"

namespace ptat {

enum class StrategyTag {
  ptat,
  finetune_sequential,
  finetune_joint,
  prompt_shallow,
  prompt_deep,
  text_prompt_only,
  low_rank,
  upper_bound,
};

std::string_view to_string(StrategyTag tag);
// Throws ValidationError listing the valid tags.
StrategyTag parse_strategy(std::string_view tag);
const std::vector<std::string>& strategy_tags();

// A comparison method: which extra parameters it adds to the frozen backbone,
// which parameters it trains, and which protocol variant it follows.
struct Strategy {
  StrategyTag tag = StrategyTag::ptat;
  bool audio_prompts = false;         // prompts prepended inside the audio encoder
  bool deep_prompts = false;          // a fresh prompt set at every audio block
  bool coupled_text_prompts = false;  // text prompts derived from the audio prompts
  bool text_prompts = false;          // independent text prefix/postfix prompts
  bool low_rank = false;              // adapters on audio W_q and W_v
  bool full_finetune = false;         // every backbone parameter trains
  bool distillation = false;          // feature + similarity distillation terms
  bool joint = false;                 // one pass over the union of all domains
  bool independent = false;           // fresh model per domain
};

Strategy build_strategy(StrategyTag tag);
inline Strategy build_strategy(std::string_view tag) { return build_strategy(parse_strategy(tag)); }

inline const std::string kTextPrefix = "prompt.text_pre";
inline const std::string kTextPostfix = "prompt.text_post";

std::string deep_prompt_name(std::size_t layer);
std::string lora_name(std::size_t layer, char which, const char* part);

// Adds rank-r adapters (down: d x r ~ N(0, 1/d), up: r x d zero) for the query
// and value projections of every audio block. The text encoder is untouched.
void apply_low_rank(ParameterStore& store, const ModelConfig& cfg, std::size_t rank,
                    std::mt19937_64& rng);

// Adds the strategy's prompts/adapters to a store holding only the backbone.
void install_strategy(ParameterStore& store, const Strategy& strategy, const ModelConfig& cfg,
                      std::mt19937_64& rng);

atpg::TrainablePartition trainable_partition(const ParameterStore& store,
                                             const Strategy& strategy);

// Closed-form trainable count implied by the partition definition.
std::size_t expected_trainable_count(const Strategy& strategy, const ModelConfig& cfg,
                                     std::size_t backbone_params);

struct EmbeddingNodes {
  diffmath::NodeId audio = 0;
  diffmath::NodeId text = 0;
};

// Both encoders under the strategy's structural edits.
EmbeddingNodes embed_batch(diffmath::Graph& g, const BoundParams& p, const ModelConfig& cfg,
                           const Strategy& strategy, const AudioBatch& audio,
                           const TextBatch& text);

}  // namespace ptat
