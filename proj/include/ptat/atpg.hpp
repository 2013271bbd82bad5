#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <utility>

#include "ptat/graph.hpp"
#include "ptat/params.hpp"

// Audio-text prompt generation: a global set of audio prompts and two linear
// maps that derive the text prefix/postfix prompts from them, so a single
// trainable prompt matrix steers both encoders.
namespace ptat::atpg {

inline const std::string kAudioPrompts = "prompt.audio";
inline const std::string kPreWeight = "prompt.s_pre.w";
inline const std::string kPreBias = "prompt.s_pre.b";
inline const std::string kPostWeight = "prompt.s_post.w";
inline const std::string kPostBias = "prompt.s_post.b";

struct PromptSet {
  Matrix audio;  // n x d
  Matrix pre_weight, pre_bias;
  Matrix post_weight, post_bias;
  std::size_t inject_layer = 1;

  std::size_t length() const { return audio.rows(); }
};

// Audio prompts ~ N(0, 0.02^2); both maps start as identity weight, zero bias.
PromptSet init_prompt_set(std::size_t length, std::size_t dim, std::size_t inject_layer,
                          std::mt19937_64& rng);

void add_to_store(ParameterStore& store, const PromptSet& prompts);
PromptSet from_store(const ParameterStore& store, std::size_t inject_layer);

// T_pre = A * W_pre + b_pre, T_post = A * W_post + b_post; row i of each is
// derived from prompt row i.
std::pair<Matrix, Matrix> generate_text_prompts(const PromptSet& prompts);
std::pair<diffmath::NodeId, diffmath::NodeId> generate_text_prompts(
    diffmath::Graph& g, diffmath::NodeId audio_prompts, diffmath::NodeId pre_weight,
    diffmath::NodeId pre_bias, diffmath::NodeId post_weight, diffmath::NodeId post_bias);

// Which prompt matrix enters which encoder block (1-based). Under the
// single-layer policy a second injection is rejected; the deep-prompt
// baseline opts into one prompt set per block.
class InjectionSchedule {
 public:
  explicit InjectionSchedule(std::size_t num_layers, bool allow_multiple = false);

  void inject(std::size_t layer, diffmath::NodeId prompts);
  std::optional<diffmath::NodeId> at(std::size_t layer) const;
  bool empty() const { return by_layer_.empty(); }
  std::size_t num_layers() const { return num_layers_; }
  const std::map<std::size_t, diffmath::NodeId>& entries() const { return by_layer_; }

 private:
  std::size_t num_layers_;
  bool allow_multiple_;
  std::map<std::size_t, diffmath::NodeId> by_layer_;
};

// Prepends `prompts` to each sample's rows of a stacked layer state.
// `lengths` gives the per-sample row counts of `state`; when `replace` is
// non-zero, that many leading rows of every sample (the previous block's
// prompts) are dropped first. Returns the new state and updates `lengths`.
diffmath::NodeId inject_audio_prompts(diffmath::Graph& g, diffmath::NodeId state,
                                      std::vector<std::size_t>& lengths,
                                      diffmath::NodeId prompts, std::size_t replace = 0);

// A named subset of a store's parameters.
struct TrainablePartition {
  std::set<std::string> names;
};

std::size_t count_trainable(const ParameterStore& store, const TrainablePartition& partition);

}  // namespace ptat::atpg
