#include "ptat/atpg.hpp"

#include "ptat/errors.hpp"

namespace ptat::atpg {

using diffmath::Graph;
using diffmath::NodeId;

PromptSet init_prompt_set(std::size_t length, std::size_t dim, std::size_t inject_layer,
                          std::mt19937_64& rng) {
  if (length == 0) throw ValidationError("prompt length must be >= 1");
  std::normal_distribution<double> dist(0.0, 0.02);
  PromptSet p;
  p.audio = Matrix(length, dim);
  for (double& v : p.audio.values()) v = dist(rng);
  p.pre_weight = Matrix::identity(dim);
  p.pre_bias = Matrix(1, dim);
  p.post_weight = Matrix::identity(dim);
  p.post_bias = Matrix(1, dim);
  p.inject_layer = inject_layer;
  return p;
}

void add_to_store(ParameterStore& store, const PromptSet& prompts) {
  store.add(kAudioPrompts, prompts.audio);
  store.add(kPreWeight, prompts.pre_weight);
  store.add(kPreBias, prompts.pre_bias);
  store.add(kPostWeight, prompts.post_weight);
  store.add(kPostBias, prompts.post_bias);
}

PromptSet from_store(const ParameterStore& store, std::size_t inject_layer) {
  return PromptSet{store.at(kAudioPrompts), store.at(kPreWeight), store.at(kPreBias),
                   store.at(kPostWeight),   store.at(kPostBias),   inject_layer};
}

std::pair<Matrix, Matrix> generate_text_prompts(const PromptSet& prompts) {
  Graph g;
  const auto [pre, post] = generate_text_prompts(
      g, g.constant(prompts.audio), g.constant(prompts.pre_weight), g.constant(prompts.pre_bias),
      g.constant(prompts.post_weight), g.constant(prompts.post_bias));
  return {g.value(pre), g.value(post)};
}

std::pair<NodeId, NodeId> generate_text_prompts(Graph& g, NodeId audio_prompts, NodeId pre_weight,
                                                NodeId pre_bias, NodeId post_weight,
                                                NodeId post_bias) {
  const Matrix& a = g.value(audio_prompts);
  for (NodeId w : {pre_weight, post_weight}) {
    const Matrix& wm = g.value(w);
    if (wm.rows() != a.cols() || wm.cols() != a.cols()) {
      throw ShapeError("generate_text_prompts: prompts " + a.shape() + " vs map " + wm.shape());
    }
  }
  const NodeId pre = g.add(g.matmul(audio_prompts, pre_weight), pre_bias);
  const NodeId post = g.add(g.matmul(audio_prompts, post_weight), post_bias);
  return {pre, post};
}

InjectionSchedule::InjectionSchedule(std::size_t num_layers, bool allow_multiple)
    : num_layers_(num_layers), allow_multiple_(allow_multiple) {}

void InjectionSchedule::inject(std::size_t layer, NodeId prompts) {
  if (layer < 1 || layer > num_layers_) {
    throw ValidationError("inject layer " + std::to_string(layer) + " outside [1, " +
                          std::to_string(num_layers_) + "]");
  }
  if (by_layer_.count(layer) != 0) {
    throw ValidationError("prompts already injected at layer " + std::to_string(layer));
  }
  if (!allow_multiple_ && !by_layer_.empty()) {
    throw ValidationError("single-layer policy: prompts already injected at layer " +
                          std::to_string(by_layer_.begin()->first));
  }
  by_layer_.emplace(layer, prompts);
}

std::optional<NodeId> InjectionSchedule::at(std::size_t layer) const {
  auto it = by_layer_.find(layer);
  if (it == by_layer_.end()) return std::nullopt;
  return it->second;
}

NodeId inject_audio_prompts(Graph& g, NodeId state, std::vector<std::size_t>& lengths,
                            NodeId prompts, std::size_t replace) {
  const Matrix& p = g.value(prompts);
  const Matrix& s = g.value(state);
  if (p.cols() != s.cols()) {
    throw ShapeError("inject_audio_prompts: prompts " + p.shape() + " vs layer width " +
                     s.shape());
  }
  if (p.rows() == 0 && replace == 0) return state;
  std::vector<NodeId> parts;
  parts.reserve(2 * lengths.size());
  std::size_t offset = 0;
  for (auto& len : lengths) {
    if (replace > len) throw ShapeError("inject_audio_prompts: replacing more rows than present");
    if (p.rows() != 0) parts.push_back(prompts);
    if (len > replace) parts.push_back(g.slice_rows(state, offset + replace, len - replace));
    offset += len;
    len = len - replace + p.rows();
  }
  return g.concat_rows(parts);
}

std::size_t count_trainable(const ParameterStore& store, const TrainablePartition& partition) {
  std::size_t n = 0;
  for (const auto& name : partition.names) n += store.at(name).size();
  return n;
}

}  // namespace ptat::atpg
