#pragma once

#include <cstddef>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ptat/atpg.hpp"
#include "ptat/graph.hpp"
#include "ptat/params.hpp"

// Desk-scale dual encoders. The audio encoder embeds 2-D patches of a
// spectrogram, the text encoder embeds token ids; both run pre-norm
// transformer blocks, mean-pool every row (prompt rows included), project to
// the shared space and L2-normalize.
namespace ptat {

struct EncoderConfig {
  std::size_t embed_dim = 32;
  std::size_t num_layers = 2;
  std::size_t num_heads = 2;
  std::size_t mlp_hidden = 512;
  std::size_t max_seq_len = 48;
  std::size_t shared_dim = 32;
  // text only
  std::size_t vocab_size = 64;
  // audio only: spectrogram (time x freq) and patch grid
  std::size_t input_rows = 32;
  std::size_t input_cols = 16;
  std::size_t patch_rows = 4;
  std::size_t patch_cols = 4;

  std::size_t head_dim() const { return embed_dim / num_heads; }
  std::size_t num_patches() const {
    return (input_rows / patch_rows) * (input_cols / patch_cols);
  }
  std::size_t patch_size() const { return patch_rows * patch_cols; }

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

struct ModelConfig {
  EncoderConfig audio;
  EncoderConfig text;
  std::size_t text_len = 10;
  std::size_t prompt_len = 12;
  std::size_t inject_layer = 1;
  std::size_t lora_rank = 4;

  // Throws ValidationError naming the offending field.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct AudioSample {
  Matrix spectrogram;  // time x freq
};

struct TextSample {
  std::vector<int> tokens;
};

// Patch rows of every sample stacked: (batch * patches) x patch_size.
struct AudioBatch {
  Matrix patches;
  std::size_t batch = 0;
  std::size_t tokens_per_sample = 0;
};

// One-hot token rows stacked: (sum of lengths) x vocab.
struct TextBatch {
  Matrix one_hot;
  std::vector<std::size_t> lengths;
};

AudioBatch make_audio_batch(const EncoderConfig& cfg, std::span<const AudioSample* const> samples);
TextBatch make_text_batch(const EncoderConfig& cfg, std::span<const TextSample* const> samples);

// Adds "<prefix>.*" backbone parameters (all frozen by default).
void init_audio_encoder(ParameterStore& store, const EncoderConfig& cfg, std::mt19937_64& rng);
void init_text_encoder(ParameterStore& store, const EncoderConfig& cfg, std::mt19937_64& rng);

inline const std::string kAudio = "audio";
inline const std::string kText = "text";

// Batched forward passes; return batch x shared_dim unit rows.
diffmath::NodeId encode_audio_batch(diffmath::Graph& g, const BoundParams& p,
                                    const EncoderConfig& cfg, const AudioBatch& batch,
                                    const atpg::InjectionSchedule& prompts);
diffmath::NodeId encode_text_batch(diffmath::Graph& g, const BoundParams& p,
                                   const EncoderConfig& cfg, const TextBatch& batch,
                                   std::optional<diffmath::NodeId> prefix,
                                   std::optional<diffmath::NodeId> postfix);

// Single-sample conveniences over a parameter store; return 1 x shared_dim.
Matrix encode_audio(const AudioSample& sample, const Matrix* prompts, std::size_t inject_layer,
                    const ParameterStore& state, const EncoderConfig& cfg);
Matrix encode_text(const TextSample& sample, const Matrix* prefix, const Matrix* postfix,
                   const ParameterStore& state, const EncoderConfig& cfg);

}  // namespace ptat
