#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "ptat/encoder.hpp"

namespace ptat::data {

// One synthetic domain. A sample's latent vector z ~ N(0, I_k) is a pure
// function of (seed, latent id); its spectrogram is audio_map * z reshaped to
// rows x cols plus Gaussian noise, and its tokens are the per-position argmax
// of text_logit_map * z. Columns of the maps are the domain's "concepts".
struct DomainSpec {
  std::string name;
  std::size_t latent_dim = 16;
  std::size_t num_train = 2000;
  std::size_t num_test = 200;
  std::size_t spec_rows = 32;
  std::size_t spec_cols = 16;
  std::size_t text_len = 10;
  std::size_t vocab_size = 64;
  Matrix audio_map;       // (spec_rows * spec_cols) x latent_dim
  Matrix text_logit_map;  // (text_len * vocab_size) x latent_dim
  double noise_sigma = 0.1;
  double overlap = 0.3;  // fraction of concept columns shared with the previous domain
  std::uint64_t seed = 0;
};

enum class Split { train, test };

struct PairedSample {
  AudioSample audio;
  TextSample text;
  std::uint64_t latent_id = 0;

  friend bool operator==(const PairedSample& a, const PairedSample& b) {
    return a.latent_id == b.latent_id && a.audio.spectrogram == b.audio.spectrogram &&
           a.text.tokens == b.text.tokens;
  }
};

struct PairedDataset {
  std::string domain;
  Split split = Split::train;
  std::vector<PairedSample> samples;

  std::size_t size() const { return samples.size(); }
  friend bool operator==(const PairedDataset&, const PairedDataset&) = default;
};

struct DomainData {
  DomainSpec spec;
  PairedDataset train;
  PairedDataset test;
};

struct SequenceSpec {
  std::vector<DomainSpec> domains;
};

// Shape and size knobs shared by every domain of a generated sequence.
struct SequenceOptions {
  std::size_t num_domains = 4;
  std::size_t latent_dim = 16;
  std::size_t num_train = 2000;
  std::size_t num_test = 200;
  std::size_t spec_rows = 32;
  std::size_t spec_cols = 16;
  std::size_t text_len = 10;
  std::size_t vocab_size = 64;
  double noise_sigma = 0.1;
  double overlap = 0.3;
  // Concepts come from a pool fixed by world_seed, so every sequence and the
  // warm-up domains describe the same underlying world. A domain sees a fresh
  // concept as sqrt(1 - gap^2) * pool signature + gap * private noise; gap = 1
  // makes every fresh column independent of the pool.
  std::size_t pool_size = 48;
  double domain_gap = 0.5;
  // Gap for the text columns alone; negative means domain_gap. A small audio
  // gap with a large text gap pairs the same sounds with differently worded
  // captions from domain to domain.
  double text_gap = -1.0;
  std::uint64_t world_seed = 20240917;
  std::string name_prefix = "domain";

  friend bool operator==(const SequenceOptions&, const SequenceOptions&) = default;
};

// Draws the domain maps. Domain 1 picks latent_dim concepts from the pool;
// every later domain copies round(overlap * k) of its predecessor's concept
// columns verbatim and picks the rest from concepts the predecessor lacks.
SequenceSpec make_sequence(const SequenceOptions& options, std::uint64_t seed);

// Train ids are [0, num_train), test ids [num_train, num_train + num_test).
DomainData generate_domain(const DomainSpec& spec);
PairedSample generate_sample(const DomainSpec& spec, std::uint64_t latent_id);
std::vector<double> latent_vector(const DomainSpec& spec, std::uint64_t latent_id);

// Longer inputs are cropped to a seeded random contiguous window, shorter ones
// zero-padded at the end.
AudioSample crop_or_pad(const Matrix& spectrogram, std::size_t target_len, std::mt19937_64& rng);

// Writes `<manifest>` plus one little-endian float32 blob per sample into
// `<manifest stem>_blobs/` next to it. Blob paths are stored relative to the
// manifest's directory.
void write_manifest(const PairedDataset& dataset, const std::filesystem::path& manifest);

// Errors are DataError with kind format, missing_blob, checksum or
// dimension_mismatch. When expected_cols is set, every blob must have that
// many columns.
PairedDataset load_manifest(const std::filesystem::path& manifest,
                            std::optional<std::size_t> expected_cols = std::nullopt,
                            Split split = Split::test);

std::uint32_t crc32(const void* data, std::size_t size);

}  // namespace ptat::data
