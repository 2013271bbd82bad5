#include "ptat/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include <zlib.h>

#include "ptat/errors.hpp"

namespace ptat::data {

static_assert(std::endian::native == std::endian::little,
              "blob I/O assumes a little-endian host");

namespace {

constexpr const char* kManifestHeader = "ptat-manifest v1";

std::mt19937_64 stream(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(a),    static_cast<std::uint32_t>(a >> 32),
                    static_cast<std::uint32_t>(b),    static_cast<std::uint32_t>(b >> 32)};
  return std::mt19937_64(seq);
}

Matrix normal(std::size_t r, std::size_t c, double sigma, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);  // sigma may be 0
  Matrix m(r, c);
  for (double& v : m.values()) v = dist(rng) * sigma;
  return m;
}

void copy_column(const Matrix& src, Matrix& dst, std::size_t col) {
  for (std::size_t r = 0; r < src.rows(); ++r) dst(r, col) = src(r, col);
}

bool all_zero(const Matrix& m) {
  return std::all_of(m.values().begin(), m.values().end(), [](double v) { return v == 0.0; });
}

void validate(const DomainSpec& s) {
  if (s.latent_dim == 0) throw ValidationError("domain " + s.name + ": latent_dim must be > 0");
  if (!(s.overlap >= 0.0 && s.overlap <= 1.0)) {
    throw ValidationError("domain " + s.name + ": overlap must lie in [0, 1]");
  }
  if (s.noise_sigma < 0.0) throw ValidationError("domain " + s.name + ": noise_sigma < 0");
  if (s.audio_map.rows() != s.spec_rows * s.spec_cols || s.audio_map.cols() != s.latent_dim) {
    throw ShapeError("domain " + s.name + ": audio_map " + s.audio_map.shape());
  }
  if (s.text_logit_map.rows() != s.text_len * s.vocab_size ||
      s.text_logit_map.cols() != s.latent_dim) {
    throw ShapeError("domain " + s.name + ": text_logit_map " + s.text_logit_map.shape());
  }
  if (all_zero(s.audio_map) || all_zero(s.text_logit_map)) {
    throw ValidationError("domain " + s.name + ": degenerate (rank 0) map");
  }
}

}  // namespace

SequenceSpec make_sequence(const SequenceOptions& o, std::uint64_t seed) {
  if (o.num_domains == 0) throw ValidationError("sequence needs at least one domain");
  const std::size_t k = o.latent_dim;
  if (k == 0 || o.pool_size < k) throw ValidationError("pool_size must be >= latent_dim > 0");
  if (!(o.domain_gap >= 0.0 && o.domain_gap <= 1.0)) {
    throw ValidationError("domain_gap must lie in [0, 1]");
  }
  const double text_gap = o.text_gap < 0.0 ? o.domain_gap : o.text_gap;
  if (text_gap > 1.0) throw ValidationError("text_gap must lie in [0, 1]");
  const auto shared = static_cast<std::size_t>(std::lround(o.overlap * static_cast<double>(k)));
  if (o.num_domains > 1 && shared < k && o.pool_size < 2 * k - shared) {
    throw ValidationError("pool too small for the requested overlap");
  }
  const std::size_t audio_rows = o.spec_rows * o.spec_cols;
  const std::size_t text_rows = o.text_len * o.vocab_size;
  const double audio_sigma = 1.0 / std::sqrt(static_cast<double>(k));

  auto world = stream(o.world_seed, 0x706f6f6cu);  // "pool"
  const Matrix pool_audio = normal(audio_rows, o.pool_size, audio_sigma, world);
  const Matrix pool_text = normal(text_rows, o.pool_size, 1.0, world);
  const double keep = std::sqrt(1.0 - o.domain_gap * o.domain_gap);
  const double text_keep = std::sqrt(1.0 - text_gap * text_gap);

  SequenceSpec seq;
  std::vector<std::size_t> prev_concepts;
  for (std::size_t m = 0; m < o.num_domains; ++m) {
    auto rng = stream(seed, 0x6d617073u, m);  // "maps"
    DomainSpec d;
    d.name = o.name_prefix + std::to_string(m + 1);
    d.latent_dim = k;
    d.num_train = o.num_train;
    d.num_test = o.num_test;
    d.spec_rows = o.spec_rows;
    d.spec_cols = o.spec_cols;
    d.text_len = o.text_len;
    d.vocab_size = o.vocab_size;
    d.noise_sigma = o.noise_sigma;
    d.overlap = o.overlap;
    d.seed = seed * 1000003u + m + 1;
    d.audio_map = normal(audio_rows, k, audio_sigma * o.domain_gap, rng);
    d.text_logit_map = normal(text_rows, k, text_gap, rng);

    // Column slots [0, carried) reuse the predecessor's columns.
    std::vector<std::size_t> slots(k);
    std::iota(slots.begin(), slots.end(), 0);
    std::shuffle(slots.begin(), slots.end(), rng);
    std::vector<std::size_t> concepts(k);
    std::vector<bool> taken(o.pool_size, false);
    const std::size_t carried = m > 0 ? shared : 0;
    if (carried > 0) {
      const DomainSpec& prev = seq.domains.back();
      for (std::size_t i = 0; i < carried; ++i) {
        copy_column(prev.audio_map, d.audio_map, slots[i]);
        copy_column(prev.text_logit_map, d.text_logit_map, slots[i]);
        concepts[slots[i]] = prev_concepts[slots[i]];
      }
    }
    for (std::size_t c : prev_concepts) taken[c] = true;
    std::vector<std::size_t> fresh;
    for (std::size_t c = 0; c < o.pool_size; ++c)
      if (!taken[c]) fresh.push_back(c);
    std::shuffle(fresh.begin(), fresh.end(), rng);
    for (std::size_t i = carried; i < k; ++i) {
      const std::size_t slot = slots[i];
      const std::size_t c = fresh[i - carried];
      concepts[slot] = c;
      for (std::size_t r = 0; r < audio_rows; ++r) d.audio_map(r, slot) += keep * pool_audio(r, c);
      for (std::size_t r = 0; r < text_rows; ++r) d.text_logit_map(r, slot) += text_keep * pool_text(r, c);
    }
    prev_concepts = std::move(concepts);
    seq.domains.push_back(std::move(d));
  }
  return seq;
}

std::vector<double> latent_vector(const DomainSpec& spec, std::uint64_t latent_id) {
  auto rng = stream(spec.seed, 0x6c6174u, latent_id);  // "lat"
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<double> z(spec.latent_dim);
  for (double& v : z) v = dist(rng);
  return z;
}

PairedSample generate_sample(const DomainSpec& spec, std::uint64_t latent_id) {
  const std::vector<double> z = latent_vector(spec, latent_id);
  auto noise_rng = stream(spec.seed, 0x6e6f6973u, latent_id);  // "nois"
  std::normal_distribution<double> noise(0.0, spec.noise_sigma > 0 ? spec.noise_sigma : 1.0);

  Matrix spec_m(spec.spec_rows, spec.spec_cols);
  for (std::size_t i = 0; i < spec_m.size(); ++i) {
    double v = 0.0;
    for (std::size_t j = 0; j < z.size(); ++j) v += spec.audio_map(i, j) * z[j];
    if (spec.noise_sigma > 0) v += noise(noise_rng);
    // float-representable so manifests round-trip exactly
    spec_m[i] = static_cast<double>(static_cast<float>(v));
  }

  TextSample text;
  text.tokens.resize(spec.text_len);
  for (std::size_t p = 0; p < spec.text_len; ++p) {
    std::size_t best = 0;
    double best_logit = -INFINITY;
    for (std::size_t t = 0; t < spec.vocab_size; ++t) {
      const std::size_t row = p * spec.vocab_size + t;
      double logit = 0.0;
      for (std::size_t j = 0; j < z.size(); ++j) logit += spec.text_logit_map(row, j) * z[j];
      if (logit > best_logit) {
        best_logit = logit;
        best = t;
      }
    }
    text.tokens[p] = static_cast<int>(best);
  }

  auto crop_rng = stream(spec.seed, 0x63726f70u, latent_id);  // "crop"
  PairedSample s;
  s.audio = crop_or_pad(spec_m, spec.spec_rows, crop_rng);
  s.text = std::move(text);
  s.latent_id = latent_id;
  return s;
}

DomainData generate_domain(const DomainSpec& spec) {
  validate(spec);
  DomainData out;
  out.spec = spec;
  out.train.domain = out.test.domain = spec.name;
  out.train.split = Split::train;
  out.test.split = Split::test;
  out.train.samples.reserve(spec.num_train);
  out.test.samples.reserve(spec.num_test);
  for (std::uint64_t id = 0; id < spec.num_train; ++id)
    out.train.samples.push_back(generate_sample(spec, id));
  for (std::uint64_t id = spec.num_train; id < spec.num_train + spec.num_test; ++id)
    out.test.samples.push_back(generate_sample(spec, id));
  return out;
}

AudioSample crop_or_pad(const Matrix& spectrogram, std::size_t target_len, std::mt19937_64& rng) {
  if (target_len == 0) throw ValidationError("crop_or_pad: target length must be > 0");
  if (spectrogram.rows() == 0 || spectrogram.cols() == 0) {
    throw ValidationError("crop_or_pad: empty spectrogram " + spectrogram.shape());
  }
  const std::size_t rows = spectrogram.rows();
  const std::size_t cols = spectrogram.cols();
  if (rows == target_len) return AudioSample{spectrogram};
  Matrix out(target_len, cols);
  if (rows > target_len) {
    std::uniform_int_distribution<std::size_t> start_dist(0, rows - target_len);
    const std::size_t start = start_dist(rng);
    std::copy(spectrogram.data() + start * cols, spectrogram.data() + (start + target_len) * cols,
              out.data());
  } else {
    std::copy(spectrogram.data(), spectrogram.data() + rows * cols, out.data());
  }
  return AudioSample{std::move(out)};
}

std::uint32_t crc32(const void* data, std::size_t size) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  return static_cast<std::uint32_t>(
      ::crc32(crc, static_cast<const Bytef*>(data), static_cast<uInt>(size)));
}

void write_manifest(const PairedDataset& dataset, const std::filesystem::path& manifest) {
  namespace fs = std::filesystem;
  const fs::path base = manifest.parent_path();
  const fs::path blob_dir = manifest.stem().string() + "_blobs";
  fs::create_directories(base / blob_dir);

  std::ofstream out(manifest);
  if (!out) throw DataError(DataError::Kind::format, "cannot write manifest " + manifest.string());
  out << kManifestHeader << '\n';
  for (const auto& s : dataset.samples) {
    const Matrix& m = s.audio.spectrogram;
    std::vector<float> floats(m.size());
    for (std::size_t i = 0; i < m.size(); ++i) floats[i] = static_cast<float>(m[i]);
    const std::size_t bytes = floats.size() * sizeof(float);
    const fs::path rel = blob_dir / (std::to_string(s.latent_id) + ".f32");
    std::ofstream blob(base / rel, std::ios::binary);
    blob.write(reinterpret_cast<const char*>(floats.data()), static_cast<std::streamsize>(bytes));
    if (!blob) throw DataError(DataError::Kind::format, "cannot write blob " + rel.string());

    out << s.latent_id << '\t' << rel.generic_string() << '\t' << m.rows() << '\t' << m.cols()
        << '\t';
    for (std::size_t i = 0; i < s.text.tokens.size(); ++i) {
      out << (i ? "," : "") << s.text.tokens[i];
    }
    out << '\t' << crc32(floats.data(), bytes) << '\n';
  }
}

PairedDataset load_manifest(const std::filesystem::path& manifest,
                            std::optional<std::size_t> expected_cols, Split split) {
  namespace fs = std::filesystem;
  std::ifstream in(manifest);
  if (!in) {
    throw DataError(DataError::Kind::format, "cannot open manifest " + manifest.string());
  }
  std::string line;
  if (!std::getline(in, line) || line != kManifestHeader) {
    throw DataError(DataError::Kind::format,
                    manifest.string() + ": missing header '" + kManifestHeader + "'");
  }
  PairedDataset ds;
  ds.domain = manifest.stem().string();
  ds.split = split;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::string where = manifest.string() + ":" + std::to_string(line_no);
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, '\t')) fields.push_back(f);
    if (fields.size() != 6) {
      throw DataError(DataError::Kind::format, where + ": expected 6 tab-separated fields");
    }
    PairedSample s;
    std::size_t rows = 0, cols = 0;
    std::uint32_t expected_crc = 0;
    try {
      s.latent_id = std::stoull(fields[0]);
      rows = std::stoul(fields[2]);
      cols = std::stoul(fields[3]);
      expected_crc = static_cast<std::uint32_t>(std::stoul(fields[5]));
      std::stringstream toks(fields[4]);
      std::string t;
      while (std::getline(toks, t, ',')) s.text.tokens.push_back(std::stoi(t));
    } catch (const std::exception&) {
      throw DataError(DataError::Kind::format, where + ": malformed numeric field");
    }

    const fs::path blob_path = manifest.parent_path() / fields[1];
    if (!fs::exists(blob_path)) {
      throw DataError(DataError::Kind::missing_blob, where + ": blob " + blob_path.string() +
                                                         " does not exist");
    }
    std::ifstream blob(blob_path, std::ios::binary);
    std::vector<char> bytes((std::istreambuf_iterator<char>(blob)),
                            std::istreambuf_iterator<char>());
    if (crc32(bytes.data(), bytes.size()) != expected_crc) {
      throw DataError(DataError::Kind::checksum, where + ": checksum mismatch for " +
                                                     blob_path.string());
    }
    if (bytes.size() != rows * cols * sizeof(float) || (expected_cols && cols != *expected_cols)) {
      throw DataError(DataError::Kind::dimension_mismatch,
                      where + ": blob holds " + std::to_string(bytes.size()) + " bytes for a " +
                          std::to_string(rows) + "x" + std::to_string(cols) + " spectrogram");
    }
    std::vector<float> floats(rows * cols);
    std::memcpy(floats.data(), bytes.data(), bytes.size());
    s.audio.spectrogram = Matrix(rows, cols, std::vector<double>(floats.begin(), floats.end()));
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace ptat::data
