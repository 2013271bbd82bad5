#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ptat/baselines.hpp"
#include "ptat/data.hpp"
#include "ptat/matrix.hpp"
#include "ptat/params.hpp"

namespace ptat::eval {

enum class Direction { a2t, t2a };

std::string_view to_string(Direction d);
Direction parse_direction(std::string_view s);

inline constexpr std::array<std::size_t, 3> kRecallKs{1, 5, 10};

// Fraction of rows i whose column i ranks within the top k of row i. Ties
// rank the lower column index first.
double recall_at_k(const Matrix& scores, std::size_t k);

struct RetrievalScores {
  std::array<double, 3> a2t{};  // indexed like kRecallKs
  std::array<double, 3> t2a{};

  double at(Direction d, std::size_t k) const;
};

// Similarity is the plain inner product of the (unit) embeddings; the
// temperature does not change rankings.
RetrievalScores score_embeddings(const Matrix& audio, const Matrix& text);

struct DatasetEmbeddings {
  Matrix audio;
  Matrix text;
};

DatasetEmbeddings embed_dataset(const ParameterStore& params, const ModelConfig& cfg,
                                const Strategy& strategy, const data::PairedDataset& dataset,
                                std::size_t chunk = 64);

// Throws ValidationError for fewer than 2 pairs.
RetrievalScores evaluate_retrieval(const ParameterStore& params, const ModelConfig& cfg,
                                   const Strategy& strategy, const data::PairedDataset& dataset);

struct MetricRecord {
  std::size_t step = 0;
  std::string dataset;
  Direction direction = Direction::t2a;
  std::size_t k = 10;
  double recall = 0.0;

  friend bool operator==(const MetricRecord&, const MetricRecord&) = default;
};

class MetricsHistory {
 public:
  MetricsHistory() = default;
  MetricsHistory(std::string strategy, std::uint64_t seed, std::size_t trainable_params)
      : strategy_(std::move(strategy)), seed_(seed), trainable_params_(trainable_params) {}

  // Rejects a duplicate (step, dataset, direction, k) and any record that
  // would break monotonicity in k.
  void add(const MetricRecord& record);
  void add_scores(std::size_t step, const std::string& dataset, const RetrievalScores& scores);

  std::optional<double> get(std::size_t step, const std::string& dataset, Direction d,
                            std::size_t k) const;
  const std::vector<MetricRecord>& records() const { return records_; }
  std::vector<std::size_t> steps() const;
  // Datasets in order of first appearance.
  std::vector<std::string> datasets() const;
  std::size_t final_step() const;
  std::size_t first_step(const std::string& dataset) const;

  const std::string& strategy() const { return strategy_; }
  std::uint64_t seed() const { return seed_; }
  std::size_t trainable_params() const { return trainable_params_; }

  friend bool operator==(const MetricsHistory&, const MetricsHistory&) = default;

 private:
  std::string strategy_;
  std::uint64_t seed_ = 0;
  std::size_t trainable_params_ = 0;
  std::vector<MetricRecord> records_;
};

// Recall@10 at the final step over recall@10 at the dataset's first step.
// Throws NumericError when the denominator is zero.
double anti_forgetting_score(const MetricsHistory& history, const std::string& dataset,
                             Direction direction = Direction::t2a);

struct AfsEntry {
  std::string dataset;
  std::size_t first_step = 0;
  double recall_first = 0.0;
  double recall_final = 0.0;
  double afs = 0.0;
};

// One entry per dataset introduced before the final step.
std::vector<AfsEntry> afs_report(const MetricsHistory& history,
                                 Direction direction = Direction::t2a);

// Mean over datasets at the final step, keyed by (direction, k). Missing
// records are rejected with the gaps listed.
std::map<std::pair<Direction, std::size_t>, double> average_metrics(const MetricsHistory& history);

// Mean of all six final-step averages.
double mean_final_recall(const MetricsHistory& history);

void write_jsonl(const MetricsHistory& history, std::ostream& out);
MetricsHistory read_jsonl(std::istream& in);
// One row per (step, dataset) with columns r1/r5/r10 for both directions.
void write_csv(const MetricsHistory& history, std::ostream& out);

}  // namespace ptat::eval
