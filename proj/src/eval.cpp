#include "ptat/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <ostream>
#include <set>

#include <nlohmann/json.hpp>

#include "ptat/errors.hpp"
#include "ptat/kernels.hpp"

namespace ptat::eval {

namespace {

std::size_t k_index(std::size_t k) {
  for (std::size_t i = 0; i < kRecallKs.size(); ++i)
    if (kRecallKs[i] == k) return i;
  throw ValidationError("recall cutoff k=" + std::to_string(k) + " is not one of 1, 5, 10");
}

std::string fmt_recall(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

std::string_view to_string(Direction d) { return d == Direction::a2t ? "a2t" : "t2a"; }

Direction parse_direction(std::string_view s) {
  if (s == "a2t") return Direction::a2t;
  if (s == "t2a") return Direction::t2a;
  throw ValidationError("unknown direction '" + std::string(s) + "' (valid: a2t, t2a)");
}

double recall_at_k(const Matrix& scores, std::size_t k) {
  if (scores.rows() != scores.cols()) {
    throw ShapeError("recall_at_k: similarity matrix " + scores.shape() + " is not square");
  }
  if (k == 0) throw ValidationError("recall_at_k: k must be >= 1");
  if (scores.rows() == 0) throw ValidationError("recall_at_k: empty similarity matrix");
  return static_cast<double>(kernels::parallel::recall_hits(scores, k)) /
         static_cast<double>(scores.rows());
}

double RetrievalScores::at(Direction d, std::size_t k) const {
  return (d == Direction::a2t ? a2t : t2a)[k_index(k)];
}

RetrievalScores score_embeddings(const Matrix& audio, const Matrix& text) {
  if (audio.rows() != text.rows() || audio.cols() != text.cols()) {
    throw ShapeError("score_embeddings: " + audio.shape() + " vs " + text.shape());
  }
  Matrix a2t(audio.rows(), text.rows());
  kernels::parallel::gemm(audio, false, text, true, a2t);
  const Matrix t2a = a2t.transposed();
  RetrievalScores s;
  for (std::size_t i = 0; i < kRecallKs.size(); ++i) {
    s.a2t[i] = recall_at_k(a2t, kRecallKs[i]);
    s.t2a[i] = recall_at_k(t2a, kRecallKs[i]);
  }
  return s;
}

DatasetEmbeddings embed_dataset(const ParameterStore& params, const ModelConfig& cfg,
                                const Strategy& strategy, const data::PairedDataset& dataset,
                                std::size_t chunk) {
  ParameterStore frozen = params;
  frozen.set_trainable({});
  const std::size_t n = dataset.size();
  DatasetEmbeddings out{Matrix(n, cfg.audio.shared_dim), Matrix(n, cfg.text.shared_dim)};
  for (std::size_t start = 0; start < n; start += chunk) {
    const std::size_t count = std::min(chunk, n - start);
    std::vector<const AudioSample*> audio;
    std::vector<const TextSample*> text;
    for (std::size_t i = start; i < start + count; ++i) {
      audio.push_back(&dataset.samples[i].audio);
      text.push_back(&dataset.samples[i].text);
    }
    diffmath::Graph g;
    const BoundParams p(g, frozen);
    const EmbeddingNodes e = embed_batch(g, p, cfg, strategy, make_audio_batch(cfg.audio, audio),
                                         make_text_batch(cfg.text, text));
    const Matrix& ea = g.value(e.audio);
    const Matrix& et = g.value(e.text);
    std::copy(ea.data(), ea.data() + ea.size(), out.audio.data() + start * ea.cols());
    std::copy(et.data(), et.data() + et.size(), out.text.data() + start * et.cols());
  }
  return out;
}

RetrievalScores evaluate_retrieval(const ParameterStore& params, const ModelConfig& cfg,
                                   const Strategy& strategy, const data::PairedDataset& dataset) {
  if (dataset.size() < 2) {
    throw ValidationError("evaluate_retrieval: dataset " + dataset.domain + " has " +
                          std::to_string(dataset.size()) + " pairs, need at least 2");
  }
  const DatasetEmbeddings e = embed_dataset(params, cfg, strategy, dataset);
  return score_embeddings(e.audio, e.text);
}

void MetricsHistory::add(const MetricRecord& r) {
  k_index(r.k);
  if (!(r.recall >= 0.0 && r.recall <= 1.0)) {
    throw ValidationError("recall " + std::to_string(r.recall) + " outside [0, 1]");
  }
  for (const auto& e : records_) {
    if (e.step != r.step || e.dataset != r.dataset || e.direction != r.direction) continue;
    if (e.k == r.k) {
      throw ValidationError("duplicate metric record: step " + std::to_string(r.step) + ", " +
                            r.dataset + ", " + std::string(to_string(r.direction)) + ", k=" +
                            std::to_string(r.k));
    }
    if ((e.k < r.k && e.recall > r.recall) || (e.k > r.k && e.recall < r.recall)) {
      throw ValidationError("recall not monotone in k for step " + std::to_string(r.step) + ", " +
                            r.dataset);
    }
  }
  records_.push_back(r);
}

void MetricsHistory::add_scores(std::size_t step, const std::string& dataset,
                                const RetrievalScores& s) {
  for (Direction d : {Direction::a2t, Direction::t2a})
    for (std::size_t k : kRecallKs) add({step, dataset, d, k, s.at(d, k)});
}

std::optional<double> MetricsHistory::get(std::size_t step, const std::string& dataset,
                                          Direction d, std::size_t k) const {
  for (const auto& r : records_)
    if (r.step == step && r.dataset == dataset && r.direction == d && r.k == k) return r.recall;
  return std::nullopt;
}

std::vector<std::size_t> MetricsHistory::steps() const {
  std::set<std::size_t> s;
  for (const auto& r : records_) s.insert(r.step);
  return {s.begin(), s.end()};
}

std::vector<std::string> MetricsHistory::datasets() const {
  std::vector<std::string> out;
  for (const auto& r : records_)
    if (std::find(out.begin(), out.end(), r.dataset) == out.end()) out.push_back(r.dataset);
  return out;
}

std::size_t MetricsHistory::final_step() const {
  if (records_.empty()) throw ValidationError("metrics history is empty");
  return steps().back();
}

std::size_t MetricsHistory::first_step(const std::string& dataset) const {
  std::optional<std::size_t> first;
  for (const auto& r : records_)
    if (r.dataset == dataset && (!first || r.step < *first)) first = r.step;
  if (!first) throw ValidationError("no records for dataset " + dataset);
  return *first;
}

double anti_forgetting_score(const MetricsHistory& h, const std::string& dataset, Direction d) {
  const std::size_t m0 = h.first_step(dataset);
  const std::size_t last = h.final_step();
  const auto first = h.get(m0, dataset, d, 10);
  const auto final = h.get(last, dataset, d, 10);
  if (!first || !final) {
    throw ValidationError("AFS for " + dataset + " needs recall@10 at steps " +
                          std::to_string(m0) + " and " + std::to_string(last));
  }
  if (*first == 0.0) {
    throw NumericError("AFS undefined for " + dataset + ": recall@10 at step " +
                       std::to_string(m0) + " is 0");
  }
  return *final / *first;
}

std::vector<AfsEntry> afs_report(const MetricsHistory& h, Direction d) {
  std::vector<AfsEntry> out;
  const std::size_t last = h.final_step();
  for (const auto& ds : h.datasets()) {
    const std::size_t m0 = h.first_step(ds);
    if (m0 == last) continue;
    AfsEntry e;
    e.dataset = ds;
    e.first_step = m0;
    e.recall_first = h.get(m0, ds, d, 10).value_or(0.0);
    e.recall_final = h.get(last, ds, d, 10).value_or(0.0);
    e.afs = anti_forgetting_score(h, ds, d);
    out.push_back(e);
  }
  return out;
}

std::map<std::pair<Direction, std::size_t>, double> average_metrics(const MetricsHistory& h) {
  const std::size_t last = h.final_step();
  std::vector<std::string> present;
  for (const auto& r : h.records())
    if (r.step == last && std::find(present.begin(), present.end(), r.dataset) == present.end())
      present.push_back(r.dataset);
  std::map<std::pair<Direction, std::size_t>, double> out;
  std::string gaps;
  for (Direction d : {Direction::a2t, Direction::t2a}) {
    for (std::size_t k : kRecallKs) {
      double sum = 0.0;
      for (const auto& ds : present) {
        const auto v = h.get(last, ds, d, k);
        if (!v) {
          gaps += (gaps.empty() ? "" : "; ") + ds + " " + std::string(to_string(d)) + "@" +
                  std::to_string(k);
          continue;
        }
        sum += *v;
      }
      out[{d, k}] = sum / static_cast<double>(present.size());
    }
  }
  if (!gaps.empty()) {
    throw ValidationError("final-step records missing: " + gaps);
  }
  return out;
}

double mean_final_recall(const MetricsHistory& h) {
  const auto avg = average_metrics(h);
  double sum = 0.0;
  for (const auto& [key, v] : avg) sum += v;
  return sum / static_cast<double>(avg.size());
}

void write_jsonl(const MetricsHistory& h, std::ostream& out) {
  for (const auto& r : h.records()) {
    nlohmann::ordered_json j;
    j["step"] = r.step;
    j["dataset"] = r.dataset;
    j["direction"] = to_string(r.direction);
    j["k"] = r.k;
    j["recall"] = r.recall;
    j["strategy"] = h.strategy();
    j["seed"] = h.seed();
    j["trainable_params"] = h.trainable_params();
    out << j.dump() << '\n';
  }
}

MetricsHistory read_jsonl(std::istream& in) {
  std::optional<MetricsHistory> h;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      const auto strategy = j.at("strategy").get<std::string>();
      const auto seed = j.at("seed").get<std::uint64_t>();
      const auto trainable = j.at("trainable_params").get<std::size_t>();
      if (!h) {
        h.emplace(strategy, seed, trainable);
      } else if (h->strategy() != strategy || h->seed() != seed ||
                 h->trainable_params() != trainable) {
        throw ValidationError("line " + std::to_string(line_no) + ": mixes runs");
      }
      h->add({j.at("step").get<std::size_t>(), j.at("dataset").get<std::string>(),
              parse_direction(j.at("direction").get<std::string>()), j.at("k").get<std::size_t>(),
              j.at("recall").get<double>()});
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("metrics line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (!h) throw ValidationError("metrics file holds no records");
  return *h;
}

void write_csv(const MetricsHistory& h, std::ostream& out) {
  out << "strategy,seed,trainable_params,step,dataset";
  for (Direction d : {Direction::a2t, Direction::t2a})
    for (std::size_t k : kRecallKs) out << ',' << to_string(d) << "_r" << k;
  out << '\n';
  for (std::size_t step : h.steps()) {
    for (const auto& ds : h.datasets()) {
      if (!h.get(step, ds, Direction::t2a, 10) && !h.get(step, ds, Direction::a2t, 10)) continue;
      out << h.strategy() << ',' << h.seed() << ',' << h.trainable_params() << ',' << step << ','
          << ds;
      for (Direction d : {Direction::a2t, Direction::t2a})
        for (std::size_t k : kRecallKs) {
          const auto v = h.get(step, ds, d, k);
          out << ',' << (v ? fmt_recall(*v) : "");
        }
      out << '\n';
    }
  }
}

}  // namespace ptat::eval
