#include "ptat/report.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include "ptat/config.hpp"
#include "ptat/errors.hpp"

namespace ptat::report {

namespace fs = std::filesystem;
using eval::Direction;

namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

// Strategies in order of first appearance.
std::vector<std::string> strategies_of(const std::vector<LoadedRun>& runs) {
  std::vector<std::string> out;
  for (const auto& r : runs)
    if (std::find(out.begin(), out.end(), r.history.strategy()) == out.end())
      out.push_back(r.history.strategy());
  return out;
}

std::vector<const LoadedRun*> runs_of(const std::vector<LoadedRun>& runs, const std::string& s) {
  std::vector<const LoadedRun*> out;
  for (const auto& r : runs)
    if (r.history.strategy() == s) out.push_back(&r);
  return out;
}

void require_complete(const std::vector<LoadedRun>& runs) {
  std::string msg;
  for (const auto& r : runs) {
    const auto gaps = missing_cells(r);
    if (gaps.empty()) continue;
    msg += "\n  " + r.dir.string() + ":";
    for (const auto& g : gaps) msg += " " + g;
  }
  if (!msg.empty()) throw ValidationError("incomplete runs, missing cells:" + msg);
}

// Walks up at most two levels for the config echo of a run directory.
std::optional<fs::path> find_config(fs::path dir) {
  for (int up = 0; up < 3 && !dir.empty(); ++up) {
    if (fs::exists(dir / "config.ini")) return dir / "config.ini";
    dir = dir.parent_path();
  }
  return std::nullopt;
}

}  // namespace

Kind parse_kind(const std::string& s) {
  if (s == "table") return Kind::table;
  if (s == "curves") return Kind::curves;
  if (s == "afs") return Kind::afs;
  throw ValidationError("unknown report kind '" + s + "' (expected table, curves or afs)");
}

std::vector<LoadedRun> load_runs(const std::vector<fs::path>& dirs, bool force) {
  std::vector<fs::path> files;
  for (const auto& d : dirs) {
    if (!fs::is_directory(d)) throw ValidationError("not a directory: " + d.string());
    std::vector<fs::path> found;
    for (auto it = fs::recursive_directory_iterator(d); it != fs::recursive_directory_iterator();
         ++it) {
      if (it.depth() > 2) it.disable_recursion_pending();
      if (it->is_regular_file() && it->path().filename() == "metrics.jsonl")
        found.push_back(it->path());
    }
    if (found.empty()) throw ValidationError("no metrics.jsonl under " + d.string());
    std::sort(found.begin(), found.end());
    files.insert(files.end(), found.begin(), found.end());
  }

  std::vector<LoadedRun> runs;
  std::set<std::pair<std::string, std::uint64_t>> seen;
  for (const auto& f : files) {
    LoadedRun r;
    r.dir = f.parent_path();
    std::ifstream in(f);
    try {
      r.history = eval::read_jsonl(in);
    } catch (const std::exception& e) {
      throw ValidationError(f.string() + ": " + e.what());
    }
    const auto cfg_path = find_config(r.dir);
    if (!cfg_path) throw ValidationError("no config.ini above " + r.dir.string());
    const config::RunConfig cfg = config::load_config(*cfg_path);
    r.config_hash = continual::to_hex(config::config_hash(cfg));
    for (std::size_t m = 0; m < cfg.sequence.num_domains; ++m) {
      const std::size_t idx = cfg.order.empty() ? m + 1 : cfg.order[m];
      r.datasets.push_back(cfg.sequence.name_prefix + std::to_string(idx));
    }
    if (!seen.insert({r.history.strategy(), r.history.seed()}).second) {
      throw ValidationError("run " + r.history.strategy() + "/seed" +
                            std::to_string(r.history.seed()) + " appears twice");
    }
    runs.push_back(std::move(r));
  }

  std::set<std::string> hashes;
  for (const auto& r : runs) hashes.insert(r.config_hash);
  if (hashes.size() > 1 && !force) {
    std::string msg = "runs come from different configurations:";
    for (const auto& r : runs) msg += "\n  " + r.config_hash.substr(0, 12) + " " + r.dir.string();
    throw ValidationError(msg + "\n(pass --force to combine them anyway)");
  }
  return runs;
}

std::vector<std::string> missing_cells(const LoadedRun& run) {
  std::vector<std::string> out;
  for (std::size_t step = 1; step <= run.datasets.size(); ++step) {
    for (std::size_t j = 0; j < step; ++j) {
      const std::string& ds = run.datasets[j];
      bool ok = true;
      for (Direction d : {Direction::a2t, Direction::t2a})
        for (std::size_t k : eval::kRecallKs) ok = ok && run.history.get(step, ds, d, k).has_value();
      if (!ok) out.push_back("(" + std::to_string(step) + ", " + ds + ")");
    }
  }
  return out;
}

std::string table_csv(const std::vector<LoadedRun>& runs) {
  require_complete(runs);
  const std::vector<std::string> datasets = runs.front().history.datasets();
  std::ostringstream out;
  out << "strategy,seeds,trainable_params";
  const char* cols[] = {"a2t_r1", "a2t_r5", "a2t_r10", "t2a_r1", "t2a_r5", "t2a_r10"};
  for (const auto& ds : datasets)
    for (const char* c : cols) out << "," << ds << "_" << c;
  for (const char* c : cols) out << ",avg_" << c;
  out << "\n";

  for (const auto& s : strategies_of(runs)) {
    const auto rs = runs_of(runs, s);
    out << s << "," << rs.size() << "," << rs.front()->history.trainable_params();
    std::map<std::pair<Direction, std::size_t>, double> avg;
    for (const auto& ds : datasets) {
      for (Direction d : {Direction::a2t, Direction::t2a}) {
        for (std::size_t k : eval::kRecallKs) {
          double sum = 0.0;
          for (const LoadedRun* r : rs) {
            const auto v = r->history.get(r->history.final_step(), ds, d, k);
            if (!v) throw ValidationError(r->dir.string() + " lacks final-step cell for " + ds);
            sum += *v;
          }
          const double mean = sum / static_cast<double>(rs.size());
          avg[{d, k}] += mean / static_cast<double>(datasets.size());
          out << "," << num(mean);
        }
      }
    }
    for (Direction d : {Direction::a2t, Direction::t2a})
      for (std::size_t k : eval::kRecallKs) out << "," << num(avg[{d, k}]);
    out << "\n";
  }
  return out.str();
}

std::string curve_svg(const std::vector<LoadedRun>& runs, const std::string& dataset) {
  const double w = 480, h = 320, left = 56, right = 130, top = 30, bottom = 44;
  const double pw = w - left - right, ph = h - top - bottom;
  std::size_t max_step = 1;
  for (const auto& r : runs) max_step = std::max(max_step, r.history.final_step());
  std::size_t first = max_step;
  for (const auto& r : runs) first = std::min(first, r.history.first_step(dataset));
  const double span = std::max<double>(1.0, static_cast<double>(max_step - first));
  auto x_of = [&](std::size_t step) {
    return left + pw * static_cast<double>(step - first) / span;
  };
  auto y_of = [&](double v) { return top + ph * (1.0 - v); };

  static const char* colours[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                  "#ff7f0e", "#8c564b", "#e377c2", "#17becf"};
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
      << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  svg << "<!-- dataset=" << dataset << " metric=t2a_recall@10 mean over seeds -->\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<text x=\"" << left << "\" y=\"18\" font-size=\"13\">" << dataset
      << ": recall@10 (text to audio)</text>\n";
  // axes and grid
  svg << "<line x1=\"" << left << "\" y1=\"" << top + ph << "\" x2=\"" << left + pw << "\" y2=\""
      << top + ph << "\" stroke=\"black\"/>\n";
  svg << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\""
      << top + ph << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double v = i / 4.0;
    svg << "<line x1=\"" << left << "\" y1=\"" << y_of(v) << "\" x2=\"" << left + pw
        << "\" y2=\"" << y_of(v) << "\" stroke=\"#ddd\"/>\n";
    svg << "<text x=\"" << left - 6 << "\" y=\"" << y_of(v) + 4 << "\" text-anchor=\"end\">"
        << v << "</text>\n";
  }
  for (std::size_t s = first; s <= max_step; ++s) {
    svg << "<text x=\"" << x_of(s) << "\" y=\"" << top + ph + 16 << "\" text-anchor=\"middle\">"
        << s << "</text>\n";
  }
  svg << "<text x=\"" << left + pw / 2 << "\" y=\"" << h - 8
      << "\" text-anchor=\"middle\">step</text>\n";

  std::size_t idx = 0;
  for (const auto& s : strategies_of(runs)) {
    const auto rs = runs_of(runs, s);
    const char* colour = colours[idx % 8];
    std::string points;
    for (std::size_t step = first; step <= max_step; ++step) {
      double sum = 0.0;
      std::size_t n = 0;
      for (const LoadedRun* r : rs) {
        if (auto v = r->history.get(step, dataset, Direction::t2a, 10)) {
          sum += *v;
          ++n;
        }
      }
      if (n == 0) continue;
      const double mean = sum / static_cast<double>(n);
      svg << "<!-- data strategy=" << s << " step=" << step << " seeds=" << n
          << " recall=" << num(mean) << " -->\n";
      char buf[64];
      std::snprintf(buf, sizeof buf, "%s%.2f,%.2f", points.empty() ? "" : " ", x_of(step),
                    y_of(mean));
      points += buf;
    }
    svg << "<polyline fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"2\" points=\""
        << points << "\"/>\n";
    const double ly = top + 14.0 * static_cast<double>(idx);
    svg << "<line x1=\"" << left + pw + 10 << "\" y1=\"" << ly << "\" x2=\"" << left + pw + 26
        << "\" y2=\"" << ly << "\" stroke=\"" << colour << "\" stroke-width=\"2\"/>\n";
    svg << "<text x=\"" << left + pw + 30 << "\" y=\"" << ly + 4 << "\">" << s << "</text>\n";
    ++idx;
  }
  svg << "</svg>\n";
  return svg.str();
}

std::string afs_csv(const std::vector<LoadedRun>& runs) {
  require_complete(runs);
  std::ostringstream out;
  out << "strategy,seed,dataset,first_step,recall_first,recall_final,afs\n";
  for (const auto& s : strategies_of(runs)) {
    std::map<std::string, std::vector<eval::AfsEntry>> by_dataset;
    std::vector<std::string> order;
    for (const LoadedRun* r : runs_of(runs, s)) {
      for (const auto& e : eval::afs_report(r->history)) {
        out << s << "," << r->history.seed() << "," << e.dataset << "," << e.first_step << ","
            << num(e.recall_first) << "," << num(e.recall_final) << "," << num(e.afs) << "\n";
        if (!by_dataset.count(e.dataset)) order.push_back(e.dataset);
        by_dataset[e.dataset].push_back(e);
      }
    }
    for (const auto& ds : order) {
      const auto& es = by_dataset[ds];
      double f = 0, l = 0, a = 0;
      for (const auto& e : es) {
        f += e.recall_first;
        l += e.recall_final;
        a += e.afs;
      }
      const double n = static_cast<double>(es.size());
      out << s << ",mean," << ds << "," << es.front().first_step << "," << num(f / n) << ","
          << num(l / n) << "," << num(a / n) << "\n";
    }
  }
  return out.str();
}

std::vector<fs::path> write_report(const std::vector<LoadedRun>& runs, Kind kind,
                                   const fs::path& out_dir) {
  if (runs.empty()) throw ValidationError("no runs to report");
  fs::create_directories(out_dir);
  auto put = [&](const fs::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out << text;
    if (!out) throw Error("cannot write " + p.string());
    return p;
  };
  switch (kind) {
    case Kind::table:
      return {put(out_dir / "table.csv", table_csv(runs))};
    case Kind::afs:
      return {put(out_dir / "afs.csv", afs_csv(runs))};
    case Kind::curves: {
      require_complete(runs);
      std::vector<fs::path> files;
      for (const auto& ds : runs.front().history.datasets())
        files.push_back(put(out_dir / ("curves_" + ds + ".svg"), curve_svg(runs, ds)));
      return files;
    }
  }
  return {};
}

}  // namespace ptat::report
