#pragma once

#include <cstddef>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "ptat/graph.hpp"
#include "ptat/matrix.hpp"

namespace ptat {

// Named model parameters. Each entry carries exactly one trainable flag;
// everything not flagged trainable is frozen for the active strategy.
class ParameterStore {
 public:
  struct Entry {
    Matrix value;
    bool trainable = false;
  };

  void add(const std::string& name, Matrix value, bool trainable = false);
  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  const Matrix& at(const std::string& name) const;
  Matrix& at(const std::string& name);
  bool trainable(const std::string& name) const;

  // Marks exactly `names` trainable and every other entry frozen.
  void set_trainable(const std::set<std::string>& names);
  std::set<std::string> trainable_names() const;

  std::size_t total_count() const;
  std::size_t trainable_count() const;
  std::size_t size() const { return params_.size(); }

  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  // Rounds every value to the nearest 32-bit float (snapshot precision).
  void round_to_float();

  friend bool operator==(const ParameterStore& a, const ParameterStore& b);

 private:
  std::map<std::string, Entry> params_;
};

// Parameters registered on one graph: trainable entries become parameter
// leaves, frozen entries become constants.
class BoundParams {
 public:
  BoundParams(diffmath::Graph& graph, const ParameterStore& store);

  diffmath::NodeId operator[](const std::string& name) const;
  bool has(const std::string& name) const { return ids_.count(name) != 0; }
  const std::map<std::string, diffmath::NodeId>& ids() const { return ids_; }

 private:
  std::map<std::string, diffmath::NodeId> ids_;
};

}  // namespace ptat
