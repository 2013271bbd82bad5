#include "ptat/params.hpp"

#include "ptat/errors.hpp"

namespace ptat {

void ParameterStore::add(const std::string& name, Matrix value, bool trainable) {
  if (!value.all_finite()) throw NumericError("parameter '" + name + "' is not finite");
  auto [it, inserted] = params_.try_emplace(name, Entry{std::move(value), trainable});
  if (!inserted) throw ValidationError("duplicate parameter '" + name + "'");
}

const Matrix& ParameterStore::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ValidationError("unknown parameter '" + name + "'");
  return it->second.value;
}

Matrix& ParameterStore::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw ValidationError("unknown parameter '" + name + "'");
  return it->second.value;
}

bool ParameterStore::trainable(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ValidationError("unknown parameter '" + name + "'");
  return it->second.trainable;
}

void ParameterStore::set_trainable(const std::set<std::string>& names) {
  for (const auto& n : names) {
    if (!contains(n)) throw ValidationError("partition names unknown parameter '" + n + "'");
  }
  for (auto& [name, entry] : params_) entry.trainable = names.count(name) != 0;
}

std::set<std::string> ParameterStore::trainable_names() const {
  std::set<std::string> out;
  for (const auto& [name, entry] : params_)
    if (entry.trainable) out.insert(name);
  return out;
}

std::size_t ParameterStore::total_count() const {
  std::size_t n = 0;
  for (const auto& [name, entry] : params_) n += entry.value.size();
  return n;
}

std::size_t ParameterStore::trainable_count() const {
  std::size_t n = 0;
  for (const auto& [name, entry] : params_)
    if (entry.trainable) n += entry.value.size();
  return n;
}

void ParameterStore::round_to_float() {
  for (auto& [name, entry] : params_)
    for (double& v : entry.value.values()) v = static_cast<double>(static_cast<float>(v));
}

bool operator==(const ParameterStore& a, const ParameterStore& b) {
  if (a.params_.size() != b.params_.size()) return false;
  auto ia = a.params_.begin();
  auto ib = b.params_.begin();
  for (; ia != a.params_.end(); ++ia, ++ib) {
    if (ia->first != ib->first || !(ia->second.value == ib->second.value)) return false;
  }
  return true;
}

BoundParams::BoundParams(diffmath::Graph& graph, const ParameterStore& store) {
  for (const auto& [name, entry] : store) {
    ids_[name] = entry.trainable ? graph.parameter(entry.value) : graph.constant(entry.value);
  }
}

diffmath::NodeId BoundParams::operator[](const std::string& name) const {
  auto it = ids_.find(name);
  if (it == ids_.end()) throw ValidationError("parameter '" + name + "' is not bound");
  return it->second;
}

}  // namespace ptat
