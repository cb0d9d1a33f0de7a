#include "vitfl/params.hpp"


#include "vitfl/error.hpp"

namespace vitfl {

ModelParams::ModelParams(std::vector<NamedArray> entries) {
  for (auto& e : entries) push_back(std::move(e));
}

const NamedArray* ModelParams::find(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return &e;
  return nullptr;
}

NamedArray* ModelParams::find(const std::string& name) {
  for (auto& e : entries_)
    if (e.name == name) return &e;
  return nullptr;
}

const NamedArray& ModelParams::at(const std::string& name) const {
  if (const NamedArray* e = find(name)) return *e;
  throw ShapeError("no parameter named '" + name + "'");
}

void ModelParams::push_back(NamedArray a) {
  if (numel(a.shape) != a.values.size()) {
    throw ShapeError("parameter '" + a.name + "' has " + std::to_string(a.values.size()) +
                     " values for shape " + to_string(a.shape));
  }
  if (find(a.name)) throw ShapeError("duplicate parameter name '" + a.name + "'");
  entries_.push_back(std::move(a));
}

std::size_t ModelParams::total_values() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.values.size();
  return n;
}

void ModelParams::require_compatible(const ModelParams& other, const char* context) const {
  if (other.size() != size()) {
    throw ShapeError(std::string(context) + ": parameter count " + std::to_string(other.size()) +
                     " != " + std::to_string(size()));
  }
  for (std::size_t i = 0; i < size(); ++i) {
    if (entries_[i].name != other.entries_[i].name) {
      throw ShapeError(std::string(context) + ": parameter name mismatch '" + entries_[i].name +
                       "' vs '" + other.entries_[i].name + "'");
    }
    if (entries_[i].shape != other.entries_[i].shape) {
      throw ShapeError(std::string(context) + ": shape mismatch for '" + entries_[i].name + "' " +
                       to_string(entries_[i].shape) + " vs " + to_string(other.entries_[i].shape));
    }
  }
}

}  // namespace vitfl
