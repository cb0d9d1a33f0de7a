#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "vitfl/tensor.hpp"

namespace vitfl {

enum class ParamKind { Trainable, Buffer };

/// One named parameter array detached from any graph. `layer` is the block
/// index used by layer-wise strategies (0 = input side).
struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<double> values;
  ParamKind kind = ParamKind::Trainable;
  std::size_t layer = 0;

  bool operator==(const NamedArray&) const = default;
};

/// Ordered, named collection of parameter arrays: the unit exchanged between
/// clients and server. Trainable weights and normalization buffers are both
/// included; aggregation treats them alike.
class ModelParams {
 public:
  ModelParams() = default;
  explicit ModelParams(std::vector<NamedArray> entries);

  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }

  const NamedArray& operator[](std::size_t i) const { return entries_[i]; }
  NamedArray& operator[](std::size_t i) { return entries_[i]; }

  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }

  const NamedArray* find(const std::string& name) const;
  NamedArray* find(const std::string& name);
  const NamedArray& at(const std::string& name) const;

  void push_back(NamedArray a);

  std::size_t total_values() const;

  /// Throws ShapeError unless `other` has the same names and shapes in the
  /// same order.
  void require_compatible(const ModelParams& other, const char* context) const;

  bool operator==(const ModelParams&) const = default;

 private:
  std::vector<NamedArray> entries_;
};

}  // namespace vitfl
