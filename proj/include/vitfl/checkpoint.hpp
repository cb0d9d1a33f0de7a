#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "vitfl/params.hpp"

namespace vitfl {

/// Sectioned binary container of (name, shape, values) triples.
///
/// Layout (all integers and floats little-endian):
///   magic      8 bytes  "VITFLCK1"
///   count      u64      number of entries
///   per entry:
///     name_len u32, name bytes (UTF-8, no terminator)
///     rank     u32, dims u64[rank]
///     values   f64[product(dims)]
///
/// Model parameters are stored with a section prefix, e.g. "server/" or
/// "client/3/", followed by the parameter name.
class Checkpoint {
 public:
  struct Entry {
    std::string name;
    Shape shape;
    std::vector<double> values;
    bool operator==(const Entry&) const = default;
  };

  void add(Entry e);
  void add_params(const std::string& prefix, const ModelParams& params);
  void add_scalar(const std::string& name, double value) { add({name, {1}, {value}}); }

  const Entry* find(const std::string& name) const;
  bool has_section(const std::string& prefix) const;
  double scalar(const std::string& name) const;

  /// Parameters under `prefix`, taking kind/layer metadata from `like`.
  /// Throws FormatError if any parameter of `like` is missing or mis-shaped.
  ModelParams params(const std::string& prefix, const ModelParams& like) const;

  const std::vector<Entry>& entries() const noexcept { return entries_; }

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

  bool operator==(const Checkpoint&) const = default;

 private:
  std::vector<Entry> entries_;
};

}  // namespace vitfl
