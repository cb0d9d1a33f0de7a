#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "vitfl/data.hpp"
#include "vitfl/fl.hpp"
#include "vitfl/model.hpp"
#include "vitfl/partition.hpp"

namespace vitfl {

enum class DatasetKind { Synthetic, Cifar10 };

struct DatasetConfig {
  DatasetKind kind = DatasetKind::Synthetic;
  std::vector<std::string> train_paths;  // CIFAR-10 training batches
  std::vector<std::string> test_paths;   // CIFAR-10 test batch (validation source)
  SyntheticSpec synthetic;               // per_class counts training samples only
  std::size_t validation_size = 1000;
  std::size_t train_limit = 0;  // 0 keeps every training sample

  bool operator==(const DatasetConfig&) const = default;
};

struct AnalysisConfig {
  std::size_t probe_per_class = 5;
  std::size_t probes = 10;
  std::vector<std::string> layers;  // empty: every capture point
  std::string overall_layer;        // empty: the penultimate capture point
  std::vector<std::size_t> snapshot_epochs{20, 40, 80};

  bool operator==(const AnalysisConfig&) const = default;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "run";
  DatasetConfig dataset;
  PartitionSpec partition;
  ModelSpec model;
  FLConfig fl;
  MoonConfig moon;
  AlaConfig ala;
  AnalysisConfig analysis;
  bool record_wall_time = false;
  std::size_t checkpoint_every = 0;  // extra server/client checkpoints every n rounds

  /// Cross-field checks; throws ConfigError naming the offending key.
  void validate() const;
  bool operator==(const ExperimentConfig&) const = default;
};

/// Parses the line-oriented config grammar (see README). Unknown keys,
/// duplicates, malformed values and constraint violations throw ConfigError
/// naming the key. Missing keys take their defaults.
ExperimentConfig parse_config(const std::string& text, const std::string& origin = "<config>");
ExperimentConfig parse_config_file(const std::filesystem::path& path);

/// Every key with its effective value; parse_config(serialize_config(c)) == c.
std::string serialize_config(const ExperimentConfig& cfg);

/// 64-bit FNV-1a of the serialized config, as 16 hex digits.
std::string config_hash(const ExperimentConfig& cfg);
std::string fnv1a_hex(const std::string& bytes);

}  // namespace vitfl
