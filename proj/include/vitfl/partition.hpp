#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "vitfl/data.hpp"

namespace vitfl {

/// S1: the training set is split among participants (total volume fixed).
/// S2: every participant receives the same fixed number of samples.
enum class Scenario { S1, S2 };

std::string to_string(Scenario s);
Scenario scenario_from_string(const std::string& s);

struct PartitionSpec {
  Scenario scenario = Scenario::S1;
  std::size_t num_participants = 10;
  std::size_t labels_per_client = 4;
  std::optional<std::size_t> per_client_volume;  // S2 only
  std::uint64_t seed = 0;
  // S2: permit a sample to be handed to several clients once a label's pool
  // is exhausted.
  bool allow_overlap = true;

  void validate(std::size_t num_classes) const;
  bool operator==(const PartitionSpec&) const = default;
};

struct ClientShard {
  std::size_t client_id = 0;
  std::vector<std::size_t> indices;  // into the parent dataset
  std::vector<int> label_window;     // consecutive labels modulo num_classes

  std::size_t size() const noexcept { return indices.size(); }
  bool operator==(const ClientShard&) const = default;
};

struct PartitionStats {
  // S2: number of (client, sample) assignments that reuse a sample already
  // handed to an earlier client.
  std::size_t reused_assignments = 0;
};

/// Label window of client n: labels_per_client consecutive labels starting
/// at n mod num_classes, wrapping around.
std::vector<int> label_window(std::size_t client_id, std::size_t labels_per_client,
                              std::size_t num_classes);

/// Non-IID label-skew partition; a pure function of (dataset, spec).
///
/// S1: each label's samples (seeded shuffle) are split in contiguous, equal
/// parts (sizes differ by at most one) among the clients whose window holds
/// that label. Shards are disjoint.
///
/// S2: each client takes per_client_volume samples, split evenly over its
/// window labels, by walking a seeded per-label order shared by all clients.
/// Walking past the end of a label's order wraps around (overlap between
/// clients) unless allow_overlap is false, in which case it is an error.
std::vector<ClientShard> partition(const LabeledDataset& dataset, const PartitionSpec& spec,
                                   PartitionStats* stats = nullptr);

}  // namespace vitfl
