#include "vitfl/partition.hpp"

#include <algorithm>

#include "vitfl/error.hpp"
#include "vitfl/rng.hpp"

namespace vitfl {

std::string to_string(Scenario s) { return s == Scenario::S1 ? "S1" : "S2"; }

Scenario scenario_from_string(const std::string& s) {
  if (s == "S1" || s == "s1") return Scenario::S1;
  if (s == "S2" || s == "s2") return Scenario::S2;
  throw ConfigError("partition.scenario", "unknown scenario '" + s + "' (expected S1 or S2)");
}

void PartitionSpec::validate(std::size_t num_classes) const {
  if (num_participants == 0) throw ConfigError("partition.num_participants", "must be positive");
  if (labels_per_client == 0 || labels_per_client > num_classes)
    throw ConfigError("partition.labels_per_client",
                      "must be in [1, " + std::to_string(num_classes) + "]");
  if (scenario == Scenario::S2 && (!per_client_volume || *per_client_volume == 0))
    throw ConfigError("partition.per_client_volume", "S2 requires a positive per-client volume");
  if (scenario == Scenario::S1 && per_client_volume)
    throw ConfigError("partition.per_client_volume", "not allowed for S1");
}

std::vector<int> label_window(std::size_t client_id, std::size_t labels_per_client,
                              std::size_t num_classes) {
  std::vector<int> w;
  const std::size_t start = client_id % num_classes;
  for (std::size_t j = 0; j < labels_per_client; ++j)
    w.push_back(static_cast<int>((start + j) % num_classes));
  return w;
}

namespace {

std::vector<std::vector<std::size_t>> shuffled_pools(const LabeledDataset& data, std::uint64_t seed) {
  auto pools = data.indices_by_class();
  for (std::size_t l = 0; l < pools.size(); ++l) {
    Rng rng(derive_seed({seed, 0x7001, l}));
    rng.shuffle(pools[l]);
  }
  return pools;
}

std::vector<ClientShard> partition_s1(const LabeledDataset& data, const PartitionSpec& spec) {
  const std::size_t n = spec.num_participants, c = data.num_classes();
  std::vector<ClientShard> shards(n);
  std::vector<std::vector<std::size_t>> claimants(c);
  for (std::size_t k = 0; k < n; ++k) {
    shards[k].client_id = k;
    shards[k].label_window = label_window(k, spec.labels_per_client, c);
    for (int l : shards[k].label_window) claimants[static_cast<std::size_t>(l)].push_back(k);
  }
  const auto pools = shuffled_pools(data, spec.seed);
  // per_label_part[k][l]: the slice of label l assigned to client k
  std::vector<std::vector<std::vector<std::size_t>>> parts(n, std::vector<std::vector<std::size_t>>(c));
  for (std::size_t l = 0; l < c; ++l) {
    const auto& who = claimants[l];
    if (who.empty()) continue;
    const std::size_t total = pools[l].size(), q = total / who.size(), r = total % who.size();
    std::size_t pos = 0;
    for (std::size_t j = 0; j < who.size(); ++j) {
      const std::size_t len = q + (j < r ? 1 : 0);
      parts[who[j]][l].assign(pools[l].begin() + pos, pools[l].begin() + pos + len);
      pos += len;
    }
  }
  for (std::size_t k = 0; k < n; ++k) {
    for (int l : shards[k].label_window) {
      const auto& p = parts[k][static_cast<std::size_t>(l)];
      shards[k].indices.insert(shards[k].indices.end(), p.begin(), p.end());
    }
    if (shards[k].indices.empty())
      throw ConfigError("partition.num_participants",
                        "S1 shard for client " + std::to_string(k) + " is empty; dataset too small");
  }
  return shards;
}

std::vector<ClientShard> partition_s2(const LabeledDataset& data, const PartitionSpec& spec,
                                      PartitionStats& stats) {
  const std::size_t n = spec.num_participants, c = data.num_classes(), v = *spec.per_client_volume;
  const auto pools = shuffled_pools(data, spec.seed);
  std::vector<std::size_t> cursor(c, 0);  // total draws so far per label
  std::vector<ClientShard> shards(n);
  for (std::size_t k = 0; k < n; ++k) {
    ClientShard& s = shards[k];
    s.client_id = k;
    s.label_window = label_window(k, spec.labels_per_client, c);
    const std::size_t w = s.label_window.size();

    std::size_t capacity = 0;
    for (int l : s.label_window) capacity += pools[static_cast<std::size_t>(l)].size();
    if (capacity < v)
      throw ConfigError("partition.per_client_volume",
                        "client " + std::to_string(k) + " window holds " + std::to_string(capacity) +
                            " samples, fewer than " + std::to_string(v));

    // Even split over the window, then move any excess off labels with too few samples.
    std::vector<std::size_t> quota(w);
    for (std::size_t j = 0; j < w; ++j) quota[j] = v / w + (j < v % w ? 1 : 0);
    std::size_t excess = 0;
    for (std::size_t j = 0; j < w; ++j) {
      const std::size_t have = pools[static_cast<std::size_t>(s.label_window[j])].size();
      if (quota[j] > have) {
        excess += quota[j] - have;
        quota[j] = have;
      }
    }
    for (std::size_t j = 0; j < w && excess > 0; ++j) {
      const std::size_t have = pools[static_cast<std::size_t>(s.label_window[j])].size();
      const std::size_t add = std::min(excess, have - quota[j]);
      quota[j] += add;
      excess -= add;
    }

    for (std::size_t j = 0; j < w; ++j) {
      const auto l = static_cast<std::size_t>(s.label_window[j]);
      const auto& pool = pools[l];
      for (std::size_t t = 0; t < quota[j]; ++t) {
        const std::size_t draw = cursor[l]++;
        if (draw >= pool.size()) {
          if (!spec.allow_overlap)
            throw ConfigError("partition.allow_overlap",
                              "label " + std::to_string(l) + " pool exhausted at client " +
                                  std::to_string(k) + " and overlap is disabled");
          ++stats.reused_assignments;
        }
        s.indices.push_back(pool[draw % pool.size()]);
      }
    }
  }
  return shards;
}

}  // namespace

std::vector<ClientShard> partition(const LabeledDataset& dataset, const PartitionSpec& spec,
                                   PartitionStats* stats) {
  spec.validate(dataset.num_classes());
  if (dataset.empty()) throw ConfigError("dataset", "cannot partition an empty dataset");
  PartitionStats local;
  auto shards = spec.scenario == Scenario::S1 ? partition_s1(dataset, spec)
                                              : partition_s2(dataset, spec, local);
  if (stats) *stats = local;
  return shards;
}

}  // namespace vitfl
