#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "vitfl/checkpoint.hpp"
#include "vitfl/data.hpp"
#include "vitfl/model.hpp"
#include "vitfl/optim.hpp"
#include "vitfl/params.hpp"
#include "vitfl/partition.hpp"

namespace vitfl {

enum class Strategy { FedAvg, Moon, FedAla };

std::string to_string(Strategy s);
Strategy strategy_from_string(const std::string& s);

struct FLConfig {
  std::size_t rounds = 100;
  std::size_t client_epochs = 1;
  std::size_t batch_size = 32;
  Strategy strategy = Strategy::FedAvg;
  OptimizerConfig optimizer;
  std::uint64_t seed = 0;
  // Worker threads for client training; results do not depend on it.
  std::size_t threads = 1;

  void validate() const;
  bool operator==(const FLConfig&) const = default;
};

struct MoonConfig {
  double temperature = 0.5;
  double mu = 5.0;

  void validate() const;
  bool operator==(const MoonConfig&) const = default;
};

struct AlaConfig {
  double sample_percent = 100.0;
  std::size_t start_layer = 1;
  double std_threshold = 0.05;
  double learning_rate = 1.0;
  std::size_t max_iterations = 50;
  // When false, A is used as stored and never optimized.
  bool adapt_weights = true;

  void validate() const;
  bool operator==(const AlaConfig&) const = default;
};

struct ClientState {
  std::size_t client_id = 0;
  ClientShard shard;
  ModelParams local_params;
  ModelParams prev_round_params;  // MOON: end of the previous local phase
  ModelParams ala_weights;        // FedALA: A for trainable params of ALA layers
  // Validation indices restricted to the client's label window.
  std::vector<std::size_t> local_validation;
};

struct LocalResult {
  ModelParams params;
  double mean_loss = 0.0;
  std::size_t steps = 0;
  std::size_t samples_seen = 0;
};

struct MoonInputs {
  MoonConfig config;
  const ModelParams* global = nullptr;
  const ModelParams* previous = nullptr;
};

/// Local training from `start` over the shard for cfg.client_epochs epochs in
/// minibatches of cfg.batch_size (the last batch may be smaller), with a
/// fresh optimizer. Objective: cross-entropy, plus mu * moon_loss when `moon`
/// is given. The shard order of epoch e is shuffled with
/// derive_seed({stream_seed, e}). Non-finite values throw NumericError.
LocalResult local_train(Model& model, const ModelParams& start, const ClientShard& shard,
                        const LabeledDataset& data, const FLConfig& cfg, const MoonInputs* moon,
                        std::uint64_t stream_seed);

/// Model-contrastive loss: mean over rows of
///   -log(exp(cos(z, zg)/tau) / (exp(cos(z, zg)/tau) + exp(cos(z, zp)/tau))).
Tensor moon_loss(const Tensor& z, const Tensor& z_glob, const Tensor& z_prev, double tau);

/// Weighted average sum_n (D_n / D) * params_n, matched by name.
///
/// Computed as ref + sum_n (D_n / D) * (params_n - ref) with ref the
/// element-wise minimum over clients and an exactly rounded sum, so the result
/// is independent of client order and equals the common value bit for bit
/// when all clients agree.
ModelParams fedavg_aggregate(const std::vector<std::pair<const ModelParams*, double>>& updates);

struct AlaReport {
  std::size_t iterations = 0;
  bool converged = true;  // false when the iteration cap was hit
};

/// Adaptive local aggregation. Parameters of layers below cfg.start_layer
/// and all buffers are taken from `global`; every other trainable entry is
///   merged = A * global + (1 - A) * local,
/// where A (stored in state.ala_weights, initialised to ones) is trained by
/// gradient descent on the cross-entropy of a ceil(s%) sample of the shard,
/// clipped to [0, 1], until the standard deviation of one pass's changes to A
/// drops below cfg.std_threshold or cfg.max_iterations passes have run.
ModelParams ala_adapt(Model& model, ClientState& state, const ModelParams& global,
                      const LabeledDataset& data, const AlaConfig& cfg, std::size_t batch_size,
                      std::uint64_t stream_seed, AlaReport* report = nullptr);

struct Evaluation {
  double accuracy = 0.0;
  double loss = 0.0;
  std::size_t samples = 0;
};

/// Argmax accuracy (ties go to the lowest class index) and mean
/// cross-entropy over the selected samples, in evaluation mode.
Evaluation evaluate(Model& model, const ModelParams& params, const LabeledDataset& data,
                    std::span<const std::size_t> indices);
Evaluation evaluate(Model& model, const ModelParams& params, const LabeledDataset& data);

struct ClientReport {
  std::size_t client_id = 0;
  double loss = 0.0;
  double accuracy = 0.0;  // local-window validation accuracy
  std::size_t samples_seen = 0;
  std::size_t steps = 0;
  double wall_ms = 0.0;
  bool failed = false;
  std::string error;
  std::size_t ala_iterations = 0;
  bool ala_converged = true;
};

struct RoundReport {
  std::size_t round = 0;  // 1-based
  std::vector<ClientReport> clients;
  double server_accuracy = 0.0;
  double server_loss = 0.0;
  std::size_t aggregated_samples = 0;
  double wall_ms = 0.0;
};

/// Server and client states of one federated run. All clients take part in
/// every round. A client whose local phase throws is excluded from that
/// round's aggregation and reported as failed.
class Federation {
 public:
  Federation(ModelSpec spec, FLConfig cfg, MoonConfig moon, AlaConfig ala,
             const LabeledDataset& train, std::vector<ClientShard> shards,
             const LabeledDataset& validation, std::uint64_t init_seed);

  /// broadcast -> (ALA) -> local training -> aggregation -> evaluation.
  RoundReport run_round();

  const ModelParams& server_params() const noexcept { return server_; }
  void set_server_params(ModelParams p);
  std::vector<ClientState>& clients() noexcept { return clients_; }
  const std::vector<ClientState>& clients() const noexcept { return clients_; }
  std::size_t rounds_completed() const noexcept { return rounds_completed_; }
  const ModelSpec& spec() const noexcept { return spec_; }
  const FLConfig& config() const noexcept { return cfg_; }

  /// Everything needed to continue the run bit for bit.
  void save_state(Checkpoint& ck) const;
  void load_state(const Checkpoint& ck);

 private:
  ClientReport train_client(Model& worker, ClientState& c, std::size_t round, ModelParams& out);

  ModelSpec spec_;
  FLConfig cfg_;
  MoonConfig moon_;
  AlaConfig ala_;
  const LabeledDataset& train_;
  const LabeledDataset& validation_;
  ModelParams server_;
  std::vector<ClientState> clients_;
  std::vector<std::unique_ptr<Model>> workers_;
  std::size_t rounds_completed_ = 0;
};

}  // namespace vitfl
