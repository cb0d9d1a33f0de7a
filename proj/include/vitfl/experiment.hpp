#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "vitfl/cka.hpp"
#include "vitfl/config.hpp"
#include "vitfl/data.hpp"

namespace vitfl {

inline constexpr const char* kArtifactVersion = "vitfl 0.1.0";
inline constexpr const char* kMetricsHeader = "round,client_id,loss,accuracy,samples,epoch_wall_ms";
inline constexpr int kMetricsSchemaVersion = 1;
inline constexpr const char* kOutputRootEnv = "VITFL_OUTPUT_ROOT";

struct ExperimentData {
  LabeledDataset train;
  LabeledDataset validation;
};

/// Training and validation sets described by the config. Synthetic data is
/// generated once with per_class + validation_size / num_classes samples per
/// class and split per class; CIFAR-10 validation is the first
/// validation_size test records.
ExperimentData load_experiment_data(const ExperimentConfig& cfg);

/// cfg.output_dir, placed under $VITFL_OUTPUT_ROOT when it is relative and
/// the variable is set.
std::filesystem::path resolve_output_dir(const ExperimentConfig& cfg);

std::filesystem::path snapshot_path(const std::filesystem::path& run_dir, std::size_t round);

struct RunOptions {
  // Stop after this many completed rounds (the run stays resumable).
  std::optional<std::size_t> stop_after;
  // Called after every completed round.
  std::function<void(const RoundReport&)> on_round;
};

struct RunResult {
  std::filesystem::path dir;
  std::size_t rounds_completed = 0;
  bool complete = false;
  bool aborted = false;
  std::string abort_reason;
  double final_server_accuracy = 0.0;
};

/// Runs (or resumes) the experiment in its output directory:
///   config.txt, manifest.json, metrics.csv, state.ckpt,
///   checkpoints/round_NNNN.ckpt at snapshot epochs.
/// A directory holding a different config is refused.
RunResult cmd_run(const ExperimentConfig& cfg, const RunOptions& opts = {});

struct AnalyzeOptions {
  std::vector<std::size_t> epochs;  // empty: the config's snapshot epochs
  std::string overall_layer;        // empty: config value, then penultimate
  std::size_t cell_px = 16;
};

struct AnalyzeResult {
  std::vector<std::filesystem::path> files;
  // Epoch -> mean of the same-layer client/server CKA matrix (defined cells).
  std::vector<std::pair<std::size_t, double>> mean_same_layer;
};

/// Writes analysis/same_layer_eNNNN.{csv,pgm}, cross_model_eNNNN.{csv,pgm}
/// and layers_server_eNNNN.{csv,pgm} per epoch plus
/// cross_model_epochs.{csv,pgm} spanning all epochs. A missing checkpoint
/// throws an Error naming the epoch.
AnalyzeResult cmd_analyze(const std::filesystem::path& run_dir, const AnalyzeOptions& opts = {});

}  // namespace vitfl
