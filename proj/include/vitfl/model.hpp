#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "vitfl/matrix.hpp"
#include "vitfl/optim.hpp"
#include "vitfl/params.hpp"
#include "vitfl/rng.hpp"
#include "vitfl/tensor.hpp"

namespace vitfl {

enum class Arch { TinyVit, TinyCnn, TinyMlp };

std::string to_string(Arch arch);
Arch arch_from_string(const std::string& s);

/// Architecture description. Only the knobs of the selected arch matter.
struct ModelSpec {
  Arch arch = Arch::TinyMlp;
  std::size_t channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t num_classes = 10;
  std::size_t projection_dim = 32;

  // TinyVit
  std::size_t patch_size = 4;
  std::size_t embed_dim = 64;
  std::size_t num_heads = 4;
  std::size_t num_blocks = 4;
  std::size_t mlp_ratio = 2;

  // TinyCnn
  std::size_t num_stages = 3;
  std::size_t base_channels = 22;
  std::size_t blocks_per_stage = 1;

  // TinyMlp
  std::vector<std::size_t> hidden_widths{128, 64};

  static ModelSpec tiny_vit();
  static ModelSpec tiny_cnn();
  static ModelSpec tiny_mlp();
  static ModelSpec defaults_for(Arch arch);

  /// Throws ShapeError on invalid dimension combinations.
  void validate() const;

  std::size_t num_tokens() const { return (height / patch_size) * (width / patch_size); }
  std::size_t input_size() const { return channels * height * width; }

  bool operator==(const ModelSpec&) const = default;
};

enum class CapturePosition { AfterBlockOutput };

struct CapturePoint {
  std::string layer_name;
  CapturePosition position = CapturePosition::AfterBlockOutput;
  std::size_t ordering_index = 0;
};

/// One layer's activations over a probe minibatch, flattened to
/// examples x features.
struct ActivationMatrix {
  std::string layer_name;
  Matrix values;
  std::size_t minibatch_index = 0;
};

enum class Mode { Train, Eval };

struct ForwardOutput {
  Tensor logits;
  std::map<std::string, ActivationMatrix> activations;
};

/// Collects activations at requested capture points during a forward pass.
class CaptureSink {
 public:
  CaptureSink() = default;
  explicit CaptureSink(std::set<std::string> wanted) : wanted_(std::move(wanted)) {}

  bool wants(const std::string& name) const { return wanted_.count(name) > 0; }
  // Flattens t to rows x (numel / rows) and stores a detached copy.
  void record(const std::string& name, const Tensor& t, std::size_t rows);

  std::map<std::string, ActivationMatrix>& results() { return results_; }

 private:
  std::set<std::string> wanted_;
  std::map<std::string, ActivationMatrix> results_;
};

/// A desk-scale classifier with named parameters, a classification head and
/// a 2-layer projection head for representation-level objectives.
class Model {
 public:
  virtual ~Model() = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelSpec& spec() const noexcept { return spec_; }

  std::span<ParamTensor> parameters() { return params_; }
  std::span<const ParamTensor> parameters() const { return params_; }

  /// Capture points ordered from input to output. The last one is the
  /// pre-classifier feature layer.
  const std::vector<CapturePoint>& capture_points() const noexcept { return capture_points_; }
  const std::string& penultimate_layer() const { return capture_points_.back().layer_name; }

  /// batch [m x C x H x W] -> logits [m x num_classes]
  Tensor forward(const Tensor& batch, Mode mode);

  /// Logits plus flattened activations at the requested points. Throws
  /// ShapeError for unknown point names.
  ForwardOutput forward_with_capture(const Tensor& batch, Mode mode,
                                     const std::vector<std::string>& points);

  /// Penultimate features passed through the projection head.
  Tensor representation(const Tensor& batch, Mode mode);

  struct Outputs {
    Tensor logits;
    Tensor representation;
  };
  /// Logits and representation from a single backbone pass.
  Outputs forward_both(const Tensor& batch, Mode mode);

  ModelParams snapshot() const;
  /// Copies values by name; names and shapes must match exactly.
  void load(const ModelParams& params);
  void zero_grad();

  std::size_t trainable_count() const;
  /// Number of distinct layer indices; layer indices are 0..num_layers()-1.
  std::size_t num_layers() const noexcept { return num_layers_; }

  std::unique_ptr<Model> clone() const;

 protected:
  explicit Model(ModelSpec spec);

  Tensor& add_param(std::string name, Shape shape, std::size_t layer, std::vector<double> init,
                    ParamKind kind = ParamKind::Trainable);
  Tensor& param(const std::string& name);
  void add_capture_point(std::string name);

  // Fan-in scaled normal init: N(0, 2/fan_in).
  static std::vector<double> he_normal(std::size_t count, std::size_t fan_in, Rng& rng);
  static std::vector<double> trunc_normal(std::size_t count, double stddev, Rng& rng);

  /// Creates the classification and projection heads over `feature_dim`
  /// features at layer index `layer`. Call last in the constructor.
  void add_heads(std::size_t feature_dim, std::size_t layer, bool transformer_init,
                 Rng& rng);

  /// batch -> pre-classifier features [m x feature_dim]
  virtual Tensor backbone(const Tensor& batch, Mode mode, CaptureSink& sink) = 0;

 private:
  void check_batch(const Tensor& batch) const;

  ModelSpec spec_;
  std::vector<ParamTensor> params_;
  std::map<std::string, std::size_t> index_;
  std::vector<CapturePoint> capture_points_;
  std::size_t num_layers_ = 0;
};

/// Deterministic construction: the same spec and seed yield identical
/// parameter bytes.
std::unique_ptr<Model> build_model(const ModelSpec& spec, std::uint64_t seed);

/// Trainable parameter count by traversal of a freshly built model.
std::size_t count_trainable_parameters(const ModelSpec& spec);

}  // namespace vitfl
