#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "vitfl/params.hpp"
#include "vitfl/tensor.hpp"

namespace vitfl {

/// A live parameter inside a model: a named leaf tensor whose grad buffer is
/// filled by backward().
struct ParamTensor {
  std::string name;
  Tensor value;
  ParamKind kind = ParamKind::Trainable;
  std::size_t layer = 0;
};

enum class OptimizerKind { SgdMomentum, AdamW };

std::string to_string(OptimizerKind kind);
OptimizerKind optimizer_kind_from_string(const std::string& s);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::SgdMomentum;
  double learning_rate = 0.03;
  double weight_decay = 0.0;
  double momentum = 0.9;  // beta1 for AdamW
  double beta2 = 0.999;
  double epsilon = 1e-8;

  // AdamW, lr=1e-5, wd=0.05, beta1=0.9
  static OptimizerConfig transformer_default();
  // SGD, lr=0.03, wd=0.0, momentum=0.9
  static OptimizerConfig convolutional_default();

  void validate() const;
  bool operator==(const OptimizerConfig&) const = default;
};

/// Per-parameter optimizer state. Trainable parameters only; buffers are
/// skipped.
///
/// SGD with momentum:  v <- mu*v + g;  w <- w - lr*(v + wd*w)
/// AdamW:              w <- w - lr*wd*w, then the bias-corrected Adam step.
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig cfg);

  const OptimizerConfig& config() const noexcept { return cfg_; }
  std::size_t steps_taken() const noexcept { return step_; }

  /// Applies one update. Throws Error if a trainable parameter has no grad
  /// buffer and NumericError if any updated value would be non-finite; in
  /// both cases no parameter is modified.
  void step(std::span<ParamTensor> params);

 private:
  OptimizerConfig cfg_;
  std::size_t step_ = 0;
  std::vector<std::vector<double>> first_;
  std::vector<std::vector<double>> second_;
};

}  // namespace vitfl
