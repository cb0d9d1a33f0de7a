#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "vitfl/matrix.hpp"
#include "vitfl/model.hpp"
#include "vitfl/tensor.hpp"

// Reference implementations that share no code with the routines they check.
namespace vitfl::oracles {

/// Unbiased HSIC by explicit construction of the zero-diagonal matrices, the
/// full product K~L~ and the quadratic forms.
double hsic1_direct(const Matrix& k, const Matrix& l);

/// sum(w_i * x_i) / sum(w_i) with plain loops.
double weighted_mean(std::span<const double> values, std::span<const double> weights);

/// |a - n| / max(|a|, |n|, floor)
double relative_error(double analytic, double numeric, double floor = 1e-3);

struct GradCheck {
  std::size_t checked = 0;
  // Coordinates at a non-differentiable point (e.g. a ReLU input of exactly
  // zero): the one-sided differences disagree and the analytic value equals
  // one of them. They are counted here and left out of max_rel_error.
  std::size_t kinks = 0;
  double max_rel_error = 0.0;
  std::string worst;  // "<leaf>[<index>]" of the largest error

  void merge(const GradCheck& other);
};

/// Compares the gradients from backward() on `loss_fn()` with central
/// differences of step h, for up to `coords_per_leaf` coordinates of every
/// leaf (all of them when the leaf is small enough).
GradCheck check_gradients(const std::function<Tensor()>& loss_fn,
                          const std::vector<std::pair<std::string, Tensor>>& leaves,
                          std::size_t coords_per_leaf, std::uint64_t seed, double h = 1e-4);

/// Whole-model check: cross-entropy of the logits plus a random linear
/// functional of the projected representation, on a random batch in
/// training mode, over every trainable parameter.
GradCheck check_model_gradients(const ModelSpec& spec, std::uint64_t seed, std::size_t batch,
                                std::size_t coords_per_param);

struct OpCase {
  std::string name;
  std::function<GradCheck(std::uint64_t seed)> run;
};

/// One case per differentiable operation, including the MOON loss.
std::vector<OpCase> op_gradient_cases();

/// Small model specs for the gradient checks (one per architecture).
std::vector<ModelSpec> gradient_check_specs();

}  // namespace vitfl::oracles
