#pragma once

#include <span>
#include <vector>

namespace vitfl {

/// Correctly rounded sum of finite doubles (Shewchuk's partials algorithm).
/// The result does not depend on the order of the inputs.
class ExactSum {
 public:
  void add(double x);
  double value() const;
  void clear() noexcept { partials_.clear(); }

 private:
  std::vector<double> partials_;
};

double fsum(std::span<const double> values);

}  // namespace vitfl
