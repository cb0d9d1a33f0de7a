#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace vitfl {

struct SuiteResult {
  std::string name;
  std::size_t checks = 0;
  std::size_t failures = 0;
  std::size_t skipped = 0;  // gradient coordinates at non-differentiable points
  std::vector<std::string> messages;  // first few failures
  double seconds = 0.0;

  bool passed() const noexcept { return failures == 0 && checks > 0; }
};

struct VerifyOptions {
  std::vector<std::string> suites;  // empty: all
  std::size_t gradient_seeds = 20;
  // Perturbs the 2/(n-2) coefficient of the HSIC estimator while the suites run.
  double hsic_fault = 0.0;
};

struct VerifyReport {
  std::vector<SuiteResult> suites;

  bool passed() const;
  /// One JSON object per suite, then a summary object; one per line.
  std::string to_json_lines() const;
};

std::vector<std::string> verification_suites();
VerifyReport run_verification(const VerifyOptions& opts = {});

}  // namespace vitfl
