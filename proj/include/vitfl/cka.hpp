#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "vitfl/data.hpp"
#include "vitfl/matrix.hpp"
#include "vitfl/model.hpp"

namespace vitfl {

/// K = X * X^T for an m x p activation matrix; requires m >= 4.
Matrix gram_linear(const Matrix& x);
inline Matrix gram_linear(const ActivationMatrix& x) { return gram_linear(x.values); }

/// Unbiased HSIC estimator on n x n Gram matrices (n >= 4). With K~, L~ the
/// matrices with zeroed diagonals:
///   [tr(K~L~) + 1'K~1 * 1'L~1 / ((n-1)(n-2)) - 2/(n-2) * 1'K~L~1] / (n(n-3))
/// Evaluated in O(n^2) from row sums; exactly symmetric in K and L.
double hsic1_unbiased(const Matrix& k, const Matrix& l);

namespace testing {
// Adds `delta` to the 2/(n-2) coefficient of hsic1_unbiased. Mutation hook
// for the verification suites; 0 restores the estimator.
void set_hsic_coefficient_perturbation(double delta);
double hsic_coefficient_perturbation();
}  // namespace testing

/// Running sums of HSIC terms over probe minibatches.
class CkaAccumulator {
 public:
  void add(const Matrix& x, const Matrix& y);
  void add_grams(const Matrix& k, const Matrix& l);
  // Adds precomputed HSIC terms for one minibatch.
  void add_terms(double xy, double xx, double yy);

  std::size_t count() const noexcept { return k_; }
  double sum_xy() const noexcept { return xy_; }
  double sum_xx() const noexcept { return xx_; }
  double sum_yy() const noexcept { return yy_; }

  /// mean(xy) / (sqrt(mean(xx)) * sqrt(mean(yy))); nullopt (UNDEFINED) when
  /// no minibatch was added or a denominator mean is not positive.
  std::optional<double> finalize() const;

 private:
  std::size_t k_ = 0;
  double xy_ = 0.0, xx_ = 0.0, yy_ = 0.0;
};

/// Minibatch CKA over paired activation streams.
std::optional<double> cka(const std::vector<Matrix>& xs, const std::vector<Matrix>& ys);

/// Class-stratified probe minibatches: each of the k batches holds per_class
/// distinct samples of every class, in class order. Deterministic per seed.
std::vector<std::vector<std::size_t>> build_probe_minibatches(const LabeledDataset& validation,
                                                              std::size_t per_class, std::size_t k,
                                                              std::uint64_t seed);

/// Grid of finalized CKA scores with axis labels. Undefined entries are NaN.
struct CkaMatrix {
  std::vector<std::string> rows;
  std::vector<std::string> cols;
  Matrix values;
  long epoch_tag = 0;

  bool defined(std::size_t r, std::size_t c) const;
};

struct ProbeSet {
  const LabeledDataset* data = nullptr;
  std::vector<std::vector<std::size_t>> batches;
};

/// Entry (c, l): CKA between client c and the server at capture point l.
/// `worker` is a model of the shared spec used for forward passes.
CkaMatrix same_layer_similarity(Model& worker, const std::vector<ModelParams>& clients,
                                const ModelParams& server, const ProbeSet& probes,
                                const std::vector<std::string>& layers,
                                const std::vector<std::string>& client_labels = {});

/// Entry (i, j): CKA of `layer` activations between models_a[i] and
/// models_b[j].
CkaMatrix cross_model_similarity(Model& worker, const std::vector<ModelParams>& models_a,
                                 const std::vector<ModelParams>& models_b, const std::string& layer,
                                 const ProbeSet& probes, const std::vector<std::string>& labels_a,
                                 const std::vector<std::string>& labels_b);

/// Entry (i, j): CKA between layer i of model a and layer j of model b.
CkaMatrix layer_similarity(Model& worker, const ModelParams& a, const ModelParams& b,
                           const ProbeSet& probes, const std::vector<std::string>& layers);

/// CSV: "# epoch_tag=<n>" line, then a header row (empty corner cell and the
/// column labels) and one row per row label. Values use 17 significant
/// digits; undefined entries are written as UNDEFINED.
void write_cka_csv(const std::filesystem::path& path, const CkaMatrix& m);
CkaMatrix read_cka_csv(const std::filesystem::path& path);

/// Binary PGM (P5) heatmap: one cell_px x cell_px square per entry, gray
/// level round(255 * clamp(value, 0, 1)); undefined entries are black.
std::string render_pgm(const CkaMatrix& m, std::size_t cell_px = 16);
void write_pgm(const std::filesystem::path& path, const CkaMatrix& m, std::size_t cell_px = 16);

}  // namespace vitfl
