#include "vitfl/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <functional>
#include <set>

#include <json.hpp>

#include "vitfl/cka.hpp"
#include "vitfl/data.hpp"
#include "vitfl/error.hpp"
#include "vitfl/fl.hpp"
#include "vitfl/oracles.hpp"
#include "vitfl/partition.hpp"
#include "vitfl/rng.hpp"

namespace vitfl {

namespace {

constexpr std::size_t kMaxMessages = 5;
constexpr double kGradTolerance = 1e-4;

class Suite {
 public:
  explicit Suite(std::string name) { r_.name = std::move(name); }

  void check(bool ok, const std::function<std::string()>& what) {
    ++r_.checks;
    if (ok) return;
    ++r_.failures;
    if (r_.messages.size() < kMaxMessages) r_.messages.push_back(what());
  }

  SuiteResult& result() { return r_; }

 private:
  SuiteResult r_;
};

struct FaultGuard {
  explicit FaultGuard(double delta) { testing::set_hsic_coefficient_perturbation(delta); }
  ~FaultGuard() { testing::set_hsic_coefficient_perturbation(0.0); }
};

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng) {
  Matrix m(r, c);
  for (double& v : m.data()) v = rng.normal();
  return m;
}

Matrix outer_gram(const Matrix& x) {
  Matrix k(x.rows(), x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.rows(); ++j)
      for (std::size_t t = 0; t < x.cols(); ++t) k(i, j) += x(i, t) * x(j, t);
  return k;
}

void gradients_suite(Suite& s, std::size_t seeds) {
  std::size_t kinks = 0;
  for (const auto& c : oracles::op_gradient_cases()) {
    for (std::size_t seed = 1; seed <= seeds; ++seed) {
      const auto g = c.run(derive_seed({0x6AD, seed}));
      kinks += g.kinks;
      s.check(g.max_rel_error < kGradTolerance, [&] {
        return c.name + " seed " + std::to_string(seed) + ": relative error " +
               std::to_string(g.max_rel_error) + " at " + g.worst;
      });
    }
  }
  for (const auto& spec : oracles::gradient_check_specs()) {
    for (std::size_t seed = 1; seed <= seeds; ++seed) {
      const auto g = oracles::check_model_gradients(spec, derive_seed({0x6AE, seed}), 3, 4);
      kinks += g.kinks;
      s.check(g.max_rel_error < kGradTolerance, [&] {
        return to_string(spec.arch) + " seed " + std::to_string(seed) + ": relative error " +
               std::to_string(g.max_rel_error) + " at " + g.worst;
      });
    }
  }
  s.result().skipped = kinks;
}

void hsic_suite(Suite& s) {
  Rng rng(0x4251C);
  for (std::size_t i = 0; i < 100; ++i) {
    const std::size_t n = 4 + i % 9;
    const Matrix k = outer_gram(random_matrix(n, 1 + rng.below(6), rng));
    const Matrix l = outer_gram(random_matrix(n, 1 + rng.below(6), rng));
    const double got = hsic1_unbiased(k, l), want = oracles::hsic1_direct(k, l);
    s.check(std::fabs(got - want) <= 1e-10, [&] {
      return "n=" + std::to_string(n) + ": estimator " + std::to_string(got) + " vs direct " + std::to_string(want);
    });
  }
}

ModelParams random_params(Rng& rng, const std::vector<Shape>& shapes) {
  ModelParams p;
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    std::vector<double> v(numel(shapes[i]));
    for (double& x : v) x = rng.normal();
    p.push_back(NamedArray{"p" + std::to_string(i), shapes[i], v, ParamKind::Trainable, i});
  }
  return p;
}

bool bitwise_equal(const ModelParams& a, const ModelParams& b) {
  for (std::size_t e = 0; e < a.size(); ++e)
    if (std::memcmp(a[e].values.data(), b[e].values.data(), a[e].values.size() * sizeof(double)) != 0)
      return false;
  return true;
}

void aggregation_suite(Suite& s) {
  const std::vector<Shape> shapes{{4, 3}, {3}, {2, 2, 2}};
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    Rng rng(derive_seed({0xA66, seed}));
    std::vector<ModelParams> clients;
    for (int i = 0; i < 3; ++i) clients.push_back(random_params(rng, shapes));
    const std::vector<double> d{1, 2, 3};
    const auto agg = fedavg_aggregate({{&clients[0], d[0]}, {&clients[1], d[1]}, {&clients[2], d[2]}});
    double worst = 0.0;
    for (std::size_t e = 0; e < agg.size(); ++e)
      for (std::size_t i = 0; i < agg[e].values.size(); ++i) {
        const double vals[3] = {clients[0][e].values[i], clients[1][e].values[i], clients[2][e].values[i]};
        worst = std::max(worst, std::fabs(agg[e].values[i] - oracles::weighted_mean(vals, d)));
      }
    s.check(worst <= 1e-12, [&] { return "weighted mean off by " + std::to_string(worst); });

    const ModelParams same = random_params(rng, shapes);
    std::vector<std::pair<const ModelParams*, double>> ups;
    for (int i = 0; i < 5; ++i) ups.emplace_back(&same, 1.0 + static_cast<double>(rng.below(1000)));
    s.check(bitwise_equal(fedavg_aggregate(ups), same), [] { return "identical clients not a fixed point"; });

    std::vector<std::pair<const ModelParams*, double>> base;
    for (std::size_t i = 0; i < clients.size(); ++i) base.emplace_back(&clients[i], d[i]);
    std::vector<std::size_t> order{0, 1, 2};
    bool invariant = true;
    do {
      std::vector<std::pair<const ModelParams*, double>> perm;
      for (std::size_t i : order) perm.push_back(base[i]);
      invariant = invariant && bitwise_equal(fedavg_aggregate(perm), agg);
    } while (std::next_permutation(order.begin(), order.end()));
    s.check(invariant, [] { return "aggregate depends on client order"; });
  }
}

LabeledDataset labels_only(std::size_t classes, std::size_t per_class) {
  std::vector<float> px(classes * per_class, 0.5f);
  std::vector<int> labels;
  for (std::size_t c = 0; c < classes; ++c) labels.insert(labels.end(), per_class, static_cast<int>(c));
  return LabeledDataset::from_floats(1, 1, 1, classes, std::move(px), std::move(labels), Provenance::Synthetic);
}

bool consecutive_window(const ClientShard& s, std::size_t lpc, std::size_t classes) {
  if (s.label_window.size() != lpc) return false;
  std::set<int> distinct(s.label_window.begin(), s.label_window.end());
  if (distinct.size() != lpc) return false;
  for (std::size_t j = 1; j < lpc; ++j)
    if (static_cast<std::size_t>(s.label_window[j]) != (static_cast<std::size_t>(s.label_window[0]) + j) % classes)
      return false;
  return true;
}

void partition_suite(Suite& s) {
  const std::size_t classes = 10;
  const LabeledDataset data = labels_only(classes, 5000);
  for (std::size_t n : {1, 10, 20, 50, 100}) {
    PartitionSpec spec;
    spec.num_participants = n;
    spec.seed = 7;
    const auto shards = partition(data, spec);
    std::vector<int> owner(data.size(), -1);
    bool disjoint = true, in_window = true, windows = true;
    std::set<int> claimed;
    for (const auto& sh : shards) {
      windows = windows && consecutive_window(sh, 4, classes) &&
                static_cast<std::size_t>(sh.label_window[0]) == sh.client_id % classes;
      claimed.insert(sh.label_window.begin(), sh.label_window.end());
      for (std::size_t i : sh.indices) {
        if (owner[i] != -1) disjoint = false;
        owner[i] = static_cast<int>(sh.client_id);
        in_window = in_window && std::find(sh.label_window.begin(), sh.label_window.end(), data.label(i)) !=
                                     sh.label_window.end();
      }
    }
    std::size_t covered = 0, expected = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
      covered += owner[i] != -1;
      expected += claimed.count(data.label(i));
    }
    const std::string tag = "S1 N=" + std::to_string(n);
    s.check(disjoint, [&] { return tag + ": shards overlap"; });
    s.check(covered == expected, [&] { return tag + ": coverage " + std::to_string(covered) + " of " + std::to_string(expected); });
    s.check(in_window, [&] { return tag + ": sample outside its label window"; });
    s.check(windows, [&] { return tag + ": label window not consecutive from n mod C"; });
  }
  for (std::size_t volume : {500, 1000}) {
    for (std::size_t n : {10, 100}) {
      PartitionSpec spec;
      spec.scenario = Scenario::S2;
      spec.num_participants = n;
      spec.per_client_volume = volume;
      spec.seed = 7;
      const auto shards = partition(data, spec);
      bool sizes = true, unique = true;
      for (const auto& sh : shards) {
        sizes = sizes && sh.size() == volume;
        unique = unique && std::set<std::size_t>(sh.indices.begin(), sh.indices.end()).size() == sh.size();
      }
      const std::string tag = "S2(" + std::to_string(volume) + ") N=" + std::to_string(n);
      s.check(sizes, [&] { return tag + ": shard size differs from the volume"; });
      s.check(unique, [&] { return tag + ": repeated sample within a shard"; });
    }
  }
}

}  // namespace

std::vector<std::string> verification_suites() { return {"gradients", "hsic", "aggregation", "partition"}; }

bool VerifyReport::passed() const {
  return !suites.empty() && std::all_of(suites.begin(), suites.end(), [](const SuiteResult& r) { return r.passed(); });
}

std::string VerifyReport::to_json_lines() const {
  std::string out;
  std::size_t ok = 0;
  for (const auto& r : suites) {
    nlohmann::json j = {{"suite", r.name},     {"checks", r.checks},   {"failures", r.failures}, {"skipped", r.skipped},
                        {"status", r.passed() ? "pass" : "fail"}, {"seconds", r.seconds},
                        {"messages", r.messages}};
    out += j.dump() + "\n";
    ok += r.passed();
  }
  nlohmann::json summary = {{"summary", {{"suites", suites.size()}, {"passed", ok}, {"failed", suites.size() - ok}}},
                            {"status", passed() ? "pass" : "fail"}};
  return out + summary.dump() + "\n";
}

VerifyReport run_verification(const VerifyOptions& opts) {
  const auto all = verification_suites();
  for (const auto& n : opts.suites)
    if (std::find(all.begin(), all.end(), n) == all.end()) throw Error("unknown verification suite '" + n + "'");
  FaultGuard fault(opts.hsic_fault);
  VerifyReport report;
  for (const auto& name : all) {
    if (!opts.suites.empty() && std::find(opts.suites.begin(), opts.suites.end(), name) == opts.suites.end())
      continue;
    Suite s(name);
    const auto t0 = std::chrono::steady_clock::now();
    try {
      if (name == "gradients") gradients_suite(s, opts.gradient_seeds);
      else if (name == "hsic") hsic_suite(s);
      else if (name == "aggregation") aggregation_suite(s);
      else partition_suite(s);
    } catch (const std::exception& e) {
      s.check(false, [&] { return std::string("exception: ") + e.what(); });
    }
    s.result().seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    report.suites.push_back(std::move(s.result()));
  }
  return report;
}

}  // namespace vitfl
