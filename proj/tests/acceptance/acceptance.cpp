// Acceptance checks: one PASS / FAIL / FLAG line per criterion.
//
// FLAG marks a report-grade trend that did not hold at desk scale; it does not
// fail the run. Every criterion also has a wall-time budget, and exceeding it
// is a failure.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "vitfl/cka.hpp"
#include "vitfl/data.hpp"
#include "vitfl/error.hpp"
#include "vitfl/experiment.hpp"
#include "vitfl/fl.hpp"
#include "vitfl/oracles.hpp"
#include "vitfl/verify.hpp"

namespace fs = std::filesystem;
using namespace vitfl;

namespace {

enum class Status { Pass, Fail, Flag };

struct Outcome {
  Status status = Status::Pass;
  std::string detail;
};

struct Criterion {
  int id;
  std::string name;
  double budget_s;
  std::function<Outcome()> run;
};

Outcome pass_if(bool ok, std::string detail) {
  return {ok ? Status::Pass : Status::Fail, std::move(detail)};
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng) {
  Matrix m(r, c);
  for (double& v : m.data()) v = rng.normal();
  return m;
}

bool bitwise_equal(const ModelParams& a, const ModelParams& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i].values.size() != b[i].values.size() ||
        std::memcmp(a[i].values.data(), b[i].values.data(), a[i].values.size() * sizeof(double)))
      return false;
  return true;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

Outcome from_suite(const std::string& suite, std::size_t seeds = 20) {
  VerifyOptions o;
  o.suites = {suite};
  o.gradient_seeds = seeds;
  const auto rep = run_verification(o);
  const auto& s = rep.suites.front();
  std::string d = std::to_string(s.checks - s.failures) + "/" + std::to_string(s.checks) + " checks";
  if (s.skipped) d += ", " + std::to_string(s.skipped) + " coordinates at kinks skipped";
  if (!s.messages.empty()) d += "; first failure: " + s.messages.front();
  return pass_if(s.passed(), d);
}

// 1
Outcome hsic_oracle() {
  Rng rng(0xACC1);
  double worst = 0.0;
  for (std::size_t i = 0; i < 100; ++i) {
    const std::size_t n = 4 + i % 9;
    const Matrix x = random_matrix(n, 1 + rng.below(6), rng);
    const Matrix y = random_matrix(n, 1 + rng.below(6), rng);
    const Matrix k = gram_linear(x), l = gram_linear(y);
    worst = std::max(worst, std::abs(hsic1_unbiased(k, l) - oracles::hsic1_direct(k, l)));
  }
  return pass_if(worst <= 1e-10, "100 instances, max |diff| " + fmt("%.3g", worst));
}

// 2
Outcome cka_invariance() {
  Rng rng(0xACC2);
  double self = 0, orth = 0, scale = 0, sym = 0, dup = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t k = 1 + rng.below(4), m = 6 + rng.below(20), p = 2 + rng.below(8);
    std::vector<Matrix> xs, ys;
    for (std::size_t i = 0; i < k; ++i) {
      xs.push_back(random_matrix(m, p, rng));
      ys.push_back(random_matrix(m, 1 + rng.below(8), rng));
    }
    // Orthogonal Q from Gram-Schmidt.
    Matrix q = random_matrix(p, p, rng);
    for (std::size_t j = 0; j < p; ++j) {
      for (std::size_t c = 0; c < j; ++c) {
        double d = 0;
        for (std::size_t i = 0; i < p; ++i) d += q(i, j) * q(i, c);
        for (std::size_t i = 0; i < p; ++i) q(i, j) -= d * q(i, c);
      }
      double nrm = 0;
      for (std::size_t i = 0; i < p; ++i) nrm += q(i, j) * q(i, j);
      for (std::size_t i = 0; i < p; ++i) q(i, j) /= std::sqrt(nrm);
    }
    std::vector<Matrix> rot, ax, by, x2 = xs, y2 = ys;
    for (const auto& x : xs) rot.push_back(x * q);
    const double alpha = rng.uniform(0.01, 100.0), beta = rng.uniform(0.01, 100.0);
    for (const auto& x : xs) ax.push_back(x.scaled(alpha));
    for (const auto& y : ys) by.push_back(y.scaled(beta));
    x2.insert(x2.end(), xs.begin(), xs.end());
    y2.insert(y2.end(), ys.begin(), ys.end());

    const double base = *cka(xs, ys);
    self = std::max(self, std::abs(*cka(xs, xs) - 1.0));
    orth = std::max(orth, std::abs(*cka(xs, rot) - 1.0));
    scale = std::max(scale, std::abs(*cka(ax, by) - base));
    sym = std::max(sym, std::abs(*cka(ys, xs) - base));
    dup = std::max(dup, std::abs(*cka(x2, y2) - base));
  }
  const bool ok = self <= 1e-10 && orth <= 1e-8 && scale <= 1e-10 && sym <= 1e-12 && dup <= 1e-12;
  return pass_if(ok, "self " + fmt("%.2g", self) + ", orthogonal " + fmt("%.2g", orth) + ", scaling " +
                         fmt("%.2g", scale) + ", symmetry " + fmt("%.2g", sym) + ", duplication " +
                         fmt("%.2g", dup));
}

// Small synthetic federation shared by the reduction checks.
struct SmallWorld {
  LabeledDataset train, validation;
  ModelSpec spec;
  std::vector<ClientShard> shards;

  SmallWorld() {
    SyntheticSpec s;
    s.channels = 1;
    s.height = s.width = 8;
    s.per_class = 40;
    s.seed = 5;
    const auto all = generate_synthetic(s);
    std::vector<std::size_t> tr, va;
    for (std::size_t i = 0; i < all.size(); ++i) ((i % 40) < 30 ? tr : va).push_back(i);
    train = all.subset(tr);
    validation = all.subset(va);
    spec = ModelSpec::tiny_cnn();
    spec.channels = 1;
    spec.height = spec.width = 8;
    spec.num_stages = 2;
    spec.base_channels = 4;
    spec.projection_dim = 8;
    PartitionSpec p;
    p.num_participants = 5;
    p.seed = 2;
    shards = partition(train, p);
  }
};

// 5
Outcome reductions() {
  SmallWorld w;
  FLConfig avg;
  avg.rounds = 5;
  avg.batch_size = 16;
  avg.optimizer = OptimizerConfig::convolutional_default();
  avg.seed = 3;

  FLConfig mc = avg;
  mc.strategy = Strategy::Moon;
  MoonConfig moon;
  moon.mu = 0.0;
  Federation a(w.spec, avg, {}, {}, w.train, w.shards, w.validation, 9);
  Federation b(w.spec, mc, moon, {}, w.train, w.shards, w.validation, 9);
  bool moon_ok = true;
  for (int r = 0; r < 5; ++r) {
    const auto ra = a.run_round(), rb = b.run_round();
    moon_ok &= bitwise_equal(a.server_params(), b.server_params());
    for (std::size_t c = 0; c < ra.clients.size(); ++c) {
      moon_ok &= ra.clients[c].loss == rb.clients[c].loss;
      moon_ok &= bitwise_equal(a.clients()[c].local_params, b.clients()[c].local_params);
    }
  }

  // FedALA with A frozen at ones: the merged start point is the broadcast.
  AlaConfig ala;
  ala.adapt_weights = false;
  FLConfig fc = avg;
  fc.strategy = Strategy::FedAla;
  Federation c(w.spec, fc, {}, ala, w.train, w.shards, w.validation, 9);
  Federation d(w.spec, avg, {}, {}, w.train, w.shards, w.validation, 9);
  bool ala_ok = true;
  auto model = build_model(w.spec, 0);
  for (int r = 0; r < 3; ++r) {
    for (auto& st : c.clients()) {
      ClientState copy = st;
      ala_ok &= bitwise_equal(ala_adapt(*model, copy, c.server_params(), w.train, ala, 16, 1), c.server_params());
    }
    c.run_round();
    d.run_round();
    ala_ok &= bitwise_equal(c.server_params(), d.server_params());
  }
  return pass_if(moon_ok && ala_ok, std::string("MOON(mu=0) vs FedAvg over 5 rounds: ") +
                                        (moon_ok ? "bitwise equal" : "DIFFER") +
                                        "; FedALA(A=1) start point and trajectory: " +
                                        (ala_ok ? "bitwise equal" : "DIFFER"));
}

// 7
Outcome cifar_parser(const fs::path& work) {
  fs::create_directories(work);
  std::vector<std::uint8_t> bytes;
  Rng rng(0xC1FA);
  for (int r = 0; r < 25; ++r) {
    bytes.push_back(static_cast<std::uint8_t>(r % 10));
    for (int i = 0; i < 3072; ++i) bytes.push_back(static_cast<std::uint8_t>(rng.below(256)));
  }
  {
    std::ofstream f(work / "fixture.bin", std::ios::binary);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  }
  const auto d = load_cifar10({work / "fixture.bin"});
  std::vector<std::uint8_t> back;
  for (std::size_t r = 0; r < d.size(); ++r) {
    back.push_back(static_cast<std::uint8_t>(d.label(r)));
    for (std::size_t i = 0; i < 3072; ++i)
      back.push_back(static_cast<std::uint8_t>(std::lround(d.pixel(r, i) * 255.0)));
  }
  const bool round_trip = back == bytes;

  bool truncated_rejected = true;
  for (std::size_t cut : {std::size_t{1}, std::size_t{3072}, std::size_t{3074}}) {
    {
      std::ofstream f(work / "cut.bin", std::ios::binary);
      f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size() - cut));
    }
    try {
      load_cifar10({work / "cut.bin"});
      truncated_rejected = false;
    } catch (const FormatError&) {
    }
  }
  std::string detail = std::string("25-record fixture round trip ") + (round_trip ? "exact" : "MISMATCH") +
                       ", truncated files " + (truncated_rejected ? "rejected" : "ACCEPTED");

  bool real_ok = true;
  if (const char* root = std::getenv("VITFL_CIFAR10_DIR")) {
    std::vector<fs::path> train;
    for (int i = 1; i <= 5; ++i) train.push_back(fs::path(root) / ("data_batch_" + std::to_string(i) + ".bin"));
    const auto tr = load_cifar10(train);
    const auto te = load_cifar10({fs::path(root) / "test_batch.bin"});
    const auto a = tr.count_per_class(), b = te.count_per_class();
    real_ok = tr.size() == 50000;
    for (std::size_t c = 0; c < 10; ++c) real_ok &= a[c] == 5000 && a[c] + b[c] == 6000;
    detail += std::string("; real files: ") + std::to_string(tr.size()) + " train, per class 5000 train / 6000 overall " +
              (real_ok ? "ok" : "WRONG");
  } else {
    detail += "; real files absent (VITFL_CIFAR10_DIR unset), skipped";
  }
  return pass_if(round_trip && truncated_rejected && real_ok, detail);
}

// 8
Outcome smoke(const fs::path& work) {
  auto config = [&](const std::string& name) {
    return parse_config("seed = 8\noutput_dir = " + (work / name).string() +
                        "\npartition.num_participants = 8\nmodel.arch = tiny_mlp\nfl.rounds = 30\n"
                        "analysis.snapshot_epochs = 30\n");
  };
  const auto a = cmd_run(config("a"));
  const auto b = cmd_run(config("b"));
  const bool same = slurp(work / "a" / "metrics.csv") == slurp(work / "b" / "metrics.csv") &&
                    slurp(work / "a" / "state.ckpt") == slurp(work / "b" / "state.ckpt") &&
                    slurp(snapshot_path(work / "a", 30)) == slurp(snapshot_path(work / "b", 30));
  const double chance = 0.1;
  return pass_if(a.complete && b.complete && a.final_server_accuracy > 2 * chance && same,
                 "8 clients, TINY_MLP, 30 rounds: server accuracy " + fmt("%.3f", a.final_server_accuracy) +
                     " (need > " + fmt("%.2f", 2 * chance) + "), repeat run " +
                     (same ? "byte-identical" : "DIFFERS"));
}

// 9 and 10 share the same runs.
struct TrendRuns {
  std::map<std::string, double> accuracy;  // "<arch>/N<n>/s<seed>" -> tail-mean server accuracy
  std::map<std::uint64_t, std::pair<double, double>> vit_cka;  // seed -> (first, last snapshot)
  std::string error;
  bool done = false;
};

std::string trend_config(const fs::path& dir, const std::string& arch, std::size_t n, std::uint64_t seed) {
  std::string model;
  if (arch == "tiny_vit")
    model = "model.embed_dim = 32\nmodel.num_heads = 2\nmodel.num_blocks = 2\noptimizer.learning_rate = 0.001\n";
  else
    model = "model.base_channels = 8\nmodel.num_stages = 2\n";
  return "seed = " + std::to_string(seed) + "\noutput_dir = " + dir.string() +
         "\ndataset.synthetic.height = 16\ndataset.synthetic.width = 16\ndataset.synthetic.per_class = 100\n"
         "dataset.validation_size = 300\npartition.num_participants = " + std::to_string(n) +
         "\nmodel.arch = " + arch + "\n" + model +
         "fl.rounds = 40\nanalysis.probes = 4\nanalysis.snapshot_epochs = 10, 20, 40\n";
}

double tail_accuracy(const fs::path& metrics, std::size_t last) {
  std::ifstream f(metrics);
  std::string line;
  std::vector<double> server;
  std::getline(f, line);
  while (std::getline(f, line)) {
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) cols.push_back(c);
    if (cols.size() >= 4 && cols[1] == "SERVER") server.push_back(std::stod(cols[3]));
  }
  if (server.empty()) throw Error("no server rows in " + metrics.string());
  double s = 0.0;
  const std::size_t k = std::min(last, server.size());
  for (std::size_t i = server.size() - k; i < server.size(); ++i) s += server[i];
  return s / static_cast<double>(k);
}

TrendRuns& trend_runs(const fs::path& work) {
  static TrendRuns runs;
  if (runs.done) return runs;
  runs.done = true;
  try {
    for (std::uint64_t seed = 1; seed <= 3; ++seed)
      for (const std::string arch : {"tiny_cnn", "tiny_vit"})
        for (std::size_t n : {4, 16}) {
          const std::string key = arch + "/N" + std::to_string(n) + "/s" + std::to_string(seed);
          const fs::path dir = work / key;
          const auto cfg = parse_config(trend_config(dir, arch, n, seed));
          const auto r = cmd_run(cfg);
          if (!r.complete) throw Error(key + ": run did not complete: " + r.abort_reason);
          runs.accuracy[key] = tail_accuracy(dir / "metrics.csv", 5);
          if (arch == "tiny_vit" && n == 16) {
            const auto a = cmd_analyze(dir);
            runs.vit_cka[seed] = {a.mean_same_layer.front().second, a.mean_same_layer.back().second};
          }
          std::fprintf(stderr, "  trend run %s: tail accuracy %.3f\n", key.c_str(), runs.accuracy[key]);
        }
  } catch (const std::exception& e) {
    runs.error = e.what();
  }
  return runs;
}

Outcome trend(const fs::path& work) {
  const auto& runs = trend_runs(work);
  if (!runs.error.empty()) return {Status::Fail, runs.error};
  int holds = 0;
  std::string detail;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    auto acc = [&](const std::string& arch, int n) {
      return runs.accuracy.at(arch + "/N" + std::to_string(n) + "/s" + std::to_string(seed));
    };
    const double cnn_drop = acc("tiny_cnn", 4) - acc("tiny_cnn", 16);
    const double vit_drop = acc("tiny_vit", 4) - acc("tiny_vit", 16);
    holds += cnn_drop > vit_drop;
    detail += (seed > 1 ? "; " : "") + std::string("seed ") + std::to_string(seed) + ": cnn " +
              fmt("%.3f", acc("tiny_cnn", 4)) + "->" + fmt("%.3f", acc("tiny_cnn", 16)) + " (drop " +
              fmt("%+.3f", cnn_drop) + "), vit " + fmt("%.3f", acc("tiny_vit", 4)) + "->" +
              fmt("%.3f", acc("tiny_vit", 16)) + " (drop " + fmt("%+.3f", vit_drop) + ")";
  }
  detail = "cnn drop > vit drop in " + std::to_string(holds) + "/3 seeds; " + detail;
  return {holds >= 2 ? Status::Pass : Status::Flag, detail};
}

Outcome cka_trend(const fs::path& work) {
  const auto& runs = trend_runs(work);
  if (!runs.error.empty()) return {Status::Fail, runs.error};
  int holds = 0;
  std::string detail;
  for (const auto& [seed, v] : runs.vit_cka) {
    holds += v.second >= v.first;
    detail += "; seed " + std::to_string(seed) + ": epoch 10 " + fmt("%.3f", v.first) + " -> epoch 40 " +
              fmt("%.3f", v.second);
  }
  return {holds >= 2 ? Status::Pass : Status::Flag,
          "TINY_VIT N=16 mean same-layer CKA non-decreasing in " + std::to_string(holds) + "/3 seeds" + detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"vitfl acceptance checks"};
  fs::path work = fs::temp_directory_path() / "vitfl_acceptance";
  std::vector<int> only;
  app.add_option("--work-dir", work, "Scratch directory for runs (recreated)");
  app.add_option("--only", only, "Run only these criteria");
  CLI11_PARSE(app, argc, argv);

  fs::remove_all(work);
  fs::create_directories(work);

  const std::vector<Criterion> criteria{
      {1, "HSIC oracle equivalence", 1, hsic_oracle},
      {2, "CKA invariance suite", 5, cka_invariance},
      {3, "Gradient checks", 120, [] { return from_suite("gradients", 20); }},
      {4, "Aggregation exactness", 1, [] { return from_suite("aggregation"); }},
      {5, "Reduction identities", 60, reductions},
      {6, "Partitioner invariants", 5, [] { return from_suite("partition"); }},
      {7, "CIFAR-10 parser", 10, [&] { return cifar_parser(work / "cifar"); }},
      {8, "End-to-end smoke", 300, [&] { return smoke(work / "smoke"); }},
      {9, "Desk-scale trend check", 1800, [&] { return trend(work / "trend"); }},
      {10, "CKA pipeline sanity", 1800, [&] { return cka_trend(work / "trend"); }},
  };

  int failures = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {Status::Fail, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (secs > c.budget_s && o.status != Status::Fail) {
      o.status = Status::Fail;
      o.detail += "; over the " + fmt("%.0f", c.budget_s) + " s budget";
    }
    const char* tag = o.status == Status::Pass ? "PASS" : o.status == Status::Flag ? "FLAG" : "FAIL";
    std::printf("[%s] criterion %d: %s (%.2f s) %s\n", tag, c.id, c.name.c_str(), secs, o.detail.c_str());
    std::fflush(stdout);
    failures += o.status == Status::Fail;
  }
  std::printf("%s: %d failed\n", failures ? "FAILED" : "OK", failures);
  return failures ? 1 : 0;
}
