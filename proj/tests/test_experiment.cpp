#include <cstdlib>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "helpers.hpp"
#include "vitfl/checkpoint.hpp"
#include "vitfl/error.hpp"
#include "vitfl/experiment.hpp"

using namespace vitfl;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

// Tiny synthetic MLP experiment; a few milliseconds per round.
std::string tiny_config(const std::filesystem::path& out, std::size_t rounds, std::size_t clients,
                        const std::string& extra = "") {
  return "seed = 17\n"
         "output_dir = " + out.string() + "\n"
         "dataset.synthetic.channels = 1\n"
         "dataset.synthetic.height = 8\n"
         "dataset.synthetic.width = 8\n"
         "dataset.synthetic.per_class = 20\n"
         "dataset.validation_size = 100\n"
         "partition.num_participants = " + std::to_string(clients) + "\n"
         "model.arch = tiny_mlp\n"
         "model.hidden_widths = 16, 8\n"
         "model.projection_dim = 8\n"
         "fl.rounds = " + std::to_string(rounds) + "\n"
         "fl.batch_size = 16\n"
         "analysis.probes = 2\n" + extra;
}

}  // namespace

TEST_SUITE("experiment-cli") {

TEST_CASE("a minimal config takes the documented defaults") {
  const auto c = parse_config("partition.num_participants = 10\n");
  CHECK(c.fl.rounds == 100);
  CHECK(c.fl.batch_size == 32);
  CHECK(c.fl.client_epochs == 1);
  CHECK(c.fl.strategy == Strategy::FedAvg);
  CHECK(c.partition.num_participants == 10);
  CHECK(c.partition.labels_per_client == 4);
  CHECK(c.partition.scenario == Scenario::S1);
  CHECK(c.model.arch == Arch::TinyVit);
  CHECK(c.fl.optimizer == OptimizerConfig::transformer_default());
  CHECK(c.analysis.probe_per_class == 5);
  CHECK(c.analysis.snapshot_epochs == std::vector<std::size_t>{20, 40, 80});

  const auto cnn = parse_config("partition.num_participants = 4\nmodel.arch = tiny_cnn\n");
  CHECK(cnn.fl.optimizer == OptimizerConfig::convolutional_default());

  const auto moon = parse_config("partition.num_participants = 4\nfl.strategy = moon\n");
  CHECK(moon.moon.temperature == 0.5);
  CHECK(moon.moon.mu == 5.0);
  const auto ala = parse_config("partition.num_participants = 4\nfl.strategy = fedala\n");
  CHECK(ala.ala.sample_percent == 100.0);
  CHECK(ala.ala.start_layer == 1);
  CHECK(ala.ala.std_threshold == 0.05);
}

TEST_CASE("strict parsing names the offending key") {
  auto key_of = [](const std::string& text) {
    try {
      parse_config(text);
    } catch (const ConfigError& e) {
      return e.key();
    }
    return std::string("<none>");
  };
  CHECK(key_of("partition.num_participants = 10\noptimiser = sgd\n") == "optimiser");
  CHECK(key_of("partition.num_participants = 10\nfl.rounds = 3\nfl.rounds = 4\n") == "fl.rounds");
  CHECK(key_of("partition.num_participants = 10\nfl.rounds = many\n") == "fl.rounds");
  CHECK(key_of("partition.num_participants = 10\nfl.rounds = -2\n") == "fl.rounds");
  CHECK(key_of("fl.rounds = 3\n") == "partition.num_participants");
  CHECK(key_of("partition.num_participants = 10\nmoon.mu = 1\n") == "moon.mu");
  CHECK(key_of("partition.num_participants = 10\noptimizer.learning_rate = -1\n") == "optimizer.learning_rate");
  CHECK(key_of("partition.num_participants = 10\nfl.rounds = 10\nanalysis.snapshot_epochs = 5, 20\n") ==
        "analysis.snapshot_epochs");
  CHECK(key_of("partition.num_participants = 10\npartition.scenario = S2\n") == "partition.per_client_volume");
  CHECK_THROWS_AS(parse_config("partition.num_participants 10\n"), ConfigError);
}

TEST_CASE("serialize and parse round trip") {
  const std::vector<std::string> texts{
      "partition.num_participants = 10\n",
      "seed = 9\npartition.num_participants = 20\npartition.scenario = S2\npartition.per_client_volume = 500\n"
      "model.arch = tiny_cnn\nfl.strategy = moon\nmoon.mu = 1.5\nfl.rounds = 50\n",
      "partition.num_participants = 3\nfl.strategy = fedala\nala.sample_percent = 80\nala.start_layer = 2\n"
      "model.arch = tiny_mlp\nmodel.hidden_widths = 7, 5, 3\nanalysis.layers = hidden0, hidden2\nfl.rounds = 5\n",
      "partition.num_participants = 10\ndataset.kind = cifar10\n"
      "dataset.train_paths = a.bin, b.bin\ndataset.test_paths = t.bin\ndataset.train_limit = 500\n"};
  for (const auto& t : texts) {
    const auto c = parse_config(t);
    const auto text = serialize_config(c);
    const auto back = parse_config(text);
    CHECK(back == c);
    CHECK(serialize_config(back) == text);
    CHECK(config_hash(back) == config_hash(c));
  }
  CHECK(config_hash(parse_config(texts[0])) != config_hash(parse_config(texts[1])));
  CHECK(fnv1a_hex("") == "cbf29ce484222325");
  CHECK(fnv1a_hex("a") == "af63dc4c8601ec8c");
}

TEST_CASE("output directory honours the environment root") {
  ExperimentConfig c = parse_config("partition.num_participants = 2\noutput_dir = runs/x\n");
  const char* old = std::getenv(kOutputRootEnv);
  const std::string saved = old ? old : "";
  setenv(kOutputRootEnv, "/tmp/root", 1);
  CHECK(resolve_output_dir(c) == std::filesystem::path("/tmp/root/runs/x"));
  c.output_dir = "/abs/dir";
  CHECK(resolve_output_dir(c) == std::filesystem::path("/abs/dir"));
  if (old) setenv(kOutputRootEnv, saved.c_str(), 1);
  else unsetenv(kOutputRootEnv);
}

TEST_CASE("run writes metrics and is reproducible") {
  const auto dir = test::scratch("run_small");
  const auto a = cmd_run(parse_config(tiny_config(dir / "a", 2, 2)));
  CHECK(a.complete);
  CHECK(a.rounds_completed == 2);
  const std::string metrics = slurp(dir / "a" / "metrics.csv");
  CHECK(metrics.rfind(std::string(kMetricsHeader) + "\n", 0) == 0);
  CHECK(count_lines(metrics) == 1 + 2 * (2 + 1));
  CHECK(std::filesystem::exists(dir / "a" / "manifest.json"));
  CHECK(std::filesystem::exists(dir / "a" / "config.txt"));

  const auto b = cmd_run(parse_config(tiny_config(dir / "b", 2, 2)));
  CHECK(b.complete);
  CHECK(slurp(dir / "b" / "metrics.csv") == metrics);

  // A finished run is left alone; a different config in the same place is refused.
  CHECK(cmd_run(parse_config(tiny_config(dir / "a", 2, 2))).complete);
  CHECK(slurp(dir / "a" / "metrics.csv") == metrics);
  CHECK_THROWS_AS(cmd_run(parse_config(tiny_config(dir / "a", 3, 2))), Error);
}

TEST_CASE("an interrupted run resumes to the uninterrupted result") {
  const auto dir = test::scratch("run_resume");
  const std::string extra = "fl.strategy = moon\nanalysis.snapshot_epochs = 3, 10\n";
  const auto full = parse_config(tiny_config(dir / "full", 10, 3, extra));
  const auto part = parse_config(tiny_config(dir / "part", 10, 3, extra));
  CHECK(cmd_run(full).complete);

  RunOptions stop;
  stop.stop_after = 5;
  const auto first = cmd_run(part, stop);
  CHECK_FALSE(first.complete);
  CHECK(first.rounds_completed == 5);
  const auto second = cmd_run(part);
  CHECK(second.complete);
  CHECK(second.rounds_completed == 10);

  const auto a = Checkpoint::load(dir / "full" / "state.ckpt");
  const auto b = Checkpoint::load(dir / "part" / "state.ckpt");
  REQUIRE(a.entries().size() == b.entries().size());
  double worst = 0.0;
  for (std::size_t i = 0; i < a.entries().size(); ++i) {
    REQUIRE(a.entries()[i].name == b.entries()[i].name);
    for (std::size_t j = 0; j < a.entries()[i].values.size(); ++j)
      worst = std::max(worst, std::abs(a.entries()[i].values[j] - b.entries()[i].values[j]));
  }
  CHECK(worst <= 1e-12);
  CHECK(slurp(dir / "full" / "metrics.csv") == slurp(dir / "part" / "metrics.csv"));
  CHECK(Checkpoint::load(snapshot_path(dir / "full", 3)) == Checkpoint::load(snapshot_path(dir / "part", 3)));
}

TEST_CASE("analysis writes one heatmap set per snapshot epoch") {
  const auto dir = test::scratch("run_analyze");
  const auto cfg = parse_config(tiny_config(dir / "r", 80, 3));
  CHECK(cfg.analysis.snapshot_epochs == std::vector<std::size_t>{20, 40, 80});
  CHECK(cmd_run(cfg).complete);
  for (std::size_t e : {20u, 40u, 80u}) CHECK(std::filesystem::exists(snapshot_path(dir / "r", e)));

  const auto res = cmd_analyze(dir / "r");
  REQUIRE(res.mean_same_layer.size() == 3);
  for (const char* e : {"0020", "0040", "0080"}) {
    const auto csv = dir / "r" / "analysis" / (std::string("same_layer_e") + e + ".csv");
    const auto pgm = dir / "r" / "analysis" / (std::string("same_layer_e") + e + ".pgm");
    REQUIRE(std::filesystem::exists(csv));
    REQUIRE(std::filesystem::exists(pgm));
    const CkaMatrix m = read_cka_csv(csv);
    CHECK(m.values.rows() == 3);
    CHECK(m.values.cols() == 2);
    CHECK(render_pgm(m, 16) == slurp(pgm));
  }
  CHECK(std::filesystem::exists(dir / "r" / "analysis" / "cross_model_epochs.csv"));
  const CkaMatrix blocks = read_cka_csv(dir / "r" / "analysis" / "cross_model_epochs.csv");
  CHECK(blocks.values.rows() == 3 * 4);
}

TEST_CASE("analysis of a missing snapshot names the epoch") {
  const auto dir = test::scratch("run_missing");
  CHECK(cmd_run(parse_config(tiny_config(dir / "r", 1, 2))).complete);
  AnalyzeOptions opts;
  opts.epochs = {20};
  try {
    cmd_analyze(dir / "r", opts);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("epoch 20") != std::string::npos);
  }
}

}  // TEST_SUITE
