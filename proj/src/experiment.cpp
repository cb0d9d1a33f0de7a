#include "vitfl/experiment.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "vitfl/checkpoint.hpp"
#include "vitfl/error.hpp"
#include "vitfl/fl.hpp"
#include "vitfl/partition.hpp"
#include "vitfl/rng.hpp"

namespace vitfl {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::uint64_t kModelInitTag = 0x1417;
constexpr std::uint64_t kProbeTag = 0xCCA;

std::string read_file(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw Error("cannot read '" + p.string() + "'");
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

void write_file_atomic(const fs::path& p, const std::string& bytes) {
  const fs::path tmp = p.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot open '" + tmp.string() + "' for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw Error("write failed for '" + tmp.string() + "'");
  }
  fs::rename(tmp, p);
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string epoch_tag(std::size_t e) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "e%04zu", e);
  return buf;
}

std::string client_prefix(std::size_t id) { return "client/" + std::to_string(id) + "/"; }

// Keeps the header and the rows of rounds <= `rounds`.
void truncate_metrics(const fs::path& p, std::size_t rounds) {
  std::istringstream is(read_file(p));
  std::string line, out;
  bool header = true;
  while (std::getline(is, line)) {
    if (header) {
      out += line + "\n";
      header = false;
      continue;
    }
    const auto comma = line.find(',');
    if (comma == std::string::npos) continue;
    if (std::stoull(line.substr(0, comma)) <= rounds) out += line + "\n";
  }
  write_file_atomic(p, out);
}

void append(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary | std::ios::app);
  if (!f) throw Error("cannot append to '" + p.string() + "'");
  f << text;
  if (!f) throw Error("write failed for '" + p.string() + "'");
}

class ManifestWriter {
 public:
  ManifestWriter(fs::path dir, json m) : dir_(std::move(dir)), m_(std::move(m)) {}

  json& doc() { return m_; }

  void add_file(const std::string& rel) {
    auto& files = m_["files"];
    for (const auto& f : files)
      if (f["path"] == rel) return;
    files.push_back({{"path", rel}});
  }

  void save() {
    for (auto& f : m_["files"]) f["fnv1a"] = fnv1a_hex(read_file(dir_ / f["path"].get<std::string>()));
    write_file_atomic(dir_ / "manifest.json", m_.dump(2) + "\n");
  }

 private:
  fs::path dir_;
  json m_;
};

std::vector<std::string> analysis_layers(const ExperimentConfig& cfg, const Model& m) {
  std::vector<std::string> all;
  for (const auto& p : m.capture_points()) all.push_back(p.layer_name);
  if (cfg.analysis.layers.empty()) return all;
  for (const auto& l : cfg.analysis.layers)
    if (std::find(all.begin(), all.end(), l) == all.end())
      throw ConfigError("analysis.layers", "model has no capture point '" + l + "'");
  return cfg.analysis.layers;
}

}  // namespace

ExperimentData load_experiment_data(const ExperimentConfig& cfg) {
  ExperimentData out;
  const auto& d = cfg.dataset;
  if (d.kind == DatasetKind::Cifar10) {
    std::vector<fs::path> train(d.train_paths.begin(), d.train_paths.end());
    std::vector<fs::path> test(d.test_paths.begin(), d.test_paths.end());
    out.train = load_cifar10(train);
    if (d.train_limit > 0 && d.train_limit < out.train.size()) {
      std::vector<std::size_t> keep(d.train_limit);
      std::iota(keep.begin(), keep.end(), 0);
      out.train = out.train.subset(keep);
    }
    LabeledDataset all_test = load_cifar10(test);
    if (all_test.size() < d.validation_size)
      throw ConfigError("dataset.validation_size", "test files hold only " + std::to_string(all_test.size()) + " records");
    std::vector<std::size_t> val(d.validation_size);
    std::iota(val.begin(), val.end(), 0);
    out.validation = all_test.subset(val);
    return out;
  }
  SyntheticSpec spec = d.synthetic;
  const std::size_t val_per_class = d.validation_size / spec.num_classes;
  spec.per_class = d.synthetic.per_class + val_per_class;
  const LabeledDataset all = generate_synthetic(spec);
  std::vector<std::size_t> train, val;
  for (std::size_t c = 0; c < spec.num_classes; ++c)
    for (std::size_t j = 0; j < spec.per_class; ++j)
      (j < d.synthetic.per_class ? train : val).push_back(c * spec.per_class + j);
  out.train = all.subset(train);
  if (d.train_limit > 0 && d.train_limit < out.train.size()) {
    std::vector<std::size_t> keep(d.train_limit);
    std::iota(keep.begin(), keep.end(), 0);
    out.train = out.train.subset(keep);
  }
  out.validation = all.subset(val);
  return out;
}

fs::path resolve_output_dir(const ExperimentConfig& cfg) {
  fs::path p(cfg.output_dir);
  if (p.is_relative())
    if (const char* root = std::getenv(kOutputRootEnv); root && *root) return fs::path(root) / p;
  return p;
}

fs::path snapshot_path(const fs::path& run_dir, std::size_t round) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "round_%04zu.ckpt", round);
  return run_dir / "checkpoints" / buf;
}

RunResult cmd_run(const ExperimentConfig& cfg, const RunOptions& opts) {
  cfg.validate();
  RunResult result;
  result.dir = resolve_output_dir(cfg);
  const fs::path dir = result.dir;
  fs::create_directories(dir / "checkpoints");
  const std::string hash = config_hash(cfg);
  const fs::path manifest_path = dir / "manifest.json", metrics = dir / "metrics.csv",
                 state_path = dir / "state.ckpt";

  const ExperimentData data = load_experiment_data(cfg);
  PartitionStats pstats;
  std::vector<ClientShard> shards = partition(data.train, cfg.partition, &pstats);
  std::vector<std::size_t> shard_sizes;
  for (const auto& s : shards) shard_sizes.push_back(s.size());
  Federation fed(cfg.model, cfg.fl, cfg.moon, cfg.ala, data.train, std::move(shards), data.validation,
                 derive_seed({cfg.seed, kModelInitTag}));

  json m;
  if (fs::exists(manifest_path)) {
    m = json::parse(read_file(manifest_path));
    if (m.value("config_hash", "") != hash)
      throw Error("'" + dir.string() + "' holds a run of a different config (hash " +
                  m.value("config_hash", "?") + ", expected " + hash + ")");
    if (fs::exists(state_path)) fed.load_state(Checkpoint::load(state_path));
    if (m.value("status", "") == "complete" && fed.rounds_completed() == cfg.fl.rounds) {
      result.rounds_completed = fed.rounds_completed();
      result.complete = true;
      result.final_server_accuracy = m["rounds_index"].back().value("server_accuracy", 0.0);
      return result;
    }
    truncate_metrics(metrics, fed.rounds_completed());
    auto& idx = m["rounds_index"];
    while (!idx.empty() && idx.back().value("round", std::size_t{0}) > fed.rounds_completed())
      idx.erase(idx.size() - 1);
    json kept = json::array();
    for (const auto& f : m["failed_clients"])
      if (f.value("round", std::size_t{0}) <= fed.rounds_completed()) kept.push_back(f);
    m["failed_clients"] = kept;
    m["status"] = "running";
    m.erase("abort");
  } else {
    write_file_atomic(dir / "config.txt", serialize_config(cfg));
    write_file_atomic(metrics, std::string(kMetricsHeader) + "\n");
    m = {{"format", "vitfl-run"},
         {"artifact_version", kArtifactVersion},
         {"config_hash", hash},
         {"config", serialize_config(cfg)},
         {"metrics_schema", kMetricsHeader},
         {"metrics_schema_version", kMetricsSchemaVersion},
         {"status", "running"},
         {"rounds", cfg.fl.rounds},
         {"rounds_completed", 0},
         {"partition", {{"shard_sizes", shard_sizes}, {"reused_assignments", pstats.reused_assignments}}},
         {"rounds_index", json::array()},
         {"failed_clients", json::array()},
         {"files", json::array()}};
  }
  ManifestWriter mw(dir, std::move(m));
  mw.add_file("config.txt");
  mw.add_file("metrics.csv");

  while (fed.rounds_completed() < cfg.fl.rounds) {
    if (opts.stop_after && fed.rounds_completed() >= *opts.stop_after) break;
    RoundReport rep;
    try {
      rep = fed.run_round();
    } catch (const Error& e) {
      result.aborted = true;
      result.abort_reason = e.what();
      mw.doc()["status"] = "aborted";
      mw.doc()["abort"] = {{"round", fed.rounds_completed() + 1}, {"reason", e.what()}};
      mw.save();
      result.rounds_completed = fed.rounds_completed();
      return result;
    }
    const std::size_t r = rep.round;

    std::string rows;
    auto wall = [&](double ms) { return cfg.record_wall_time ? fmt(ms) : std::string("0"); };
    for (const auto& c : rep.clients) {
      if (c.failed) {
        mw.doc()["failed_clients"].push_back({{"round", r}, {"client_id", c.client_id}, {"error", c.error}});
        continue;
      }
      rows += std::to_string(r) + "," + std::to_string(c.client_id) + "," + fmt(c.loss) + "," +
              fmt(c.accuracy) + "," + std::to_string(c.samples_seen) + "," + wall(c.wall_ms) + "\n";
    }
    rows += std::to_string(r) + ",SERVER," + fmt(rep.server_loss) + "," + fmt(rep.server_accuracy) + "," +
            std::to_string(rep.aggregated_samples) + "," + wall(rep.wall_ms) + "\n";
    append(metrics, rows);

    json round_entry = {{"round", r}, {"server_accuracy", rep.server_accuracy}, {"server_loss", rep.server_loss}};
    const auto& snaps = cfg.analysis.snapshot_epochs;
    const bool snapshot = std::find(snaps.begin(), snaps.end(), r) != snaps.end() ||
                          (cfg.checkpoint_every > 0 && r % cfg.checkpoint_every == 0);
    if (snapshot) {
      Checkpoint ck;
      ck.add_scalar("round", static_cast<double>(r));
      ck.add_params("server/", fed.server_params());
      for (const auto& c : fed.clients()) ck.add_params(client_prefix(c.client_id), c.local_params);
      const fs::path sp = snapshot_path(dir, r);
      ck.save(sp);
      const std::string rel = fs::relative(sp, dir).generic_string();
      mw.add_file(rel);
      round_entry["files"] = {rel};
    }

    Checkpoint state;
    fed.save_state(state);
    state.save(state_path);
    mw.add_file("state.ckpt");

    mw.doc()["rounds_completed"] = fed.rounds_completed();
    mw.doc()["rounds_index"].push_back(round_entry);
    if (fed.rounds_completed() == cfg.fl.rounds) mw.doc()["status"] = "complete";
    mw.save();
    result.final_server_accuracy = rep.server_accuracy;
    if (opts.on_round) opts.on_round(rep);
  }
  result.rounds_completed = fed.rounds_completed();
  result.complete = result.rounds_completed == cfg.fl.rounds;
  if (!result.complete) mw.save();
  return result;
}

AnalyzeResult cmd_analyze(const fs::path& run_dir, const AnalyzeOptions& opts) {
  const ExperimentConfig cfg = parse_config_file(run_dir / "config.txt");
  std::vector<std::size_t> epochs = opts.epochs.empty() ? cfg.analysis.snapshot_epochs : opts.epochs;
  if (epochs.empty()) throw Error("no epochs to analyze");
  for (std::size_t e : epochs)
    if (!fs::exists(snapshot_path(run_dir, e)))
      throw Error("missing checkpoint for epoch " + std::to_string(e) + " (" +
                  snapshot_path(run_dir, e).string() + ")");

  const ExperimentData data = load_experiment_data(cfg);
  auto worker = build_model(cfg.model, 0);
  const std::vector<std::string> layers = analysis_layers(cfg, *worker);
  std::string overall = !opts.overall_layer.empty() ? opts.overall_layer : cfg.analysis.overall_layer;
  if (overall.empty()) overall = worker->penultimate_layer();
  {
    const auto& cps = worker->capture_points();
    if (std::none_of(cps.begin(), cps.end(), [&](const CapturePoint& p) { return p.layer_name == overall; }))
      throw ConfigError("analysis.overall_layer", "model has no capture point '" + overall + "'");
  }

  ProbeSet probes{&data.validation,
                  build_probe_minibatches(data.validation, cfg.analysis.probe_per_class, cfg.analysis.probes,
                                          derive_seed({cfg.seed, kProbeTag}))};
  const ModelParams like = worker->snapshot();
  const fs::path out_dir = run_dir / "analysis";
  fs::create_directories(out_dir);

  AnalyzeResult res;
  auto emit = [&](const std::string& stem, CkaMatrix& mat, long tag) {
    mat.epoch_tag = tag;
    const fs::path csv = out_dir / (stem + ".csv"), pgm = out_dir / (stem + ".pgm");
    write_cka_csv(csv, mat);
    write_pgm(pgm, mat, opts.cell_px);
    res.files.push_back(csv);
    res.files.push_back(pgm);
  };

  std::vector<ModelParams> all_models;
  std::vector<std::string> all_labels;
  for (std::size_t e : epochs) {
    const Checkpoint ck = Checkpoint::load(snapshot_path(run_dir, e));
    const ModelParams server = ck.params("server/", like);
    std::vector<ModelParams> clients;
    std::vector<std::string> labels;
    for (std::size_t c = 0; c < cfg.partition.num_participants; ++c) {
      clients.push_back(ck.params(client_prefix(c), like));
      labels.push_back("client" + std::to_string(c));
    }

    CkaMatrix same = same_layer_similarity(*worker, clients, server, probes, layers, labels);
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t r = 0; r < same.values.rows(); ++r)
      for (std::size_t c = 0; c < same.values.cols(); ++c)
        if (same.defined(r, c)) {
          sum += same.values(r, c);
          ++n;
        }
    res.mean_same_layer.emplace_back(e, n ? sum / static_cast<double>(n) : 0.0);
    emit("same_layer_" + epoch_tag(e), same, static_cast<long>(e));

    std::vector<ModelParams> models{server};
    std::vector<std::string> model_labels{"server"};
    models.insert(models.end(), clients.begin(), clients.end());
    model_labels.insert(model_labels.end(), labels.begin(), labels.end());
    CkaMatrix cross = cross_model_similarity(*worker, models, models, overall, probes, model_labels, model_labels);
    emit("cross_model_" + epoch_tag(e), cross, static_cast<long>(e));

    CkaMatrix within = layer_similarity(*worker, server, server, probes, layers);
    emit("layers_server_" + epoch_tag(e), within, static_cast<long>(e));

    for (std::size_t i = 0; i < models.size(); ++i) {
      all_models.push_back(std::move(models[i]));
      all_labels.push_back(epoch_tag(e) + "/" + model_labels[i]);
    }
  }
  if (epochs.size() > 1) {
    CkaMatrix blocks = cross_model_similarity(*worker, all_models, all_models, overall, probes, all_labels, all_labels);
    emit("cross_model_epochs", blocks, 0);
  }
  return res;
}

}  // namespace vitfl
