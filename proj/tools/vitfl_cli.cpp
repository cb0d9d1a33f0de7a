#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "vitfl/checkpoint.hpp"
#include "vitfl/cka.hpp"
#include "vitfl/config.hpp"
#include "vitfl/data.hpp"
#include "vitfl/error.hpp"
#include "vitfl/experiment.hpp"
#include "vitfl/verify.hpp"

namespace {

int do_run(const std::string& config_path, const std::string& output_dir, std::size_t threads,
           std::size_t stop_after, bool quiet) {
  vitfl::ExperimentConfig cfg = vitfl::parse_config_file(config_path);
  if (!output_dir.empty()) cfg.output_dir = output_dir;
  if (threads > 0) cfg.fl.threads = threads;
  vitfl::RunOptions opts;
  if (stop_after > 0) opts.stop_after = stop_after;
  if (!quiet) {
    opts.on_round = [](const vitfl::RoundReport& r) {
      std::size_t failed = 0;
      for (const auto& c : r.clients) failed += c.failed;
      std::printf("round %zu  server_acc %.4f  server_loss %.4f%s\n", r.round, r.server_accuracy, r.server_loss,
                  failed ? ("  failed_clients " + std::to_string(failed)).c_str() : "");
      std::fflush(stdout);
    };
  }
  const auto res = vitfl::cmd_run(cfg, opts);
  std::printf("%s: %zu/%zu rounds%s\n", res.dir.string().c_str(), res.rounds_completed, cfg.fl.rounds,
              res.complete ? ", complete" : res.aborted ? ", aborted" : ", stopped");
  if (res.aborted) {
    std::fprintf(stderr, "aborted: %s\n", res.abort_reason.c_str());
    return 1;
  }
  return 0;
}

int do_analyze(const std::string& run_dir, const std::vector<std::size_t>& epochs, const std::string& layer,
               std::size_t cell_px) {
  vitfl::AnalyzeOptions opts;
  opts.epochs = epochs;
  opts.overall_layer = layer;
  opts.cell_px = cell_px;
  const auto res = vitfl::cmd_analyze(run_dir, opts);
  for (const auto& f : res.files) std::printf("%s\n", f.string().c_str());
  for (const auto& [e, m] : res.mean_same_layer) std::printf("epoch %zu mean same-layer CKA %.6f\n", e, m);
  return 0;
}

int do_verify(const std::vector<std::string>& suites, std::size_t seeds, double fault) {
  vitfl::VerifyOptions opts;
  opts.suites = suites;
  opts.gradient_seeds = seeds;
  opts.hsic_fault = fault;
  const auto report = vitfl::run_verification(opts);
  std::cout << report.to_json_lines();
  return report.passed() ? 0 : 1;
}

int do_export_checkpoint(const std::string& in, bool values) {
  const auto ck = vitfl::Checkpoint::load(in);
  nlohmann::json out = nlohmann::json::array();
  for (const auto& e : ck.entries()) {
    nlohmann::json j = {{"name", e.name}, {"shape", e.shape}};
    if (values) j["values"] = e.values;
    out.push_back(j);
  }
  std::cout << out.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Desk-scale federated learning simulator with CKA analysis"};
  app.require_subcommand(1);

  std::string config_path, output_dir;
  std::size_t threads = 0, stop_after = 0;
  bool quiet = false;
  auto* run = app.add_subcommand("run", "Run or resume an experiment");
  run->add_option("config", config_path, "Experiment config file")->required()->check(CLI::ExistingFile);
  run->add_option("--output-dir", output_dir, "Override output_dir (relative paths go under $VITFL_OUTPUT_ROOT)");
  run->add_option("--threads", threads, "Override fl.threads");
  run->add_option("--stop-after", stop_after, "Stop after this many completed rounds");
  run->add_flag("--quiet", quiet, "No per-round progress lines");

  std::string run_dir, layer;
  std::vector<std::size_t> epochs;
  std::size_t cell_px = 16;
  auto* analyze = app.add_subcommand("analyze", "CKA matrices and heatmaps for a run's snapshots");
  analyze->add_option("run_dir", run_dir, "Run output directory")->required();
  analyze->add_option("--epochs", epochs, "Snapshot epochs (default: the config's)")->delimiter(',');
  analyze->add_option("--layer", layer, "Capture point for model-level similarity (default: penultimate)");
  analyze->add_option("--cell-px", cell_px, "Heatmap pixels per matrix cell")->capture_default_str();

  std::vector<std::string> suites;
  std::size_t seeds = 20;
  double fault = 0.0;
  auto* verify = app.add_subcommand("verify", "Run the built-in oracle suites");
  verify->add_option("--suite", suites, "Suite(s) to run (default: all)")->delimiter(',');
  verify->add_option("--seeds", seeds, "Random seeds per gradient check")->capture_default_str();
  verify->add_option("--inject-hsic-fault", fault, "Add this to the HSIC 2/(n-2) coefficient (mutation check)");

  auto* exp = app.add_subcommand("export", "Convert artifacts");
  exp->require_subcommand(1);
  std::string csv_in, pgm_out;
  auto* heat = exp->add_subcommand("heatmap", "Render a CKA CSV as a PGM heatmap");
  heat->add_option("csv", csv_in, "CKA matrix CSV")->required()->check(CLI::ExistingFile);
  heat->add_option("out", pgm_out, "Output PGM")->required();
  heat->add_option("--cell-px", cell_px, "Pixels per matrix cell")->capture_default_str();

  std::string ckpt_in;
  bool with_values = false;
  auto* ckpt = exp->add_subcommand("checkpoint", "Dump a checkpoint as JSON");
  ckpt->add_option("file", ckpt_in, "Checkpoint file")->required()->check(CLI::ExistingFile);
  ckpt->add_flag("--values", with_values, "Include parameter values");

  vitfl::SyntheticSpec syn;
  std::string syn_out;
  auto* synth = exp->add_subcommand("synthetic", "Write a synthetic dataset dump");
  synth->add_option("out", syn_out, "Output file")->required();
  synth->add_option("--num-classes", syn.num_classes)->capture_default_str();
  synth->add_option("--per-class", syn.per_class)->capture_default_str();
  synth->add_option("--seed", syn.seed)->capture_default_str();
  synth->add_option("--height", syn.height)->capture_default_str();
  synth->add_option("--width", syn.width)->capture_default_str();

  std::string cfg_in;
  auto* cfgx = exp->add_subcommand("config", "Print a config with every default filled in");
  cfgx->add_option("config", cfg_in, "Experiment config file")->required()->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) return do_run(config_path, output_dir, threads, stop_after, quiet);
    if (*analyze) return do_analyze(run_dir, epochs, layer, cell_px);
    if (*verify) return do_verify(suites, seeds, fault);
    if (*heat) {
      vitfl::write_pgm(pgm_out, vitfl::read_cka_csv(csv_in), cell_px);
      return 0;
    }
    if (*ckpt) return do_export_checkpoint(ckpt_in, with_values);
    if (*synth) {
      vitfl::save_synthetic(syn_out, syn, vitfl::generate_synthetic(syn));
      return 0;
    }
    if (*cfgx) {
      std::cout << vitfl::serialize_config(vitfl::parse_config_file(cfg_in));
      return 0;
    }
  } catch (const vitfl::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
