// coopertrim command-line driver: run, train, experiment, verify.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "coopertrim/coopertrim.hpp"

namespace fs = std::filesystem;
using namespace coopertrim;

namespace {

std::ofstream open_output(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  return out;
}

Checkpoint load_checkpoint(const std::string& path) {
  if (!fs::exists(path)) throw Error("checkpoint " + path + " not found (run `coopertrim train` first)");
  return decode_checkpoint(read_bytes(path));
}

int cmd_run(const std::string& scenario_path, const std::string& checkpoint_path, const std::string& out_dir,
            const std::string& config_path) {
  const Scenario sc = generate_scenario(load_scenario(scenario_path));
  const Checkpoint ck = load_checkpoint(checkpoint_path);
  const EpisodeConfig cfg = config_path.empty() ? EpisodeConfig{} : load_run_config(config_path).episode;
  const EpisodeMetrics m = run_episode(sc, ck.model, cfg);

  const fs::path csv = fs::path(out_dir) / "episode.csv";
  auto out = open_output(csv);
  write_episode_csv(out, m);
  const auto rho = adaptation_correlation(m, sc);
  std::printf("frames %zu  mean fraction %.4f  mean bandwidth %.3f Mbps  IoU %.4f  adaptation %s\n",
              m.frames.size(), m.mean_fraction(), m.mean_bandwidth(), m.aggregate_iou(),
              rho ? format_double(*rho).c_str() : "undefined");
  std::printf("wrote %s\n", csv.string().c_str());
  return 0;
}

int cmd_train(const std::string& config_path, std::string checkpoint, std::string out_dir) {
  const RunConfig rc = load_run_config(config_path);
  if (checkpoint.empty()) checkpoint = rc.checkpoint;
  if (out_dir.empty()) out_dir = rc.out_dir;
  if (rc.training_scenarios.empty()) throw ValidationError(config_path + ": no training_scenarios");

  std::vector<TrainingEpisode> episodes;
  for (const auto& s : rc.training_scenarios) {
    episodes.push_back(prepare_training_episode(generate_scenario(s), rc.episode.blend));
  }
  Model model = Model::initialize(rc.model, rc.model_seed);
  const TrainResult res = train(model, episodes, rc.training, [](const EpochMetrics& e) {
    std::printf("epoch %3zu  task %.5f  fraction %.4f  lambda %.6g\n", e.epoch, e.task_loss, e.fraction_selected,
                e.lambda);
    std::fflush(stdout);
  });

  if (fs::path(checkpoint).has_parent_path()) fs::create_directories(fs::path(checkpoint).parent_path());
  write_bytes(checkpoint, encode_checkpoint({model, res.lagrange}));
  const fs::path csv = fs::path(out_dir) / "training.csv";
  auto out = open_output(csv);
  write_epoch_csv(out, res.epochs);
  std::printf("wrote %s and %s\n", checkpoint.c_str(), csv.string().c_str());
  return 0;
}

int cmd_experiment(const std::string& name, const std::string& config_path, std::string checkpoint,
                   std::string out_dir) {
  if (!is_experiment_name(name)) {
    throw ValidationError("unknown experiment \"" + name +
                          "\" (expected adaptation, loss_sweep, latency_sweep or compression_sweep)");
  }
  const RunConfig rc = load_run_config(config_path);
  if (checkpoint.empty()) checkpoint = rc.checkpoint;
  if (out_dir.empty()) out_dir = rc.out_dir;
  const Checkpoint ck = load_checkpoint(checkpoint);
  const Scenario sc = generate_scenario(rc.evaluation_scenario);
  const ExperimentResult result = experiment_suite(name, sc, ck.model, rc.episode);

  const fs::path csv = fs::path(out_dir) / (name + ".csv");
  auto out = open_output(csv);
  write_experiment_csv(out, result);
  for (const auto& r : result.rows) {
    if (r.kind == "frame") continue;
    std::printf("%-28s %-14s %s\n", r.setting.c_str(), r.kind.c_str(),
                r.value ? format_double(*r.value).c_str() : "undefined");
  }
  std::printf("wrote %s\n", csv.string().c_str());
  return 0;
}

int cmd_verify() {
  bool all = true;
  for (const auto& c : run_self_checks()) {
    std::printf("%s %s: %s\n", c.passed ? "PASS" : "FAIL", c.name.c_str(), c.detail.c_str());
    all = all && c.passed;
  }
  return all ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Uncertainty- and relevance-driven feature sharing simulator"};
  app.require_subcommand(1);

  std::string scenario, checkpoint, out_dir, config, name;

  auto* run = app.add_subcommand("run", "Run one episode of a scenario with a trained checkpoint");
  run->add_option("--scenario", scenario, "Scenario file")->required()->check(CLI::ExistingFile);
  run->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  run->add_option("--out", out_dir, "Output directory")->required();
  run->add_option("--config", config, "Run config supplying episode/network settings")->check(CLI::ExistingFile);

  auto* tr = app.add_subcommand("train", "Train selection parameters");
  tr->add_option("--config", config, "Run config file")->required()->check(CLI::ExistingFile);
  tr->add_option("--checkpoint", checkpoint, "Override the checkpoint path");
  tr->add_option("--out", out_dir, "Override the output directory");

  auto* ex = app.add_subcommand("experiment", "Run a named sweep and write its CSV");
  ex->add_option("name", name, "adaptation, loss_sweep, latency_sweep or compression_sweep")->required();
  ex->add_option("--config", config, "Run config file")->required()->check(CLI::ExistingFile);
  ex->add_option("--checkpoint", checkpoint, "Override the checkpoint path");
  ex->add_option("--out", out_dir, "Override the output directory");

  auto* ve = app.add_subcommand("verify", "Gradient, bias-law, wire and quantile self-checks");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) return cmd_run(scenario, checkpoint, out_dir, config);
    if (*tr) return cmd_train(config, checkpoint, out_dir);
    if (*ex) return cmd_experiment(name, config, checkpoint, out_dir);
    if (*ve) return cmd_verify();
  } catch (const std::exception& e) {
    std::fprintf(stderr, "coopertrim: %s\n", e.what());
    return 1;
  }
  return 0;
}
