// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end: train runs experiments (Algorithm 1 plus the DDP
// and DiLoCo baselines), cost evaluates the analytic FLOPs/memory/comm
// models, compare tabulates finished runs, checkpoint-inspect dumps a
// checkpoint header.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "slicesim/config.hpp"
#include "slicesim/orchestrator.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitConfig = 2;
constexpr int kExitDiverged = 3;

std::string dump_sorted(const json& j) { return j.dump(2) + "\n"; }

json summary_json(const slicesim::LoadedExperiment& loaded, const slicesim::RunResult& result) {
  json s;
  s["status"] = result.diverged ? "diverged" : (result.completed ? "completed" : "partial");
  if (result.diverged) {
    s["divergence"] = {{"round", result.divergence.round},
                       {"step", result.divergence.step},
                       {"node", result.divergence.node},
                       {"loss", result.divergence.loss},
                       {"what", result.divergence.what}};
  }
  s["final_eval_loss"] = result.final_eval_loss;
  s["final_eval_perplexity"] = result.final_eval_perplexity;
  s["tokens"] = result.total_tokens;
  s["sim_comm_s"] = result.sim_comm_s;
  s["sim_comp_s"] = result.sim_comp_s;
  json rounds = json::array();
  for (const auto& r : result.metrics.rounds) {
    rounds.push_back({{"round", r.round},
                      {"mean_train_loss", r.mean_train_loss},
                      {"eval_loss", r.eval_loss},
                      {"eval_perplexity", r.eval_perplexity},
                      {"tokens", r.tokens}});
  }
  s["rounds"] = std::move(rounds);
  s["model"] = slicesim::model_config_to_json(loaded.exp.model);
  s["algorithm"] = slicesim::algorithm_name(loaded.exp.run.algorithm);
  s["seed"] = loaded.exp.seed;
  s["config"] = loaded.resolved;
  return s;
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& overrides,
              int threads, const std::string& resume_path) {
  const slicesim::LoadedExperiment loaded = slicesim::load_experiment(config_path, overrides);
  const fs::path outdir(loaded.exp.output_dir);
  fs::create_directories(outdir);
  const std::string resolved = dump_sorted(loaded.resolved);
  slicesim::write_file_atomic((outdir / "config.resolved.json").string(), resolved);

  slicesim::Trainer trainer(loaded.exp, threads, resolved);
  if (!resume_path.empty()) {
    trainer.load_checkpoint(resume_path);
    std::printf("resumed from %s at step %llu\n", resume_path.c_str(),
                static_cast<unsigned long long>(trainer.completed_steps()));
  }

  slicesim::RunResult result;
  const int every = loaded.exp.run.checkpoint_every_rounds;
  if (every > 0) {
    const int total_rounds = loaded.exp.run.rounds;
    int next = static_cast<int>(trainer.completed_steps()) / loaded.exp.run.local_steps + every;
    for (; next < total_rounds; next += every) {
      result = trainer.run(next);
      if (result.diverged) break;
      trainer.save_checkpoint((outdir / ("checkpoint_round_" + std::to_string(next) + ".bin")).string());
    }
  }
  if (!result.diverged) result = trainer.run();

  slicesim::write_file_atomic((outdir / "metrics.csv").string(), result.metrics.to_csv());
  trainer.save_checkpoint((outdir / "checkpoint.bin").string());
  slicesim::write_file_atomic((outdir / "summary.json").string(),
                              dump_sorted(summary_json(loaded, result)));

  for (const auto& r : result.metrics.rounds) {
    std::printf("round %llu/%d  train_loss %.4f  eval_loss %.4f  ppl %.3f  tokens %llu\n",
                static_cast<unsigned long long>(r.round), loaded.exp.run.rounds,
                r.mean_train_loss, r.eval_loss, r.eval_perplexity,
                static_cast<unsigned long long>(r.tokens));
  }
  if (result.diverged) {
    std::fprintf(stderr, "run diverged at round %llu step %llu node %d: %s\n",
                 static_cast<unsigned long long>(result.divergence.round),
                 static_cast<unsigned long long>(result.divergence.step), result.divergence.node,
                 result.divergence.what.c_str());
    return kExitDiverged;
  }
  std::printf("done: eval_loss %.6f  perplexity %.4f  outputs in %s\n", result.final_eval_loss,
              result.final_eval_perplexity, outdir.string().c_str());
  return kExitOk;
}

std::vector<double> parse_sweep_values(const std::string& sweep) {
  const std::string prefix = "bandwidth=";
  if (sweep.rfind(prefix, 0) != 0)
    throw slicesim::ConfigError("--sweep supports 'bandwidth=v1,v2,...'");
  std::vector<double> values;
  std::stringstream ss(sweep.substr(prefix.size()));
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    values.push_back(std::stod(item));
  }
  if (values.empty()) throw slicesim::ConfigError("--sweep got no bandwidth values");
  return values;
}

int cmd_cost(const std::string& config_path, const std::vector<std::string>& overrides,
             const std::string& sweep) {
  const slicesim::LoadedExperiment loaded = slicesim::load_experiment(config_path, overrides);
  if (loaded.cost.empty())
    throw slicesim::ConfigError("config has no 'cost' section for the cost command");
  const json report = slicesim::build_cost_report(loaded.exp.model, loaded.cost);
  const fs::path outdir(loaded.exp.output_dir);
  fs::create_directories(outdir);
  slicesim::write_file_atomic((outdir / "cost_report.json").string(), dump_sorted(report));
  std::cout << dump_sorted(report);
  if (!sweep.empty()) {
    const std::string csv =
        slicesim::build_bandwidth_sweep_csv(loaded.cost, parse_sweep_values(sweep));
    slicesim::write_file_atomic((outdir / "sweep.csv").string(), csv);
    std::printf("sweep written to %s\n", (outdir / "sweep.csv").string().c_str());
  }
  return kExitOk;
}

int cmd_compare(const std::vector<std::string>& config_paths, const std::string& csv_out) {
  std::vector<json> summaries;
  std::vector<std::string> names;
  for (const std::string& path : config_paths) {
    const slicesim::LoadedExperiment loaded = slicesim::load_experiment(path, {});
    const fs::path summary_path = fs::path(loaded.exp.output_dir) / "summary.json";
    if (!fs::exists(summary_path))
      throw slicesim::IoError("no summary.json under " + loaded.exp.output_dir +
                              " (run `slicesim train " + path + "` first)");
    summaries.push_back(json::parse(slicesim::read_file(summary_path.string())));
    names.push_back(fs::path(path).stem().string());
  }
  for (std::size_t i = 1; i < summaries.size(); ++i) {
    if (summaries[i]["model"] != summaries[0]["model"])
      throw slicesim::ConfigError("refusing to compare runs with different model configs: '" +
                                  names[0] + "' vs '" + names[i] + "'");
  }

  std::string csv = "name,algorithm,status,final_eval_loss,final_eval_perplexity,tokens\n";
  std::printf("%-24s %-16s %-10s %-16s %-16s %-12s\n", "name", "algorithm", "status", "eval_loss",
              "perplexity", "tokens");
  char buf[512];
  for (std::size_t i = 0; i < summaries.size(); ++i) {
    const json& s = summaries[i];
    const double loss = s.value("final_eval_loss", 0.0);
    const double ppl = s.value("final_eval_perplexity", 0.0);
    const std::uint64_t tokens = s.value("tokens", 0ull);
    const std::string algo = s.value("algorithm", "?");
    const std::string status = s.value("status", "?");
    std::printf("%-24s %-16s %-10s %-16.6f %-16.4f %-12llu\n", names[i].c_str(), algo.c_str(),
                status.c_str(), loss, ppl, static_cast<unsigned long long>(tokens));
    std::snprintf(buf, sizeof(buf), "%s,%s,%s,%.17g,%.17g,%llu\n", names[i].c_str(), algo.c_str(),
                  status.c_str(), loss, ppl, static_cast<unsigned long long>(tokens));
    csv += buf;
  }
  if (!csv_out.empty()) slicesim::write_file_atomic(csv_out, csv);
  return kExitOk;
}

int cmd_checkpoint_inspect(const std::string& path) {
  std::cout << dump_sorted(slicesim::checkpoint_inspect_json(path));
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"slicesim: low-communication data-parallel training simulator"};
  app.require_subcommand(1);

  std::string config_path, resume_path, sweep, csv_out;
  std::vector<std::string> overrides, compare_paths;
  int threads = static_cast<int>(std::thread::hardware_concurrency());
  if (threads < 1) threads = 1;

  CLI::App* train = app.add_subcommand("train", "run a training experiment");
  train->add_option("config", config_path, "experiment config JSON")->required();
  train->add_option("--set", overrides, "override config values (path.to.key=value)");
  train->add_option("--threads", threads, "worker threads for node simulation");
  train->add_option("--resume", resume_path, "resume from a checkpoint file");
  train->add_option("--seed", [&overrides](const std::vector<std::string>& v) {
    overrides.push_back("seed=" + v[0]);
    return true;
  }, "override the experiment seed");
  train->add_option("--output-dir", [&overrides](const std::vector<std::string>& v) {
    overrides.push_back("output_dir=" + v[0]);
    return true;
  }, "override the output directory");
  train->add_option("--rounds", [&overrides](const std::vector<std::string>& v) {
    overrides.push_back("run.rounds=" + v[0]);
    return true;
  }, "override run.rounds");
  train->add_option("--algorithm", [&overrides](const std::vector<std::string>& v) {
    overrides.push_back("run.algorithm=" + v[0]);
    return true;
  }, "override run.algorithm");

  CLI::App* cost = app.add_subcommand("cost", "evaluate the analytic cost models");
  cost->add_option("config", config_path, "experiment config JSON with a cost section")
      ->required();
  cost->add_option("--set", overrides, "override config values (path.to.key=value)");
  cost->add_option("--sweep", sweep, "emit sweep.csv, e.g. bandwidth=1e8,1e9,2.875e9");

  CLI::App* compare = app.add_subcommand("compare", "compare finished runs side by side");
  compare->add_option("configs", compare_paths, "experiment configs of finished runs")
      ->required()
      ->expected(-1);
  compare->add_option("--csv", csv_out, "also write the comparison as CSV");

  CLI::App* inspect = app.add_subcommand("checkpoint-inspect", "print checkpoint metadata");
  inspect->add_option("path", config_path, "checkpoint file")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) return cmd_train(config_path, overrides, threads, resume_path);
    if (cost->parsed()) return cmd_cost(config_path, overrides, sweep);
    if (compare->parsed()) return cmd_compare(compare_paths, csv_out);
    if (inspect->parsed()) return cmd_checkpoint_inspect(config_path);
  } catch (const slicesim::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitError;
  }
  return kExitError;
}
