// SPDX-License-Identifier: Apache-2.0
//
// End-to-end tests against the built command-line binary.
#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "slicesim/binio.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CliResult {
  int exit_code;
  std::string out;  // stdout + stderr
};

fs::path work_dir() {
  static fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / "slicesim_cli_tests";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

CliResult run_cli(const std::string& args) {
  const fs::path log = work_dir() / "cli_output.log";
  const std::string cmd =
      std::string(SLICESIM_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int rc = std::system(cmd.c_str());
  CliResult r;
  r.exit_code = WEXITSTATUS(rc);
  r.out = slicesim::read_file(log.string());
  return r;
}

void write_tiny_config(const fs::path& path, const std::string& out_dir,
                       const std::string& algorithm = "partial-updates", int slices = 2,
                       int hidden = 32) {
  json j = {
      {"schema_version", 1},
      {"seed", 11},
      {"output_dir", out_dir},
      {"model",
       {{"num_layers", 2}, {"hidden_dim", hidden}, {"num_heads", 4}, {"vocab_size", 32},
        {"seq_len", 16}}},
      {"data", {{"generator", "markov2"}, {"num_sequences", 560}, {"seed", 5}}},
      {"run",
       {{"algorithm", algorithm},
        {"nodes", 4},
        {"slices", slices},
        {"local_steps", 5},
        {"rounds", 3},
        {"per_node_batch", 4},
        {"inner", {{"optimizer", "adamw"}, {"peak_lr", 0.003}, {"warmup_frac", 0.1}}},
        {"eval_sequences", 48},
        {"eval_batch", 8}}}};
  std::ofstream f(path);
  f << j.dump(2);
}

}  // namespace

TEST_CASE("train produces deterministic outputs and a complete summary") {
  const fs::path cfg = work_dir() / "tiny.json";
  write_tiny_config(cfg, (work_dir() / "out_a").string());
  const CliResult r = run_cli("train " + cfg.string() + " --threads 2");
  INFO(r.out);
  REQUIRE(r.exit_code == 0);
  REQUIRE(fs::exists(work_dir() / "out_a" / "metrics.csv"));
  REQUIRE(fs::exists(work_dir() / "out_a" / "checkpoint.bin"));
  REQUIRE(fs::exists(work_dir() / "out_a" / "config.resolved.json"));
  const json summary = json::parse(slicesim::read_file((work_dir() / "out_a" / "summary.json").string()));
  REQUIRE(summary["status"] == "completed");
  REQUIRE(summary["rounds"].size() == 3);
  REQUIRE(summary["tokens"] > 0);

  // identical rerun into another directory gives byte-identical metrics
  const fs::path cfg_b = work_dir() / "tiny_b.json";
  write_tiny_config(cfg_b, (work_dir() / "out_b").string());
  const CliResult r2 = run_cli("train " + cfg_b.string() + " --threads 1");
  REQUIRE(r2.exit_code == 0);
  REQUIRE(slicesim::read_file((work_dir() / "out_a" / "metrics.csv").string()) ==
          slicesim::read_file((work_dir() / "out_b" / "metrics.csv").string()));

  // CSV dialect: header row, comma separated, LF endings
  const std::string csv = slicesim::read_file((work_dir() / "out_a" / "metrics.csv").string());
  REQUIRE(csv.rfind("round,step,node,loss,tokens,sim_comm_s,sim_comp_s\n", 0) == 0);
  REQUIRE(csv.find('\r') == std::string::npos);
}

TEST_CASE("invalid configurations fail with the violated rule named") {
  const fs::path cfg = work_dir() / "bad.json";
  write_tiny_config(cfg, (work_dir() / "out_bad").string());
  const CliResult r = run_cli("train " + cfg.string() + " --set run.nodes=5");
  REQUIRE(r.exit_code == 2);
  REQUIRE(r.out.find("K is a multiple of N") != std::string::npos);

  const CliResult r2 = run_cli("train " + cfg.string() + " --set run.global_batch=999");
  REQUIRE(r2.exit_code == 2);
  REQUIRE(r2.out.find("global batch") != std::string::npos);

  const CliResult r3 = run_cli("train " + (work_dir() / "missing.json").string());
  REQUIRE(r3.exit_code != 0);
}

TEST_CASE("flags override config-file values") {
  const fs::path cfg = work_dir() / "tiny_override.json";
  write_tiny_config(cfg, (work_dir() / "out_override").string());
  const CliResult r =
      run_cli("train " + cfg.string() + " --set run.rounds=1 --set seed=99 --threads 2");
  REQUIRE(r.exit_code == 0);
  const json resolved = json::parse(
      slicesim::read_file((work_dir() / "out_override" / "config.resolved.json").string()));
  REQUIRE(resolved["run"]["rounds"] == 1);
  REQUIRE(resolved["seed"] == 99);
  const json summary =
      json::parse(slicesim::read_file((work_dir() / "out_override" / "summary.json").string()));
  REQUIRE(summary["rounds"].size() == 1);
}

TEST_CASE("the output root environment variable relocates relative output dirs") {
  const fs::path cfg = work_dir() / "tiny_env.json";
  write_tiny_config(cfg, "rooted_run");
  const fs::path root = work_dir() / "env_root";
  const std::string cmd = "SLICESIM_OUTPUT_ROOT=" + root.string() + " " +
                          std::string(SLICESIM_CLI_PATH) + " train " + cfg.string() +
                          " --set run.rounds=1 > /dev/null 2>&1";
  REQUIRE(WEXITSTATUS(std::system(cmd.c_str())) == 0);
  REQUIRE(fs::exists(root / "rooted_run" / "summary.json"));
}

TEST_CASE("cost reproduces the communication pair and the flops ratio") {
  const CliResult r = run_cli("cost /root/proj/configs/paper_cost.json --set output_dir=" +
                              (work_dir() / "cost_out").string());
  INFO(r.out);
  REQUIRE(r.exit_code == 0);
  const json report =
      json::parse(slicesim::read_file((work_dir() / "cost_out" / "cost_report.json").string()));
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.3g", report["comm"]["t_comm_s"].get<double>());
  REQUIRE(std::string(buf) == "1.75");
  std::snprintf(buf, sizeof(buf), "%.3g", report["comm"]["t_comm_amortized_s"].get<double>());
  REQUIRE(std::string(buf) == "0.0175");
  const double ratio = report["flops_ratio"]["ratio"].get<double>();
  REQUIRE(ratio > 0.82);
  REQUIRE(ratio < 0.88);
  REQUIRE(report["memory"]["total_gb"].get<double>() ==
          Catch::Approx(14.87).epsilon(0.05));
  REQUIRE(report["trainable"]["trainable_params"].get<double>() ==
          Catch::Approx(0.87e9).epsilon(0.02));
}

TEST_CASE("cost sweep emits one row per bandwidth point") {
  const CliResult r = run_cli("cost /root/proj/configs/paper_cost.json --set output_dir=" +
                              (work_dir() / "sweep_out").string() +
                              " --sweep bandwidth=1e8,1e9,2.875e9");
  REQUIRE(r.exit_code == 0);
  const std::string csv = slicesim::read_file((work_dir() / "sweep_out" / "sweep.csv").string());
  int lines = 0;
  for (char c : csv)
    if (c == '\n') ++lines;
  REQUIRE(lines == 4);  // header + 3 points
  REQUIRE(csv.rfind("bandwidth,", 0) == 0);
}

TEST_CASE("cost without a cost section is a config error") {
  const fs::path cfg = work_dir() / "nocost.json";
  write_tiny_config(cfg, (work_dir() / "out_nocost").string());
  const CliResult r = run_cli("cost " + cfg.string());
  REQUIRE(r.exit_code == 2);
  REQUIRE(r.out.find("cost") != std::string::npos);
}

TEST_CASE("compare tabulates finished runs and refuses mismatched models") {
  const fs::path cfg1 = work_dir() / "cmp_pu.json";
  const fs::path cfg2 = work_dir() / "cmp_ddp.json";
  write_tiny_config(cfg1, (work_dir() / "cmp_out_pu").string(), "partial-updates", 2);
  write_tiny_config(cfg2, (work_dir() / "cmp_out_ddp").string(), "ddp", 1);
  REQUIRE(run_cli("train " + cfg1.string()).exit_code == 0);
  REQUIRE(run_cli("train " + cfg2.string()).exit_code == 0);

  const fs::path csv = work_dir() / "compare.csv";
  const CliResult r =
      run_cli("compare " + cfg1.string() + " " + cfg2.string() + " --csv " + csv.string());
  INFO(r.out);
  REQUIRE(r.exit_code == 0);
  REQUIRE(r.out.find("partial-updates") != std::string::npos);
  REQUIRE(r.out.find("ddp") != std::string::npos);
  const std::string table = slicesim::read_file(csv.string());
  REQUIRE(table.rfind("name,algorithm,status,", 0) == 0);

  // mismatched model configs are refused with an explanation
  const fs::path cfg3 = work_dir() / "cmp_wide.json";
  write_tiny_config(cfg3, (work_dir() / "cmp_out_wide").string(), "ddp", 1, /*hidden=*/16);
  REQUIRE(run_cli("train " + cfg3.string()).exit_code == 0);
  const CliResult bad = run_cli("compare " + cfg1.string() + " " + cfg3.string());
  REQUIRE(bad.exit_code == 2);
  REQUIRE(bad.out.find("different model configs") != std::string::npos);

  // comparing an untrained config points at the missing summary
  const fs::path cfg4 = work_dir() / "cmp_untrained.json";
  write_tiny_config(cfg4, (work_dir() / "cmp_out_untrained").string());
  const CliResult missing = run_cli("compare " + cfg1.string() + " " + cfg4.string());
  REQUIRE(missing.exit_code == 1);
  REQUIRE(missing.out.find("summary.json") != std::string::npos);

  // empty input list is a usage error
  const CliResult empty = run_cli("compare");
  REQUIRE(empty.exit_code != 0);
}

TEST_CASE("checkpoint-inspect prints the shape table and progress") {
  const fs::path cfg = work_dir() / "tiny_ck.json";
  write_tiny_config(cfg, (work_dir() / "out_ck").string());
  REQUIRE(run_cli("train " + cfg.string()).exit_code == 0);
  const CliResult r =
      run_cli("checkpoint-inspect " + (work_dir() / "out_ck" / "checkpoint.bin").string());
  REQUIRE(r.exit_code == 0);
  const json j = json::parse(r.out);
  REQUIRE(j["step"] == 15);
  REQUIRE(j["algorithm"] == "partial-updates");
  REQUIRE(j["tensors"].size() > 0);
}

TEST_CASE("train resumes from a checkpoint") {
  const fs::path cfg = work_dir() / "tiny_resume.json";
  write_tiny_config(cfg, (work_dir() / "out_resume_a").string());
  REQUIRE(run_cli("train " + cfg.string()).exit_code == 0);

  const fs::path cfg2 = work_dir() / "tiny_resume_b.json";
  write_tiny_config(cfg2, (work_dir() / "out_resume_b").string());
  const std::string every = " --set run.checkpoint_every_rounds=1";
  REQUIRE(run_cli("train " + cfg2.string() + every).exit_code == 0);
  const std::string full_ck =
      slicesim::read_file((work_dir() / "out_resume_b" / "checkpoint.bin").string());

  // periodic checkpointing does not perturb the trajectory: both configs see
  // the same final eval loss (checkpoint bytes differ only by the embedded
  // config echo)
  const json sum_a =
      json::parse(slicesim::read_file((work_dir() / "out_resume_a" / "summary.json").string()));
  const json sum_b =
      json::parse(slicesim::read_file((work_dir() / "out_resume_b" / "summary.json").string()));
  REQUIRE(sum_a["final_eval_loss"] == sum_b["final_eval_loss"]);

  // resuming the same config from a mid-run checkpoint reproduces the final
  // state byte for byte
  const CliResult resumed =
      run_cli("train " + cfg2.string() + every + " --resume " +
              (work_dir() / "out_resume_b" / "checkpoint_round_2.bin").string());
  INFO(resumed.out);
  REQUIRE(resumed.exit_code == 0);
  REQUIRE(slicesim::read_file((work_dir() / "out_resume_b" / "checkpoint.bin").string()) ==
          full_ck);

  // resuming under a different experiment config is refused
  const CliResult wrong =
      run_cli("train " + cfg.string() + " --resume " +
              (work_dir() / "out_resume_b" / "checkpoint_round_2.bin").string());
  REQUIRE(wrong.exit_code == 1);
  REQUIRE(wrong.out.find("different experiment config") != std::string::npos);
}

TEST_CASE("the bundled smoke config trains to completion") {
  const CliResult r = run_cli("train /root/proj/configs/smoke.json --set output_dir=" +
                              (work_dir() / "smoke_out").string() + " --threads 2");
  INFO(r.out);
  REQUIRE(r.exit_code == 0);
  const json summary =
      json::parse(slicesim::read_file((work_dir() / "smoke_out" / "summary.json").string()));
  REQUIRE(summary["status"] == "completed");
  // the toy task is actually learned: well below the uniform baseline ln(64)
  REQUIRE(summary["final_eval_loss"].get<double>() < 3.5);
}
