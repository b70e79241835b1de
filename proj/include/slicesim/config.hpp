// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdlib>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "slicesim/binio.hpp"
#include "slicesim/costmodel.hpp"
#include "slicesim/errors.hpp"
#include "slicesim/orchestrator.hpp"

namespace slicesim {

namespace cfgdetail {

using nlohmann::json;

inline void reject_unknown(const json& obj, const std::string& where,
                           const std::set<std::string>& allowed) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (!allowed.count(it.key()))
      throw ConfigError("unknown field '" + it.key() + "' in '" + where + "'");
  }
}

template <typename T>
T get_or(const json& obj, const std::string& key, T fallback) {
  if (!obj.contains(key)) return fallback;
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("field '" + key + "' has the wrong type");
  }
}

}  // namespace cfgdetail

// ---------------------------------------------------------------------------
// Experiment config <-> JSON
// ---------------------------------------------------------------------------

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  using cfgdetail::get_or;
  cfgdetail::reject_unknown(j, "model",
                            {"num_layers", "hidden_dim", "num_heads", "ffn_dim", "vocab_size",
                             "seq_len", "positional_encoding"});
  ModelConfig m;
  m.num_layers = get_or(j, "num_layers", m.num_layers);
  m.hidden_dim = get_or(j, "hidden_dim", m.hidden_dim);
  m.num_heads = get_or(j, "num_heads", m.num_heads);
  m.ffn_dim = get_or(j, "ffn_dim", m.ffn_dim);
  m.vocab_size = get_or(j, "vocab_size", m.vocab_size);
  m.seq_len = get_or(j, "seq_len", m.seq_len);
  const std::string pe = get_or<std::string>(j, "positional_encoding", "learned-absolute");
  if (pe != "learned-absolute")
    throw ConfigError("model.positional_encoding supports only 'learned-absolute'");
  return m;
}

inline nlohmann::json model_config_to_json(const ModelConfig& m) {
  return {{"num_layers", m.num_layers}, {"hidden_dim", m.hidden_dim},
          {"num_heads", m.num_heads},   {"ffn_dim", m.ffn()},
          {"vocab_size", m.vocab_size}, {"seq_len", m.seq_len},
          {"positional_encoding", "learned-absolute"}};
}

inline ExperimentConfig experiment_from_json(const nlohmann::json& j) {
  using cfgdetail::get_or;
  cfgdetail::reject_unknown(
      j, "<root>", {"schema_version", "seed", "output_dir", "model", "data", "run", "cost"});
  ExperimentConfig e;
  e.schema_version = get_or(j, "schema_version", 1);
  if (e.schema_version != 1) throw ConfigError("unsupported schema_version (expected 1)");
  e.seed = get_or<std::uint64_t>(j, "seed", 1);
  e.output_dir = get_or<std::string>(j, "output_dir", "runs/out");
  if (j.contains("model")) e.model = model_config_from_json(j.at("model"));

  if (j.contains("data")) {
    const auto& d = j.at("data");
    cfgdetail::reject_unknown(d, "data",
                              {"generator", "num_sequences", "seed", "vocab_size", "seq_len"});
    e.data.generator = generator_from_name(get_or<std::string>(d, "generator", "markov2"));
    e.data.num_sequences = get_or(d, "num_sequences", e.data.num_sequences);
    e.data.seed = get_or<std::uint64_t>(d, "seed", e.data.seed);
    e.data.vocab_size = get_or(d, "vocab_size", e.model.vocab_size);
    e.data.seq_len = get_or(d, "seq_len", e.model.seq_len);
  } else {
    e.data.vocab_size = e.model.vocab_size;
    e.data.seq_len = e.model.seq_len;
  }

  if (j.contains("run")) {
    const auto& r = j.at("run");
    cfgdetail::reject_unknown(
        r, "run",
        {"algorithm", "nodes", "slices", "local_steps", "rounds", "per_node_batch", "global_batch",
         "strategy", "backward_mode", "sync_grouping", "layer_group_size", "inner", "outer",
         "inner_state_persists", "eval_sequences", "eval_batch", "checkpoint_every_rounds",
         "divergence_threshold", "sim"});
    RunConfig& rc = e.run;
    rc.algorithm = algorithm_from_name(get_or<std::string>(r, "algorithm", "partial-updates"));
    rc.nodes = get_or(r, "nodes", rc.nodes);
    rc.slices = get_or(r, "slices", rc.slices);
    rc.local_steps = get_or(r, "local_steps", rc.local_steps);
    rc.rounds = get_or(r, "rounds", rc.rounds);
    rc.per_node_batch = get_or(r, "per_node_batch", rc.per_node_batch);
    if (r.contains("global_batch")) {
      const int gb = r.at("global_batch").get<int>();
      if (gb != rc.nodes * rc.per_node_batch)
        throw ConfigError(
            "global batch = K x per-node batch: run.global_batch must equal nodes * "
            "per_node_batch");
    }
    rc.strategy = slice_strategy_from_name(get_or<std::string>(r, "strategy", "mlp-only"));
    const std::string bm = get_or<std::string>(r, "backward_mode", "full-jacobian");
    if (bm == "full-jacobian") rc.backward_mode = BackwardModeKind::kFullJacobian;
    else if (bm == "detach-all-but-k") rc.backward_mode = BackwardModeKind::kDetachAllButK;
    else if (bm == "detach-k-plus-random") rc.backward_mode = BackwardModeKind::kDetachKPlusRandom;
    else throw ConfigError("unknown backward_mode: " + bm);
    rc.sync_grouping = sync_grouping_from_name(get_or<std::string>(r, "sync_grouping", "all-at-once"));
    rc.layer_group_size = get_or(r, "layer_group_size", rc.layer_group_size);
    if (r.contains("inner")) {
      const auto& in = r.at("inner");
      cfgdetail::reject_unknown(in, "run.inner",
                                {"optimizer", "peak_lr", "lr_floor", "warmup_frac", "warmup_steps",
                                 "beta1", "beta2", "eps", "weight_decay"});
      rc.inner.kind = inner_opt_from_name(get_or<std::string>(in, "optimizer", "adamw"));
      rc.inner.peak_lr = get_or(in, "peak_lr", rc.inner.peak_lr);
      rc.inner.lr_floor = get_or(in, "lr_floor", rc.inner.lr_floor);
      rc.inner.warmup_frac = get_or(in, "warmup_frac", rc.inner.warmup_frac);
      rc.inner.warmup_steps = get_or<std::int64_t>(in, "warmup_steps", rc.inner.warmup_steps);
      rc.inner.adamw.beta1 = get_or(in, "beta1", rc.inner.adamw.beta1);
      rc.inner.adamw.beta2 = get_or(in, "beta2", rc.inner.adamw.beta2);
      rc.inner.adamw.eps = get_or(in, "eps", rc.inner.adamw.eps);
      rc.inner.adamw.weight_decay = get_or(in, "weight_decay", rc.inner.adamw.weight_decay);
    }
    if (r.contains("outer")) {
      const auto& out = r.at("outer");
      cfgdetail::reject_unknown(out, "run.outer", {"optimizer", "lr", "momentum"});
      rc.outer.kind = outer_opt_from_name(get_or<std::string>(out, "optimizer", "nesterov"));
      rc.outer.lr = get_or(out, "lr", rc.outer.lr);
      rc.outer.momentum = get_or(out, "momentum", rc.outer.momentum);
    }
    rc.inner_state_persists = get_or(r, "inner_state_persists", rc.inner_state_persists);
    rc.eval_sequences = get_or(r, "eval_sequences", rc.eval_sequences);
    rc.eval_batch = get_or(r, "eval_batch", rc.eval_batch);
    rc.checkpoint_every_rounds = get_or(r, "checkpoint_every_rounds", rc.checkpoint_every_rounds);
    rc.divergence_threshold = get_or(r, "divergence_threshold", rc.divergence_threshold);
    if (r.contains("sim")) {
      const auto& s = r.at("sim");
      cfgdetail::reject_unknown(s, "run.sim",
                                {"enabled", "bandwidth", "compute_time", "bytes_per_param"});
      rc.sim.enabled = cfgdetail::get_or(s, "enabled", rc.sim.enabled);
      rc.sim.bandwidth = cfgdetail::get_or(s, "bandwidth", rc.sim.bandwidth);
      rc.sim.compute_time = cfgdetail::get_or(s, "compute_time", rc.sim.compute_time);
      rc.sim.bytes_per_param = cfgdetail::get_or(s, "bytes_per_param", rc.sim.bytes_per_param);
    }
  }
  return e;
}

inline nlohmann::json experiment_to_json(const ExperimentConfig& e) {
  nlohmann::json j;
  j["schema_version"] = e.schema_version;
  j["seed"] = e.seed;
  j["output_dir"] = e.output_dir;
  j["model"] = model_config_to_json(e.model);
  j["data"] = {{"generator", generator_name(e.data.generator)},
               {"num_sequences", e.data.num_sequences},
               {"seed", e.data.seed},
               {"vocab_size", e.data.vocab_size},
               {"seq_len", e.data.seq_len}};
  const RunConfig& r = e.run;
  j["run"] = {
      {"algorithm", algorithm_name(r.algorithm)},
      {"nodes", r.nodes},
      {"slices", r.slices},
      {"local_steps", r.local_steps},
      {"rounds", r.rounds},
      {"per_node_batch", r.per_node_batch},
      {"global_batch", r.global_batch()},
      {"strategy", slice_strategy_name(r.strategy)},
      {"backward_mode", backward_mode_name(r.backward_mode)},
      {"sync_grouping", sync_grouping_name(r.sync_grouping)},
      {"layer_group_size", r.layer_group_size},
      {"inner",
       {{"optimizer", inner_opt_name(r.inner.kind)},
        {"peak_lr", r.inner.peak_lr},
        {"lr_floor", r.inner.lr_floor},
        {"warmup_frac", r.inner.warmup_frac},
        {"warmup_steps", r.inner.warmup_steps},
        {"beta1", r.inner.adamw.beta1},
        {"beta2", r.inner.adamw.beta2},
        {"eps", r.inner.adamw.eps},
        {"weight_decay", r.inner.adamw.weight_decay}}},
      {"outer",
       {{"optimizer", outer_opt_name(r.outer.kind)},
        {"lr", r.outer.lr},
        {"momentum", r.outer.momentum}}},
      {"inner_state_persists", r.inner_state_persists},
      {"eval_sequences", r.eval_sequences},
      {"eval_batch", r.eval_batch},
      {"checkpoint_every_rounds", r.checkpoint_every_rounds},
      {"divergence_threshold", r.divergence_threshold},
      {"sim",
       {{"enabled", r.sim.enabled},
        {"bandwidth", r.sim.bandwidth},
        {"compute_time", r.sim.compute_time},
        {"bytes_per_param", r.sim.bytes_per_param}}}};
  return j;
}

// A loaded experiment file: the typed config plus the raw cost block.
struct LoadedExperiment {
  ExperimentConfig exp;
  nlohmann::json cost = nlohmann::json::object();
  nlohmann::json resolved;  // full json after overrides
};

// Dotted-path override, value parsed as JSON when possible ("--set run.rounds=5").
inline void apply_override(nlohmann::json& j, const std::string& path, const std::string& value) {
  nlohmann::json* cur = &j;
  std::size_t start = 0;
  for (;;) {
    const std::size_t dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? dot : dot - start);
    if (key.empty()) throw ConfigError("bad override path: " + path);
    if (dot == std::string::npos) {
      nlohmann::json parsed = nlohmann::json::parse(value, nullptr, false);
      (*cur)[key] = parsed.is_discarded() ? nlohmann::json(value) : parsed;
      return;
    }
    cur = &(*cur)[key];
    start = dot + 1;
  }
}

inline LoadedExperiment load_experiment(const std::string& path,
                                        const std::vector<std::string>& overrides = {}) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
  }
  for (const std::string& ov : overrides) {
    const std::size_t eq = ov.find('=');
    if (eq == std::string::npos) throw ConfigError("override must look like path=value: " + ov);
    apply_override(j, ov.substr(0, eq), ov.substr(eq + 1));
  }
  LoadedExperiment loaded;
  loaded.exp = experiment_from_json(j);
  if (j.contains("cost")) loaded.cost = j.at("cost");
  loaded.exp.validate();

  // Environment override for the output root; relative dirs are placed under it.
  if (const char* root = std::getenv("SLICESIM_OUTPUT_ROOT")) {
    std::filesystem::path out(loaded.exp.output_dir);
    if (out.is_relative()) loaded.exp.output_dir = (std::filesystem::path(root) / out).string();
  }

  loaded.resolved = experiment_to_json(loaded.exp);
  if (!loaded.cost.empty()) loaded.resolved["cost"] = loaded.cost;
  return loaded;
}

// ---------------------------------------------------------------------------
// Cost report assembly (cmd_cost)
// ---------------------------------------------------------------------------

inline FlopsConfig flops_config_from_json(const nlohmann::json& j) {
  using cfgdetail::get_or;
  cfgdetail::reject_unknown(
      j, "cost.flops",
      {"batch", "seq", "hidden", "layers", "ffn", "vocab", "rho_mlp", "rho_attn", "tokens"});
  FlopsConfig f;
  f.batch = get_or(j, "batch", f.batch);
  f.seq = get_or(j, "seq", f.seq);
  f.hidden = get_or(j, "hidden", f.hidden);
  f.layers = get_or(j, "layers", f.layers);
  f.ffn = get_or(j, "ffn", f.ffn);
  f.vocab = get_or(j, "vocab", f.vocab);
  f.rho_mlp = get_or(j, "rho_mlp", f.rho_mlp);
  f.rho_attn = get_or(j, "rho_attn", f.rho_attn);
  return f;
}

inline CommConfig comm_config_from_json(const nlohmann::json& j) {
  using cfgdetail::get_or;
  cfgdetail::reject_unknown(j, "cost.comm",
                            {"payload_bytes", "nodes", "bandwidth", "sync_period", "compute_time",
                             "streaming_groups"});
  CommConfig c;
  c.payload_bytes = get_or(j, "payload_bytes", c.payload_bytes);
  c.nodes = get_or(j, "nodes", c.nodes);
  c.bandwidth = get_or(j, "bandwidth", c.bandwidth);
  c.sync_period = get_or(j, "sync_period", c.sync_period);
  c.compute_time = get_or(j, "compute_time", c.compute_time);
  c.streaming_groups = get_or(j, "streaming_groups", c.streaming_groups);
  return c;
}

// Builds the cost report for a config's cost block. The memory section can
// pull parameter counts from the model block ("from_model": true) through
// the slicing module.
inline nlohmann::json build_cost_report(const ModelConfig& model, const nlohmann::json& cost) {
  using cfgdetail::get_or;
  cfgdetail::reject_unknown(cost, "cost",
                            {"flops", "comparison", "memory", "comm", "wallclock"});
  nlohmann::json report;

  if (cost.contains("flops")) {
    const FlopsConfig f = flops_config_from_json(cost.at("flops"));
    const ForwardFlops fwd = forward_flops(f);
    const BackwardFlops bwd = backward_flops(f);
    report["flops"] = {{"forward", to_json(fwd)},
                       {"backward", to_json(bwd)},
                       {"step_total", fwd.total + bwd.total},
                       {"per_token", flops_per_token(f)}};
  }

  if (cost.contains("comparison")) {
    const auto& cmp = cost.at("comparison");
    cfgdetail::reject_unknown(cmp, "cost.comparison", {"ours", "baseline"});
    const FlopsConfig ours = flops_config_from_json(cmp.at("ours"));
    const FlopsConfig base = flops_config_from_json(cmp.at("baseline"));
    const double tokens_ours = cmp.at("ours").at("tokens").get<double>();
    const double tokens_base = cmp.at("baseline").at("tokens").get<double>();
    report["flops_ratio"] = {
        {"ratio", training_flops_ratio(ours, tokens_ours, base, tokens_base)},
        {"ours_total", flops_per_token(ours) * tokens_ours},
        {"baseline_total", flops_per_token(base) * tokens_base}};
  }

  if (cost.contains("memory")) {
    const auto& m = cost.at("memory");
    cfgdetail::reject_unknown(
        m, "cost.memory",
        {"from_model", "slices", "strategy", "total_params", "trainable_params", "bytes_weights",
         "bytes_grads", "bytes_inner_opt", "bytes_outer_state", "bytes_offloaded",
         "streaming_groups", "outer_policy"});
    MemoryConfig mc;
    if (get_or(m, "from_model", false)) {
      const int slices = get_or(m, "slices", 1);
      const SliceStrategy strat =
          slice_strategy_from_name(get_or<std::string>(m, "strategy", "mlp-only"));
      const SlicePlan plan = build_slice_plan(model, slices, slices, strat);
      const TrainableFraction tf = trainable_fraction(plan);
      mc.total_params = static_cast<double>(plan.layout.total_params());
      mc.trainable_params = static_cast<double>(tf.trainable_param_count);
      report["trainable"] = {{"total_params", plan.layout.total_params()},
                             {"trainable_params", tf.trainable_param_count},
                             {"rho_mlp", tf.rho_mlp},
                             {"rho_attn", tf.rho_attn}};
    } else {
      mc.total_params = m.at("total_params").get<double>();
      mc.trainable_params = get_or(m, "trainable_params", mc.total_params);
    }
    mc.bytes_weights = get_or(m, "bytes_weights", mc.bytes_weights);
    mc.bytes_grads = get_or(m, "bytes_grads", mc.bytes_grads);
    mc.bytes_inner_opt = get_or(m, "bytes_inner_opt", mc.bytes_inner_opt);
    mc.bytes_outer_state = get_or(m, "bytes_outer_state", mc.bytes_outer_state);
    mc.bytes_offloaded = get_or(m, "bytes_offloaded", mc.bytes_offloaded);
    mc.streaming_groups = get_or(m, "streaming_groups", mc.streaming_groups);
    const std::string policy = get_or<std::string>(m, "outer_policy", "streaming");
    if (policy == "ddp") mc.outer_policy = OuterStatePolicy::kNone;
    else if (policy == "streaming") mc.outer_policy = OuterStatePolicy::kStreaming;
    else throw ConfigError("cost.memory.outer_policy must be 'ddp' or 'streaming'");
    report["memory"] = to_json(memory_estimate(mc));
  }

  if (cost.contains("comm")) {
    const CommConfig cc = comm_config_from_json(cost.at("comm"));
    report["comm"] = {{"t_comm_s", comm_time(cc)},
                      {"t_comm_amortized_s", comm_time_amortized(cc)}};
    if (cost.contains("wallclock")) {
      const auto& w = cost.at("wallclock");
      cfgdetail::reject_unknown(w, "cost.wallclock", {"ddp_steps", "low_comm_steps"});
      const double ddp_steps = w.at("ddp_steps").get<double>();
      const double low_steps = w.at("low_comm_steps").get<double>();
      report["wallclock"] = {
          {"ddp_s", wallclock_simulate(cc, ddp_steps, WallclockAlgorithm::kDdp)},
          {"low_comm_s", wallclock_simulate(cc, low_steps, WallclockAlgorithm::kLowComm)}};
    }
  }
  return report;
}

// One sweep row per bandwidth point.
inline std::string build_bandwidth_sweep_csv(const nlohmann::json& cost,
                                             const std::vector<double>& bandwidths) {
  if (!cost.contains("comm")) throw ConfigError("--sweep requires a cost.comm section");
  CommConfig base = comm_config_from_json(cost.at("comm"));
  double ddp_steps = 0, low_steps = 0;
  const bool have_wallclock = cost.contains("wallclock");
  if (have_wallclock) {
    ddp_steps = cost.at("wallclock").at("ddp_steps").get<double>();
    low_steps = cost.at("wallclock").at("low_comm_steps").get<double>();
  }
  std::string csv = "bandwidth,t_comm_s,t_comm_amortized_s,ddp_total_s,low_comm_total_s\n";
  char buf[256];
  for (double b : bandwidths) {
    CommConfig cc = base;
    cc.bandwidth = b;
    const double tc = comm_time(cc);
    const double ta = comm_time_amortized(cc);
    double ddp_s = 0, low_s = 0;
    if (have_wallclock) {
      ddp_s = wallclock_simulate(cc, ddp_steps, WallclockAlgorithm::kDdp);
      low_s = wallclock_simulate(cc, low_steps, WallclockAlgorithm::kLowComm);
    }
    std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g,%.17g,%.17g\n", b, tc, ta, ddp_s, low_s);
    csv += buf;
  }
  return csv;
}

}  // namespace slicesim
