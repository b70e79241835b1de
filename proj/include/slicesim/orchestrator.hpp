// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <functional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "slicesim/binio.hpp"
#include "slicesim/costmodel.hpp"
#include "slicesim/data.hpp"
#include "slicesim/errors.hpp"
#include "slicesim/metrics.hpp"
#include "slicesim/model.hpp"
#include "slicesim/optim.hpp"
#include "slicesim/param_space.hpp"
#include "slicesim/slicing.hpp"

namespace slicesim {

enum class Algorithm { kDdp, kDiloco, kPartialUpdates };

inline const char* algorithm_name(Algorithm a) {
  switch (a) {
    case Algorithm::kDdp: return "ddp";
    case Algorithm::kDiloco: return "diloco";
    case Algorithm::kPartialUpdates: return "partial-updates";
  }
  return "?";
}

inline Algorithm algorithm_from_name(const std::string& s) {
  if (s == "ddp") return Algorithm::kDdp;
  if (s == "diloco") return Algorithm::kDiloco;
  if (s == "partial-updates") return Algorithm::kPartialUpdates;
  throw ConfigError("unknown algorithm: " + s);
}

struct InnerOptSettings {
  InnerOptKind kind = InnerOptKind::kAdamW;
  AdamWConfig adamw;
  double peak_lr = 3e-4;
  double lr_floor = 0.0;
  double warmup_frac = 0.05;       // of total local steps
  std::int64_t warmup_steps = -1;  // explicit override when >= 0
};

// Optional simulated timing attached to executed runs; analytic only.
struct SimCostSettings {
  bool enabled = false;
  double bandwidth = 2.875e9;   // bytes/s per link
  double compute_time = 0.0;    // seconds per local step
  double bytes_per_param = 2.0; // sync payload per parameter (bf16)
};

struct RunConfig {
  Algorithm algorithm = Algorithm::kPartialUpdates;
  int nodes = 4;        // K
  int slices = 2;       // N
  int local_steps = 10; // H
  int rounds = 20;      // T
  int per_node_batch = 4;
  SliceStrategy strategy = SliceStrategy::kMlpOnly;
  BackwardModeKind backward_mode = BackwardModeKind::kFullJacobian;
  SyncGrouping sync_grouping = SyncGrouping::kAllAtOnce;
  int layer_group_size = 3;
  InnerOptSettings inner;
  OuterOptConfig outer;
  bool inner_state_persists = true;  // across rounds
  int eval_sequences = 64;
  int eval_batch = 8;
  int checkpoint_every_rounds = 0;  // 0 = final only
  double divergence_threshold = 1e4;
  SimCostSettings sim;

  std::uint64_t total_steps() const {
    return static_cast<std::uint64_t>(local_steps) * rounds;
  }
  int global_batch() const { return nodes * per_node_batch; }

  void validate(const SyntheticCorpusSpec& data) const {
    if (nodes < 1) throw ConfigError("run.nodes must be >= 1");
    if (slices < 1) throw ConfigError("run.slices must be >= 1");
    if (local_steps < 1) throw ConfigError("run.local_steps must be >= 1");
    if (rounds < 1) throw ConfigError("run.rounds must be >= 1");
    if (per_node_batch < 1) throw ConfigError("run.per_node_batch must be >= 1");
    if (algorithm != Algorithm::kPartialUpdates && slices != 1)
      throw ConfigError("ddp and diloco baselines require slices == 1");
    if (backward_mode != BackwardModeKind::kFullJacobian) {
      if (algorithm != Algorithm::kPartialUpdates)
        throw ConfigError("detach backward modes require the partial-updates algorithm");
      if (slices < 2) throw ConfigError("detach backward modes require slices >= 2");
    }
    if (eval_sequences < 1) throw ConfigError("run.eval_sequences must be >= 1");
    if (eval_batch < 1) throw ConfigError("run.eval_batch must be >= 1");
    if (eval_sequences >= data.num_sequences)
      throw ConfigError("run.eval_sequences must leave training sequences");
    const int train_seqs = data.num_sequences - eval_sequences;
    if (train_seqs / nodes < per_node_batch)
      throw ConfigError("per-node shard smaller than per_node_batch");
    if (divergence_threshold <= 0) throw ConfigError("run.divergence_threshold must be > 0");
  }
};

struct ExperimentConfig {
  int schema_version = 1;
  std::uint64_t seed = 1;
  std::string output_dir = "runs/out";
  ModelConfig model;
  SyntheticCorpusSpec data;
  RunConfig run;

  void validate() const {
    model.validate();
    data.validate();
    run.validate(data);
    if (data.vocab_size != model.vocab_size)
      throw ConfigError("data.vocab_size must equal model.vocab_size");
    if (data.seq_len != model.seq_len)
      throw ConfigError("data.seq_len must equal model.seq_len");
  }
};

// ---------------------------------------------------------------------------
// Standalone ops
// ---------------------------------------------------------------------------

struct SparseDelta {
  const IndexSet* support = nullptr;
  std::vector<double> values;  // rank-ordered over support
};

// Deterministic reduction in ascending node order, normalized elementwise by
// the count vector. Indices touched by no node stay zero.
inline std::vector<double> simulated_all_reduce(const SlicePlan& plan,
                                                const std::vector<SparseDelta>& deltas) {
  if (static_cast<int>(deltas.size()) != plan.num_nodes)
    throw ContractError("simulated_all_reduce: one delta per node required");
  const std::uint64_t total = plan.layout.total_params();
  std::vector<double> sum(total, 0.0);
  for (int k = 0; k < plan.num_nodes; ++k) {
    const SparseDelta& d = deltas[k];
    if (d.support == nullptr) throw ContractError("simulated_all_reduce: missing support");
    if (!d.support->is_subset_of(plan.trainable(k)))
      throw ContractError("simulated_all_reduce: delta support outside node's trainable set");
    if (d.values.size() != d.support->size())
      throw ContractError("simulated_all_reduce: values/support size mismatch");
    std::uint64_t rank = 0;
    for (const Interval& in : d.support->intervals()) {
      for (ParamId i = in.begin; i < in.end; ++i) sum[i] += d.values[rank++];
    }
  }
  for (const auto& seg : plan.count_vector.segments()) {
    const double div = static_cast<double>(seg.count);
    for (ParamId i = seg.begin; i < seg.end; ++i) sum[i] /= div;
  }
  return sum;
}

struct EvalResult {
  double loss = 0.0;
  double perplexity = 0.0;
  std::uint64_t tokens = 0;
};

// Forward-only evaluation over a sequence range; perplexity is
// exp(mean token NLL).
inline EvalResult evaluate(const ModelParams& params, const Corpus& corpus, int first_seq,
                           int count, int batch_size) {
  if (count < 1 || first_seq < 0 || first_seq + count > corpus.spec.num_sequences)
    throw ConfigError("evaluate: sequence range out of bounds");
  const int S = corpus.spec.seq_len;
  double nll_sum = 0.0;
  std::uint64_t positions = 0;
  int pos = 0;
  while (pos < count) {
    const int b = std::min(batch_size, count - pos);
    TokenBatch batch(b, S);
    for (int i = 0; i < b; ++i)
      std::memcpy(&batch.id(i, 0), corpus.sequence(first_seq + pos + i),
                  static_cast<std::size_t>(S) * 4);
    const Mat logits = forward(params, batch, nullptr);
    const auto [loss, dl] = cross_entropy_loss(logits, batch);
    nll_sum += loss * batch.predicted_positions();
    positions += batch.predicted_positions();
    pos += b;
  }
  EvalResult r;
  r.loss = nll_sum / static_cast<double>(positions);
  r.perplexity = std::exp(r.loss);
  r.tokens = positions;
  return r;
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

struct DivergenceInfo {
  std::uint64_t round = 0;
  std::uint64_t step = 0;
  int node = -1;
  double loss = 0.0;
  std::string what;
};

struct RunResult {
  bool completed = false;
  bool diverged = false;
  DivergenceInfo divergence;
  RunMetrics metrics;
  double final_eval_loss = 0.0;
  double final_eval_perplexity = 0.0;
  std::uint64_t total_tokens = 0;
  double sim_comm_s = 0.0;
  double sim_comp_s = 0.0;
  std::vector<double> final_theta;
};

namespace detail {

inline void parallel_for_nodes(int n, int threads, const std::function<void(int)>& fn,
                               std::vector<std::exception_ptr>& errors) {
  errors.assign(n, nullptr);
  const int workers = std::max(1, std::min(threads, n));
  if (workers == 1) {
    for (int k = 0; k < n; ++k) {
      try {
        fn(k);
      } catch (...) {
        errors[k] = std::current_exception();
      }
    }
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&]() {
      for (;;) {
        const int k = next.fetch_add(1);
        if (k >= n) return;
        try {
          fn(k);
        } catch (...) {
          errors[k] = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace detail

struct NodeState {
  int id = 0;
  int slice = 0;
  ModelParams params;   // local replica (unused for ddp)
  InnerOptState inner;  // masked state (unused for ddp)
  NodeCursor cursor;
  Rng rng;
};

class Trainer {
 public:
  Trainer(const ExperimentConfig& exp, int threads, std::string resolved_config_json = "")
      : exp_(exp), threads_(std::max(1, threads)), config_json_(std::move(resolved_config_json)) {
    exp_.validate();
    binio::check_little_endian();

    corpus_ = generate_corpus(exp_.data);
    train_seqs_ = exp_.data.num_sequences - exp_.run.eval_sequences;

    const int plan_slices = exp_.run.algorithm == Algorithm::kPartialUpdates ? exp_.run.slices : 1;
    plan_ = build_slice_plan(exp_.model, exp_.run.nodes, plan_slices, exp_.run.strategy);
    SyncScheduleOptions sopts;
    sopts.layer_group_size = exp_.run.layer_group_size;
    sopts.num_slices = plan_slices;
    sched_ = build_sync_schedule(exp_.model, exp_.run.sync_grouping, exp_.run.local_steps, sopts);

    global_ = ModelParams(exp_.model);
    init_params(global_, exp_.seed);
    outer_state_ = OuterOptState(layout().total_params());
    snapshot_ = global_.flat();

    lr_.peak = exp_.run.inner.peak_lr;
    lr_.floor = exp_.run.inner.lr_floor;
    lr_.total_steps = exp_.run.total_steps();
    lr_.warmup_steps = exp_.run.inner.warmup_steps >= 0
                           ? static_cast<std::uint64_t>(exp_.run.inner.warmup_steps)
                           : static_cast<std::uint64_t>(exp_.run.inner.warmup_frac *
                                                        static_cast<double>(lr_.total_steps));

    // per (slice, group) trainable intersections for delta reduction
    slice_group_.assign(plan_.num_slices, {});
    for (int n = 0; n < plan_.num_slices; ++n) {
      for (const IndexSet& g : sched_.groups)
        slice_group_[n].push_back(plan_.slice_train_sets[n].intersect(g));
    }
    // per group (begin, end, count) divisor segments
    group_divisors_.assign(sched_.groups.size(), {});
    for (std::size_t g = 0; g < sched_.groups.size(); ++g) {
      for (const Interval& in : sched_.groups[g].intervals()) {
        for (const auto& seg : plan_.count_vector.segments()) {
          const ParamId lo = std::max(in.begin, seg.begin);
          const ParamId hi = std::min(in.end, seg.end);
          if (lo < hi) group_divisors_[g].push_back({lo, hi, seg.count});
        }
      }
    }

    nodes_.resize(exp_.run.nodes);
    const bool is_ddp = exp_.run.algorithm == Algorithm::kDdp;
    for (int k = 0; k < exp_.run.nodes; ++k) {
      NodeState& ns = nodes_[k];
      ns.id = k;
      ns.slice = plan_.slice_of_node(k);
      ns.cursor = NodeCursor{};
      ns.cursor.shuffle_seed = mix_seed(exp_.seed, 0xba7c4, static_cast<std::uint64_t>(k));
      ns.rng = Rng(mix_seed(exp_.seed, 0x40de, static_cast<std::uint64_t>(k)));
      if (!is_ddp) {
        ns.params = global_;
        ns.inner = InnerOptState(exp_.run.inner.kind, exp_.run.inner.adamw, layout(),
                                 plan_.trainable(k));
      }
    }
    if (is_ddp) {
      ddp_inner_ = InnerOptState(exp_.run.inner.kind, exp_.run.inner.adamw, layout(),
                                 IndexSet::full(layout().total_params()));
      ddp_grads_.assign(exp_.run.nodes, std::vector<double>());
    }
  }

  const ParamLayout& layout() const { return global_.layout(); }
  const SlicePlan& plan() const { return plan_; }
  const SyncSchedule& schedule() const { return sched_; }
  const ModelParams& global_params() const { return global_; }
  const NodeState& node(int k) const { return nodes_.at(k); }
  std::uint64_t completed_steps() const { return step_; }
  const Corpus& corpus() const { return corpus_; }

  EvalResult eval_now() const {
    return evaluate(global_, corpus_, train_seqs_, exp_.run.eval_sequences, exp_.run.eval_batch);
  }

  // Runs until `stop_after_rounds` rounds are complete (all rounds when -1).
  RunResult run(int stop_after_rounds = -1) {
    const std::uint64_t target_rounds =
        stop_after_rounds < 0 ? exp_.run.rounds
                              : std::min<std::uint64_t>(exp_.run.rounds, stop_after_rounds);
    return run_until(target_rounds * exp_.run.local_steps);
  }

  // Runs `steps` more local steps (may stop mid-round); capped at the total.
  RunResult run_steps(std::uint64_t steps) {
    return run_until(std::min<std::uint64_t>(step_ + steps, exp_.run.total_steps()));
  }

 private:
  RunResult run_until(std::uint64_t target_steps) {
    RunResult result;
    const std::uint64_t H = exp_.run.local_steps;
    const int K = exp_.run.nodes;
    std::vector<double> losses(K, 0.0);
    std::vector<std::exception_ptr> errors;
    double round_loss_sum = 0.0;
    std::uint64_t round_loss_count = 0;

    while (step_ < target_steps) {
      const std::uint64_t s = step_ + 1;
      const std::uint64_t round = (s - 1) / H + 1;
      const double lr = lr_.at(s);

      if (exp_.run.algorithm == Algorithm::kDdp) {
        step_ddp(lr, losses, errors);
      } else {
        step_low_comm(lr, losses, errors);
      }

      // Divergence scan in ascending node order, deterministic across
      // thread counts.
      for (int k = 0; k < K; ++k) {
        if (errors[k]) {
          try {
            std::rethrow_exception(errors[k]);
          } catch (const std::exception& e) {
            result.diverged = true;
            result.divergence = {round, s, k, std::nan(""), e.what()};
          }
          break;
        }
        if (!std::isfinite(losses[k]) || losses[k] > exp_.run.divergence_threshold) {
          result.diverged = true;
          result.divergence = {round, s, k, losses[k], "loss above divergence threshold"};
          break;
        }
      }
      if (result.diverged) {
        finish(result);
        return result;
      }

      step_ = s;
      tokens_ += static_cast<std::uint64_t>(K) * exp_.run.per_node_batch * exp_.data.seq_len;
      if (exp_.run.sim.enabled) comp_s_ += exp_.run.sim.compute_time;

      for (int k = 0; k < K; ++k) {
        metrics_.rows.push_back({round, s, k, losses[k], tokens_, comm_s_, comp_s_});
        round_loss_sum += losses[k];
        ++round_loss_count;
      }

      if (exp_.run.algorithm == Algorithm::kDdp) {
        if (exp_.run.sim.enabled) comm_s_ += sim_comm_seconds(layout().total_params());
      } else {
        for (std::size_t g = 0; g < sched_.groups.size(); ++g) {
          if (sched_.syncs_at(g, s)) sync_group(g);
        }
      }

      if (s % H == 0 && !exp_.run.inner_state_persists &&
          exp_.run.algorithm != Algorithm::kDdp) {
        for (NodeState& ns : nodes_) ns.inner.reset();
      }

      if (s % H == 0) {
        const EvalResult ev = eval_now();
        RoundRecord rec;
        rec.round = round;
        rec.mean_train_loss = round_loss_sum / static_cast<double>(round_loss_count);
        rec.eval_loss = ev.loss;
        rec.eval_perplexity = ev.perplexity;
        rec.tokens = tokens_;
        rec.sim_comm_s = comm_s_;
        rec.sim_comp_s = comp_s_;
        metrics_.rounds.push_back(rec);
        metrics_.rows.push_back({round, s, -1, ev.loss, tokens_, comm_s_, comp_s_});
        round_loss_sum = 0.0;
        round_loss_count = 0;
      }
    }

    if (step_ == exp_.run.total_steps() && exp_.run.algorithm != Algorithm::kDdp) {
      // Terminal flush: groups whose offset leaves them mid-window at the end
      // are synchronized once more so the final parameters include every
      // node's last local steps.
      for (std::size_t g = 0; g < sched_.groups.size(); ++g) {
        if (!sched_.syncs_at(g, step_)) sync_group(g);
      }
    }
    result.completed = step_ == exp_.run.total_steps();
    finish(result);
    return result;
  }

  // -------------------------------------------------------------------------
  // Checkpointing
  // -------------------------------------------------------------------------

 public:
  std::string checkpoint_bytes() const {
    std::ostringstream os(std::ios::binary);
    os.write("SLSIMCK1", 8);
    binio::write_u32(os, 1);
    binio::write_u32(os, static_cast<std::uint32_t>(exp_.run.algorithm));
    binio::write_string(os, config_json_);
    binio::write_u64(os, step_);
    binio::write_u64(os, tokens_);
    binio::write_f64(os, comm_s_);
    binio::write_f64(os, comp_s_);
    const auto& tensors = layout().tensors();
    binio::write_u32(os, static_cast<std::uint32_t>(tensors.size()));
    for (const TensorInfo& t : tensors) {
      binio::write_i32(os, static_cast<std::int32_t>(t.kind));
      binio::write_i32(os, t.layer);
      binio::write_i32(os, t.rows);
      binio::write_i32(os, t.cols);
    }
    binio::write_f64_vec(os, global_.flat());
    binio::write_f64_vec(os, outer_state_.momentum);
    binio::write_f64_vec(os, snapshot_);
    binio::write_u64(os, ddp_inner_.step_count());
    binio::write_f64_vec(os, ddp_inner_.first_moment());
    binio::write_f64_vec(os, ddp_inner_.second_moment());
    binio::write_u32(os, static_cast<std::uint32_t>(nodes_.size()));
    for (const NodeState& ns : nodes_) {
      binio::write_i32(os, ns.id);
      binio::write_u64(os, ns.cursor.epoch);
      binio::write_u64(os, ns.cursor.pos);
      binio::write_string(os, ns.rng.serialize());
      binio::write_u64(os, ns.inner.step_count());
      binio::write_f64_vec(os, ns.inner.first_moment());
      binio::write_f64_vec(os, ns.inner.second_moment());
      binio::write_f64_vec(os, ns.params.flat());
    }
    return os.str();
  }

  void save_checkpoint(const std::string& path) const {
    write_file_atomic(path, checkpoint_bytes());
  }

  void load_checkpoint(const std::string& path) {
    std::istringstream is(read_file(path), std::ios::binary);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, "SLSIMCK1", 8) != 0)
      throw IoError("bad checkpoint magic: " + path);
    const std::uint32_t version = binio::read_u32(is);
    if (version != 1) throw IoError("unsupported checkpoint version");
    const std::uint32_t algo = binio::read_u32(is);
    if (algo != static_cast<std::uint32_t>(exp_.run.algorithm))
      throw IoError("checkpoint algorithm does not match the experiment config");
    const std::string stored_config = binio::read_string(is);
    if (!config_json_.empty() && !stored_config.empty() && stored_config != config_json_)
      throw IoError("checkpoint was produced by a different experiment config");
    step_ = binio::read_u64(is);
    tokens_ = binio::read_u64(is);
    comm_s_ = binio::read_f64(is);
    comp_s_ = binio::read_f64(is);
    const std::uint32_t tcount = binio::read_u32(is);
    const auto& tensors = layout().tensors();
    if (tcount != tensors.size()) throw IoError("checkpoint shape table mismatch");
    for (const TensorInfo& t : tensors) {
      if (binio::read_i32(is) != static_cast<std::int32_t>(t.kind) ||
          binio::read_i32(is) != t.layer || binio::read_i32(is) != t.rows ||
          binio::read_i32(is) != t.cols)
        throw IoError("checkpoint shape table mismatch");
    }
    const std::uint64_t total = layout().total_params();
    global_.flat() = binio::read_f64_vec(is, total);
    if (global_.flat().size() != total) throw IoError("checkpoint theta size mismatch");
    outer_state_.momentum = binio::read_f64_vec(is, total);
    snapshot_ = binio::read_f64_vec(is, total);
    ddp_inner_.set_step_count(binio::read_u64(is));
    ddp_inner_.first_moment() = binio::read_f64_vec(is, total);
    ddp_inner_.second_moment() = binio::read_f64_vec(is, total);
    const std::uint32_t ncount = binio::read_u32(is);
    if (ncount != nodes_.size()) throw IoError("checkpoint node count mismatch");
    for (NodeState& ns : nodes_) {
      if (binio::read_i32(is) != ns.id) throw IoError("checkpoint node id mismatch");
      ns.cursor.epoch = binio::read_u64(is);
      ns.cursor.pos = binio::read_u64(is);
      ns.cursor.perm.clear();
      ns.rng.deserialize(binio::read_string(is));
      ns.inner.set_step_count(binio::read_u64(is));
      ns.inner.first_moment() = binio::read_f64_vec(is, total);
      ns.inner.second_moment() = binio::read_f64_vec(is, total);
      ns.params.flat() = binio::read_f64_vec(is, total);
    }
  }

 private:
  ShardView train_shard(int k) const {
    const int per = train_seqs_ / exp_.run.nodes;
    return ShardView{&corpus_, k * per, per};
  }

  double sim_comm_seconds(std::uint64_t params_synced) const {
    if (!exp_.run.sim.enabled || exp_.run.nodes < 2) return 0.0;
    CommConfig cc;
    cc.payload_bytes = static_cast<double>(params_synced) * exp_.run.sim.bytes_per_param;
    cc.nodes = exp_.run.nodes;
    cc.bandwidth = exp_.run.sim.bandwidth;
    cc.sync_period = 1;
    cc.compute_time = 0.0;
    return comm_time(cc);
  }

  void step_low_comm(double lr, std::vector<double>& losses,
                     std::vector<std::exception_ptr>& errors) {
    const bool masked = exp_.run.algorithm == Algorithm::kPartialUpdates;
    detail::parallel_for_nodes(
        exp_.run.nodes, threads_,
        [&](int k) {
          NodeState& ns = nodes_[k];
          BackwardOptions opts;
          opts.mode = exp_.run.backward_mode;
          opts.num_slices = plan_.num_slices;
          opts.own_slice = ns.slice;
          if (opts.mode == BackwardModeKind::kDetachKPlusRandom) {
            const int g =
                static_cast<int>(ns.rng.below(static_cast<std::uint64_t>(plan_.num_slices - 1)));
            opts.extra_slice = g >= ns.slice ? g + 1 : g;
          }
          const TokenBatch batch = next_batch(train_shard(k), exp_.run.per_node_batch, ns.cursor);
          ActivationCache cache;
          const Mat logits = forward(ns.params, batch, &cache);
          const auto [loss, dlogits] = cross_entropy_loss(logits, batch);
          losses[k] = loss;
          if (masked) {
            const GradientBuffer grads =
                backward_partial(ns.params, cache, dlogits, plan_.trainable(k), opts);
            inner_step(ns.params.flat(), grads, ns.inner, lr);
          } else {
            const std::vector<double> grads = backward_full_dense(ns.params, cache, dlogits);
            inner_step_dense(ns.params.flat(), grads, ns.inner, lr);
          }
        },
        errors);
  }

  void step_ddp(double lr, std::vector<double>& losses, std::vector<std::exception_ptr>& errors) {
    detail::parallel_for_nodes(
        exp_.run.nodes, threads_,
        [&](int k) {
          NodeState& ns = nodes_[k];
          const TokenBatch batch = next_batch(train_shard(k), exp_.run.per_node_batch, ns.cursor);
          ActivationCache cache;
          const Mat logits = forward(global_, batch, &cache);
          const auto [loss, dlogits] = cross_entropy_loss(logits, batch);
          losses[k] = loss;
          ddp_grads_[k] = backward_full_dense(global_, cache, dlogits);
        },
        errors);
    for (const auto& e : errors) {
      if (e) return;  // divergence handling upstream
    }
    const std::uint64_t total = layout().total_params();
    std::vector<double> avg(total, 0.0);
    for (int k = 0; k < exp_.run.nodes; ++k) {
      const double* g = ddp_grads_[k].data();
      for (std::uint64_t i = 0; i < total; ++i) avg[i] += g[i];
    }
    const double denom = static_cast<double>(exp_.run.nodes);
    for (std::uint64_t i = 0; i < total; ++i) avg[i] /= denom;
    inner_step_dense(global_.flat(), avg, ddp_inner_, lr);
  }

  // Reduce the group's deltas against the group snapshot, apply the outer
  // step, broadcast the new global values, refresh the snapshot.
  void sync_group(std::size_t g) {
    const IndexSet& group = sched_.groups[g];
    std::vector<double>& delta = delta_scratch_;
    if (delta.size() != layout().total_params()) delta.assign(layout().total_params(), 0.0);
    for (const Interval& in : group.intervals())
      std::memset(delta.data() + in.begin, 0, in.length() * sizeof(double));

    for (int k = 0; k < exp_.run.nodes; ++k) {
      const IndexSet& sub = slice_group_[nodes_[k].slice][g];
      const double* th = nodes_[k].params.flat().data();
      for (const Interval& in : sub.intervals()) {
        for (ParamId i = in.begin; i < in.end; ++i) delta[i] += th[i] - snapshot_[i];
      }
    }
    for (const auto& seg : group_divisors_[g]) {
      const double div = static_cast<double>(seg.count);
      for (ParamId i = seg.begin; i < seg.end; ++i) delta[i] /= div;
    }

    outer_step(global_.flat(), delta, outer_state_, exp_.run.outer, &group);

    double* gth = global_.flat().data();
    for (const Interval& in : group.intervals()) {
      for (NodeState& ns : nodes_)
        std::memcpy(ns.params.flat().data() + in.begin, gth + in.begin,
                    in.length() * sizeof(double));
      std::memcpy(snapshot_.data() + in.begin, gth + in.begin, in.length() * sizeof(double));
    }

    comm_s_ += sim_comm_seconds(group.size());
  }

  void finish(RunResult& result) {
    result.metrics = metrics_;
    try {
      const EvalResult ev = eval_now();
      result.final_eval_loss = ev.loss;
      result.final_eval_perplexity = ev.perplexity;
    } catch (const NumericError&) {
      result.final_eval_loss = std::nan("");
      result.final_eval_perplexity = std::nan("");
    }
    result.total_tokens = tokens_;
    result.sim_comm_s = comm_s_;
    result.sim_comp_s = comp_s_;
    result.final_theta = global_.flat();
  }

  ExperimentConfig exp_;
  int threads_;
  std::string config_json_;

  Corpus corpus_;
  int train_seqs_ = 0;
  SlicePlan plan_;
  SyncSchedule sched_;
  ModelParams global_;
  OuterOptState outer_state_;
  std::vector<double> snapshot_;
  LrSchedule lr_;
  std::vector<NodeState> nodes_;
  InnerOptState ddp_inner_;
  std::vector<std::vector<double>> ddp_grads_;
  std::vector<std::vector<IndexSet>> slice_group_;
  std::vector<std::vector<CountVector::Segment>> group_divisors_;
  std::vector<double> delta_scratch_;
  RunMetrics metrics_;

  std::uint64_t step_ = 0;
  std::uint64_t tokens_ = 0;
  double comm_s_ = 0.0;
  double comp_s_ = 0.0;
};

// Header-level summary of a checkpoint file, without loading the run.
inline nlohmann::json checkpoint_inspect_json(const std::string& path) {
  std::istringstream is(read_file(path), std::ios::binary);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, "SLSIMCK1", 8) != 0) throw IoError("bad checkpoint magic: " + path);
  nlohmann::json j;
  j["version"] = binio::read_u32(is);
  const std::uint32_t algo = binio::read_u32(is);
  j["algorithm"] = algorithm_name(static_cast<Algorithm>(algo));
  const std::string cfg = binio::read_string(is);
  if (!cfg.empty()) j["config"] = nlohmann::json::parse(cfg);
  j["step"] = binio::read_u64(is);
  j["tokens"] = binio::read_u64(is);
  j["sim_comm_s"] = binio::read_f64(is);
  j["sim_comp_s"] = binio::read_f64(is);
  const std::uint32_t tcount = binio::read_u32(is);
  nlohmann::json shapes = nlohmann::json::array();
  std::uint64_t total = 0;
  for (std::uint32_t i = 0; i < tcount; ++i) {
    const std::int32_t kind = binio::read_i32(is);
    const std::int32_t layer = binio::read_i32(is);
    const std::int32_t rows = binio::read_i32(is);
    const std::int32_t cols = binio::read_i32(is);
    shapes.push_back({{"kind", tensor_kind_name(static_cast<TensorKind>(kind))},
                      {"layer", layer},
                      {"rows", rows},
                      {"cols", cols}});
    total += static_cast<std::uint64_t>(rows) * cols;
  }
  j["tensors"] = std::move(shapes);
  j["total_params"] = total;
  return j;
}

}  // namespace slicesim
