// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <string>

#include <json.hpp>

#include "slicesim/errors.hpp"

namespace slicesim {

// ---------------------------------------------------------------------------
// Training FLOPs (multiply-accumulate = 2 FLOPs; softmax over the vocabulary
// counted as 3*B*S*V; other nonlinearities ignored).
// ---------------------------------------------------------------------------

struct FlopsConfig {
  double batch = 1;
  double seq = 1024;
  double hidden = 2048;
  double layers = 24;
  double ffn = 8192;
  double vocab = 32000;
  double rho_mlp = 1.0;   // trained fraction of MLP hidden units (1/N)
  double rho_attn = 1.0;  // trained fraction of attention heads (1/N)

  void validate() const {
    if (batch < 1 || seq < 1 || hidden < 1 || layers < 1 || ffn < 1 || vocab < 1)
      throw ConfigError("flops config dimensions must be >= 1");
    if (rho_mlp <= 0 || rho_mlp > 1 || rho_attn <= 0 || rho_attn > 1)
      throw ConfigError("rho must be in (0, 1]");
  }
};

// proj/attn/out_proj/ffn are per layer; emb and head are per step.
struct ForwardFlops {
  double emb = 0;
  double proj = 0;
  double attn = 0;
  double out_proj = 0;
  double ffn = 0;
  double head = 0;
  double total = 0;

  double mha() const { return proj + attn + out_proj; }
};

inline ForwardFlops forward_flops(const FlopsConfig& c) {
  c.validate();
  ForwardFlops f;
  const double B = c.batch, S = c.seq, H = c.hidden;
  f.emb = B * S * H;
  f.proj = 6.0 * B * S * H * H;
  f.attn = 4.0 * B * S * S * H;
  f.out_proj = 2.0 * B * S * H * H;
  f.ffn = 4.0 * B * S * H * c.ffn;
  f.head = 2.0 * B * S * H * c.vocab + 3.0 * B * S * c.vocab;
  f.total = f.emb + c.layers * (f.proj + f.attn + f.out_proj + f.ffn) + f.head;
  return f;
}

// mha/ffn are per layer; emb and head are per step (2x their forward cost).
struct BackwardFlops {
  double emb = 0;
  double mha = 0;
  double ffn = 0;
  double head = 0;
  double total = 0;
};

inline BackwardFlops backward_flops(const FlopsConfig& c) {
  c.validate();
  const ForwardFlops fwd = forward_flops(c);
  BackwardFlops b;
  const double B = c.batch, S = c.seq, H = c.hidden;
  b.mha = 8.0 * B * S * S * H + (10.0 + 6.0 * c.rho_attn) * B * S * H * H;
  b.ffn = (4.0 + 4.0 * c.rho_mlp) * B * S * H * c.ffn;
  b.emb = 2.0 * fwd.emb;
  b.head = 2.0 * fwd.head;
  b.total = b.emb + c.layers * (b.mha + b.ffn) + b.head;
  return b;
}

inline double step_flops(const FlopsConfig& c) {
  return forward_flops(c).total + backward_flops(c).total;
}

inline double flops_per_token(const FlopsConfig& c) { return step_flops(c) / (c.batch * c.seq); }

// Total-FLOPs ratio of two token-budgeted runs.
inline double training_flops_ratio(const FlopsConfig& ours, double tokens_ours,
                                   const FlopsConfig& base, double tokens_base) {
  if (tokens_ours <= 0 || tokens_base <= 0) throw ConfigError("token budgets must be positive");
  return flops_per_token(ours) * tokens_ours / (flops_per_token(base) * tokens_base);
}

// ---------------------------------------------------------------------------
// Peak-memory estimate. Coefficients (bytes per parameter) reproduce the
// fp32-master / bf16-grads / fp32-Adam-moments accounting; streaming keeps
// only the active group's outer state and offloaded parameters resident.
// ---------------------------------------------------------------------------

enum class OuterStatePolicy { kNone, kStreaming };

struct MemoryConfig {
  double total_params = 0;      // P
  double trainable_params = 0;  // P_t
  double bytes_weights = 4.0;
  double bytes_grads = 2.0;
  double bytes_inner_opt = 8.0;
  double bytes_outer_state = 4.0;
  double bytes_offloaded = 4.0;
  int streaming_groups = 1;  // G
  OuterStatePolicy outer_policy = OuterStatePolicy::kStreaming;

  void validate() const {
    if (total_params <= 0) throw ConfigError("memory config: total_params must be > 0");
    if (trainable_params < 0 || trainable_params > total_params)
      throw ConfigError("memory config: trainable_params must be in [0, total_params]");
    if (streaming_groups < 1) throw ConfigError("memory config: streaming_groups must be >= 1");
  }
};

struct MemoryBreakdown {
  double weights = 0;
  double grads = 0;
  double inner_opt = 0;
  double outer_state = 0;
  double offloaded = 0;
  double total_bytes = 0;

  double total_gb() const { return total_bytes / 1e9; }
};

inline MemoryBreakdown memory_estimate(const MemoryConfig& c) {
  c.validate();
  MemoryBreakdown m;
  m.weights = c.bytes_weights * c.total_params;
  m.grads = c.bytes_grads * c.trainable_params;
  m.inner_opt = c.bytes_inner_opt * c.trainable_params;
  if (c.outer_policy == OuterStatePolicy::kStreaming) {
    m.outer_state = c.bytes_outer_state * c.total_params / c.streaming_groups;
    m.offloaded = c.bytes_offloaded * c.total_params / c.streaming_groups;
  }
  m.total_bytes = m.weights + m.grads + m.inner_opt + m.outer_state + m.offloaded;
  return m;
}

// ---------------------------------------------------------------------------
// Ring all-reduce communication time and simulated wall-clock.
// ---------------------------------------------------------------------------

struct CommConfig {
  double payload_bytes = 2.6e9;  // M
  int nodes = 32;                // K
  double bandwidth = 2.875e9;    // B, bytes/s per link
  int sync_period = 100;         // H
  double compute_time = 0.44;    // T_comp, seconds per step
  int streaming_groups = 1;

  void validate() const {
    if (payload_bytes <= 0) throw ConfigError("comm config: payload_bytes must be > 0");
    if (nodes < 1) throw ConfigError("comm config: nodes must be >= 1");
    if (bandwidth <= 0) throw ConfigError("comm config: bandwidth must be > 0");
    if (sync_period < 1) throw ConfigError("comm config: sync_period must be >= 1");
    if (compute_time < 0) throw ConfigError("comm config: compute_time must be >= 0");
    if (streaming_groups < 1) throw ConfigError("comm config: streaming_groups must be >= 1");
  }
};

// T_comm = 2 (K-1)/K * M/B; zero for a single node.
inline double comm_time(const CommConfig& c) {
  c.validate();
  return 2.0 * (c.nodes - 1) / c.nodes * c.payload_bytes / c.bandwidth;
}

inline double comm_time_amortized(const CommConfig& c) { return comm_time(c) / c.sync_period; }

enum class WallclockAlgorithm { kDdp, kLowComm };

// DDP overlaps communication with compute (per-step max); low-communication
// methods pay compute plus one amortized sync per H steps. Streaming splits
// the payload into G events per window, which leaves the total unchanged.
inline double wallclock_simulate(const CommConfig& c, double total_steps, WallclockAlgorithm algo) {
  c.validate();
  if (total_steps < 0) throw ConfigError("total_steps must be >= 0");
  if (algo == WallclockAlgorithm::kDdp)
    return total_steps * std::max(comm_time(c), c.compute_time);
  const double per_event =
      comm_time(CommConfig{c.payload_bytes / c.streaming_groups, c.nodes, c.bandwidth,
                           c.sync_period, c.compute_time, 1});
  const double events = total_steps / c.sync_period * c.streaming_groups;
  return total_steps * c.compute_time + events * per_event;
}

// ---------------------------------------------------------------------------
// JSON views
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const ForwardFlops& f) {
  return {{"emb", f.emb},   {"proj", f.proj}, {"attn", f.attn}, {"out_proj", f.out_proj},
          {"ffn", f.ffn},   {"head", f.head}, {"total", f.total}};
}

inline nlohmann::json to_json(const BackwardFlops& b) {
  return {{"emb", b.emb}, {"mha", b.mha}, {"ffn", b.ffn}, {"head", b.head}, {"total", b.total}};
}

inline nlohmann::json to_json(const MemoryBreakdown& m) {
  return {{"weights_bytes", m.weights},
          {"grads_bytes", m.grads},
          {"inner_opt_bytes", m.inner_opt},
          {"outer_state_bytes", m.outer_state},
          {"offloaded_bytes", m.offloaded},
          {"total_bytes", m.total_bytes},
          {"total_gb", m.total_gb()}};
}

}  // namespace slicesim
