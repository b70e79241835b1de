// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "slicesim/errors.hpp"
#include "slicesim/model.hpp"
#include "slicesim/param_space.hpp"

namespace slicesim {

enum class SliceStrategy { kMlpOnly, kMlpAndHeads, kMlpHeadsAndWo, kByLayers };

inline const char* slice_strategy_name(SliceStrategy s) {
  switch (s) {
    case SliceStrategy::kMlpOnly: return "mlp-only";
    case SliceStrategy::kMlpAndHeads: return "mlp-and-heads";
    case SliceStrategy::kMlpHeadsAndWo: return "mlp-heads-and-wo";
    case SliceStrategy::kByLayers: return "by-layers";
  }
  return "?";
}

inline SliceStrategy slice_strategy_from_name(const std::string& s) {
  if (s == "mlp-only") return SliceStrategy::kMlpOnly;
  if (s == "mlp-and-heads") return SliceStrategy::kMlpAndHeads;
  if (s == "mlp-heads-and-wo") return SliceStrategy::kMlpHeadsAndWo;
  if (s == "by-layers") return SliceStrategy::kByLayers;
  throw ConfigError("unknown slice strategy: " + s);
}

// Node k's trainable set depends only on its slice index n = k mod N, so the
// plan stores one index set per slice. m[i] is K/N on sliced blocks and K
// everywhere else; it is computed from the definition (sum of indicators),
// not the closed form.
struct SlicePlan {
  int num_nodes = 1;
  int num_slices = 1;
  SliceStrategy strategy = SliceStrategy::kMlpOnly;
  ParamLayout layout;
  std::vector<IndexSet> slice_train_sets;  // size num_slices
  CountVector count_vector;

  int slice_of_node(int k) const { return k % num_slices; }
  const IndexSet& trainable(int k) const { return slice_train_sets[slice_of_node(k)]; }
  IndexSet frozen(int k) const { return trainable(k).complement(layout.total_params()); }
};

inline SlicePlan build_slice_plan(const ModelConfig& cfg, int num_nodes, int num_slices,
                                  SliceStrategy strategy) {
  cfg.validate();
  if (num_nodes < 1) throw ConfigError("num_nodes must be >= 1");
  if (num_slices < 1) throw ConfigError("num_slices must be >= 1");
  if (num_nodes % num_slices != 0) throw ConfigError("K is a multiple of N: num_nodes % num_slices must be 0");
  const int dff = cfg.ffn();
  const int h = cfg.num_heads;
  const bool slices_heads =
      strategy == SliceStrategy::kMlpAndHeads || strategy == SliceStrategy::kMlpHeadsAndWo;
  if (strategy != SliceStrategy::kByLayers && dff % num_slices != 0)
    throw ConfigError("ffn_dim must be divisible by num_slices");
  if (slices_heads && h % num_slices != 0)
    throw ConfigError("num_heads must be divisible by num_slices");
  if (strategy == SliceStrategy::kByLayers && cfg.num_layers % num_slices != 0)
    throw ConfigError("num_layers must be divisible by num_slices for by-layers slicing");

  SlicePlan plan;
  plan.num_nodes = num_nodes;
  plan.num_slices = num_slices;
  plan.strategy = strategy;
  plan.layout = ParamLayout(cfg);

  const int dh = cfg.head_dim();
  const int heads_per_slice = slices_heads ? h / num_slices : h;

  for (int n = 0; n < num_slices; ++n) {
    std::vector<Interval> iv;
    for (const TensorInfo& t : plan.layout.tensors()) {
      if (strategy == SliceStrategy::kByLayers &&
          (t.kind == TensorKind::kMlpUp || t.kind == TensorKind::kMlpDown)) {
        const int band = cfg.num_layers / num_slices;
        if (t.layer >= n * band && t.layer < (n + 1) * band) iv.push_back({t.offset, t.end()});
        continue;
      }
      switch (t.kind) {
        case TensorKind::kMlpUp: {
          // row band
          const std::uint64_t rows = static_cast<std::uint64_t>(dff) / num_slices;
          const std::uint64_t r0 = static_cast<std::uint64_t>(n) * rows;
          iv.push_back({t.offset + r0 * t.cols, t.offset + (r0 + rows) * t.cols});
          break;
        }
        case TensorKind::kMlpDown: {
          // column band, one run per row
          const std::uint64_t w = static_cast<std::uint64_t>(dff) / num_slices;
          const std::uint64_t c0 = static_cast<std::uint64_t>(n) * w;
          for (int r = 0; r < t.rows; ++r) {
            const ParamId base = t.offset + static_cast<std::uint64_t>(r) * t.cols;
            iv.push_back({base + c0, base + c0 + w});
          }
          break;
        }
        case TensorKind::kAttnQ:
        case TensorKind::kAttnK:
        case TensorKind::kAttnV: {
          if (!slices_heads) {
            iv.push_back({t.offset, t.end()});
          } else {
            const std::uint64_t w = static_cast<std::uint64_t>(heads_per_slice) * dh;
            const std::uint64_t c0 = static_cast<std::uint64_t>(n) * w;
            for (int r = 0; r < t.rows; ++r) {
              const ParamId base = t.offset + static_cast<std::uint64_t>(r) * t.cols;
              iv.push_back({base + c0, base + c0 + w});
            }
          }
          break;
        }
        case TensorKind::kAttnO: {
          if (strategy == SliceStrategy::kMlpHeadsAndWo) {
            // head-group rows of the output projection
            const std::uint64_t w = static_cast<std::uint64_t>(heads_per_slice) * dh;
            const std::uint64_t r0 = static_cast<std::uint64_t>(n) * w;
            iv.push_back({t.offset + r0 * t.cols, t.offset + (r0 + w) * t.cols});
          } else {
            iv.push_back({t.offset, t.end()});
          }
          break;
        }
        default:
          iv.push_back({t.offset, t.end()});
          break;
      }
    }
    plan.slice_train_sets.push_back(IndexSet::from_intervals(std::move(iv)));
  }

  std::vector<const IndexSet*> sets;
  std::vector<std::uint32_t> weights;
  for (int n = 0; n < num_slices; ++n) {
    sets.push_back(&plan.slice_train_sets[n]);
    weights.push_back(static_cast<std::uint32_t>(num_nodes / num_slices));
  }
  plan.count_vector =
      CountVector::from_weighted_sets(sets, weights, plan.layout.total_params());
  if (plan.count_vector.min_count() < 1)
    throw ContractError("slice plan leaves some parameter trained nowhere");
  return plan;
}

struct TrainableFraction {
  double rho_mlp = 1.0;
  double rho_attn = 1.0;
  std::uint64_t trainable_param_count = 0;
};

inline TrainableFraction trainable_fraction(const SlicePlan& plan) {
  TrainableFraction f;
  f.rho_mlp = 1.0 / plan.num_slices;
  const bool heads = plan.strategy == SliceStrategy::kMlpAndHeads ||
                     plan.strategy == SliceStrategy::kMlpHeadsAndWo;
  f.rho_attn = heads ? 1.0 / plan.num_slices : 1.0;
  f.trainable_param_count = plan.slice_train_sets.front().size();
  for (const IndexSet& s : plan.slice_train_sets) {
    if (s.size() != f.trainable_param_count)
      throw ContractError("trainable_fraction: asymmetric slice sizes");
  }
  return f;
}

// ---------------------------------------------------------------------------
// Streaming synchronization schedule
// ---------------------------------------------------------------------------

enum class SyncGrouping { kAllAtOnce, kByLayers, kBySlices };

inline const char* sync_grouping_name(SyncGrouping g) {
  switch (g) {
    case SyncGrouping::kAllAtOnce: return "all-at-once";
    case SyncGrouping::kByLayers: return "by-layers";
    case SyncGrouping::kBySlices: return "by-slices";
  }
  return "?";
}

inline SyncGrouping sync_grouping_from_name(const std::string& s) {
  if (s == "all-at-once") return SyncGrouping::kAllAtOnce;
  if (s == "by-layers") return SyncGrouping::kByLayers;
  if (s == "by-slices") return SyncGrouping::kBySlices;
  throw ConfigError("unknown sync grouping: " + s);
}

// Groups partition the ParamId space; group g syncs at local steps
// s == offset[g] (mod H), so every parameter is synchronized exactly once in
// any window of H consecutive steps. Offsets are spread evenly, floor(gH/G).
struct SyncSchedule {
  SyncGrouping grouping = SyncGrouping::kAllAtOnce;
  int period = 1;  // H
  std::vector<IndexSet> groups;
  std::vector<int> offsets;
  std::vector<std::string> group_names;

  bool syncs_at(std::size_t group, std::uint64_t step) const {
    return step % period == static_cast<std::uint64_t>(offsets[group]) % period;
  }
};

struct SyncScheduleOptions {
  int layer_group_size = 3;
  int num_slices = 1;  // for by-slices grouping
};

inline SyncSchedule build_sync_schedule(const ModelConfig& cfg, SyncGrouping grouping, int period,
                                        const SyncScheduleOptions& opts = {}) {
  cfg.validate();
  if (period < 1) throw ConfigError("sync period H must be >= 1");
  SyncSchedule sched;
  sched.grouping = grouping;
  sched.period = period;
  const ParamLayout layout(cfg);

  const auto push_group = [&](std::vector<Interval> iv, std::string name) {
    sched.groups.push_back(IndexSet::from_intervals(std::move(iv)));
    sched.group_names.push_back(std::move(name));
  };

  switch (grouping) {
    case SyncGrouping::kAllAtOnce: {
      push_group({{0, layout.total_params()}}, "all");
      break;
    }
    case SyncGrouping::kByLayers: {
      const int gs = opts.layer_group_size;
      if (gs < 1 || cfg.num_layers % gs != 0)
        throw ConfigError("num_layers must be divisible by the layer group size");
      for (int g = 0; g < cfg.num_layers / gs; ++g) {
        std::vector<Interval> iv;
        for (const TensorInfo& t : layout.tensors()) {
          if (t.layer >= g * gs && t.layer < (g + 1) * gs) iv.push_back({t.offset, t.end()});
        }
        push_group(std::move(iv), "layers" + std::to_string(g * gs) + "-" +
                                      std::to_string((g + 1) * gs - 1));
      }
      std::vector<Interval> iv;
      for (const TensorInfo& t : layout.tensors()) {
        if (t.layer < 0) iv.push_back({t.offset, t.end()});
      }
      push_group(std::move(iv), "embeddings+outer_norm");
      break;
    }
    case SyncGrouping::kBySlices: {
      const int n_slices = opts.num_slices;
      if (n_slices < 1 || cfg.ffn() % n_slices != 0)
        throw ConfigError("ffn_dim must be divisible by num_slices");
      const int dff = cfg.ffn();
      for (int n = 0; n < n_slices; ++n) {
        std::vector<Interval> iv;
        for (const TensorInfo& t : layout.tensors()) {
          if (t.kind == TensorKind::kMlpUp) {
            const std::uint64_t rows = static_cast<std::uint64_t>(dff) / n_slices;
            const std::uint64_t r0 = static_cast<std::uint64_t>(n) * rows;
            iv.push_back({t.offset + r0 * t.cols, t.offset + (r0 + rows) * t.cols});
          } else if (t.kind == TensorKind::kMlpDown) {
            const std::uint64_t w = static_cast<std::uint64_t>(dff) / n_slices;
            const std::uint64_t c0 = static_cast<std::uint64_t>(n) * w;
            for (int r = 0; r < t.rows; ++r) {
              const ParamId base = t.offset + static_cast<std::uint64_t>(r) * t.cols;
              iv.push_back({base + c0, base + c0 + w});
            }
          }
        }
        push_group(std::move(iv), "mlp_slice" + std::to_string(n));
      }
      {
        std::vector<Interval> iv;
        for (const TensorInfo& t : layout.tensors()) {
          if (t.kind == TensorKind::kTokenEmbedding || t.kind == TensorKind::kPositionEmbedding)
            iv.push_back({t.offset, t.end()});
        }
        push_group(std::move(iv), "embeddings");
      }
      {
        std::vector<Interval> iv;
        for (const TensorInfo& t : layout.tensors()) {
          switch (t.kind) {
            case TensorKind::kAttnQ:
            case TensorKind::kAttnK:
            case TensorKind::kAttnV:
            case TensorKind::kAttnO:
            case TensorKind::kLn1Gain:
            case TensorKind::kLn1Bias:
            case TensorKind::kLn2Gain:
            case TensorKind::kLn2Bias:
            case TensorKind::kFinalLnGain:
            case TensorKind::kFinalLnBias:
              iv.push_back({t.offset, t.end()});
              break;
            default:
              break;
          }
        }
        push_group(std::move(iv), "attention+norms");
      }
      break;
    }
  }

  const int num_groups = static_cast<int>(sched.groups.size());
  for (int g = 0; g < num_groups; ++g)
    sched.offsets.push_back(static_cast<int>(static_cast<std::int64_t>(g) * period / num_groups));

  // partition sanity
  std::uint64_t covered = 0;
  for (const IndexSet& s : sched.groups) covered += s.size();
  if (covered != layout.total_params())
    throw ContractError("sync schedule groups do not partition the parameter space");
  return sched;
}

// ---------------------------------------------------------------------------
// JSON descriptions (debugging / golden-file surface)
// ---------------------------------------------------------------------------

inline nlohmann::json mask_to_json(const detail::TensorMask& m, const TensorInfo& t) {
  nlohmann::json j;
  j["tensor"] = t.name;
  switch (m.kind) {
    case detail::TensorMask::Kind::kNone:
      j["part"] = "none";
      break;
    case detail::TensorMask::Kind::kFull:
      j["part"] = "full";
      break;
    case detail::TensorMask::Kind::kRowBand:
      j["part"] = "rows";
      j["range"] = {m.r0, m.r1};
      break;
    case detail::TensorMask::Kind::kColBand:
      j["part"] = "cols";
      j["range"] = {m.c0, m.c1};
      break;
    case detail::TensorMask::Kind::kScatter: {
      j["part"] = "scatter";
      nlohmann::json runs = nlohmann::json::array();
      for (const Interval& r : m.runs) runs.push_back({r.begin, r.end});
      j["runs"] = std::move(runs);
      break;
    }
  }
  return j;
}

inline nlohmann::json plan_to_json(const SlicePlan& plan) {
  nlohmann::json j;
  j["num_nodes"] = plan.num_nodes;
  j["num_slices"] = plan.num_slices;
  j["strategy"] = slice_strategy_name(plan.strategy);
  j["total_params"] = plan.layout.total_params();
  nlohmann::json nodes = nlohmann::json::array();
  for (int k = 0; k < plan.num_nodes; ++k) {
    nlohmann::json nj;
    nj["node"] = k;
    nj["slice"] = plan.slice_of_node(k);
    nj["trainable_params"] = plan.trainable(k).size();
    nlohmann::json blocks = nlohmann::json::array();
    for (const TensorInfo& t : plan.layout.tensors()) {
      const auto m = detail::derive_mask(plan.trainable(k), t);
      if (m.kind != detail::TensorMask::Kind::kNone) blocks.push_back(mask_to_json(m, t));
    }
    nj["trainable"] = std::move(blocks);
    nodes.push_back(std::move(nj));
  }
  j["nodes"] = std::move(nodes);
  nlohmann::json segs = nlohmann::json::array();
  for (const auto& s : plan.count_vector.segments())
    segs.push_back({{"begin", s.begin}, {"end", s.end}, {"count", s.count}});
  j["count_vector"] = std::move(segs);
  return j;
}

inline nlohmann::json schedule_to_json(const SyncSchedule& sched) {
  nlohmann::json j;
  j["grouping"] = sync_grouping_name(sched.grouping);
  j["period"] = sched.period;
  nlohmann::json groups = nlohmann::json::array();
  for (std::size_t g = 0; g < sched.groups.size(); ++g) {
    nlohmann::json gj;
    gj["name"] = sched.group_names[g];
    gj["offset"] = sched.offsets[g];
    gj["params"] = sched.groups[g].size();
    groups.push_back(std::move(gj));
  }
  j["groups"] = std::move(groups);
  return j;
}

}  // namespace slicesim
