// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include "slicesim/slicing.hpp"

using namespace slicesim;

namespace {

ModelConfig paper_model() {
  // GPT-3 XL shape from the cost-model experiments
  ModelConfig m;
  m.num_layers = 24;
  m.hidden_dim = 2048;
  m.num_heads = 16;
  m.ffn_dim = 8192;
  m.vocab_size = 32000;
  m.seq_len = 1024;
  return m;
}

ModelConfig toy_model(int layers = 2, int d = 16, int h = 4, int vocab = 17, int seq = 8) {
  return ModelConfig{layers, d, h, 0, vocab, seq, PositionalEncoding::kLearnedAbsolute};
}

}  // namespace

TEST_CASE("mlp-only slicing: m is K/N on MLP blocks and K elsewhere") {
  const ModelConfig cfg = toy_model(2, 16, 4);
  const SlicePlan plan = build_slice_plan(cfg, 32, 4, SliceStrategy::kMlpOnly);
  const TensorInfo& wup = plan.layout.find(TensorKind::kMlpUp, 0);
  const TensorInfo& emb = plan.layout.find(TensorKind::kTokenEmbedding);
  const TensorInfo& wq = plan.layout.find(TensorKind::kAttnQ, 1);
  REQUIRE(plan.count_vector.at(wup.offset) == 8);        // K/N = 32/4
  REQUIRE(plan.count_vector.at(emb.offset) == 32);       // K
  REQUIRE(plan.count_vector.at(wq.offset + 5) == 32);    // attention not sliced
  const TensorInfo& wdown = plan.layout.find(TensorKind::kMlpDown, 1);
  REQUIRE(plan.count_vector.at(wdown.offset) == 8);
}

TEST_CASE("head slicing: node 3 of 4 trains head group {6,7} when h=8") {
  const ModelConfig cfg = toy_model(1, 16, 8);  // dh = 2
  const SlicePlan plan = build_slice_plan(cfg, 4, 4, SliceStrategy::kMlpAndHeads);
  const int dh = cfg.head_dim();
  const TensorInfo& wq = plan.layout.find(TensorKind::kAttnQ, 0);
  const IndexSet& t3 = plan.trainable(3);
  // head group H_3 = {6, 7} -> columns [12, 16)
  REQUIRE(t3.contains(wq.offset + 6 * dh));
  REQUIRE(t3.contains(wq.offset + 8 * dh - 1));
  REQUIRE_FALSE(t3.contains(wq.offset + 6 * dh - 1));
  REQUIRE_FALSE(t3.contains(wq.offset + 0));
  // W_O stays global under mlp-and-heads
  const TensorInfo& wo = plan.layout.find(TensorKind::kAttnO, 0);
  for (ParamId i = wo.offset; i < wo.end(); i += 7) REQUIRE(t3.contains(i));
}

TEST_CASE("wo slicing restricts the output projection to head-group rows") {
  const ModelConfig cfg = toy_model(1, 16, 8);
  const SlicePlan plan = build_slice_plan(cfg, 4, 4, SliceStrategy::kMlpHeadsAndWo);
  const TensorInfo& wo = plan.layout.find(TensorKind::kAttnO, 0);
  const IndexSet& t1 = plan.trainable(1);
  // node 1 trains rows [4, 8) of W_O (heads {2,3} x dh=2)
  REQUIRE(t1.contains(wo.offset + 4 * wo.cols));
  REQUIRE_FALSE(t1.contains(wo.offset + 3 * wo.cols));
  REQUIRE_FALSE(t1.contains(wo.offset + 8 * wo.cols));
}

TEST_CASE("N=1 makes every parameter trainable everywhere with m=K") {
  const ModelConfig cfg = toy_model();
  for (SliceStrategy s : {SliceStrategy::kMlpOnly, SliceStrategy::kMlpAndHeads}) {
    const SlicePlan plan = build_slice_plan(cfg, 3, 1, s);
    REQUIRE(plan.trainable(0).size() == plan.layout.total_params());
    for (const auto& seg : plan.count_vector.segments()) REQUIRE(seg.count == 3);
  }
}

TEST_CASE("by-layers slicing assigns contiguous MLP layer bands") {
  const ModelConfig cfg = toy_model(4, 16, 4);
  const SlicePlan plan = build_slice_plan(cfg, 4, 2, SliceStrategy::kByLayers);
  const IndexSet& t0 = plan.trainable(0);
  const IndexSet& t1 = plan.trainable(1);
  for (int l = 0; l < 4; ++l) {
    const TensorInfo& wup = plan.layout.find(TensorKind::kMlpUp, l);
    REQUIRE(t0.contains(wup.offset) == (l < 2));
    REQUIRE(t1.contains(wup.offset) == (l >= 2));
    // attention stays global
    const TensorInfo& wq = plan.layout.find(TensorKind::kAttnQ, l);
    REQUIRE(t0.contains(wq.offset));
    REQUIRE(t1.contains(wq.offset));
  }
}

TEST_CASE("partition, coverage, and count-vector definition hold across configurations") {
  const ModelConfig cfg = toy_model(2, 16, 4);
  const ParamLayout layout(cfg);
  const std::uint64_t total = layout.total_params();
  for (SliceStrategy strat : {SliceStrategy::kMlpOnly, SliceStrategy::kMlpAndHeads,
                              SliceStrategy::kMlpHeadsAndWo, SliceStrategy::kByLayers}) {
    for (const auto& [K, N] : std::vector<std::pair<int, int>>{{1, 1}, {4, 2}, {8, 4}, {8, 2}}) {
      if (strat == SliceStrategy::kByLayers && cfg.num_layers % N != 0) continue;
      const SlicePlan plan = build_slice_plan(cfg, K, N, strat);
      IndexSet cover;
      for (int k = 0; k < K; ++k) {
        const IndexSet& train = plan.trainable(k);
        const IndexSet frozen = plan.frozen(k);
        REQUIRE(train.size() + frozen.size() == total);      // partition
        REQUIRE(train.intersect(frozen).size() == 0);
        REQUIRE(train.union_with(frozen).size() == total);
        cover = cover.union_with(train);
      }
      REQUIRE(cover.size() == total);  // no orphan parameters

      // m by definition: sum over nodes of membership, probed at segment edges
      for (const auto& seg : plan.count_vector.segments()) {
        for (ParamId id : {seg.begin, seg.end - 1}) {
          std::uint32_t by_def = 0;
          for (int k = 0; k < K; ++k) by_def += plan.trainable(k).contains(id) ? 1 : 0;
          REQUIRE(by_def == seg.count);
          REQUIRE(by_def >= 1);
        }
        // closed form: K/N on sliced blocks, K elsewhere
        REQUIRE((seg.count == static_cast<std::uint32_t>(K) ||
                 seg.count == static_cast<std::uint32_t>(K / N)));
      }
    }
  }
}

TEST_CASE("divisibility violations are configuration errors naming the rule") {
  const ModelConfig cfg = toy_model(2, 16, 4);
  try {
    build_slice_plan(cfg, 5, 2, SliceStrategy::kMlpOnly);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    REQUIRE(std::string(e.what()).find("K is a multiple of N") != std::string::npos);
  }
  // 4d = 64, N=3 does not divide
  REQUIRE_THROWS_AS(build_slice_plan(cfg, 3, 3, SliceStrategy::kMlpOnly), ConfigError);
  // h=4, N=8
  ModelConfig wide = toy_model(2, 64, 4);
  REQUIRE_THROWS_AS(build_slice_plan(wide, 8, 8, SliceStrategy::kMlpAndHeads), ConfigError);
  // L=2 not divisible by N=4 for by-layers
  REQUIRE_THROWS_AS(build_slice_plan(cfg, 4, 4, SliceStrategy::kByLayers), ConfigError);
}

TEST_CASE("trainable fractions reproduce the 1.3B-scale parameter counts") {
  const ModelConfig paper = paper_model();
  const ParamLayout layout(paper);
  // full model ~1.3B
  REQUIRE(std::abs(static_cast<double>(layout.total_params()) / 1e9 - 1.3) / 1.3 < 0.02);

  const SlicePlan half_mlp = build_slice_plan(paper, 2, 2, SliceStrategy::kMlpOnly);
  const TrainableFraction f2 = trainable_fraction(half_mlp);
  REQUIRE(f2.rho_mlp == 0.5);
  REQUIRE(f2.rho_attn == 1.0);
  REQUIRE(std::abs(static_cast<double>(f2.trainable_param_count) / 1e9 - 0.87) / 0.87 < 0.02);

  const SlicePlan quarter_both = build_slice_plan(paper, 4, 4, SliceStrategy::kMlpAndHeads);
  const TrainableFraction f4 = trainable_fraction(quarter_both);
  REQUIRE(f4.rho_mlp == 0.25);
  REQUIRE(f4.rho_attn == 0.25);
  REQUIRE(std::abs(static_cast<double>(f4.trainable_param_count) / 1e9 - 0.44) / 0.44 < 0.02);

  const SlicePlan none = build_slice_plan(paper, 2, 1, SliceStrategy::kMlpOnly);
  REQUIRE(trainable_fraction(none).trainable_param_count == layout.total_params());
}

TEST_CASE("by-layers schedule: 24 layers give 9 staggered groups") {
  const ModelConfig paper = paper_model();
  SyncScheduleOptions opts;
  opts.layer_group_size = 3;
  const SyncSchedule sched = build_sync_schedule(paper, SyncGrouping::kByLayers, 100, opts);
  REQUIRE(sched.groups.size() == 9);  // 8 layer groups + embeddings/outer norm
  const std::vector<int> expected{0, 11, 22, 33, 44, 55, 66, 77, 88};
  REQUIRE(sched.offsets == expected);
  // every group synchronized exactly once per any window of H steps
  for (std::uint64_t start : {1ull, 7ull, 100ull}) {
    for (std::size_t g = 0; g < sched.groups.size(); ++g) {
      int count = 0;
      for (std::uint64_t s = start; s < start + 100; ++s)
        if (sched.syncs_at(g, s)) ++count;
      REQUIRE(count == 1);
    }
  }
}

TEST_CASE("all-at-once schedule is a single full-space group") {
  const ModelConfig cfg = toy_model();
  const SyncSchedule sched = build_sync_schedule(cfg, SyncGrouping::kAllAtOnce, 10);
  REQUIRE(sched.groups.size() == 1);
  REQUIRE(sched.groups[0].size() == ParamLayout(cfg).total_params());
  REQUIRE(sched.offsets[0] == 0);
}

TEST_CASE("six layers with group size three give two layer groups plus a residual group") {
  const ModelConfig cfg = toy_model(6, 16, 4);
  SyncScheduleOptions opts;
  opts.layer_group_size = 3;
  const SyncSchedule sched = build_sync_schedule(cfg, SyncGrouping::kByLayers, 30, opts);
  REQUIRE(sched.groups.size() == 3);
  std::uint64_t covered = 0;
  for (const auto& g : sched.groups) covered += g.size();
  REQUIRE(covered == ParamLayout(cfg).total_params());
}

TEST_CASE("by-slices schedule: one group per slice plus embeddings and attention/norms") {
  const ModelConfig cfg = toy_model(2, 16, 4);
  SyncScheduleOptions opts;
  opts.num_slices = 4;
  const SyncSchedule sched = build_sync_schedule(cfg, SyncGrouping::kBySlices, 20, opts);
  REQUIRE(sched.groups.size() == 6);  // 4 slice groups + embeddings + attention/norms
  std::uint64_t covered = 0;
  for (const auto& g : sched.groups) covered += g.size();
  REQUIRE(covered == ParamLayout(cfg).total_params());
  // groups are disjoint
  for (std::size_t a = 0; a < sched.groups.size(); ++a)
    for (std::size_t b = a + 1; b < sched.groups.size(); ++b)
      REQUIRE(sched.groups[a].intersect(sched.groups[b]).size() == 0);
}

TEST_CASE("layer grouping must divide the layer count") {
  const ModelConfig cfg = toy_model(4, 16, 4);
  SyncScheduleOptions opts;
  opts.layer_group_size = 3;
  REQUIRE_THROWS_AS(build_sync_schedule(cfg, SyncGrouping::kByLayers, 10, opts), ConfigError);
}

TEST_CASE("plans serialize to a JSON description with per-node block descriptors") {
  const ModelConfig cfg = toy_model(2, 16, 4);
  const SlicePlan plan = build_slice_plan(cfg, 4, 2, SliceStrategy::kMlpAndHeads);
  const nlohmann::json j = plan_to_json(plan);
  REQUIRE(j["num_nodes"] == 4);
  REQUIRE(j["num_slices"] == 2);
  REQUIRE(j["strategy"] == "mlp-and-heads");
  REQUIRE(j["nodes"].size() == 4);
  REQUIRE(j["nodes"][0]["slice"] == 0);
  REQUIRE(j["nodes"][2]["slice"] == 0);
  bool found_rows = false, found_cols = false;
  for (const auto& block : j["nodes"][1]["trainable"]) {
    if (block["tensor"] == "layer0.mlp_up" && block["part"] == "rows") found_rows = true;
    if (block["tensor"] == "layer0.attn_q" && block["part"] == "cols") found_cols = true;
  }
  REQUIRE(found_rows);
  REQUIRE(found_cols);
  REQUIRE(j["count_vector"].size() > 0);

  const SyncSchedule sched = build_sync_schedule(cfg, SyncGrouping::kByLayers, 10,
                                                 SyncScheduleOptions{1, 2});
  const nlohmann::json sj = schedule_to_json(sched);
  REQUIRE(sj["groups"].size() == 3);
  REQUIRE(sj["period"] == 10);
}

TEST_CASE("index set algebra: rank, complement, subset") {
  const IndexSet a = IndexSet::from_intervals({{0, 4}, {10, 12}, {4, 6}});
  REQUIRE(a.intervals().size() == 2);  // adjacent ranges coalesce
  REQUIRE(a.size() == 8);
  REQUIRE(a.rank(10) == 6);
  REQUIRE(a.contains(5));
  REQUIRE_FALSE(a.contains(6));
  const IndexSet comp = a.complement(15);
  REQUIRE(comp.size() == 7);
  REQUIRE(comp.contains(9));
  REQUIRE_FALSE(comp.contains(11));
  REQUIRE(a.intersect(comp).size() == 0);
  REQUIRE(a.union_with(comp).size() == 15);
  REQUIRE(IndexSet::from_intervals({{1, 3}}).is_subset_of(a));
  REQUIRE_FALSE(IndexSet::from_intervals({{5, 7}}).is_subset_of(a));
}
