// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "slicesim/errors.hpp"
#include "slicesim/model_config.hpp"

namespace slicesim {

using ParamId = std::uint64_t;

enum class TensorKind : int {
  kTokenEmbedding = 0,
  kPositionEmbedding,
  kLn1Gain,
  kLn1Bias,
  kAttnQ,
  kAttnK,
  kAttnV,
  kAttnO,
  kLn2Gain,
  kLn2Bias,
  kMlpUp,
  kMlpDown,
  kFinalLnGain,
  kFinalLnBias,
};

inline const char* tensor_kind_name(TensorKind k) {
  switch (k) {
    case TensorKind::kTokenEmbedding: return "token_embedding";
    case TensorKind::kPositionEmbedding: return "position_embedding";
    case TensorKind::kLn1Gain: return "ln1_gain";
    case TensorKind::kLn1Bias: return "ln1_bias";
    case TensorKind::kAttnQ: return "attn_q";
    case TensorKind::kAttnK: return "attn_k";
    case TensorKind::kAttnV: return "attn_v";
    case TensorKind::kAttnO: return "attn_o";
    case TensorKind::kLn2Gain: return "ln2_gain";
    case TensorKind::kLn2Bias: return "ln2_bias";
    case TensorKind::kMlpUp: return "mlp_up";
    case TensorKind::kMlpDown: return "mlp_down";
    case TensorKind::kFinalLnGain: return "final_ln_gain";
    case TensorKind::kFinalLnBias: return "final_ln_bias";
  }
  return "?";
}

struct TensorInfo {
  TensorKind kind;
  int layer;  // -1 for global tensors
  int rows;
  int cols;
  ParamId offset;
  bool weight_decay;  // matrix weights decay; embeddings/norms do not
  std::string name;

  std::uint64_t count() const { return static_cast<std::uint64_t>(rows) * cols; }
  ParamId end() const { return offset + count(); }
};

// Dense, enumerable flat index space over every scalar parameter. The output
// head is tied to the token embedding and owns no ids of its own.
class ParamLayout {
 public:
  ParamLayout() = default;

  explicit ParamLayout(const ModelConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    const int d = cfg.hidden_dim;
    const int dff = cfg.ffn();
    add(TensorKind::kTokenEmbedding, -1, cfg.vocab_size, d, false);
    add(TensorKind::kPositionEmbedding, -1, cfg.seq_len, d, false);
    for (int l = 0; l < cfg.num_layers; ++l) {
      add(TensorKind::kLn1Gain, l, 1, d, false);
      add(TensorKind::kLn1Bias, l, 1, d, false);
      add(TensorKind::kAttnQ, l, d, d, true);
      add(TensorKind::kAttnK, l, d, d, true);
      add(TensorKind::kAttnV, l, d, d, true);
      add(TensorKind::kAttnO, l, d, d, true);
      add(TensorKind::kLn2Gain, l, 1, d, false);
      add(TensorKind::kLn2Bias, l, 1, d, false);
      add(TensorKind::kMlpUp, l, dff, d, true);
      add(TensorKind::kMlpDown, l, d, dff, true);
    }
    add(TensorKind::kFinalLnGain, -1, 1, d, false);
    add(TensorKind::kFinalLnBias, -1, 1, d, false);
  }

  const ModelConfig& config() const { return cfg_; }
  const std::vector<TensorInfo>& tensors() const { return tensors_; }
  std::uint64_t total_params() const { return total_; }

  const TensorInfo& find(TensorKind kind, int layer = -1) const {
    for (const auto& t : tensors_) {
      if (t.kind == kind && t.layer == layer) return t;
    }
    throw ContractError(std::string("tensor not found: ") + tensor_kind_name(kind));
  }

  // Tensor containing the given id.
  const TensorInfo& tensor_of(ParamId id) const {
    for (const auto& t : tensors_) {
      if (id >= t.offset && id < t.end()) return t;
    }
    throw ContractError("ParamId out of range");
  }

 private:
  void add(TensorKind kind, int layer, int rows, int cols, bool decay) {
    TensorInfo t;
    t.kind = kind;
    t.layer = layer;
    t.rows = rows;
    t.cols = cols;
    t.offset = total_;
    t.weight_decay = decay;
    t.name = layer >= 0 ? ("layer" + std::to_string(layer) + "." + tensor_kind_name(kind))
                        : tensor_kind_name(kind);
    total_ += t.count();
    tensors_.push_back(std::move(t));
  }

  ModelConfig cfg_;
  std::vector<TensorInfo> tensors_;
  std::uint64_t total_ = 0;
};

struct Interval {
  ParamId begin = 0;
  ParamId end = 0;  // half-open
  std::uint64_t length() const { return end - begin; }
};

// Sorted, coalesced set of ParamIds stored as half-open intervals.
class IndexSet {
 public:
  IndexSet() = default;

  static IndexSet from_intervals(std::vector<Interval> iv) {
    std::sort(iv.begin(), iv.end(), [](const Interval& a, const Interval& b) { return a.begin < b.begin; });
    IndexSet s;
    for (const Interval& in : iv) {
      if (in.begin >= in.end) continue;
      if (!s.iv_.empty() && in.begin <= s.iv_.back().end) {
        if (in.end > s.iv_.back().end) s.iv_.back().end = in.end;
      } else {
        s.iv_.push_back(in);
      }
    }
    s.finalize();
    return s;
  }

  static IndexSet full(std::uint64_t total) { return from_intervals({{0, total}}); }

  const std::vector<Interval>& intervals() const { return iv_; }
  bool empty() const { return iv_.empty(); }
  std::uint64_t size() const { return size_; }

  bool contains(ParamId id) const {
    const int i = locate(id);
    return i >= 0;
  }

  // Position of id within the set's ascending enumeration.
  std::uint64_t rank(ParamId id) const {
    const int i = locate(id);
    if (i < 0) throw ContractError("IndexSet::rank: id not in set");
    return cum_[i] + (id - iv_[i].begin);
  }

  IndexSet complement(std::uint64_t total) const {
    std::vector<Interval> out;
    ParamId prev = 0;
    for (const Interval& in : iv_) {
      if (in.begin > prev) out.push_back({prev, in.begin});
      prev = in.end;
    }
    if (prev < total) out.push_back({prev, total});
    return from_intervals(std::move(out));
  }

  IndexSet union_with(const IndexSet& other) const {
    std::vector<Interval> all = iv_;
    all.insert(all.end(), other.iv_.begin(), other.iv_.end());
    return from_intervals(std::move(all));
  }

  IndexSet intersect(const IndexSet& other) const {
    std::vector<Interval> out;
    std::size_t i = 0, j = 0;
    while (i < iv_.size() && j < other.iv_.size()) {
      const ParamId lo = std::max(iv_[i].begin, other.iv_[j].begin);
      const ParamId hi = std::min(iv_[i].end, other.iv_[j].end);
      if (lo < hi) out.push_back({lo, hi});
      if (iv_[i].end < other.iv_[j].end) ++i;
      else ++j;
    }
    return from_intervals(std::move(out));
  }

  bool is_subset_of(const IndexSet& other) const { return intersect(other).size() == size_; }

  // Intervals clipped to [begin, end), shifted so the window starts at 0.
  std::vector<Interval> clipped(ParamId begin, ParamId end) const {
    std::vector<Interval> out;
    for (const Interval& in : iv_) {
      const ParamId lo = std::max(in.begin, begin);
      const ParamId hi = std::min(in.end, end);
      if (lo < hi) out.push_back({lo - begin, hi - begin});
    }
    return out;
  }

  bool operator==(const IndexSet& other) const {
    if (iv_.size() != other.iv_.size()) return false;
    for (std::size_t i = 0; i < iv_.size(); ++i)
      if (iv_[i].begin != other.iv_[i].begin || iv_[i].end != other.iv_[i].end) return false;
    return true;
  }

 private:
  void finalize() {
    cum_.resize(iv_.size());
    std::uint64_t c = 0;
    for (std::size_t i = 0; i < iv_.size(); ++i) {
      cum_[i] = c;
      c += iv_[i].length();
    }
    size_ = c;
  }

  // Index of the interval containing id, or -1.
  int locate(ParamId id) const {
    std::size_t lo = 0, hi = iv_.size();
    while (lo < hi) {
      const std::size_t mid = (lo + hi) / 2;
      if (iv_[mid].end <= id) lo = mid + 1;
      else hi = mid;
    }
    if (lo < iv_.size() && iv_[lo].begin <= id && id < iv_[lo].end) return static_cast<int>(lo);
    return -1;
  }

  std::vector<Interval> iv_;
  std::vector<std::uint64_t> cum_;
  std::uint64_t size_ = 0;
};

// Piecewise-constant per-ParamId integer, used for the count vector m.
class CountVector {
 public:
  struct Segment {
    ParamId begin;
    ParamId end;
    std::uint32_t count;
  };

  CountVector() = default;

  // Sum of weighted indicator functions: value at id is
  // sum_i weight[i] * [id in *sets[i]].
  static CountVector from_weighted_sets(const std::vector<const IndexSet*>& sets,
                                        const std::vector<std::uint32_t>& weights,
                                        std::uint64_t total) {
    if (sets.size() != weights.size()) throw ContractError("CountVector: sets/weights size mismatch");
    struct Event {
      ParamId pos;
      std::int64_t delta;
    };
    std::vector<Event> events;
    for (std::size_t i = 0; i < sets.size(); ++i) {
      for (const Interval& in : sets[i]->intervals()) {
        events.push_back({in.begin, static_cast<std::int64_t>(weights[i])});
        events.push_back({in.end, -static_cast<std::int64_t>(weights[i])});
      }
    }
    std::sort(events.begin(), events.end(), [](const Event& a, const Event& b) { return a.pos < b.pos; });
    CountVector cv;
    cv.total_ = total;
    std::int64_t cur = 0;
    ParamId prev = 0;
    std::size_t i = 0;
    while (i < events.size()) {
      const ParamId pos = events[i].pos;
      if (pos > prev) cv.push_segment(prev, pos, static_cast<std::uint32_t>(cur));
      while (i < events.size() && events[i].pos == pos) {
        cur += events[i].delta;
        ++i;
      }
      prev = pos;
    }
    if (prev < total) cv.push_segment(prev, total, static_cast<std::uint32_t>(cur));
    return cv;
  }

  std::uint32_t at(ParamId id) const {
    std::size_t lo = 0, hi = seg_.size();
    while (lo < hi) {
      const std::size_t mid = (lo + hi) / 2;
      if (seg_[mid].end <= id) lo = mid + 1;
      else hi = mid;
    }
    if (lo >= seg_.size() || id < seg_[lo].begin || id >= seg_[lo].end)
      throw ContractError("CountVector::at: id out of range");
    return seg_[lo].count;
  }

  const std::vector<Segment>& segments() const { return seg_; }
  std::uint64_t total() const { return total_; }

  std::uint32_t min_count() const {
    std::uint32_t m = UINT32_MAX;
    for (const auto& s : seg_) m = std::min(m, s.count);
    return seg_.empty() ? 0 : m;
  }

 private:
  void push_segment(ParamId b, ParamId e, std::uint32_t c) {
    if (!seg_.empty() && seg_.back().count == c && seg_.back().end == b) {
      seg_.back().end = e;
    } else {
      seg_.push_back({b, e, c});
    }
  }

  std::vector<Segment> seg_;
  std::uint64_t total_ = 0;
};

}  // namespace slicesim
