// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "slicesim/errors.hpp"
#include "slicesim/model.hpp"
#include "slicesim/param_space.hpp"

namespace slicesim {

// ---------------------------------------------------------------------------
// Learning-rate schedule: linear warmup to the peak, cosine decay to floor.
// ---------------------------------------------------------------------------

struct LrSchedule {
  double peak = 3e-4;
  double floor = 0.0;
  std::uint64_t warmup_steps = 0;
  std::uint64_t total_steps = 1;

  // step is 1-based during training; at(0) == 0 when warming up.
  double at(std::uint64_t step) const {
    if (step > total_steps) step = total_steps;
    if (warmup_steps > 0 && step < warmup_steps)
      return peak * static_cast<double>(step) / static_cast<double>(warmup_steps);
    if (total_steps <= warmup_steps) return peak;
    if (step >= total_steps) return floor;
    const double progress = static_cast<double>(step - warmup_steps) /
                            static_cast<double>(total_steps - warmup_steps);
    return floor + (peak - floor) * 0.5 * (1.0 + std::cos(M_PI * progress));
  }
};

// ---------------------------------------------------------------------------
// Inner optimizer: AdamW (or plain SGD) over the trainable indices only.
// ---------------------------------------------------------------------------

enum class InnerOptKind { kAdamW, kSgd };

inline const char* inner_opt_name(InnerOptKind k) {
  return k == InnerOptKind::kAdamW ? "adamw" : "sgd";
}

inline InnerOptKind inner_opt_from_name(const std::string& s) {
  if (s == "adamw") return InnerOptKind::kAdamW;
  if (s == "sgd") return InnerOptKind::kSgd;
  throw ConfigError("unknown inner optimizer: " + s);
}

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
  double weight_decay = 0.1;  // decoupled; applied to matrix weights only
};

// Moments exist for exactly the trainable set, stored in coverage-rank order.
// That is the memory saving: serialized size is proportional to the covered
// count, not to |theta|.
class InnerOptState {
 public:
  InnerOptState() = default;

  InnerOptState(InnerOptKind kind, AdamWConfig cfg, const ParamLayout& layout, IndexSet coverage)
      : kind_(kind), cfg_(cfg), coverage_(std::move(coverage)) {
    if (kind_ == InnerOptKind::kAdamW) {
      m_.assign(coverage_.size(), 0.0);
      v_.assign(coverage_.size(), 0.0);
    }
    // Split coverage intervals at tensor boundaries and attach decay flags.
    std::uint64_t rank = 0;
    for (const Interval& in : coverage_.intervals()) {
      ParamId pos = in.begin;
      while (pos < in.end) {
        const TensorInfo& t = layout.tensor_of(pos);
        const ParamId stop = std::min<ParamId>(in.end, t.end());
        spans_.push_back({pos, rank, stop - pos, t.weight_decay});
        rank += stop - pos;
        pos = stop;
      }
    }
  }

  InnerOptKind kind() const { return kind_; }
  const AdamWConfig& config() const { return cfg_; }
  const IndexSet& coverage() const { return coverage_; }
  std::uint64_t step_count() const { return step_; }
  std::uint64_t entry_count() const { return m_.size() + v_.size(); }

  std::vector<double>& first_moment() { return m_; }
  std::vector<double>& second_moment() { return v_; }
  const std::vector<double>& first_moment() const { return m_; }
  const std::vector<double>& second_moment() const { return v_; }
  void set_step_count(std::uint64_t s) { step_ = s; }

  struct Span {
    ParamId offset;
    std::uint64_t rank;
    std::uint64_t len;
    bool decay;
  };
  const std::vector<Span>& spans() const { return spans_; }
  void bump_step() { ++step_; }

  // Zero the moments and the step counter (fresh-optimizer semantics).
  void reset() {
    step_ = 0;
    std::fill(m_.begin(), m_.end(), 0.0);
    std::fill(v_.begin(), v_.end(), 0.0);
  }

 private:
  InnerOptKind kind_ = InnerOptKind::kAdamW;
  AdamWConfig cfg_;
  IndexSet coverage_;
  std::uint64_t step_ = 0;
  std::vector<double> m_;
  std::vector<double> v_;
  std::vector<Span> spans_;
};

// One masked optimizer step. theta is the full parameter vector; only the
// covered indices change, frozen indices are untouched bit for bit.
// AdamW follows the decoupled formulation:
//   m <- b1 m + (1-b1) g ; v <- b2 v + (1-b2) g^2
//   theta <- theta (1 - lr wd)  [decaying tensors only]
//   theta <- theta - lr mhat / (sqrt(vhat) + eps)   with bias correction.
inline void inner_step(std::vector<double>& theta, const GradientBuffer& grads,
                       InnerOptState& state, double lr) {
  if (!(grads.coverage() == state.coverage()))
    throw ContractError("inner_step: gradient coverage does not match optimizer state coverage");
  state.bump_step();
  const double* g = grads.values().data();
  if (state.kind() == InnerOptKind::kSgd) {
    for (const auto& sp : state.spans()) {
      double* th = theta.data() + sp.offset;
      const double* gs = g + sp.rank;
      for (std::uint64_t i = 0; i < sp.len; ++i) th[i] -= lr * gs[i];
    }
    return;
  }
  const AdamWConfig& c = state.config();
  const double t = static_cast<double>(state.step_count());
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  double* m = state.first_moment().data();
  double* v = state.second_moment().data();
  for (const auto& sp : state.spans()) {
    double* th = theta.data() + sp.offset;
    const double* gs = g + sp.rank;
    double* ms = m + sp.rank;
    double* vs = v + sp.rank;
    const double decay_mult = sp.decay ? (1.0 - lr * c.weight_decay) : 1.0;
    for (std::uint64_t i = 0; i < sp.len; ++i) {
      const double gi = gs[i];
      ms[i] = c.beta1 * ms[i] + (1.0 - c.beta1) * gi;
      vs[i] = c.beta2 * vs[i] + (1.0 - c.beta2) * gi * gi;
      const double mhat = ms[i] / bc1;
      const double vhat = vs[i] / bc2;
      th[i] = th[i] * decay_mult - lr * mhat / (std::sqrt(vhat) + c.eps);
    }
  }
}

// Unmasked variant reading a dense full-space gradient vector; the state's
// coverage must be the full space. The arithmetic is the same span loop as
// the masked path.
inline void inner_step_dense(std::vector<double>& theta, const std::vector<double>& grads,
                             InnerOptState& state, double lr) {
  if (state.coverage().size() != theta.size() || grads.size() != theta.size())
    throw ContractError("inner_step_dense: state must cover the full parameter space");
  state.bump_step();
  if (state.kind() == InnerOptKind::kSgd) {
    for (const auto& sp : state.spans()) {
      double* th = theta.data() + sp.offset;
      const double* gs = grads.data() + sp.offset;
      for (std::uint64_t i = 0; i < sp.len; ++i) th[i] -= lr * gs[i];
    }
    return;
  }
  const AdamWConfig& c = state.config();
  const double t = static_cast<double>(state.step_count());
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  double* m = state.first_moment().data();
  double* v = state.second_moment().data();
  for (const auto& sp : state.spans()) {
    double* th = theta.data() + sp.offset;
    const double* gs = grads.data() + sp.offset;
    double* ms = m + sp.rank;
    double* vs = v + sp.rank;
    const double decay_mult = sp.decay ? (1.0 - lr * c.weight_decay) : 1.0;
    for (std::uint64_t i = 0; i < sp.len; ++i) {
      const double gi = gs[i];
      ms[i] = c.beta1 * ms[i] + (1.0 - c.beta1) * gi;
      vs[i] = c.beta2 * vs[i] + (1.0 - c.beta2) * gi * gi;
      const double mhat = ms[i] / bc1;
      const double vhat = vs[i] / bc2;
      th[i] = th[i] * decay_mult - lr * mhat / (std::sqrt(vhat) + c.eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Outer optimizer over pseudo-gradients (-delta).
// ---------------------------------------------------------------------------

enum class OuterOptKind { kNesterov, kSgd, kDirect };

inline const char* outer_opt_name(OuterOptKind k) {
  switch (k) {
    case OuterOptKind::kNesterov: return "nesterov";
    case OuterOptKind::kSgd: return "sgd";
    case OuterOptKind::kDirect: return "direct";
  }
  return "?";
}

inline OuterOptKind outer_opt_from_name(const std::string& s) {
  if (s == "nesterov") return OuterOptKind::kNesterov;
  if (s == "sgd") return OuterOptKind::kSgd;
  if (s == "direct") return OuterOptKind::kDirect;
  throw ConfigError("unknown outer optimizer: " + s);
}

struct OuterOptConfig {
  OuterOptKind kind = OuterOptKind::kNesterov;
  double lr = 0.4;
  double momentum = 0.9;
};

// The momentum buffer spans the full ParamId space; the outer step touches
// every parameter (group by group under streaming synchronization).
struct OuterOptState {
  std::vector<double> momentum;

  explicit OuterOptState(std::uint64_t total = 0) : momentum(total, 0.0) {}
};

// Applies the outer update on [subset] (full space when null), treating
// -delta as the gradient:
//   nesterov: buf <- mu buf + g ; theta <- theta - lr (g + mu buf)
//   sgd:      buf <- mu buf + g ; theta <- theta - lr buf
//   direct:   theta <- theta + delta
inline void outer_step(std::vector<double>& theta, const std::vector<double>& delta,
                       OuterOptState& state, const OuterOptConfig& cfg,
                       const IndexSet* subset = nullptr) {
  if (delta.size() != theta.size() || state.momentum.size() != theta.size())
    throw ContractError("outer_step: delta/momentum size mismatch");
  const auto apply = [&](ParamId begin, ParamId end) {
    switch (cfg.kind) {
      case OuterOptKind::kDirect:
        for (ParamId i = begin; i < end; ++i) theta[i] += delta[i];
        break;
      case OuterOptKind::kSgd:
        for (ParamId i = begin; i < end; ++i) {
          const double g = -delta[i];
          state.momentum[i] = cfg.momentum * state.momentum[i] + g;
          theta[i] -= cfg.lr * state.momentum[i];
        }
        break;
      case OuterOptKind::kNesterov:
        for (ParamId i = begin; i < end; ++i) {
          const double g = -delta[i];
          state.momentum[i] = cfg.momentum * state.momentum[i] + g;
          theta[i] -= cfg.lr * (g + cfg.momentum * state.momentum[i]);
        }
        break;
    }
  };
  if (subset == nullptr) {
    apply(0, theta.size());
  } else {
    for (const Interval& in : subset->intervals()) apply(in.begin, in.end);
  }
}

}  // namespace slicesim
