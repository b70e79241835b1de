// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "slicesim/errors.hpp"
#include "slicesim/mat.hpp"
#include "slicesim/model_config.hpp"
#include "slicesim/param_space.hpp"
#include "slicesim/rng.hpp"
#include "slicesim/token_batch.hpp"

namespace slicesim {

constexpr double kLayerNormEps = 1e-5;

// All weight tensors in one flat vector; tensors are addressed through the
// layout and materialized as row-major Mat copies for the kernels. The output
// head is tied to the token embedding.
class ModelParams {
 public:
  ModelParams() = default;
  explicit ModelParams(const ModelConfig& cfg)
      : layout_(cfg), theta_(layout_.total_params(), 0.0) {}

  const ModelConfig& config() const { return layout_.config(); }
  const ParamLayout& layout() const { return layout_; }

  std::vector<double>& flat() { return theta_; }
  const std::vector<double>& flat() const { return theta_; }

  Mat tensor(TensorKind kind, int layer = -1) const {
    const TensorInfo& t = layout_.find(kind, layer);
    Mat m(t.rows, t.cols);
    std::memcpy(m.data(), theta_.data() + t.offset, t.count() * sizeof(double));
    return m;
  }

  const double* tensor_data(TensorKind kind, int layer = -1) const {
    return theta_.data() + layout_.find(kind, layer).offset;
  }

  bool all_finite() const {
    for (double v : theta_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

 private:
  ParamLayout layout_;
  std::vector<double> theta_;
};

// GPT-style init: N(0, 0.02) for embeddings and projections, with the
// residual-facing projections (attn_o, mlp_down) scaled by 1/sqrt(2L);
// norm gains 1, biases 0. Draw order follows the layout, so the result is a
// pure function of (config, seed).
inline void init_params(ModelParams& params, std::uint64_t seed, double init_std = 0.02) {
  Rng rng(mix_seed(seed, 0x1217));
  const double resid_scale = 1.0 / std::sqrt(2.0 * params.config().num_layers);
  double* theta = params.flat().data();
  for (const TensorInfo& t : params.layout().tensors()) {
    double std_dev = init_std;
    bool constant = false;
    double cval = 0.0;
    switch (t.kind) {
      case TensorKind::kLn1Gain:
      case TensorKind::kLn2Gain:
      case TensorKind::kFinalLnGain:
        constant = true;
        cval = 1.0;
        break;
      case TensorKind::kLn1Bias:
      case TensorKind::kLn2Bias:
      case TensorKind::kFinalLnBias:
        constant = true;
        cval = 0.0;
        break;
      case TensorKind::kAttnO:
      case TensorKind::kMlpDown:
        std_dev = init_std * resid_scale;
        break;
      default:
        break;
    }
    for (std::uint64_t i = 0; i < t.count(); ++i)
      theta[t.offset + i] = constant ? cval : rng.normal(0.0, std_dev);
  }
}

// Forward-pass multiply-accumulate tallies per matmul family. The analytic
// cost model is cross-checked against these.
struct MacCounter {
  std::uint64_t proj = 0;      // q/k/v projections
  std::uint64_t attn = 0;      // QK^T and AV matmuls
  std::uint64_t out_proj = 0;  // attention output projection
  std::uint64_t ffn = 0;       // both MLP matmuls
  std::uint64_t head = 0;      // tied output head
};

struct LayerCache {
  Mat resid_in;   // residual stream entering the layer
  Mat ln1_xhat;   // normalized ln1 input
  std::vector<double> ln1_rstd;
  Mat ln1_out;    // attention input
  Mat q, k, v;    // (B*S) x d
  std::vector<Mat> attn_probs;  // per (seq, head), S x S
  Mat u;          // concatenated head outputs
  Mat resid_mid;  // after attention residual
  Mat ln2_xhat;
  std::vector<double> ln2_rstd;
  Mat ln2_out;    // mlp input
  Mat mlp_pre;    // (B*S) x ffn, pre-ReLU
};

struct ActivationCache {
  int batch = 0;
  int seq = 0;
  std::vector<std::int32_t> token_ids;
  std::vector<LayerCache> layers;
  Mat final_in;  // residual stream entering the final norm
  Mat final_xhat;
  std::vector<double> final_rstd;
  Mat final_out;  // head input
};

namespace detail {

// y = gain (.) xhat + bias, per token; xhat and rstd are cached for backward.
inline void layernorm_forward(const Mat& x, const double* gain, const double* bias, Mat& y,
                              Mat& xhat, std::vector<double>& rstd) {
  const int n = x.rows();
  const int d = x.cols();
  xhat = Mat(n, d);
  y = Mat(n, d);
  rstd.assign(n, 0.0);
  for (int i = 0; i < n; ++i) {
    const double* xr = x.row(i);
    double mean = 0.0;
    for (int j = 0; j < d; ++j) mean += xr[j];
    mean /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
      const double c = xr[j] - mean;
      var += c * c;
    }
    var /= d;
    const double r = 1.0 / std::sqrt(var + kLayerNormEps);
    rstd[i] = r;
    double* xh = xhat.row(i);
    double* yr = y.row(i);
    for (int j = 0; j < d; ++j) {
      xh[j] = (xr[j] - mean) * r;
      yr[j] = gain[j] * xh[j] + bias[j];
    }
  }
}

// dgain/dbias accumulate over tokens in ascending order; dx is written.
inline void layernorm_backward(const Mat& dy, const Mat& xhat, const std::vector<double>& rstd,
                               const double* gain, Mat& dx, std::vector<double>* dgain,
                               std::vector<double>* dbias) {
  const int n = dy.rows();
  const int d = dy.cols();
  dx = Mat(n, d);
  for (int i = 0; i < n; ++i) {
    const double* dyr = dy.row(i);
    const double* xh = xhat.row(i);
    double sum_dyg = 0.0;
    double sum_dyg_xh = 0.0;
    for (int j = 0; j < d; ++j) {
      const double dyg = dyr[j] * gain[j];
      sum_dyg += dyg;
      sum_dyg_xh += dyg * xh[j];
    }
    const double mean_dyg = sum_dyg / d;
    const double mean_dyg_xh = sum_dyg_xh / d;
    double* dxr = dx.row(i);
    for (int j = 0; j < d; ++j) {
      const double dyg = dyr[j] * gain[j];
      dxr[j] = rstd[i] * (dyg - mean_dyg - xh[j] * mean_dyg_xh);
    }
  }
  if (dgain) {
    dgain->assign(d, 0.0);
    dbias->assign(d, 0.0);
    for (int i = 0; i < n; ++i) {
      const double* dyr = dy.row(i);
      const double* xh = xhat.row(i);
      for (int j = 0; j < d; ++j) {
        (*dgain)[j] += dyr[j] * xh[j];
        (*dbias)[j] += dyr[j];
      }
    }
  }
}

inline void check_layer_finite(const Mat& m, int layer, const char* where) {
  if (!m.all_finite())
    throw NumericError("non-finite activation in layer " + std::to_string(layer) + " (" + where + ")");
}

}  // namespace detail

// Forward pass over a batch. Returns logits of shape (batch*seq) x vocab.
// The cache, when provided, retains every intermediate the exact backward
// needs. The counter, when provided, tallies matmul MACs.
inline Mat forward(const ModelParams& params, const TokenBatch& batch, ActivationCache* cache,
                   MacCounter* macs = nullptr) {
  const ModelConfig& cfg = params.config();
  const int B = batch.batch;
  const int S = batch.seq_len;
  const int d = cfg.hidden_dim;
  const int h = cfg.num_heads;
  const int dh = cfg.head_dim();
  const int dff = cfg.ffn();
  const int n = B * S;
  if (S > cfg.seq_len) throw ConfigError("batch seq length exceeds model seq_len");
  for (std::int32_t t : batch.ids) {
    if (t < 0 || t >= cfg.vocab_size) throw ConfigError("token id out of vocab range");
  }

  const double* tok_emb = params.tensor_data(TensorKind::kTokenEmbedding);
  const double* pos_emb = params.tensor_data(TensorKind::kPositionEmbedding);

  Mat x(n, d);
  for (int b = 0; b < B; ++b) {
    for (int s = 0; s < S; ++s) {
      const int row = b * S + s;
      const double* te = tok_emb + static_cast<std::size_t>(batch.id(b, s)) * d;
      const double* pe = pos_emb + static_cast<std::size_t>(s) * d;
      double* xr = x.row(row);
      for (int j = 0; j < d; ++j) xr[j] = te[j] + pe[j];
    }
  }

  if (cache) {
    cache->batch = B;
    cache->seq = S;
    cache->token_ids = batch.ids;
    cache->layers.assign(cfg.num_layers, LayerCache{});
  }

  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(dh));

  for (int l = 0; l < cfg.num_layers; ++l) {
    LayerCache scratch;
    LayerCache& lc = cache ? cache->layers[l] : scratch;
    lc.resid_in = x;

    detail::layernorm_forward(x, params.tensor_data(TensorKind::kLn1Gain, l),
                              params.tensor_data(TensorKind::kLn1Bias, l), lc.ln1_out, lc.ln1_xhat,
                              lc.ln1_rstd);

    const Mat wq = params.tensor(TensorKind::kAttnQ, l);
    const Mat wk = params.tensor(TensorKind::kAttnK, l);
    const Mat wv = params.tensor(TensorKind::kAttnV, l);
    lc.q = Mat(n, d);
    lc.k = Mat(n, d);
    lc.v = Mat(n, d);
    gemm_nn(lc.ln1_out, wq, lc.q);
    gemm_nn(lc.ln1_out, wk, lc.k);
    gemm_nn(lc.ln1_out, wv, lc.v);
    if (macs) macs->proj += 3ull * n * d * d;

    lc.u = Mat(n, d);
    lc.attn_probs.assign(static_cast<std::size_t>(B) * h, Mat());
    for (int b = 0; b < B; ++b) {
      for (int j = 0; j < h; ++j) {
        Mat qb(S, dh), kb(S, dh), vb(S, dh);
        for (int s = 0; s < S; ++s) {
          std::memcpy(qb.row(s), lc.q.row(b * S + s) + j * dh, dh * sizeof(double));
          std::memcpy(kb.row(s), lc.k.row(b * S + s) + j * dh, dh * sizeof(double));
          std::memcpy(vb.row(s), lc.v.row(b * S + s) + j * dh, dh * sizeof(double));
        }
        Mat scores(S, S);
        gemm_nt(qb, kb, scores);
        if (macs) macs->attn += static_cast<std::uint64_t>(S) * S * dh;
        Mat& probs = lc.attn_probs[static_cast<std::size_t>(b) * h + j];
        probs = Mat(S, S);
        for (int s = 0; s < S; ++s) {
          double* sr = scores.row(s);
          double mx = -1e300;
          for (int t = 0; t <= s; ++t) {
            sr[t] *= attn_scale;
            if (sr[t] > mx) mx = sr[t];
          }
          double sum = 0.0;
          double* pr = probs.row(s);
          for (int t = 0; t <= s; ++t) {
            pr[t] = std::exp(sr[t] - mx);
            sum += pr[t];
          }
          for (int t = 0; t <= s; ++t) pr[t] /= sum;
          for (int t = s + 1; t < S; ++t) pr[t] = 0.0;  // causal mask
        }
        Mat ub(S, dh);
        gemm_nn(probs, vb, ub);
        if (macs) macs->attn += static_cast<std::uint64_t>(S) * S * dh;
        for (int s = 0; s < S; ++s)
          std::memcpy(lc.u.row(b * S + s) + j * dh, ub.row(s), dh * sizeof(double));
      }
    }

    const Mat wo = params.tensor(TensorKind::kAttnO, l);
    Mat attn_out(n, d);
    gemm_nn(lc.u, wo, attn_out);
    if (macs) macs->out_proj += static_cast<std::uint64_t>(n) * d * d;

    lc.resid_mid = Mat(n, d);
    for (int i = 0; i < n; ++i) {
      const double* a = x.row(i);
      const double* o = attn_out.row(i);
      double* r = lc.resid_mid.row(i);
      for (int j = 0; j < d; ++j) r[j] = a[j] + o[j];
    }
    detail::check_layer_finite(lc.resid_mid, l, "attention");

    detail::layernorm_forward(lc.resid_mid, params.tensor_data(TensorKind::kLn2Gain, l),
                              params.tensor_data(TensorKind::kLn2Bias, l), lc.ln2_out, lc.ln2_xhat,
                              lc.ln2_rstd);

    const Mat w_up = params.tensor(TensorKind::kMlpUp, l);      // dff x d
    const Mat w_down = params.tensor(TensorKind::kMlpDown, l);  // d x dff
    lc.mlp_pre = Mat(n, dff);
    gemm_nt(lc.ln2_out, w_up, lc.mlp_pre);
    Mat act(n, dff);
    for (std::size_t i = 0; i < act.size(); ++i)
      act.data()[i] = lc.mlp_pre.data()[i] > 0.0 ? lc.mlp_pre.data()[i] : 0.0;
    Mat mlp_out(n, d);
    gemm_nt(act, w_down, mlp_out);
    if (macs) macs->ffn += 2ull * n * d * dff;

    x = Mat(n, d);
    for (int i = 0; i < n; ++i) {
      const double* a = lc.resid_mid.row(i);
      const double* o = mlp_out.row(i);
      double* r = x.row(i);
      for (int j = 0; j < d; ++j) r[j] = a[j] + o[j];
    }
    detail::check_layer_finite(x, l, "mlp");
  }

  ActivationCache scratch_top;
  ActivationCache& top = cache ? *cache : scratch_top;
  top.final_in = x;
  detail::layernorm_forward(x, params.tensor_data(TensorKind::kFinalLnGain),
                            params.tensor_data(TensorKind::kFinalLnBias), top.final_out,
                            top.final_xhat, top.final_rstd);

  const Mat emb = params.tensor(TensorKind::kTokenEmbedding);
  Mat logits(n, cfg.vocab_size);
  gemm_nt(top.final_out, emb, logits);
  if (macs) macs->head += static_cast<std::uint64_t>(n) * d * cfg.vocab_size;
  if (!logits.all_finite()) throw NumericError("non-finite logits at output head");
  return logits;
}

// Mean next-token negative log-likelihood over the predicted positions, and
// its gradient wrt the logits ((softmax - onehot) / positions; zero at each
// sequence's final position).
inline std::pair<double, Mat> cross_entropy_loss(const Mat& logits, const TokenBatch& batch) {
  const int B = batch.batch;
  const int S = batch.seq_len;
  const int V = logits.cols();
  if (logits.rows() != B * S) throw ConfigError("cross_entropy_loss: logits/batch shape mismatch");
  const int npos = batch.predicted_positions();
  Mat dlogits(B * S, V);
  double loss = 0.0;
  const double inv = 1.0 / npos;
  for (int b = 0; b < B; ++b) {
    for (int s = 0; s < S; ++s) {
      const int row = b * S + s;
      double* dl = dlogits.row(row);
      if (s + 1 >= S) {
        for (int j = 0; j < V; ++j) dl[j] = 0.0;
        continue;
      }
      const double* lr = logits.row(row);
      double mx = lr[0];
      for (int j = 1; j < V; ++j) mx = std::max(mx, lr[j]);
      double sum = 0.0;
      for (int j = 0; j < V; ++j) sum += std::exp(lr[j] - mx);
      const double lse = mx + std::log(sum);
      const int target = batch.target(b, s);
      loss += (lse - lr[target]) * inv;
      for (int j = 0; j < V; ++j) dl[j] = std::exp(lr[j] - lse) * inv;
      dl[target] -= inv;
    }
  }
  return {loss, std::move(dlogits)};
}

// ---------------------------------------------------------------------------
// Partial backward
// ---------------------------------------------------------------------------

enum class BackwardModeKind { kFullJacobian, kDetachAllButK, kDetachKPlusRandom };

inline const char* backward_mode_name(BackwardModeKind m) {
  switch (m) {
    case BackwardModeKind::kFullJacobian: return "full-jacobian";
    case BackwardModeKind::kDetachAllButK: return "detach-all-but-k";
    case BackwardModeKind::kDetachKPlusRandom: return "detach-k-plus-random";
  }
  return "?";
}

// Detach modes drop frozen MLP slices from the input Jacobian; they need the
// slice geometry (N, own slice k) and, for k-plus-random, the extra slice g
// sampled by the caller for this step.
struct BackwardOptions {
  BackwardModeKind mode = BackwardModeKind::kFullJacobian;
  int num_slices = 1;
  int own_slice = 0;
  int extra_slice = -1;
};

// Gradients for a trainable index set, stored compactly in coverage-rank
// order. Reads of frozen indices yield zero.
class GradientBuffer {
 public:
  GradientBuffer() = default;
  explicit GradientBuffer(IndexSet coverage)
      : coverage_(std::move(coverage)), vals_(coverage_.size(), 0.0) {}

  const IndexSet& coverage() const { return coverage_; }
  bool covers(ParamId id) const { return coverage_.contains(id); }
  double at(ParamId id) const { return covers(id) ? vals_[coverage_.rank(id)] : 0.0; }
  std::uint64_t entry_count() const { return vals_.size(); }
  std::vector<double>& values() { return vals_; }
  const std::vector<double>& values() const { return vals_; }

  void set_run(ParamId id, const double* src, std::uint64_t len) {
    if (len == 0) return;
    const std::uint64_t r = coverage_.rank(id);
    if (coverage_.rank(id + len - 1) != r + len - 1)
      throw ContractError("GradientBuffer::set_run: run not contiguous in coverage");
    std::memcpy(vals_.data() + r, src, len * sizeof(double));
  }

 private:
  IndexSet coverage_;
  std::vector<double> vals_;
};

namespace detail {

// Per-tensor classification of a trainable index set. The band shapes are
// the ones the slicing strategies produce; anything else falls back to
// computing the full tensor gradient and restricting it (bit-identical by
// the kernel ordering rule, just without the FLOP savings).
struct TensorMask {
  enum class Kind { kNone, kFull, kRowBand, kColBand, kScatter };
  Kind kind = Kind::kNone;
  int r0 = 0, r1 = 0;
  int c0 = 0, c1 = 0;
  std::vector<Interval> runs;  // tensor-local, for kScatter
};

inline TensorMask derive_mask(const IndexSet& set, const TensorInfo& t) {
  TensorMask m;
  std::vector<Interval> local = set.clipped(t.offset, t.end());
  if (local.empty()) {
    m.kind = TensorMask::Kind::kNone;
    return m;
  }
  const std::uint64_t cols = static_cast<std::uint64_t>(t.cols);
  if (local.size() == 1) {
    if (local[0].begin == 0 && local[0].end == t.count()) {
      m.kind = TensorMask::Kind::kFull;
      return m;
    }
    if (local[0].begin % cols == 0 && local[0].end % cols == 0) {
      m.kind = TensorMask::Kind::kRowBand;
      m.r0 = static_cast<int>(local[0].begin / cols);
      m.r1 = static_cast<int>(local[0].end / cols);
      return m;
    }
  }
  if (local.size() == static_cast<std::size_t>(t.rows)) {
    const std::uint64_t c0 = local[0].begin;
    const std::uint64_t c1 = local[0].end;
    bool band = c1 <= cols;
    for (std::size_t r = 0; band && r < local.size(); ++r) {
      band = local[r].begin == r * cols + c0 && local[r].end == r * cols + c1;
    }
    if (band) {
      m.kind = TensorMask::Kind::kColBand;
      m.c0 = static_cast<int>(c0);
      m.c1 = static_cast<int>(c1);
      return m;
    }
  }
  m.kind = TensorMask::Kind::kScatter;
  m.runs = std::move(local);
  return m;
}

// Destination for per-tensor gradient blocks; either a dense full-space
// vector or a compact masked buffer.
class GradSink {
 public:
  virtual ~GradSink() = default;
  virtual void write_run(ParamId id, const double* src, std::uint64_t len) = 0;
};

class DenseGradSink : public GradSink {
 public:
  explicit DenseGradSink(std::vector<double>& out) : out_(out) {}
  void write_run(ParamId id, const double* src, std::uint64_t len) override {
    std::memcpy(out_.data() + id, src, len * sizeof(double));
  }

 private:
  std::vector<double>& out_;
};

class BufferGradSink : public GradSink {
 public:
  explicit BufferGradSink(GradientBuffer& buf) : buf_(buf) {}
  void write_run(ParamId id, const double* src, std::uint64_t len) override {
    buf_.set_run(id, src, len);
  }

 private:
  GradientBuffer& buf_;
};

// Emit a full-tensor gradient through the mask.
inline void emit_masked(const Mat& grad, const TensorInfo& t, const TensorMask& m, GradSink& sink) {
  switch (m.kind) {
    case TensorMask::Kind::kNone:
      return;
    case TensorMask::Kind::kFull:
      sink.write_run(t.offset, grad.data(), t.count());
      return;
    case TensorMask::Kind::kRowBand:
      sink.write_run(t.offset + static_cast<std::uint64_t>(m.r0) * t.cols, grad.row(m.r0),
                     static_cast<std::uint64_t>(m.r1 - m.r0) * t.cols);
      return;
    case TensorMask::Kind::kColBand:
      for (int r = 0; r < grad.rows(); ++r)
        sink.write_run(t.offset + static_cast<std::uint64_t>(r) * t.cols + m.c0, grad.row(r) + m.c0,
                       m.c1 - m.c0);
      return;
    case TensorMask::Kind::kScatter:
      for (const Interval& run : m.runs)
        sink.write_run(t.offset + run.begin, grad.data() + run.begin, run.length());
      return;
  }
}

// Emit a band gradient computed only for the masked rows/cols.
inline void emit_row_band(const Mat& band, const TensorInfo& t, int r0, GradSink& sink) {
  sink.write_run(t.offset + static_cast<std::uint64_t>(r0) * t.cols, band.data(),
                 band.size());
}

inline void emit_col_band(const Mat& band, const TensorInfo& t, int c0, GradSink& sink) {
  for (int r = 0; r < band.rows(); ++r)
    sink.write_run(t.offset + static_cast<std::uint64_t>(r) * t.cols + c0, band.row(r), band.cols());
}

struct MaskTable {
  std::vector<TensorMask> masks;  // aligned with layout.tensors()

  static MaskTable all_full(const ParamLayout& layout) {
    MaskTable mt;
    mt.masks.assign(layout.tensors().size(), TensorMask{});
    for (auto& m : mt.masks) m.kind = TensorMask::Kind::kFull;
    return mt;
  }

  static MaskTable from_set(const ParamLayout& layout, const IndexSet& set) {
    MaskTable mt;
    mt.masks.reserve(layout.tensors().size());
    for (const TensorInfo& t : layout.tensors()) mt.masks.push_back(derive_mask(set, t));
    return mt;
  }

  const TensorMask& of(const ParamLayout& layout, TensorKind kind, int layer) const {
    for (std::size_t i = 0; i < layout.tensors().size(); ++i) {
      const TensorInfo& t = layout.tensors()[i];
      if (t.kind == kind && t.layer == layer) return masks[i];
    }
    throw ContractError("MaskTable: tensor not found");
  }
};

// Input gradient of the MLP given dL/dH (post-ReLU-mask) and the up
// projection. Full mode sums every slice's term W_n^T dH_n; the detach modes
// keep only slice k (plus g for k-plus-random), dropping the frozen slices
// from the Jacobian.
inline Mat mlp_input_gradient(const Mat& dhid, const Mat& w_up, const BackwardOptions& opts) {
  Mat dx(dhid.rows(), w_up.cols());
  if (opts.mode == BackwardModeKind::kFullJacobian) {
    gemm_nn(dhid, w_up, dx);
    return dx;
  }
  const int slice_width = w_up.rows() / opts.num_slices;
  const int k0 = opts.own_slice * slice_width;
  gemm_nn(col_band(dhid, k0, k0 + slice_width), row_band(w_up, k0, k0 + slice_width), dx);
  if (opts.mode == BackwardModeKind::kDetachKPlusRandom) {
    const int g0 = opts.extra_slice * slice_width;
    gemm_nn(col_band(dhid, g0, g0 + slice_width), row_band(w_up, g0, g0 + slice_width), dx, true);
  }
  return dx;
}

// dS = A (.) (dA - rowsum(dA (.) A)), then scaled into score space.
inline Mat softmax_rows_backward(const Mat& probs, const Mat& dprobs, double scale) {
  const int S = probs.rows();
  Mat ds(S, S);
  for (int i = 0; i < S; ++i) {
    const double* p = probs.row(i);
    const double* dp = dprobs.row(i);
    double dot = 0.0;
    for (int j = 0; j < S; ++j) dot += dp[j] * p[j];
    double* o = ds.row(i);
    for (int j = 0; j < S; ++j) o[j] = p[j] * (dp[j] - dot) * scale;
  }
  return ds;
}

inline void backward_core(const ModelParams& params, const ActivationCache& cache,
                          const Mat& dlogits, const MaskTable& masks, const BackwardOptions& opts,
                          GradSink& sink) {
  const ModelConfig& cfg = params.config();
  const ParamLayout& layout = params.layout();
  const int B = cache.batch;
  const int S = cache.seq;
  const int n = B * S;
  const int d = cfg.hidden_dim;
  const int h = cfg.num_heads;
  const int dh = cfg.head_dim();
  const int dff = cfg.ffn();
  if (static_cast<int>(cache.layers.size()) != cfg.num_layers)
    throw ContractError("backward: cache does not match model config");
  if (dlogits.rows() != n || dlogits.cols() != cfg.vocab_size)
    throw ContractError("backward: dlogits shape mismatch");

  if (opts.mode != BackwardModeKind::kFullJacobian) {
    if (opts.num_slices < 2)
      throw ConfigError("detach backward modes require num_slices >= 2 (no slice to detach)");
    if (dff % opts.num_slices != 0)
      throw ConfigError("ffn_dim must be divisible by num_slices");
    if (opts.own_slice < 0 || opts.own_slice >= opts.num_slices)
      throw ContractError("backward: own_slice out of range");
    if (opts.mode == BackwardModeKind::kDetachKPlusRandom &&
        (opts.extra_slice < 0 || opts.extra_slice >= opts.num_slices ||
         opts.extra_slice == opts.own_slice))
      throw ContractError("backward: detach-k-plus-random needs extra_slice != own_slice");
  }

  const Mat emb = params.tensor(TensorKind::kTokenEmbedding);
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(dh));

  // Tied head: logits = final_out * E^T.
  Mat d_final_out(n, d);
  gemm_nn(dlogits, emb, d_final_out);
  const TensorMask& emb_mask = masks.of(layout, TensorKind::kTokenEmbedding, -1);
  Mat d_emb(cfg.vocab_size, d);
  const bool need_emb = emb_mask.kind != TensorMask::Kind::kNone;
  if (need_emb) gemm_tn(dlogits, cache.final_out, d_emb);

  // Final norm.
  Mat dx;
  {
    std::vector<double> dgain, dbias;
    const TensorMask& gmask = masks.of(layout, TensorKind::kFinalLnGain, -1);
    const TensorMask& bmask = masks.of(layout, TensorKind::kFinalLnBias, -1);
    const bool need = gmask.kind != TensorMask::Kind::kNone || bmask.kind != TensorMask::Kind::kNone;
    layernorm_backward(d_final_out, cache.final_xhat, cache.final_rstd,
                       params.tensor_data(TensorKind::kFinalLnGain), dx, need ? &dgain : nullptr,
                       need ? &dbias : nullptr);
    if (need) {
      Mat g(1, d), b(1, d);
      std::memcpy(g.data(), dgain.data(), d * sizeof(double));
      std::memcpy(b.data(), dbias.data(), d * sizeof(double));
      emit_masked(g, layout.find(TensorKind::kFinalLnGain), gmask, sink);
      emit_masked(b, layout.find(TensorKind::kFinalLnBias), bmask, sink);
    }
  }

  for (int l = cfg.num_layers - 1; l >= 0; --l) {
    const LayerCache& lc = cache.layers[l];

    // --- MLP ---
    const Mat w_up = params.tensor(TensorKind::kMlpUp, l);
    const Mat w_down = params.tensor(TensorKind::kMlpDown, l);
    Mat act(n, dff);
    for (std::size_t i = 0; i < act.size(); ++i)
      act.data()[i] = lc.mlp_pre.data()[i] > 0.0 ? lc.mlp_pre.data()[i] : 0.0;

    // dY = dx; dA = dY * W_down; dH = dA (.) 1(H > 0)
    Mat da(n, dff);
    gemm_nn(dx, w_down, da);
    Mat dhid(n, dff);
    for (std::size_t i = 0; i < dhid.size(); ++i)
      dhid.data()[i] = lc.mlp_pre.data()[i] > 0.0 ? da.data()[i] : 0.0;

    {
      const TensorInfo& tw = layout.find(TensorKind::kMlpUp, l);
      const TensorMask& mw = masks.of(layout, TensorKind::kMlpUp, l);
      if (mw.kind == TensorMask::Kind::kFull) {
        Mat g(dff, d);
        gemm_tn(dhid, lc.ln2_out, g);
        emit_masked(g, tw, mw, sink);
      } else if (mw.kind == TensorMask::Kind::kRowBand) {
        Mat g(mw.r1 - mw.r0, d);
        gemm_tn(col_band(dhid, mw.r0, mw.r1), lc.ln2_out, g);
        emit_row_band(g, tw, mw.r0, sink);
      } else if (mw.kind == TensorMask::Kind::kScatter) {
        Mat g(dff, d);
        gemm_tn(dhid, lc.ln2_out, g);
        emit_masked(g, tw, mw, sink);
      }
      const TensorInfo& tv = layout.find(TensorKind::kMlpDown, l);
      const TensorMask& mv = masks.of(layout, TensorKind::kMlpDown, l);
      if (mv.kind == TensorMask::Kind::kFull) {
        Mat g(d, dff);
        gemm_tn(dx, act, g);
        emit_masked(g, tv, mv, sink);
      } else if (mv.kind == TensorMask::Kind::kColBand) {
        Mat g(d, mv.c1 - mv.c0);
        gemm_tn(dx, col_band(act, mv.c0, mv.c1), g);
        emit_col_band(g, tv, mv.c0, sink);
      } else if (mv.kind == TensorMask::Kind::kScatter) {
        Mat g(d, dff);
        gemm_tn(dx, act, g);
        emit_masked(g, tv, mv, sink);
      }
    }

    const Mat d_ln2_out = mlp_input_gradient(dhid, w_up, opts);

    Mat d_resid_mid;
    {
      std::vector<double> dgain, dbias;
      const TensorMask& gmask = masks.of(layout, TensorKind::kLn2Gain, l);
      const TensorMask& bmask = masks.of(layout, TensorKind::kLn2Bias, l);
      const bool need =
          gmask.kind != TensorMask::Kind::kNone || bmask.kind != TensorMask::Kind::kNone;
      layernorm_backward(d_ln2_out, lc.ln2_xhat, lc.ln2_rstd,
                         params.tensor_data(TensorKind::kLn2Gain, l), d_resid_mid,
                         need ? &dgain : nullptr, need ? &dbias : nullptr);
      if (need) {
        Mat g(1, d), b(1, d);
        std::memcpy(g.data(), dgain.data(), d * sizeof(double));
        std::memcpy(b.data(), dbias.data(), d * sizeof(double));
        emit_masked(g, layout.find(TensorKind::kLn2Gain, l), gmask, sink);
        emit_masked(b, layout.find(TensorKind::kLn2Bias, l), bmask, sink);
      }
      add_inplace(d_resid_mid, dx);  // residual passthrough
    }

    // --- Attention ---
    const Mat wq = params.tensor(TensorKind::kAttnQ, l);
    const Mat wk = params.tensor(TensorKind::kAttnK, l);
    const Mat wv = params.tensor(TensorKind::kAttnV, l);
    const Mat wo = params.tensor(TensorKind::kAttnO, l);

    {
      const TensorInfo& to = layout.find(TensorKind::kAttnO, l);
      const TensorMask& mo = masks.of(layout, TensorKind::kAttnO, l);
      if (mo.kind == TensorMask::Kind::kFull) {
        Mat g(d, d);
        gemm_tn(lc.u, d_resid_mid, g);
        emit_masked(g, to, mo, sink);
      } else if (mo.kind == TensorMask::Kind::kRowBand) {
        Mat g(mo.r1 - mo.r0, d);
        gemm_tn(col_band(lc.u, mo.r0, mo.r1), d_resid_mid, g);
        emit_row_band(g, to, mo.r0, sink);
      } else if (mo.kind == TensorMask::Kind::kScatter) {
        Mat g(d, d);
        gemm_tn(lc.u, d_resid_mid, g);
        emit_masked(g, to, mo, sink);
      }
    }

    Mat du(n, d);
    gemm_nt(d_resid_mid, wo, du);

    Mat dq(n, d), dk(n, d), dv(n, d);
    for (int b = 0; b < B; ++b) {
      for (int j = 0; j < h; ++j) {
        Mat qb(S, dh), kb(S, dh), vb(S, dh), dub(S, dh);
        for (int s = 0; s < S; ++s) {
          std::memcpy(qb.row(s), lc.q.row(b * S + s) + j * dh, dh * sizeof(double));
          std::memcpy(kb.row(s), lc.k.row(b * S + s) + j * dh, dh * sizeof(double));
          std::memcpy(vb.row(s), lc.v.row(b * S + s) + j * dh, dh * sizeof(double));
          std::memcpy(dub.row(s), du.row(b * S + s) + j * dh, dh * sizeof(double));
        }
        const Mat& probs = lc.attn_probs[static_cast<std::size_t>(b) * h + j];
        Mat dvb(S, dh);
        gemm_tn(probs, dub, dvb);
        Mat dprobs(S, S);
        gemm_nt(dub, vb, dprobs);
        const Mat dscores = softmax_rows_backward(probs, dprobs, attn_scale);
        Mat dqb(S, dh), dkb(S, dh);
        gemm_nn(dscores, kb, dqb);
        gemm_tn(dscores, qb, dkb);
        for (int s = 0; s < S; ++s) {
          std::memcpy(dq.row(b * S + s) + j * dh, dqb.row(s), dh * sizeof(double));
          std::memcpy(dk.row(b * S + s) + j * dh, dkb.row(s), dh * sizeof(double));
          std::memcpy(dv.row(b * S + s) + j * dh, dvb.row(s), dh * sizeof(double));
        }
      }
    }

    const auto emit_proj = [&](TensorKind kind, const Mat& dproj) {
      const TensorInfo& t = layout.find(kind, l);
      const TensorMask& m = masks.of(layout, kind, l);
      if (m.kind == TensorMask::Kind::kFull) {
        Mat g(d, d);
        gemm_tn(lc.ln1_out, dproj, g);
        emit_masked(g, t, m, sink);
      } else if (m.kind == TensorMask::Kind::kColBand) {
        Mat g(d, m.c1 - m.c0);
        gemm_tn(lc.ln1_out, col_band(dproj, m.c0, m.c1), g);
        emit_col_band(g, t, m.c0, sink);
      } else if (m.kind == TensorMask::Kind::kScatter) {
        Mat g(d, d);
        gemm_tn(lc.ln1_out, dproj, g);
        emit_masked(g, t, m, sink);
      }
    };
    emit_proj(TensorKind::kAttnQ, dq);
    emit_proj(TensorKind::kAttnK, dk);
    emit_proj(TensorKind::kAttnV, dv);

    // Input Jacobian of attention always sums over all heads.
    Mat d_ln1_out(n, d);
    gemm_nt(dq, wq, d_ln1_out);
    gemm_nt(dk, wk, d_ln1_out, true);
    gemm_nt(dv, wv, d_ln1_out, true);

    Mat d_resid_in;
    {
      std::vector<double> dgain, dbias;
      const TensorMask& gmask = masks.of(layout, TensorKind::kLn1Gain, l);
      const TensorMask& bmask = masks.of(layout, TensorKind::kLn1Bias, l);
      const bool need =
          gmask.kind != TensorMask::Kind::kNone || bmask.kind != TensorMask::Kind::kNone;
      layernorm_backward(d_ln1_out, lc.ln1_xhat, lc.ln1_rstd,
                         params.tensor_data(TensorKind::kLn1Gain, l), d_resid_in,
                         need ? &dgain : nullptr, need ? &dbias : nullptr);
      if (need) {
        Mat g(1, d), b(1, d);
        std::memcpy(g.data(), dgain.data(), d * sizeof(double));
        std::memcpy(b.data(), dbias.data(), d * sizeof(double));
        emit_masked(g, layout.find(TensorKind::kLn1Gain, l), gmask, sink);
        emit_masked(b, layout.find(TensorKind::kLn1Bias, l), bmask, sink);
      }
      add_inplace(d_resid_in, d_resid_mid);  // residual passthrough
    }
    dx = std::move(d_resid_in);
  }

  // Embeddings: lookup gradients plus the tied-head term.
  const TensorMask& pos_mask = masks.of(layout, TensorKind::kPositionEmbedding, -1);
  if (need_emb) {
    for (int b = 0; b < B; ++b) {
      for (int s = 0; s < S; ++s) {
        const int row = b * S + s;
        double* er = d_emb.row(cache.token_ids[static_cast<std::size_t>(b) * S + s]);
        const double* dxr = dx.row(row);
        for (int j = 0; j < d; ++j) er[j] += dxr[j];
      }
    }
    emit_masked(d_emb, layout.find(TensorKind::kTokenEmbedding), emb_mask, sink);
  }
  if (pos_mask.kind != TensorMask::Kind::kNone) {
    Mat d_pos(cfg.seq_len, d);
    for (int b = 0; b < B; ++b) {
      for (int s = 0; s < S; ++s) {
        double* pr = d_pos.row(s);
        const double* dxr = dx.row(b * S + s);
        for (int j = 0; j < d; ++j) pr[j] += dxr[j];
      }
    }
    emit_masked(d_pos, layout.find(TensorKind::kPositionEmbedding), pos_mask, sink);
  }
}

}  // namespace detail

// Backward pass computing parameter gradients only for the trainable set
// while propagating the input Jacobian through every slice and head (except
// under the detach modes, which thin the MLP input Jacobian as configured).
inline GradientBuffer backward_partial(const ModelParams& params, const ActivationCache& cache,
                                       const Mat& dlogits, const IndexSet& trainable,
                                       const BackwardOptions& opts = {}) {
  GradientBuffer buf(trainable);
  detail::BufferGradSink sink(buf);
  const detail::MaskTable masks = detail::MaskTable::from_set(params.layout(), trainable);
  detail::backward_core(params, cache, dlogits, masks, opts, sink);
  return buf;
}

// Plain unmasked backward returning a dense full-space gradient vector; the
// DDP and DiLoCo baselines use this path.
inline std::vector<double> backward_full_dense(const ModelParams& params,
                                               const ActivationCache& cache, const Mat& dlogits) {
  std::vector<double> out(params.layout().total_params(), 0.0);
  detail::DenseGradSink sink(out);
  const detail::MaskTable masks = detail::MaskTable::all_full(params.layout());
  detail::backward_core(params, cache, dlogits, masks, BackwardOptions{}, sink);
  return out;
}

// ---------------------------------------------------------------------------
// Standalone sliced MLP (paper orientation: X is d x m, W is dff x d,
// V is d x dff; slices are W row bands and V column bands).
// ---------------------------------------------------------------------------

inline Mat mlp_forward_unsliced(const Mat& w_up, const Mat& v_down, const Mat& x) {
  detail::check_dims(w_up.cols() == x.rows() && v_down.cols() == w_up.rows() &&
                         v_down.rows() == x.rows(),
                     "mlp_forward_unsliced");
  Mat hpre(w_up.rows(), x.cols());
  gemm_nn(w_up, x, hpre);
  for (std::size_t i = 0; i < hpre.size(); ++i)
    hpre.data()[i] = hpre.data()[i] > 0.0 ? hpre.data()[i] : 0.0;
  Mat y(v_down.rows(), x.cols());
  gemm_nn(v_down, hpre, y);
  return y;
}

// Y = sum_n V_n ReLU(W_n X). Identical to the unsliced computation up to
// summation-order rounding.
inline Mat mlp_forward_sliced(const Mat& w_up, const Mat& v_down, const Mat& x, int num_slices) {
  detail::check_dims(w_up.cols() == x.rows() && v_down.cols() == w_up.rows() &&
                         v_down.rows() == x.rows(),
                     "mlp_forward_sliced");
  if (num_slices < 1 || w_up.rows() % num_slices != 0)
    throw ConfigError("mlp_forward_sliced: num_slices must divide the hidden width");
  const int sw = w_up.rows() / num_slices;
  Mat y(v_down.rows(), x.cols());
  for (int s = 0; s < num_slices; ++s) {
    const Mat wn = row_band(w_up, s * sw, (s + 1) * sw);
    const Mat vn = col_band(v_down, s * sw, (s + 1) * sw);
    Mat hn(sw, x.cols());
    gemm_nn(wn, x, hn);
    for (std::size_t i = 0; i < hn.size(); ++i)
      hn.data()[i] = hn.data()[i] > 0.0 ? hn.data()[i] : 0.0;
    gemm_nn(vn, hn, y, /*accumulate=*/true);
  }
  return y;
}

}  // namespace slicesim
