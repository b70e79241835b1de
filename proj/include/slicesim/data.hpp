// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "slicesim/errors.hpp"
#include "slicesim/rng.hpp"
#include "slicesim/token_batch.hpp"

namespace slicesim {

enum class GeneratorKind { kMarkov2, kCopyTask, kRandomUniform };

inline const char* generator_name(GeneratorKind g) {
  switch (g) {
    case GeneratorKind::kMarkov2: return "markov2";
    case GeneratorKind::kCopyTask: return "copy-task";
    case GeneratorKind::kRandomUniform: return "random-uniform";
  }
  return "?";
}

inline GeneratorKind generator_from_name(const std::string& s) {
  if (s == "markov2") return GeneratorKind::kMarkov2;
  if (s == "copy-task") return GeneratorKind::kCopyTask;
  if (s == "random-uniform") return GeneratorKind::kRandomUniform;
  throw ConfigError("unknown corpus generator: " + s);
}

struct SyntheticCorpusSpec {
  int vocab_size = 64;
  int seq_len = 32;
  GeneratorKind generator = GeneratorKind::kMarkov2;
  std::uint64_t seed = 7;
  int num_sequences = 4096;

  void validate() const {
    if (vocab_size < 2) throw ConfigError("data.vocab_size must be >= 2");
    if (seq_len < 2) throw ConfigError("data.seq_len must be >= 2");
    if (num_sequences < 1) throw ConfigError("data.num_sequences must be >= 1");
    if (generator == GeneratorKind::kCopyTask && seq_len % 2 != 0)
      throw ConfigError("copy-task requires an even seq_len");
  }
};

// Order-2 Markov chain with a skewed conditional distribution per context:
// a few preferred next tokens carry 90% of the mass. Most contexts share
// their preferred set with every context that has the same previous token;
// a deterministic quarter of them carry a context-specific set instead.
// The dominant order-1 structure is picked up within a few hundred steps at
// toy scale while the order-2 overrides keep the optimum non-trivial, so
// loss differences between training algorithms are observable.
class Markov2Model {
 public:
  Markov2Model(int vocab, std::uint64_t seed) : vocab_(vocab) {
    const int npref = std::max(1, std::min(4, vocab / 4));
    const double p_pref = 0.9 / npref;
    const double p_rest = 0.1 / (vocab - npref);
    Rng rng(mix_seed(seed, 0x4d61726b32ULL));
    probs_.assign(static_cast<std::size_t>(vocab) * vocab * vocab, p_rest);
    std::vector<int> ids(vocab);
    std::vector<std::vector<int>> base(vocab);
    for (int b = 0; b < vocab; ++b) {
      for (int i = 0; i < vocab; ++i) ids[i] = i;
      rng.shuffle(ids);
      base[b].assign(ids.begin(), ids.begin() + npref);
    }
    for (int a = 0; a < vocab; ++a) {
      for (int b = 0; b < vocab; ++b) {
        double* row = probs_.data() + (static_cast<std::size_t>(a) * vocab + b) * vocab;
        const bool own_set =
            mix_seed(seed, 0x6f776e, static_cast<std::uint64_t>(a) * vocab + b) % 4 == 0;
        if (own_set) {
          for (int i = 0; i < vocab; ++i) ids[i] = i;
          rng.shuffle(ids);
          for (int i = 0; i < npref; ++i) row[ids[i]] = p_pref;
        } else {
          for (int i = 0; i < npref; ++i) row[base[b][i]] = p_pref;
        }
      }
    }
  }

  int vocab() const { return vocab_; }

  double prob(int prev2, int prev1, int next) const {
    return probs_[(static_cast<std::size_t>(prev2) * vocab_ + prev1) * vocab_ + next];
  }

  int sample(int prev2, int prev1, Rng& rng) const {
    const double* row = probs_.data() + (static_cast<std::size_t>(prev2) * vocab_ + prev1) * vocab_;
    const double u = rng.uniform01();
    double acc = 0.0;
    for (int i = 0; i < vocab_ - 1; ++i) {
      acc += row[i];
      if (u < acc) return i;
    }
    return vocab_ - 1;
  }

 private:
  int vocab_;
  std::vector<double> probs_;
};

struct Corpus {
  SyntheticCorpusSpec spec;
  std::vector<std::int32_t> tokens;  // num_sequences * seq_len

  const std::int32_t* sequence(int i) const {
    return tokens.data() + static_cast<std::size_t>(i) * spec.seq_len;
  }
};

inline Corpus generate_corpus(const SyntheticCorpusSpec& spec) {
  spec.validate();
  Corpus corpus;
  corpus.spec = spec;
  corpus.tokens.resize(static_cast<std::size_t>(spec.num_sequences) * spec.seq_len);
  Rng rng(mix_seed(spec.seed, 0x636f7270ULL));
  const int S = spec.seq_len;
  const int V = spec.vocab_size;
  switch (spec.generator) {
    case GeneratorKind::kRandomUniform: {
      for (auto& t : corpus.tokens) t = static_cast<std::int32_t>(rng.below(V));
      break;
    }
    case GeneratorKind::kCopyTask: {
      for (int i = 0; i < spec.num_sequences; ++i) {
        std::int32_t* seq = corpus.tokens.data() + static_cast<std::size_t>(i) * S;
        for (int s = 0; s < S / 2; ++s) seq[s] = static_cast<std::int32_t>(rng.below(V));
        for (int s = 0; s < S / 2; ++s) seq[s + S / 2] = seq[s];
      }
      break;
    }
    case GeneratorKind::kMarkov2: {
      const Markov2Model model(V, spec.seed);
      for (int i = 0; i < spec.num_sequences; ++i) {
        std::int32_t* seq = corpus.tokens.data() + static_cast<std::size_t>(i) * S;
        seq[0] = static_cast<std::int32_t>(rng.below(V));
        seq[1] = static_cast<std::int32_t>(rng.below(V));
        for (int s = 2; s < S; ++s) seq[s] = model.sample(seq[s - 2], seq[s - 1], rng);
      }
      break;
    }
  }
  return corpus;
}

// Mean NLL the generating Markov model assigns to its own corpus, over the
// positions with a full order-2 context.
inline double markov2_true_nll(const Corpus& corpus) {
  if (corpus.spec.generator != GeneratorKind::kMarkov2)
    throw ContractError("markov2_true_nll: corpus is not markov2");
  const Markov2Model model(corpus.spec.vocab_size, corpus.spec.seed);
  double nll = 0.0;
  std::uint64_t count = 0;
  for (int i = 0; i < corpus.spec.num_sequences; ++i) {
    const std::int32_t* seq = corpus.sequence(i);
    for (int s = 2; s < corpus.spec.seq_len; ++s) {
      nll += -std::log(model.prob(seq[s - 2], seq[s - 1], seq[s]));
      ++count;
    }
  }
  return nll / static_cast<double>(count);
}

// --------------------------------------------------------------------------
// Flat binary persistence: header (magic, version, V, S, count) then
// little-endian int32 per token.
// --------------------------------------------------------------------------

inline void save_corpus(const Corpus& corpus, const std::string& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open corpus file for writing: " + path);
  const char magic[8] = {'S', 'L', 'C', 'O', 'R', 'P', '0', '1'};
  f.write(magic, 8);
  const std::int32_t v = corpus.spec.vocab_size;
  const std::int32_t s = corpus.spec.seq_len;
  const std::int64_t n = corpus.spec.num_sequences;
  f.write(reinterpret_cast<const char*>(&v), 4);
  f.write(reinterpret_cast<const char*>(&s), 4);
  f.write(reinterpret_cast<const char*>(&n), 8);
  f.write(reinterpret_cast<const char*>(corpus.tokens.data()),
          static_cast<std::streamsize>(corpus.tokens.size() * 4));
  if (!f) throw IoError("corpus write failed: " + path);
}

inline Corpus load_corpus(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open corpus file: " + path);
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, "SLCORP01", 8) != 0)
    throw IoError("bad corpus file magic: " + path);
  std::int32_t v = 0, s = 0;
  std::int64_t n = 0;
  f.read(reinterpret_cast<char*>(&v), 4);
  f.read(reinterpret_cast<char*>(&s), 4);
  f.read(reinterpret_cast<char*>(&n), 8);
  if (!f || v < 2 || s < 2 || n < 1) throw IoError("bad corpus header: " + path);
  Corpus corpus;
  corpus.spec.vocab_size = v;
  corpus.spec.seq_len = s;
  corpus.spec.num_sequences = static_cast<int>(n);
  corpus.tokens.resize(static_cast<std::size_t>(n) * s);
  f.read(reinterpret_cast<char*>(corpus.tokens.data()),
         static_cast<std::streamsize>(corpus.tokens.size() * 4));
  if (!f) throw IoError("corpus truncated: " + path);
  return corpus;
}

// --------------------------------------------------------------------------
// Sharding and batching
// --------------------------------------------------------------------------

// Contiguous, disjoint, equal-sized shards (remainder dropped).
struct ShardView {
  const Corpus* corpus = nullptr;
  int first_seq = 0;
  int count = 0;

  const std::int32_t* sequence(int i) const { return corpus->sequence(first_seq + i); }
};

inline ShardView shard(const Corpus& corpus, int num_nodes, int node) {
  if (num_nodes < 1 || node < 0 || node >= num_nodes)
    throw ConfigError("shard: node index out of range");
  const int per = corpus.spec.num_sequences / num_nodes;
  if (per < 1) throw ConfigError("shard: fewer sequences than nodes");
  return ShardView{&corpus, node * per, per};
}

// Epoch-ordered batches with a per-epoch seeded shuffle. The permutation is
// a pure function of (shuffle_seed, epoch), so a cursor rebuilt from (epoch,
// pos) resumes exactly.
struct NodeCursor {
  std::uint64_t shuffle_seed = 0;
  std::uint64_t epoch = 0;
  std::uint64_t pos = 0;
  std::vector<std::int32_t> perm;  // derived; not serialized

  void ensure_perm(int count) {
    if (perm.size() == static_cast<std::size_t>(count) && !perm.empty() && perm_epoch_ == epoch)
      return;
    perm.resize(count);
    for (int i = 0; i < count; ++i) perm[i] = i;
    Rng rng(mix_seed(shuffle_seed, epoch));
    rng.shuffle(perm);
    perm_epoch_ = epoch;
  }

 private:
  std::uint64_t perm_epoch_ = UINT64_MAX;
};

inline TokenBatch next_batch(const ShardView& view, int batch_size, NodeCursor& cursor) {
  if (batch_size < 1 || batch_size > view.count)
    throw ConfigError("next_batch: batch_size must be in [1, shard size]");
  cursor.ensure_perm(view.count);
  if (cursor.pos + batch_size > static_cast<std::uint64_t>(view.count)) {
    ++cursor.epoch;
    cursor.pos = 0;
    cursor.ensure_perm(view.count);
  }
  const int S = view.corpus->spec.seq_len;
  TokenBatch batch(batch_size, S);
  for (int b = 0; b < batch_size; ++b) {
    const std::int32_t* seq = view.sequence(cursor.perm[cursor.pos + b]);
    std::memcpy(&batch.id(b, 0), seq, static_cast<std::size_t>(S) * 4);
  }
  cursor.pos += batch_size;
  return batch;
}

}  // namespace slicesim
