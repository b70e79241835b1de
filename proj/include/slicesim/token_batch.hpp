// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "slicesim/errors.hpp"

namespace slicesim {

// A batch of token sequences. Targets are the inputs shifted by one:
// target(b, s) == id(b, s + 1), so the last position of each sequence has no
// target and contributes no loss.
struct TokenBatch {
  int batch = 0;
  int seq_len = 0;
  std::vector<std::int32_t> ids;  // batch * seq_len, row-major

  TokenBatch() = default;
  TokenBatch(int b, int s) : batch(b), seq_len(s), ids(static_cast<std::size_t>(b) * s, 0) {}

  std::int32_t id(int b, int s) const { return ids[static_cast<std::size_t>(b) * seq_len + s]; }
  std::int32_t& id(int b, int s) { return ids[static_cast<std::size_t>(b) * seq_len + s]; }
  std::int32_t target(int b, int s) const {
    if (s + 1 >= seq_len) throw ContractError("TokenBatch::target: last position has no target");
    return id(b, s + 1);
  }
  int predicted_positions() const { return batch * (seq_len - 1); }
};

}  // namespace slicesim
