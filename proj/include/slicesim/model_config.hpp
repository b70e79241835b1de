// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>

#include "slicesim/errors.hpp"

namespace slicesim {

enum class PositionalEncoding { kLearnedAbsolute };

// Dimensions of the decoder-only transformer. head_dim is derived from
// hidden_dim / num_heads; ffn_dim defaults to 4 * hidden_dim when zero.
struct ModelConfig {
  int num_layers = 2;
  int hidden_dim = 64;
  int num_heads = 4;
  int ffn_dim = 0;
  int vocab_size = 64;
  int seq_len = 32;
  PositionalEncoding positional_encoding = PositionalEncoding::kLearnedAbsolute;

  int head_dim() const { return hidden_dim / num_heads; }
  int ffn() const { return ffn_dim > 0 ? ffn_dim : 4 * hidden_dim; }

  void validate() const {
    if (num_layers < 1) throw ConfigError("model.num_layers must be >= 1");
    if (hidden_dim < 1) throw ConfigError("model.hidden_dim must be >= 1");
    if (num_heads < 1) throw ConfigError("model.num_heads must be >= 1");
    if (vocab_size < 2) throw ConfigError("model.vocab_size must be >= 2");
    if (seq_len < 2) throw ConfigError("model.seq_len must be >= 2");
    if (hidden_dim % num_heads != 0)
      throw ConfigError("hidden_dim must equal num_heads * head_dim (hidden_dim % num_heads == 0)");
    if (ffn() < 1) throw ConfigError("model.ffn_dim must be >= 1");
  }
};

}  // namespace slicesim
