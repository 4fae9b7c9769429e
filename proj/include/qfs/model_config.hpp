#pragma once

#include <cstdint>
#include <string>

#include "qfs/common.hpp"

namespace qfs {

// Decoder-only transformer hyperparameters. d_model = n_heads * d_key; the
// byte-level vocabulary needs at least 256 + 3 specials.
struct ModelConfig {
  int n_layers = 4;
  int d_model = 128;
  int n_heads = 4;
  int vocab = 259;
  int ffn_mult = 2;             // ffn hidden width = ffn_mult * d_model
  int max_local_window = 4096;  // plain-attention window (positions)

  int d_key() const { return d_model / n_heads; }
  int d_value() const { return d_model / n_heads; }
  int ffn_hidden() const { return ffn_mult * d_model; }

  void validate() const {
    if (n_layers < 2) throw ConfigError("model.n_layers must be >= 2");
    if (n_heads < 1) throw ConfigError("model.n_heads must be >= 1");
    if (d_model % n_heads != 0)
      throw ConfigError("model.d_model (" + std::to_string(d_model) +
                        ") must be divisible by n_heads (" + std::to_string(n_heads) + ")");
    if (d_key() % 2 != 0)
      throw ConfigError("per-head width must be even for rotary positions, got " +
                        std::to_string(d_key()));
    if (vocab < 259) throw ConfigError("model.vocab must be >= 259 (256 bytes + 3 specials)");
    if (ffn_mult < 1) throw ConfigError("model.ffn_mult must be >= 1");
    if (max_local_window < 1) throw ConfigError("model.max_local_window must be >= 1");
  }
};

}  // namespace qfs
