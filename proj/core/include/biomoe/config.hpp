#pragma once

#include <cstddef>
#include <cstdint>

#include "biomoe/errors.hpp"

namespace biomoe {

/// Static hyper-parameters of the mixture layer.
struct MoEConfig {
  std::size_t d_model = 8;
  std::size_t d_inner = 32;        ///< hidden width of the global expert
  std::size_t num_experts = 8;     ///< routed expert count E
  std::size_t top_k = 2;           ///< experts kept per token
  std::size_t width_factor = 16;   ///< routed hidden = d_inner / width_factor
  std::size_t num_landmarks = 4;   ///< landmark count M (structure features are 2M wide)
  double tau = 0.2;                ///< SVD energy threshold for rank selection
  double noise_std = 1.0;          ///< gating noise std, applied only in training
  std::uint64_t seed = 1;

  std::size_t routed_hidden() const { return d_inner / width_factor; }
  std::size_t gate_input_dim() const { return 2 * d_model + 2 * num_landmarks; }

  void validate() const {
    if (d_model < 1) throw ConfigError("config: d_model must be >= 1");
    if (d_inner < 1) throw ConfigError("config: d_inner must be >= 1");
    if (num_experts < 1) throw ConfigError("config: num_experts must be >= 1");
    if (top_k < 1 || top_k > num_experts)
      throw ConfigError("config: top_k must satisfy 1 <= top_k <= num_experts");
    if (width_factor < 1 || d_inner % width_factor != 0)
      throw ConfigError("config: d_inner must be divisible by width_factor");
    if (num_landmarks < 1) throw ConfigError("config: num_landmarks must be >= 1");
    if (!(tau > 0.0) || tau > 1.0) throw ConfigError("config: tau must be in (0, 1]");
    if (noise_std < 0.0) throw ConfigError("config: noise_std must be >= 0");
  }
};

}  // namespace biomoe
