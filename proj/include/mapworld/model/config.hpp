#pragma once

#include <string>
#include <vector>

#include "mapworld/scenario/world_spec.hpp"

namespace mapworld::model {

enum class Fusion { kMeanPool, kFlatten };

struct ModelConfig {
  int d = 128;
  int patch = 8;
  int heads = 4;
  int encoder_blocks = 2;
  int history_blocks = 1;
  int ffn_mult = 2;
  int num_modes = 10;             // K
  double noise_factor = 1.0;
  int decoder_depth = 3;
  double attention_radius = 3.0;  // in BEV token cells
  Fusion fusion = Fusion::kMeanPool;
  bool noise_at_inference = true;
  bool positional = true;          // positional embeddings on BEV tokens and query rows
  bool zero_init_refinement = false;
  double coord_scale = 10.0;       // meters per normalized network unit

  /// Throws ConfigError if inconsistent with `spec`.
  void validate(const scenario::WorldSpec& spec) const;
  int tokens_per_side(const scenario::WorldSpec& spec) const { return spec.grid_size / patch; }
  int num_tokens(const scenario::WorldSpec& spec) const {
    const int s = tokens_per_side(spec);
    return s * s;
  }

  bool operator==(const ModelConfig&) const = default;
};

struct WorldModelConfig {
  int layers = 2;
  bool use_mask_tokens = true;
  int feature_scales = 2;               // 1 = patch tokens, 2 = plus 2x2-pooled tokens
  std::vector<int> prediction_steps;    // 1-based; empty = {T_f}

  void validate(const scenario::WorldSpec& spec) const;
  std::vector<int> resolved_steps(const scenario::WorldSpec& spec) const;

  bool operator==(const WorldModelConfig&) const = default;
};

}  // namespace mapworld::model
