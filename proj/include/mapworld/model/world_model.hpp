#pragma once

#include <memory>
#include <random>
#include <vector>

#include "mapworld/model/config.hpp"
#include "mapworld/nn/layers.hpp"

namespace mapworld::model {

using ad::Matrix;
using ad::Tape;
using ad::Var;

/// Predicts future BEV semantics for K candidate trajectories at once. Mode k
/// owns query rows [k*S*N, (k+1)*S*N) and condition rows [k*T_f, (k+1)*T_f).
template <typename T>
class LatentWorldModel {
 public:
  LatentWorldModel(nn::ParameterSet<T>& ps, const scenario::WorldSpec& spec, const ModelConfig& model,
                   const WorldModelConfig& cfg, std::mt19937_64& rng);

  /// [M x T_f*2] trajectories (meters) -> [M*T_f x d] condition tokens.
  Var<T> encode_trajectory_condition(Tape<T>& tape, Var<T> trajectories) const;

  /// Future-branch queries for `num_modes` modes, [K*S*N x d].
  Var<T> build_queries(Tape<T>& tape, Var<T> bev_tokens, int num_modes) const;

  /// 2x2 average-pooled BEV tokens (second feature scale).
  Var<T> pooled_tokens(Var<T> bev_tokens) const;

  /// Per-cell logits [K*S*H*W x C], block order (mode, step, row, col).
  Var<T> rollout(Tape<T>& tape, Var<T> bev_tokens, Var<T> condition, int num_modes) const;

  /// Mean CE per mode over cells and steps, [K x 1]. `targets` holds S*H*W ids.
  Var<T> per_mode_semantic_loss(Var<T> future_logits, const std::vector<int>& targets, int num_modes) const;

  int num_steps() const { return static_cast<int>(steps_.size()); }
  const WorldModelConfig& config() const { return cfg_; }

 private:
  struct Layer {
    nn::SelfAttentionBlock<T> self_attn;  // grouped per mode
    nn::CrossAttention<T> cross_attn;
    nn::FeedForward<T> ffn;
  };

  scenario::WorldSpec spec_;
  ModelConfig model_;
  WorldModelConfig cfg_;
  std::vector<int> steps_;
  nn::Linear<T> waypoint_embed_;
  ad::Parameter<T>* time_pos_ = nullptr;
  ad::Parameter<T>* mask_token_ = nullptr;
  ad::Parameter<T>* patch_pos_ = nullptr;
  ad::Parameter<T>* step_embed_ = nullptr;
  std::vector<Layer> layers_;
  nn::LayerNorm<T> out_norm_;
  nn::Linear<T> out_;
  Matrix<T> pool_;  // [N_pooled x N]
  std::shared_ptr<const std::vector<int>> unpatchify_;
};

}  // namespace mapworld::model
