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

template <typename T>
struct PlanningState {
  Var<T> bev_tokens;      // F_bev [N_bev x d]
  Var<T> state_tokens;    // F_state^cur [(N_bev + 1) x d]
  Var<T> ego_feature;     // F_ego [1 x d]
  Var<T> agent_features;  // F_Agent [N_aq x d]
  Var<T> ego_embedding;   // Emb_ego [1 x d]
};

/// Toy BEV encoder (patch embedding + self-attention blocks) plus the
/// ego/agent disentangling cross-attention and its three heads.
template <typename T>
class StateEncoder {
 public:
  StateEncoder(nn::ParameterSet<T>& ps, const scenario::WorldSpec& spec, const ModelConfig& cfg,
               std::mt19937_64& rng);

  /// `patches` is the one-hot patch matrix [N_bev x p*p*C]; `ego_status` is [1 x 7].
  PlanningState<T> encode(Tape<T>& tape, const Matrix<T>& patches, const Matrix<T>& ego_status,
                          std::vector<Matrix<T>>* disentangle_attention = nullptr) const;

  Var<T> encode_bev(Tape<T>& tape, const Matrix<T>& patches) const;
  Var<T> embed_ego(Tape<T>& tape, const Matrix<T>& ego_status) const;

  /// Returns (F_ego, F_Agent). Attention probabilities land in `capture` if given.
  std::pair<Var<T>, Var<T>> disentangle(Tape<T>& tape, Var<T> state_tokens,
                                        std::vector<Matrix<T>>* capture = nullptr) const;

  /// T_intent [T_f x 2] in meters.
  Var<T> intent_head(Tape<T>& tape, Var<T> ego_feature) const;
  /// Per-cell logits [H*W x C].
  Var<T> bev_semantic_decode(Tape<T>& tape, Var<T> bev_tokens) const;
  /// [N_aq x 5]: x, y (m), heading (rad), speed (m/s), existence logit.
  Var<T> agent_head(Tape<T>& tape, Var<T> agent_features) const;

  nn::Linear<T>& intent_output() { return intent_.fc2; }

 private:
  scenario::WorldSpec spec_;
  ModelConfig cfg_;
  nn::Linear<T> patch_embed_;
  ad::Parameter<T>* bev_pos_ = nullptr;
  std::vector<nn::SelfAttentionBlock<T>> blocks_;
  nn::LayerNorm<T> bev_norm_;
  nn::Linear<T> ego_embed_;
  ad::Parameter<T>* queries_ = nullptr;  // Q_bev: 1 ego + N_aq agent queries
  nn::CrossAttention<T> disentangle_attn_;
  nn::FeedForward<T> disentangle_ffn_;
  nn::Mlp<T> intent_;
  nn::LayerNorm<T> semantic_norm_;
  nn::Linear<T> semantic_out_;
  nn::Mlp<T> agent_;
  std::shared_ptr<const std::vector<int>> unpatchify_;
};

}  // namespace mapworld::model
