#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "mapworld/model/config.hpp"
#include "mapworld/nn/layers.hpp"

namespace mapworld::model {

using ad::Matrix;
using ad::Tape;
using ad::Var;

template <typename T>
struct ModeQueries {
  Var<T> fused;     // q~ [1 x d]
  Var<T> queries;   // q^(k) [K x d]
  Matrix<T> noise;  // z^(k) [K x d], unscaled standard normal
  T noise_factor = T(0);
};

/// All trajectories are stored one mode per row with (x, y) pairs flattened in
/// time order; meters throughout.
template <typename T>
struct ModeSet {
  Var<T> residuals;     // T_res [K x (T_h+T_f)*2]
  Var<T> trajectories;  // T_Tf [K x T_f*2]
  Var<T> logits;        // T_cls [K x 1]
  Var<T> weights;       // softmax(T_cls) [1 x K]
};

/// Trajectory generator by masked sequence completion.
template <typename T>
class MaskedActionPlanner {
 public:
  MaskedActionPlanner(nn::ParameterSet<T>& ps, const scenario::WorldSpec& spec, const ModelConfig& cfg,
                      std::mt19937_64& rng);

  /// [tau_t, tau_t - tau_{t-1}] rows with a zero displacement at the first step.
  static Matrix<T> augment_history(const Matrix<T>& history);

  /// H [T_h x d].
  Var<T> encode_history(Tape<T>& tape, const Matrix<T>& history) const;
  /// Q_traj [(T_h+T_f) x d] = [H; mask_token + future positional embedding].
  Var<T> build_query_sequence(Tape<T>& tape, Var<T> history_tokens) const;
  /// Draws z ~ N(0, I) from `rng`.
  ModeQueries<T> make_mode_queries(Tape<T>& tape, Var<T> query_sequence, int num_modes, T noise_factor,
                                   std::mt19937_64& rng) const;
  /// Same with caller-provided unscaled noise [K x d].
  ModeQueries<T> make_mode_queries(Tape<T>& tape, Var<T> query_sequence, const Matrix<T>& noise,
                                   T noise_factor) const;

  /// P [(T_h+T_f) x 2]: the history rows followed by T_intent.
  static Var<T> build_scaffold(Tape<T>& tape, const Matrix<T>& history, Var<T> intent);

  /// BEV token visibility for the anchored attention: tokens whose centers lie
  /// within the attention radius of any scaffold waypoint. Falls back to all
  /// tokens when none qualify.
  std::vector<std::uint8_t> anchor_mask(const Matrix<T>& scaffold) const;

  struct Decoded {
    Var<T> residuals;  // [K x (T_h+T_f)*2]
    Var<T> logits;     // [K x 1]
  };
  Decoded decode_trajectories(Tape<T>& tape, Var<T> queries, Var<T> scaffold, Var<T> bev_tokens,
                              Var<T> agent_features) const;

  /// T_Tf = (T_res + P)[T_h:], one mode per row.
  static Var<T> finalize(Var<T> residuals, Var<T> scaffold, int history_len);

  nn::Linear<T>& refinement_head() { return refine_out_; }
  int num_layers() const { return static_cast<int>(layers_.size()); }

 private:
  struct DecoderLayer {
    nn::CrossAttention<T> bev_attn;
    nn::CrossAttention<T> agent_attn;
    nn::FeedForward<T> ffn;
  };

  scenario::WorldSpec spec_;
  ModelConfig cfg_;
  nn::Mlp<T> history_in_;
  ad::Parameter<T>* history_pos_ = nullptr;
  std::vector<nn::SelfAttentionBlock<T>> history_blocks_;
  ad::Parameter<T>* mask_token_ = nullptr;
  ad::Parameter<T>* future_pos_ = nullptr;
  nn::SelfAttentionBlock<T> completion_;
  nn::Mlp<T> fusion_;
  nn::Mlp<T> psi_;
  nn::Linear<T> scaffold_embed_;
  std::vector<DecoderLayer> layers_;
  nn::LayerNorm<T> refine_norm_;
  nn::Linear<T> refine_out_;
  std::vector<scenario::Vec2> token_centers_;
};

/// Index of the largest logit; ties go to the lowest index.
int select_mode(const Matrix<double>& logits);

template <typename T>
int select_mode(const Matrix<T>& logits) {
  return select_mode(Matrix<double>(logits.template cast<double>()));
}

}  // namespace mapworld::model
