#include "mapworld/model/world_model.hpp"

#include <string>

#include "mapworld/errors.hpp"
#include "mapworld/model/example.hpp"

namespace mapworld::model {

template <typename T>
LatentWorldModel<T>::LatentWorldModel(nn::ParameterSet<T>& ps, const scenario::WorldSpec& spec,
                                      const ModelConfig& model, const WorldModelConfig& cfg, std::mt19937_64& rng)
    : spec_(spec), model_(model), cfg_(cfg) {
  model.validate(spec);
  cfg.validate(spec);
  steps_ = cfg.resolved_steps(spec);
  const int d = model.d;
  const int hidden = d * model.ffn_mult;
  const int n = model.num_tokens(spec);
  waypoint_embed_ = nn::Linear<T>(ps, "world_model.waypoint_embed", 2, d, rng);
  time_pos_ = &ps.add("world_model.time_pos", nn::normal_matrix<T>(spec.future_len, d, 0.02, rng));
  if (cfg.use_mask_tokens) {
    mask_token_ = &ps.add("world_model.mask_token", nn::normal_matrix<T>(1, d, 0.02, rng));
    patch_pos_ = &ps.add("world_model.patch_pos", nn::normal_matrix<T>(n, d, 0.02, rng));
  }
  step_embed_ = &ps.add("world_model.step_embed",
                        nn::normal_matrix<T>(static_cast<Eigen::Index>(steps_.size()), d, 0.02, rng));
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string name = "world_model.layer" + std::to_string(l);
    layers_.push_back(Layer{nn::SelfAttentionBlock<T>(ps, name + ".self", d, model.heads, hidden, rng),
                            nn::CrossAttention<T>(ps, name + ".cross", d, model.heads, rng),
                            nn::FeedForward<T>(ps, name + ".ffn", d, hidden, rng)});
  }
  out_norm_ = nn::LayerNorm<T>(ps, "world_model.out_norm", d);
  out_ = nn::Linear<T>(ps, "world_model.out", d, model.patch * model.patch * spec.num_classes, rng);

  const int side = model.tokens_per_side(spec);
  const int pside = (side + 1) / 2;
  pool_ = Matrix<T>::Zero(pside * pside, n);
  for (int r = 0; r < side; ++r) {
    for (int c = 0; c < side; ++c) pool_((r / 2) * pside + c / 2, r * side + c) = T(1);
  }
  for (Eigen::Index i = 0; i < pool_.rows(); ++i) pool_.row(i) /= pool_.row(i).sum();
  unpatchify_ = unpatchify_index(spec.grid_size, model.patch, spec.num_classes,
                                 model.num_modes * static_cast<int>(steps_.size()));
}

template <typename T>
Var<T> LatentWorldModel<T>::encode_trajectory_condition(Tape<T>& tape, Var<T> trajectories) const {
  if (trajectories.cols() != 2 * spec_.future_len) throw ShapeError("trajectories must be [M x T_f*2]");
  const Eigen::Index m = trajectories.rows();
  Var<T> pts = ad::scale(ad::reshape(trajectories, m * spec_.future_len, 2), static_cast<T>(1.0 / model_.coord_scale));
  return ad::add(waypoint_embed_(tape, pts), ad::tile_rows(tape.parameter(*time_pos_), m));
}

template <typename T>
Var<T> LatentWorldModel<T>::pooled_tokens(Var<T> bev_tokens) const {
  return ad::matmul(bev_tokens.tape()->constant(pool_), bev_tokens);
}

template <typename T>
Var<T> LatentWorldModel<T>::build_queries(Tape<T>& tape, Var<T> bev_tokens, int num_modes) const {
  const int n = model_.num_tokens(spec_);
  const int d = model_.d;
  const int s = num_steps();
  auto idx = std::make_shared<std::vector<int>>();
  idx->reserve(static_cast<std::size_t>(s) * n * d);
  for (int si = 0; si < s; ++si) {
    for (int t = 0; t < n; ++t) {
      for (int j = 0; j < d; ++j) idx->push_back(si * d + j);
    }
  }
  Var<T> step_rows = ad::gather<T>(tape.parameter(*step_embed_), idx, static_cast<Eigen::Index>(s) * n, d);
  Var<T> base;
  if (cfg_.use_mask_tokens) {
    base = ad::add(ad::tile_rows(tape.parameter(*mask_token_), n), tape.parameter(*patch_pos_));
  } else {
    base = bev_tokens;
  }
  Var<T> per_mode = ad::add(ad::tile_rows(base, s), step_rows);
  return ad::tile_rows(per_mode, num_modes);
}

template <typename T>
Var<T> LatentWorldModel<T>::rollout(Tape<T>& tape, Var<T> bev_tokens, Var<T> condition, int num_modes) const {
  const int n = model_.num_tokens(spec_);
  if (bev_tokens.rows() != n) throw ShapeError("world model expects N_bev BEV tokens");
  if (condition.rows() != static_cast<Eigen::Index>(num_modes) * spec_.future_len) {
    throw ShapeError("condition tokens must be [K*T_f x d]");
  }
  Var<T> q = build_queries(tape, bev_tokens, num_modes);
  std::vector<Var<T>> memory{bev_tokens};
  if (cfg_.feature_scales == 2) memory.push_back(pooled_tokens(bev_tokens));
  Eigen::Index shared = 0;
  for (const auto& m : memory) shared += m.rows();
  memory.push_back(condition);
  Var<T> kv = ad::concat_rows<T>(memory);

  ad::AttentionLayout self_layout;
  self_layout.groups = num_modes;
  self_layout.shared_keys = 0;
  ad::AttentionLayout cross_layout;
  cross_layout.groups = num_modes;
  cross_layout.shared_keys = static_cast<int>(shared);
  for (const auto& layer : layers_) {
    q = layer.self_attn(tape, q, self_layout);
    q = layer.cross_attn(tape, q, kv, cross_layout);
    q = layer.ffn(tape, q);
  }
  Var<T> per_patch = out_(tape, out_norm_(tape, q));
  const int blocks = num_modes * num_steps();
  auto index = blocks == model_.num_modes * num_steps()
                   ? unpatchify_
                   : unpatchify_index(spec_.grid_size, model_.patch, spec_.num_classes, blocks);
  return ad::gather(per_patch, index, static_cast<Eigen::Index>(blocks) * spec_.num_cells(), spec_.num_classes);
}

template <typename T>
Var<T> LatentWorldModel<T>::per_mode_semantic_loss(Var<T> future_logits, const std::vector<int>& targets,
                                                   int num_modes) const {
  const auto per_mode = static_cast<std::size_t>(num_steps()) * spec_.num_cells();
  if (targets.size() != per_mode) throw ShapeError("future targets must hold S*H*W class ids");
  return ad::cross_entropy_groups(future_logits, targets, num_modes);
}

template class LatentWorldModel<float>;
template class LatentWorldModel<double>;

}  // namespace mapworld::model
