#include "mapworld/model/state_encoder.hpp"

#include <string>

#include "mapworld/errors.hpp"
#include "mapworld/model/example.hpp"
#include "mapworld/scenario/scenario.hpp"

namespace mapworld::model {

template <typename T>
StateEncoder<T>::StateEncoder(nn::ParameterSet<T>& ps, const scenario::WorldSpec& spec, const ModelConfig& cfg,
                              std::mt19937_64& rng)
    : spec_(spec), cfg_(cfg) {
  cfg.validate(spec);
  if (spec.max_agents < 1) throw ConfigError("the planner needs world.max_agents >= 1");
  const int d = cfg.d;
  const int hidden = d * cfg.ffn_mult;
  const int patch_features = cfg.patch * cfg.patch * spec.num_classes;
  patch_embed_ = nn::Linear<T>(ps, "encoder.patch_embed", patch_features, d, rng);
  bev_pos_ = &ps.add("encoder.bev_pos", nn::normal_matrix<T>(cfg.num_tokens(spec), d, 0.02, rng));
  for (int b = 0; b < cfg.encoder_blocks; ++b) {
    blocks_.emplace_back(ps, "encoder.block" + std::to_string(b), d, cfg.heads, hidden, rng);
  }
  bev_norm_ = nn::LayerNorm<T>(ps, "encoder.bev_norm", d);
  ego_embed_ = nn::Linear<T>(ps, "encoder.ego_embed", scenario::kEgoStatusDim, d, rng);
  queries_ = &ps.add("encoder.q_bev", nn::normal_matrix<T>(1 + spec.max_agents, d, 1.0, rng));
  disentangle_attn_ = nn::CrossAttention<T>(ps, "encoder.disentangle", d, cfg.heads, rng);
  disentangle_ffn_ = nn::FeedForward<T>(ps, "encoder.disentangle_ffn", d, hidden, rng);
  intent_ = nn::Mlp<T>(ps, "encoder.intent", d, d, spec.future_len * 2, rng, 0.1);
  semantic_norm_ = nn::LayerNorm<T>(ps, "encoder.semantic_norm", d);
  semantic_out_ = nn::Linear<T>(ps, "encoder.semantic_out", d, patch_features, rng);
  agent_ = nn::Mlp<T>(ps, "encoder.agent", d, d, scenario::kAgentStateDim, rng, 0.1);
  unpatchify_ = unpatchify_index(spec.grid_size, cfg.patch, spec.num_classes, 1);
}

template <typename T>
Var<T> StateEncoder<T>::encode_bev(Tape<T>& tape, const Matrix<T>& patches) const {
  if (patches.rows() != cfg_.num_tokens(spec_) || patches.cols() != patch_embed_.weight->value.rows()) {
    throw ConfigError("BEV patch matrix does not match the world spec / patch size");
  }
  Var<T> x = patch_embed_(tape, tape.constant(patches));
  if (cfg_.positional) x = ad::add(x, tape.parameter(*bev_pos_));
  for (const auto& block : blocks_) x = block(tape, x);
  return bev_norm_(tape, x);
}

template <typename T>
Var<T> StateEncoder<T>::embed_ego(Tape<T>& tape, const Matrix<T>& ego_status) const {
  if (ego_status.rows() != 1 || ego_status.cols() != scenario::kEgoStatusDim) {
    throw ConfigError("ego status must be [1 x 7]");
  }
  return ego_embed_(tape, tape.constant(ego_status));
}

template <typename T>
std::pair<Var<T>, Var<T>> StateEncoder<T>::disentangle(Tape<T>& tape, Var<T> state_tokens,
                                                       std::vector<Matrix<T>>* capture) const {
  Var<T> q = disentangle_attn_(tape, tape.parameter(*queries_), state_tokens, {}, capture);
  q = disentangle_ffn_(tape, q);
  return {ad::slice_rows(q, 0, 1), ad::slice_rows(q, 1, spec_.max_agents)};
}

template <typename T>
PlanningState<T> StateEncoder<T>::encode(Tape<T>& tape, const Matrix<T>& patches, const Matrix<T>& ego_status,
                                         std::vector<Matrix<T>>* disentangle_attention) const {
  PlanningState<T> s;
  s.bev_tokens = encode_bev(tape, patches);
  s.ego_embedding = embed_ego(tape, ego_status);
  s.state_tokens = ad::concat_rows<T>({s.bev_tokens, s.ego_embedding});
  std::tie(s.ego_feature, s.agent_features) = disentangle(tape, s.state_tokens, disentangle_attention);
  return s;
}

template <typename T>
Var<T> StateEncoder<T>::intent_head(Tape<T>& tape, Var<T> ego_feature) const {
  Var<T> out = ad::scale(intent_(tape, ego_feature), static_cast<T>(cfg_.coord_scale));
  return ad::reshape(out, spec_.future_len, 2);
}

template <typename T>
Var<T> StateEncoder<T>::bev_semantic_decode(Tape<T>& tape, Var<T> bev_tokens) const {
  Var<T> per_patch = semantic_out_(tape, semantic_norm_(tape, bev_tokens));
  return ad::gather(per_patch, unpatchify_, static_cast<Eigen::Index>(spec_.num_cells()), spec_.num_classes);
}

template <typename T>
Var<T> StateEncoder<T>::agent_head(Tape<T>& tape, Var<T> agent_features) const {
  const T s = static_cast<T>(cfg_.coord_scale);
  Matrix<T> unit(1, scenario::kAgentStateDim);
  unit << s, s, T(1), s, T(1);
  Var<T> raw = agent_(tape, agent_features);
  return ad::mul(raw, tape.constant(unit.replicate(raw.rows(), 1)));
}

template class StateEncoder<float>;
template class StateEncoder<double>;

}  // namespace mapworld::model
