#include "mapworld/model/planner.hpp"

#include <string>

#include "mapworld/errors.hpp"

namespace mapworld::model {

template <typename T>
MaskedActionPlanner<T>::MaskedActionPlanner(nn::ParameterSet<T>& ps, const scenario::WorldSpec& spec,
                                            const ModelConfig& cfg, std::mt19937_64& rng)
    : spec_(spec), cfg_(cfg) {
  cfg.validate(spec);
  if (spec.history_len < 2) throw ConfigError("history encoding needs world.history_len >= 2");
  const int d = cfg.d;
  const int hidden = d * cfg.ffn_mult;
  const int steps = spec.history_len + spec.future_len;
  history_in_ = nn::Mlp<T>(ps, "planner.history_in", 4, d, d, rng);
  history_pos_ = &ps.add("planner.history_pos", nn::normal_matrix<T>(spec.history_len, d, 0.02, rng));
  for (int b = 0; b < cfg.history_blocks; ++b) {
    history_blocks_.emplace_back(ps, "planner.history_block" + std::to_string(b), d, cfg.heads, hidden, rng);
  }
  mask_token_ = &ps.add("planner.mask_token", nn::normal_matrix<T>(1, d, 0.02, rng));
  future_pos_ = &ps.add("planner.future_pos", nn::normal_matrix<T>(spec.future_len, d, 0.02, rng));
  completion_ = nn::SelfAttentionBlock<T>(ps, "planner.completion", d, cfg.heads, hidden, rng);
  const int fusion_in = cfg.fusion == Fusion::kFlatten ? steps * d : d;
  fusion_ = nn::Mlp<T>(ps, "planner.fusion", fusion_in, d, d, rng);
  psi_ = nn::Mlp<T>(ps, "planner.psi", d, d, d, rng);
  scaffold_embed_ = nn::Linear<T>(ps, "planner.scaffold_embed", steps * 2, d, rng);
  for (int l = 0; l < cfg.decoder_depth; ++l) {
    const std::string name = "planner.decoder" + std::to_string(l);
    layers_.push_back(DecoderLayer{nn::CrossAttention<T>(ps, name + ".bev_attn", d, cfg.heads, rng),
                                   nn::CrossAttention<T>(ps, name + ".agent_attn", d, cfg.heads, rng),
                                   nn::FeedForward<T>(ps, name + ".ffn", d, hidden, rng)});
  }
  refine_norm_ = nn::LayerNorm<T>(ps, "planner.refine_norm", d);
  refine_out_ = nn::Linear<T>(ps, "planner.refine_out", d, steps * 2 + 1, rng, 0.1);
  if (cfg.zero_init_refinement) refine_out_.zero();

  const int side = cfg.tokens_per_side(spec);
  for (int tr = 0; tr < side; ++tr) {
    for (int tc = 0; tc < side; ++tc) {
      const double x = ((tr + 0.5) * cfg.patch - spec.grid_size / 2) * spec.cell_size;
      const double y = ((tc + 0.5) * cfg.patch - spec.grid_size / 2) * spec.cell_size;
      token_centers_.push_back({x, y});
    }
  }
}

template <typename T>
Matrix<T> MaskedActionPlanner<T>::augment_history(const Matrix<T>& history) {
  if (history.cols() != 2 || history.rows() < 2) throw ConfigError("history must be [T_h x 2] with T_h >= 2");
  Matrix<T> out = Matrix<T>::Zero(history.rows(), 4);
  out.leftCols(2) = history;
  for (Eigen::Index t = 1; t < history.rows(); ++t) out.row(t).rightCols(2) = history.row(t) - history.row(t - 1);
  return out;
}

template <typename T>
Var<T> MaskedActionPlanner<T>::encode_history(Tape<T>& tape, const Matrix<T>& history) const {
  if (history.rows() != spec_.history_len) throw ConfigError("history length does not match world.history_len");
  const Matrix<T> aug = augment_history(history) / static_cast<T>(cfg_.coord_scale);
  Var<T> h = ad::add(history_in_(tape, tape.constant(aug)), tape.parameter(*history_pos_));
  for (const auto& block : history_blocks_) h = block(tape, h);
  return h;
}

template <typename T>
Var<T> MaskedActionPlanner<T>::build_query_sequence(Tape<T>& tape, Var<T> history_tokens) const {
  Var<T> mask = ad::tile_rows(tape.parameter(*mask_token_), spec_.future_len);
  if (cfg_.positional) mask = ad::add(mask, tape.parameter(*future_pos_));
  return ad::concat_rows<T>({history_tokens, mask});
}

template <typename T>
ModeQueries<T> MaskedActionPlanner<T>::make_mode_queries(Tape<T>& tape, Var<T> query_sequence, int num_modes,
                                                          T noise_factor, std::mt19937_64& rng) const {
  if (num_modes < 1) throw ConfigError("number of modes must be >= 1");
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix<T> z(num_modes, cfg_.d);
  for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = static_cast<T>(normal(rng));
  return make_mode_queries(tape, query_sequence, z, noise_factor);
}

template <typename T>
ModeQueries<T> MaskedActionPlanner<T>::make_mode_queries(Tape<T>& tape, Var<T> query_sequence,
                                                          const Matrix<T>& noise, T noise_factor) const {
  if (noise.rows() < 1 || noise.cols() != cfg_.d) throw ShapeError("mode noise must be [K x d]");
  if (noise_factor < T(0)) throw ConfigError("noise factor must be >= 0");
  Var<T> completed = completion_(tape, query_sequence);
  Var<T> pooled = cfg_.fusion == Fusion::kFlatten
                      ? ad::reshape(completed, 1, completed.value().size())
                      : ad::mean_rows(completed);
  ModeQueries<T> mq;
  mq.fused = fusion_(tape, pooled);
  mq.noise = noise;
  mq.noise_factor = noise_factor;
  Var<T> offsets = psi_(tape, tape.constant(noise * noise_factor));
  mq.queries = ad::add(ad::tile_rows(mq.fused, noise.rows()), offsets);
  return mq;
}

template <typename T>
Var<T> MaskedActionPlanner<T>::build_scaffold(Tape<T>& tape, const Matrix<T>& history, Var<T> intent) {
  if (history.cols() != 2 || intent.cols() != 2) throw ShapeError("scaffold parts must have 2 columns");
  return ad::concat_rows<T>({tape.constant(history), intent});
}

template <typename T>
std::vector<std::uint8_t> MaskedActionPlanner<T>::anchor_mask(const Matrix<T>& scaffold) const {
  const double radius = cfg_.attention_radius * cfg_.patch * spec_.cell_size;
  std::vector<std::uint8_t> mask(token_centers_.size(), 0);
  bool any = false;
  for (std::size_t i = 0; i < token_centers_.size(); ++i) {
    for (Eigen::Index r = 0; r < scaffold.rows(); ++r) {
      const scenario::Vec2 p{static_cast<double>(scaffold(r, 0)), static_cast<double>(scaffold(r, 1))};
      if ((p - token_centers_[i]).norm() <= radius) {
        mask[i] = 1;
        any = true;
        break;
      }
    }
  }
  if (!any) std::fill(mask.begin(), mask.end(), std::uint8_t{1});
  return mask;
}

template <typename T>
typename MaskedActionPlanner<T>::Decoded MaskedActionPlanner<T>::decode_trajectories(Tape<T>& tape, Var<T> queries,
                                                                                    Var<T> scaffold,
                                                                                    Var<T> bev_tokens,
                                                                                    Var<T> agent_features) const {
  const int steps = spec_.history_len + spec_.future_len;
  if (scaffold.rows() != steps || scaffold.cols() != 2) throw ShapeError("scaffold must be [(T_h+T_f) x 2]");
  ad::AttentionLayout bev_layout;
  bev_layout.key_mask = anchor_mask(scaffold.value());
  Var<T> flat = ad::scale(ad::reshape(scaffold, 1, steps * 2), static_cast<T>(1.0 / cfg_.coord_scale));
  Var<T> q = ad::add_row(queries, scaffold_embed_(tape, flat));
  for (const auto& layer : layers_) {
    q = layer.bev_attn(tape, q, bev_tokens, bev_layout);
    q = layer.agent_attn(tape, q, agent_features);
    q = layer.ffn(tape, q);
  }
  Var<T> out = refine_out_(tape, refine_norm_(tape, q));
  Decoded d;
  d.residuals = ad::scale(ad::slice_cols(out, 0, steps * 2), static_cast<T>(cfg_.coord_scale));
  d.logits = ad::slice_cols(out, steps * 2, 1);
  return d;
}

template <typename T>
Var<T> MaskedActionPlanner<T>::finalize(Var<T> residuals, Var<T> scaffold, int history_len) {
  const Eigen::Index width = scaffold.value().size();
  if (residuals.cols() != width) throw ShapeError("residual width does not match scaffold");
  Var<T> p = ad::tile_rows(ad::reshape(scaffold, 1, width), residuals.rows());
  return ad::slice_cols(ad::add(residuals, p), 2 * history_len, width - 2 * history_len);
}

int select_mode(const Matrix<double>& logits) {
  int best = 0;
  for (Eigen::Index i = 1; i < logits.size(); ++i) {
    if (logits.data()[i] > logits.data()[best]) best = static_cast<int>(i);
  }
  return best;
}

template class MaskedActionPlanner<float>;
template class MaskedActionPlanner<double>;

}  // namespace mapworld::model
