#include "mapworld/model/map_world.hpp"

#include "mapworld/errors.hpp"

namespace mapworld::model {

void MapWorldConfig::validate() const {
  world.validate();
  model.validate(world);
  world_model.validate(world);
  objective.validate();
}

template <typename T>
MapWorldModel<T>::MapWorldModel(const MapWorldConfig& cfg, std::uint64_t init_seed) : cfg_(cfg) {
  cfg.validate();
  std::mt19937_64 rng(init_seed);
  encoder_ = std::make_unique<StateEncoder<T>>(params_, cfg.world, cfg.model, rng);
  planner_ = std::make_unique<MaskedActionPlanner<T>>(params_, cfg.world, cfg.model, rng);
  world_model_ = std::make_unique<LatentWorldModel<T>>(params_, cfg.world, cfg.model, cfg.world_model, rng);
}

template <typename T>
T MapWorldModel<T>::effective_noise(bool training) const {
  if (!training && !cfg_.model.noise_at_inference) return T(0);
  return static_cast<T>(cfg_.model.noise_factor);
}

template <typename T>
Forward<T> MapWorldModel<T>::forward(Tape<T>& tape, const Example& ex, std::mt19937_64& noise_rng, bool training,
                                     bool run_world_model) const {
  Forward<T> f;
  const Matrix<T> history = ex.history.cast<T>();
  f.state = encoder_->encode(tape, ex.patches.cast<T>(), ex.ego_status.cast<T>());
  f.intent = encoder_->intent_head(tape, f.state.ego_feature);
  f.bev_logits = encoder_->bev_semantic_decode(tape, f.state.bev_tokens);
  f.agents = encoder_->agent_head(tape, f.state.agent_features);

  f.history_tokens = planner_->encode_history(tape, history);
  f.query_sequence = planner_->build_query_sequence(tape, f.history_tokens);
  f.mode_queries = planner_->make_mode_queries(tape, f.query_sequence, cfg_.model.num_modes,
                                               effective_noise(training), noise_rng);
  f.scaffold = MaskedActionPlanner<T>::build_scaffold(tape, history, f.intent);
  auto decoded = planner_->decode_trajectories(tape, f.mode_queries.queries, f.scaffold, f.state.bev_tokens,
                                               f.state.agent_features);
  f.modes.residuals = decoded.residuals;
  f.modes.logits = decoded.logits;
  f.modes.trajectories = MaskedActionPlanner<T>::finalize(decoded.residuals, f.scaffold, cfg_.world.history_len);
  f.modes.weights = ad::softmax_rows(ad::transpose(decoded.logits));

  if (run_world_model) {
    const int k = cfg_.model.num_modes;
    Var<T> condition = world_model_->encode_trajectory_condition(tape, f.modes.trajectories);
    f.wm_logits = world_model_->rollout(tape, f.state.bev_tokens, condition, k);
    if (!ex.bev_future.empty()) f.wm_loss = world_model_->per_mode_semantic_loss(f.wm_logits, ex.bev_future, k);
  }
  return f;
}

template <typename T>
std::map<std::string, Var<T>> MapWorldModel<T>::losses(const Forward<T>& f, const Example& ex,
                                                       int* wta_index) const {
  const ObjectiveConfig& o = cfg_.objective;
  std::map<std::string, Var<T>> c;
  int wta = 0;
  c["traj"] = trajectory_loss(f.modes.trajectories, Matrix<T>(ex.gt_future.cast<T>()), o.average_modes, &wta);
  c["cls"] = classification_loss(f.modes.logits, wta, static_cast<T>(o.focal_gamma), static_cast<T>(o.focal_alpha));
  c["semantic"] = semantic_loss(f.bev_logits, ex.bev_current);
  c["agent"] = agent_loss(f.agents, Matrix<T>(ex.agents.cast<T>()));
  c["intent"] = intent_loss(f.intent, Matrix<T>(ex.gt_future.cast<T>()));
  if (!f.wm_loss.valid()) throw TrainingError("wm", "world-model loss requested without a rollout");
  c["wm"] = path_weighted_wm_loss(f.modes.weights, f.wm_loss, o.detach_weights);
  if (wta_index != nullptr) *wta_index = wta;
  return c;
}

template <typename T>
BatchResult<T> batch_loss(const MapWorldModel<T>& model, Tape<T>& tape, const std::vector<const Example*>& batch,
                          const std::vector<std::uint64_t>& noise_seeds) {
  if (batch.empty()) throw DataError("empty batch");
  if (noise_seeds.size() != batch.size()) throw ShapeError("one noise seed per sample required");
  std::map<std::string, Var<T>> sums;
  BatchResult<T> out;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    std::mt19937_64 rng(noise_seeds[i]);
    const Forward<T> f = model.forward(tape, *batch[i], rng, true);
    int wta = 0;
    for (auto& [name, v] : model.losses(f, *batch[i], &wta)) {
      auto it = sums.find(name);
      if (it == sums.end()) {
        sums.emplace(name, v);
      } else {
        it->second = ad::add(it->second, v);
      }
    }
    out.report.wta_index.push_back(wta);
  }
  const T inv = T(1) / static_cast<T>(batch.size());
  std::map<std::string, Var<T>> means;
  for (auto& [name, v] : sums) {
    means.emplace(name, ad::scale(v, inv));
    out.report.components[name] = static_cast<double>(means.at(name).scalar());
  }
  out.total = total_loss(means, model.config().objective.weights);
  out.report.total = static_cast<double>(out.total.scalar());
  return out;
}

template class MapWorldModel<float>;
template class MapWorldModel<double>;
template BatchResult<float> batch_loss<float>(const MapWorldModel<float>&, Tape<float>&,
                                              const std::vector<const Example*>&, const std::vector<std::uint64_t>&);
template BatchResult<double> batch_loss<double>(const MapWorldModel<double>&, Tape<double>&,
                                                const std::vector<const Example*>&,
                                                const std::vector<std::uint64_t>&);

}  // namespace mapworld::model
