#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "mapworld/model/config.hpp"
#include "mapworld/model/example.hpp"
#include "mapworld/model/objective.hpp"
#include "mapworld/model/planner.hpp"
#include "mapworld/model/state_encoder.hpp"
#include "mapworld/model/world_model.hpp"

namespace mapworld::model {

struct MapWorldConfig {
  scenario::WorldSpec world;
  ModelConfig model;
  WorldModelConfig world_model;
  ObjectiveConfig objective;

  void validate() const;
  bool operator==(const MapWorldConfig&) const = default;
};

/// Every intermediate of one forward pass, for losses, tests and plotting.
template <typename T>
struct Forward {
  PlanningState<T> state;
  Var<T> intent;       // [T_f x 2]
  Var<T> bev_logits;   // [H*W x C]
  Var<T> agents;       // [A x 5]
  Var<T> history_tokens;
  Var<T> query_sequence;
  ModeQueries<T> mode_queries;
  Var<T> scaffold;     // [(T_h+T_f) x 2]
  ModeSet<T> modes;
  Var<T> wm_logits;    // [K*S*H*W x C], invalid when the world model is skipped
  Var<T> wm_loss;      // [K x 1]
};

template <typename T>
class MapWorldModel {
 public:
  MapWorldModel(const MapWorldConfig& cfg, std::uint64_t init_seed);
  MapWorldModel(const MapWorldModel&) = delete;
  MapWorldModel& operator=(const MapWorldModel&) = delete;

  /// `training` selects the train-time noise policy; inference uses zero noise
  /// unless model.noise_at_inference is set.
  Forward<T> forward(Tape<T>& tape, const Example& ex, std::mt19937_64& noise_rng, bool training,
                     bool run_world_model = true) const;

  /// Unweighted loss components of one sample.
  std::map<std::string, Var<T>> losses(const Forward<T>& f, const Example& ex, int* wta_index) const;

  nn::ParameterSet<T>& params() { return params_; }
  const nn::ParameterSet<T>& params() const { return params_; }
  StateEncoder<T>& encoder() { return *encoder_; }
  const StateEncoder<T>& encoder() const { return *encoder_; }
  MaskedActionPlanner<T>& planner() { return *planner_; }
  const MaskedActionPlanner<T>& planner() const { return *planner_; }
  LatentWorldModel<T>& world_model() { return *world_model_; }
  const LatentWorldModel<T>& world_model() const { return *world_model_; }
  const MapWorldConfig& config() const { return cfg_; }

  /// Noise factor a forward pass will use.
  T effective_noise(bool training) const;

 private:
  MapWorldConfig cfg_;
  nn::ParameterSet<T> params_;
  std::unique_ptr<StateEncoder<T>> encoder_;
  std::unique_ptr<MaskedActionPlanner<T>> planner_;
  std::unique_ptr<LatentWorldModel<T>> world_model_;
};

template <typename T>
struct BatchResult {
  Var<T> total;
  LossReport report;
};

/// Mean of each component over the batch, then the weighted total. Sample i
/// draws its mode noise from mt19937_64(noise_seeds[i]).
template <typename T>
BatchResult<T> batch_loss(const MapWorldModel<T>& model, Tape<T>& tape, const std::vector<const Example*>& batch,
                          const std::vector<std::uint64_t>& noise_seeds);

}  // namespace mapworld::model
