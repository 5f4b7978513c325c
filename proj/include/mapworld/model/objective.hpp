#pragma once

#include <map>
#include <string>
#include <vector>

#include "mapworld/autodiff/ops.hpp"

namespace mapworld::model {

using ad::Matrix;
using ad::Tape;
using ad::Var;

struct LossWeights {
  double traj = 1.0;
  double agent = 0.5;
  double semantic = 1.0;
  double cls = 0.5;
  double wm = 1.0;
  double intent = 1.0;

  void validate() const;
  bool operator==(const LossWeights&) const = default;
};

struct ObjectiveConfig {
  LossWeights weights;
  double focal_gamma = 2.0;
  double focal_alpha = 0.25;
  bool average_modes = false;   // ablation: l1 over all modes instead of winner-takes-all
  bool detach_weights = false;  // ablation: no gradient through path weights

  void validate() const;
  bool operator==(const ObjectiveConfig&) const = default;
};

inline const std::vector<std::string>& component_names() {
  static const std::vector<std::string> names{"traj", "agent", "semantic", "cls", "intent", "wm"};
  return names;
}

struct LossReport {
  double total = 0.0;
  std::map<std::string, double> components;  // unweighted
  std::vector<int> wta_index;                 // per sample
};

/// Winner-takes-all mean-l1. `trajectories` is [K x T_f*2], `gt` is [T_f x 2].
/// With `average_modes` the loss averages all modes and wta_index is still the argmin.
template <typename T>
Var<T> trajectory_loss(Var<T> trajectories, const Matrix<T>& gt, bool average_modes, int* wta_index);

/// Per-mode mean-l1 values (no tape), lowest-index tie rule for the argmin.
template <typename T>
int wta_argmin(const Matrix<T>& trajectories, const Matrix<T>& gt);

template <typename T>
Var<T> classification_loss(Var<T> logits, int wta_index, T gamma, T alpha);

template <typename T>
Var<T> semantic_loss(Var<T> logits, const std::vector<int>& targets);

/// Existence BCE over all slots plus mean-l1 on (x, y, heading, speed) of valid slots.
/// `pred` and `gt` are [A x 5]; gt column 4 is the 0/1 validity flag.
template <typename T>
Var<T> agent_loss(Var<T> pred, const Matrix<T>& gt);

template <typename T>
Var<T> intent_loss(Var<T> intent, const Matrix<T>& gt);

/// sum_k weights[k] * per_mode_loss[k]; weights [1 x K], per_mode_loss [K x 1].
/// Throws TrainingError if the weights do not sum to 1 within 1e-4.
template <typename T>
Var<T> path_weighted_wm_loss(Var<T> weights, Var<T> per_mode_loss, bool detach_weights);

/// Weighted sum in component_names() order. Throws TrainingError naming the first
/// non-finite component.
template <typename T>
Var<T> total_loss(const std::map<std::string, Var<T>>& components, const LossWeights& weights);

double weight_for(const LossWeights& w, const std::string& component);

}  // namespace mapworld::model
