#include "mapworld/model/objective.hpp"

#include <cmath>

#include "mapworld/errors.hpp"

namespace mapworld::model {

void LossWeights::validate() const {
  for (const auto& name : component_names()) {
    if (!(weight_for(*this, name) >= 0.0)) throw ConfigError("loss weight lambda_" + name + " must be >= 0");
  }
}

void ObjectiveConfig::validate() const {
  weights.validate();
  if (focal_gamma < 0.0) throw ConfigError("loss.focal_gamma must be >= 0");
  if (focal_alpha <= 0.0) throw ConfigError("loss.focal_alpha must be > 0");
}

double weight_for(const LossWeights& w, const std::string& component) {
  if (component == "traj") return w.traj;
  if (component == "agent") return w.agent;
  if (component == "semantic") return w.semantic;
  if (component == "cls") return w.cls;
  if (component == "intent") return w.intent;
  if (component == "wm") return w.wm;
  throw ConfigError("unknown loss component " + component);
}

namespace {

template <typename T>
Matrix<T> flat_row(const Matrix<T>& m) {
  return Eigen::Map<const Matrix<T>>(m.data(), 1, m.size());
}

}  // namespace

template <typename T>
int wta_argmin(const Matrix<T>& trajectories, const Matrix<T>& gt) {
  const Matrix<T> g = flat_row(gt);
  if (trajectories.cols() != g.cols()) throw ShapeError("trajectory width does not match gt");
  int best = 0;
  T best_val = std::numeric_limits<T>::infinity();
  for (Eigen::Index k = 0; k < trajectories.rows(); ++k) {
    const T v = (trajectories.row(k) - g).cwiseAbs().mean();
    if (v < best_val) {
      best_val = v;
      best = static_cast<int>(k);
    }
  }
  return best;
}

template <typename T>
Var<T> trajectory_loss(Var<T> trajectories, const Matrix<T>& gt, bool average_modes, int* wta_index) {
  Tape<T>& tape = *trajectories.tape();
  const int k = wta_argmin(trajectories.value(), gt);
  if (wta_index != nullptr) *wta_index = k;
  Var<T> diff = ad::sub(trajectories, tape.constant(flat_row(gt).replicate(trajectories.rows(), 1)));
  Var<T> per_mode = ad::mean_abs_rows(diff);
  return average_modes ? ad::mean(per_mode) : ad::pick(per_mode, k, 0);
}

template <typename T>
Var<T> classification_loss(Var<T> logits, int wta_index, T gamma, T alpha) {
  return ad::focal_loss(logits, wta_index, gamma, alpha);
}

template <typename T>
Var<T> semantic_loss(Var<T> logits, const std::vector<int>& targets) {
  return ad::cross_entropy_groups(logits, targets, 1);
}

template <typename T>
Var<T> agent_loss(Var<T> pred, const Matrix<T>& gt) {
  Tape<T>& tape = *pred.tape();
  if (pred.rows() != gt.rows() || pred.cols() != 5 || gt.cols() != 5) throw ShapeError("agent tensors must be [A x 5]");
  std::vector<T> valid(static_cast<std::size_t>(gt.rows()));
  for (Eigen::Index a = 0; a < gt.rows(); ++a) valid[static_cast<std::size_t>(a)] = gt(a, 4);
  Var<T> existence = ad::bce_with_logits(ad::slice_cols(pred, 4, 1), valid);
  Var<T> diff = ad::sub(ad::slice_cols(pred, 0, 4), tape.constant(gt.leftCols(4)));
  return ad::add(existence, ad::masked_mean_abs(diff, valid));
}

template <typename T>
Var<T> intent_loss(Var<T> intent, const Matrix<T>& gt) {
  if (intent.rows() != gt.rows() || intent.cols() != gt.cols()) throw ShapeError("intent shape does not match gt");
  return ad::mean(ad::mean_abs_rows(ad::sub(intent, intent.tape()->constant(gt))));
}

template <typename T>
Var<T> path_weighted_wm_loss(Var<T> weights, Var<T> per_mode_loss, bool detach_weights) {
  if (weights.rows() != 1 || per_mode_loss.cols() != 1 || weights.cols() != per_mode_loss.rows()) {
    throw ShapeError("path weights must be [1 x K] and per-mode losses [K x 1]");
  }
  const double s = static_cast<double>(weights.value().sum());
  if (std::abs(s - 1.0) > 1e-4) throw TrainingError("wm", "path weights sum to " + std::to_string(s));
  return ad::matmul(detach_weights ? ad::detach(weights) : weights, per_mode_loss);
}

template <typename T>
Var<T> total_loss(const std::map<std::string, Var<T>>& components, const LossWeights& weights) {
  Var<T> total;
  for (const auto& name : component_names()) {
    const auto it = components.find(name);
    if (it == components.end()) continue;
    const T v = it->second.scalar();
    if (!std::isfinite(static_cast<double>(v))) throw TrainingError(name, "non-finite loss component '" + name + "'");
    Var<T> term = ad::scale(it->second, static_cast<T>(weight_for(weights, name)));
    total = total.valid() ? ad::add(total, term) : term;
  }
  if (!total.valid()) throw TrainingError("total", "no loss components");
  return total;
}

#define MAPWORLD_INSTANTIATE(T)                                                                  \
  template int wta_argmin<T>(const Matrix<T>&, const Matrix<T>&);                                \
  template Var<T> trajectory_loss<T>(Var<T>, const Matrix<T>&, bool, int*);                      \
  template Var<T> classification_loss<T>(Var<T>, int, T, T);                                     \
  template Var<T> semantic_loss<T>(Var<T>, const std::vector<int>&);                             \
  template Var<T> agent_loss<T>(Var<T>, const Matrix<T>&);                                       \
  template Var<T> intent_loss<T>(Var<T>, const Matrix<T>&);                                      \
  template Var<T> path_weighted_wm_loss<T>(Var<T>, Var<T>, bool);                                \
  template Var<T> total_loss<T>(const std::map<std::string, Var<T>>&, const LossWeights&);

MAPWORLD_INSTANTIATE(float)
MAPWORLD_INSTANTIATE(double)

#undef MAPWORLD_INSTANTIATE

}  // namespace mapworld::model
