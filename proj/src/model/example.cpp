#include "mapworld/model/example.hpp"

#include <algorithm>
#include <string>

#include "mapworld/errors.hpp"

namespace mapworld::model {

void ModelConfig::validate(const scenario::WorldSpec& spec) const {
  if (d <= 0) throw ConfigError("model.d must be > 0");
  if (heads <= 0 || d % heads != 0) throw ConfigError("model.d must be divisible by model.heads");
  if (patch <= 0 || spec.grid_size % patch != 0) throw ConfigError("model.patch must divide world.grid_size");
  if (encoder_blocks < 0 || history_blocks < 0) throw ConfigError("block counts must be >= 0");
  if (ffn_mult < 1) throw ConfigError("model.ffn_mult must be >= 1");
  if (num_modes < 1) throw ConfigError("model.num_modes must be >= 1");
  if (noise_factor < 0.0) throw ConfigError("model.noise_factor must be >= 0");
  if (decoder_depth < 1) throw ConfigError("model.decoder_depth must be >= 1");
  if (attention_radius < 0.0) throw ConfigError("model.attention_radius must be >= 0");
  if (coord_scale <= 0.0) throw ConfigError("model.coord_scale must be > 0");
}

void WorldModelConfig::validate(const scenario::WorldSpec& spec) const {
  if (layers < 1) throw ConfigError("world_model.layers must be >= 1");
  if (feature_scales != 1 && feature_scales != 2) throw ConfigError("world_model.feature_scales must be 1 or 2");
  int prev = 0;
  for (int s : resolved_steps(spec)) {
    if (s < 1 || s > spec.future_len) {
      throw ConfigError("world_model.prediction_steps entry " + std::to_string(s) + " outside [1, " +
                        std::to_string(spec.future_len) + "]");
    }
    if (s <= prev) throw ConfigError("world_model.prediction_steps must be strictly increasing");
    prev = s;
  }
}

std::vector<int> WorldModelConfig::resolved_steps(const scenario::WorldSpec& spec) const {
  return prediction_steps.empty() ? std::vector<int>{spec.future_len} : prediction_steps;
}

Matrix<double> patchify_one_hot(const std::vector<int>& cells, int grid, int patch, int classes) {
  const int side = grid / patch;
  Matrix<double> out = Matrix<double>::Zero(side * side, patch * patch * classes);
  for (int r = 0; r < grid; ++r) {
    for (int c = 0; c < grid; ++c) {
      const int cls = cells[static_cast<std::size_t>(r * grid + c)];
      const int token = (r / patch) * side + c / patch;
      const int local = (r % patch) * patch + c % patch;
      out(token, local * classes + cls) = 1.0;
    }
  }
  return out;
}

std::shared_ptr<const std::vector<int>> unpatchify_index(int grid, int patch, int classes, int blocks) {
  const int side = grid / patch;
  const int n_tokens = side * side;
  const int feat = patch * patch * classes;
  auto idx = std::make_shared<std::vector<int>>(static_cast<std::size_t>(blocks) * grid * grid * classes);
  std::size_t o = 0;
  for (int b = 0; b < blocks; ++b) {
    for (int r = 0; r < grid; ++r) {
      for (int c = 0; c < grid; ++c) {
        const int token = (r / patch) * side + c / patch;
        const int local = (r % patch) * patch + c % patch;
        for (int k = 0; k < classes; ++k) (*idx)[o++] = (b * n_tokens + token) * feat + local * classes + k;
      }
    }
  }
  return idx;
}

namespace {

std::vector<int> grid_ids(const scenario::SemanticGrid& g, const scenario::WorldSpec& spec, const std::string& id) {
  if (g.rows != spec.grid_size || g.cols != spec.grid_size) {
    throw DataError("scenario " + id + ": grid size does not match world spec");
  }
  std::vector<int> out(g.cells.begin(), g.cells.end());
  for (int c : out) {
    if (c < 0 || c >= spec.num_classes) throw DataError("scenario " + id + ": invalid class id " + std::to_string(c));
  }
  return out;
}

}  // namespace

Example make_example(const scenario::ScenarioRecord& rec, const scenario::WorldSpec& spec, const ModelConfig& model,
                     const WorldModelConfig& wm) {
  Example ex;
  ex.bev_current = grid_ids(rec.bev_current, spec, rec.scenario_id);
  ex.patches = patchify_one_hot(ex.bev_current, spec.grid_size, model.patch, spec.num_classes);
  for (int step : wm.resolved_steps(spec)) {
    const auto it = std::find(rec.future_steps.begin(), rec.future_steps.end(), step);
    if (it == rec.future_steps.end()) {
      throw DataError("scenario " + rec.scenario_id + " has no future grid for step " + std::to_string(step));
    }
    const auto ids = grid_ids(rec.bev_future[static_cast<std::size_t>(it - rec.future_steps.begin())], spec,
                              rec.scenario_id);
    ex.bev_future.insert(ex.bev_future.end(), ids.begin(), ids.end());
  }
  ex.history.resize(spec.history_len, 2);
  for (int i = 0; i < spec.history_len; ++i) {
    ex.history(i, 0) = rec.history[static_cast<std::size_t>(i)].x;
    ex.history(i, 1) = rec.history[static_cast<std::size_t>(i)].y;
  }
  ex.gt_future.resize(spec.future_len, 2);
  for (int i = 0; i < spec.future_len; ++i) {
    ex.gt_future(i, 0) = rec.gt_future[static_cast<std::size_t>(i)].x;
    ex.gt_future(i, 1) = rec.gt_future[static_cast<std::size_t>(i)].y;
  }
  ex.ego_status.resize(1, scenario::kEgoStatusDim);
  for (int i = 0; i < scenario::kEgoStatusDim; ++i) ex.ego_status(0, i) = rec.ego_status[static_cast<std::size_t>(i)];
  ex.agents = Matrix<double>::Zero(spec.max_agents, scenario::kAgentStateDim);
  for (int a = 0; a < spec.max_agents && a < static_cast<int>(rec.agents.size()); ++a) {
    const auto& s = rec.agents[static_cast<std::size_t>(a)];
    ex.agents.row(a) << s.x, s.y, s.heading, s.speed, s.valid;
  }
  return ex;
}

}  // namespace mapworld::model
