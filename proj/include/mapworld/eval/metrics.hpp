#pragma once

#include <map>
#include <string>
#include <vector>

#include "mapworld/scenario/safety.hpp"
#include "mapworld/scenario/scenario.hpp"

namespace mapworld::eval {

using scenario::Vec2;

/// Thresholds and weights of the desk-scale planning score (an analog of
/// PDMS, not the official metric).
struct MetricThresholds {
  double ttc_threshold = 1.0;  // s
  double max_accel = 4.0;      // m/s^2
  double max_jerk = 8.0;       // m/s^3
  double w_ttc = 5.0;
  double w_ep = 5.0;
  double w_comfort = 2.0;
  double ego_length = 4.0;
  double ego_width = 2.0;
  double agent_length = 4.0;
  double agent_width = 2.0;

  void validate() const;
  bool operator==(const MetricThresholds&) const = default;
};

struct ScenarioMetrics {
  std::string scenario_id;
  int selected = 0;
  double ade = 0.0;
  double fde = 0.0;
  double min_ade = 0.0;
  double min_fde = 0.0;
  std::map<std::string, double> l2_at;  // "1s".."4s", only horizons inside T_f
  bool collision = false;
  double dac = 0.0;
  double ep = 0.0;
  bool ttc_ok = false;
  bool comfort_ok = false;
  double pdms = 0.0;
  double mode_spread = 0.0;  // mean pairwise endpoint distance
};

struct MetricsReport {
  std::size_t count = 0;
  double ade = 0.0;
  double fde = 0.0;
  double min_ade_k = 0.0;
  double min_fde_k = 0.0;
  std::map<std::string, double> l2_at;
  double collision_rate = 0.0;
  double dac = 0.0;
  double ep = 0.0;
  double ttc_ok = 0.0;
  double comfort_ok = 0.0;
  double mini_pdms = 0.0;
  double mode_spread = 0.0;
  std::vector<ScenarioMetrics> per_scenario;
};

/// Fraction of waypoints whose cell in `grid` is not background. Waypoints
/// outside the grid count as off-road.
double drivable_compliance(const std::vector<Vec2>& waypoints, const scenario::SemanticGrid& grid,
                           const scenario::WorldSpec& spec);

/// Path length from the origin through the waypoints.
double arc_length(const std::vector<Vec2>& waypoints);

/// Acceleration and jerk limits on finite differences of history + future.
bool comfortable(const std::vector<Vec2>& history, const std::vector<Vec2>& future, double dt, double max_accel,
                 double max_jerk);

double mean_pairwise_endpoint_distance(const std::vector<std::vector<Vec2>>& modes);

ScenarioMetrics score_scenario(const scenario::ScenarioRecord& record, const scenario::WorldSpec& spec,
                               const std::vector<std::vector<Vec2>>& modes, int selected,
                               const MetricThresholds& thresholds);

/// Means over scenarios; rates over booleans. Throws DataError when empty.
MetricsReport aggregate(std::vector<ScenarioMetrics> scenarios);

}  // namespace mapworld::eval
