#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mapworld/scenario/geometry.hpp"
#include "mapworld/scenario/world_spec.hpp"

namespace mapworld::scenario {

enum class Template : std::uint32_t { kStraight = 0, kLeftTurn = 1, kRightTurn = 2, kCurve = 3 };

std::string_view template_name(Template t);
/// Accepts "straight", "left_turn", "right_turn", "curve"; throws ConfigError otherwise.
Template parse_template(std::string_view name);
std::vector<Template> all_templates();

/// Command one-hot layout: [left, straight, right].
std::array<double, 3> command_for(Template t);

struct AgentState {
  double x = 0.0;
  double y = 0.0;
  double heading = 0.0;
  double speed = 0.0;
  double valid = 0.0;  // 0 or 1

  bool operator==(const AgentState&) const = default;
};

inline constexpr int kEgoStatusDim = 7;  // velocity(2), acceleration(2), command(3)
inline constexpr int kAgentStateDim = 5;

/// One synthetic driving sample. All coordinates are in the current ego frame
/// except bev_future[i], which is rendered in the ground-truth ego frame at
/// future step future_steps[i].
struct ScenarioRecord {
  std::string scenario_id;
  Template template_kind = Template::kStraight;
  std::array<double, 3> command{};
  SemanticGrid bev_current;
  std::vector<int> future_steps;         // 1-based future step indices, size S
  std::vector<SemanticGrid> bev_future;  // S grids
  std::vector<Vec2> history;             // T_h, history.back() == (0, 0)
  std::vector<Vec2> gt_future;           // T_f
  std::array<double, kEgoStatusDim> ego_status{};
  std::vector<AgentState> agents;                     // max_agents slots at t = 0
  std::vector<std::vector<AgentState>> agent_future;  // [T_f][max_agents]

  bool operator==(const ScenarioRecord&) const = default;
};

/// Ranges the generator samples from. Defaults keep every template inside the
/// default 32 m extent.
struct GeneratorParams {
  double min_speed = 2.0;
  double max_speed = 3.25;
  double max_abs_accel = 0.25;
  double min_turn_angle = 0.6 * M_PI / 2.0;
  double max_turn_angle = M_PI / 2.0;
  double min_curve_amplitude = 0.15;
  double max_curve_amplitude = 0.35;
  double lane_width = 3.0;
  double agent_length = 4.0;
  double agent_width = 2.0;
  double ego_length = 4.0;
  double ego_width = 2.0;
  double min_time_gap = 1.0;
  int agent_retries = 8;
};

/// Optional pinned values for the otherwise seed-sampled ego profile.
struct ScenarioOverrides {
  std::optional<double> speed;
  std::optional<double> accel;
  std::optional<double> turn_angle;   // magnitude; sign from template
  std::optional<int> num_agents;
};

struct AgentTrack {
  double length = 4.0;
  double width = 2.0;
  std::vector<AgentState> states;  // index 0 = current, i = future step i
};

/// Full world state over the horizon, before rasterization.
struct WorldState {
  Polyline road;                      // ego-lane centerline
  std::vector<double> lane_boundaries;  // lateral offsets drawn as markings
  double road_left = 0.0;             // drivable lateral span [road_right, road_left]
  double road_right = 0.0;
  std::vector<Pose> ego_poses;        // index 0 = current, i = future step i
  std::vector<AgentTrack> agents;
  double ego_speed = 0.0;  // current speed, also the constant history speed
  double ego_accel = 0.0;
  bool has_road = true;
};

struct RenderOptions {
  /// Debug aid: marks the ego cell and the cell one step ahead along its heading.
  bool ego_marker = false;
};

/// Rasterizes the world as seen from the ego pose at `time_index` (0 = current).
/// Drivable region and lane markings first, agents as filled rectangles on top;
/// the ego itself is never drawn. Anything outside the grid is clipped silently.
SemanticGrid render_bev(const WorldSpec& spec, const WorldState& world, int time_index,
                        const RenderOptions& options = {});

WorldState generate_world(const WorldSpec& spec, Template kind, std::uint64_t seed,
                          const GeneratorParams& params = {}, const ScenarioOverrides& overrides = {});

/// Pure function of (spec, template, seed, params, overrides). Throws ConfigError if
/// the template's geometry leaves the grid.
ScenarioRecord generate_scenario(const WorldSpec& spec, Template kind, std::uint64_t seed,
                                 const std::vector<int>& future_steps = {},
                                 const GeneratorParams& params = {},
                                 const ScenarioOverrides& overrides = {});

/// The per-segment speeds the generator integrates (segment i ends at gt_future[i]).
std::vector<double> speed_profile(const WorldSpec& spec, double speed, double accel);

/// splitmix64 finalizer.
std::uint64_t splitmix64(std::uint64_t x);
/// Per-scenario seed: splitmix64(master + 0x9E3779B97F4A7C15 * (index + 1)).
std::uint64_t derive_seed(std::uint64_t master_seed, std::uint64_t index);

}  // namespace mapworld::scenario
