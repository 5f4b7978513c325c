#include "mapworld/scenario/scenario.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

#include "mapworld/errors.hpp"
#include "mapworld/scenario/safety.hpp"

namespace mapworld::scenario {

void WorldSpec::validate() const {
  if (grid_size <= 0) throw ConfigError("world.grid_size must be > 0");
  if (cell_size <= 0.0) throw ConfigError("world.cell_size must be > 0");
  if (rate_hz <= 0.0) throw ConfigError("world.rate_hz must be > 0");
  if (history_len < 2) throw ConfigError("world.history_len must be >= 2 (displacements need a predecessor)");
  if (future_len < 1) throw ConfigError("world.future_len must be >= 1");
  if (num_classes != 4) throw ConfigError("world.num_classes must be 4 (background, drivable, lane_marking, agent)");
  if (max_agents < 0) throw ConfigError("world.max_agents must be >= 0");
}

std::optional<Cell> WorldSpec::cell_of(Vec2 p) const {
  if (!contains(p)) return std::nullopt;
  const int row = static_cast<int>(std::floor(p.x / cell_size)) + grid_size / 2;
  const int col = static_cast<int>(std::floor(p.y / cell_size)) + grid_size / 2;
  if (row < 0 || row >= grid_size || col < 0 || col >= grid_size) return std::nullopt;
  return Cell{row, col};
}

Vec2 WorldSpec::cell_center(int row, int col) const {
  return {(row - grid_size / 2 + 0.5) * cell_size, (col - grid_size / 2 + 0.5) * cell_size};
}

std::string_view template_name(Template t) {
  switch (t) {
    case Template::kStraight: return "straight";
    case Template::kLeftTurn: return "left_turn";
    case Template::kRightTurn: return "right_turn";
    case Template::kCurve: return "curve";
  }
  return "unknown";
}

Template parse_template(std::string_view name) {
  for (Template t : all_templates()) {
    if (template_name(t) == name) return t;
  }
  throw ConfigError("unknown template '" + std::string(name) + "'");
}

std::vector<Template> all_templates() {
  return {Template::kStraight, Template::kLeftTurn, Template::kRightTurn, Template::kCurve};
}

std::array<double, 3> command_for(Template t) {
  switch (t) {
    case Template::kLeftTurn: return {1.0, 0.0, 0.0};
    case Template::kRightTurn: return {0.0, 0.0, 1.0};
    default: return {0.0, 1.0, 0.0};
  }
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t master_seed, std::uint64_t index) {
  return splitmix64(master_seed + 0x9E3779B97F4A7C15ULL * (index + 1));
}

std::vector<double> speed_profile(const WorldSpec& spec, double speed, double accel) {
  std::vector<double> v(static_cast<std::size_t>(spec.future_len));
  for (int i = 0; i < spec.future_len; ++i) v[i] = speed + accel * (i + 0.5) * spec.dt();
  return v;
}

namespace {

std::vector<double> heading_profile(const WorldSpec& spec, Template kind, double angle, double curve_sign) {
  std::vector<double> h(static_cast<std::size_t>(spec.future_len), 0.0);
  const double n = spec.future_len;
  for (int i = 0; i < spec.future_len; ++i) {
    const double u = (i + 0.5) / n;
    switch (kind) {
      case Template::kStraight: h[i] = 0.0; break;
      case Template::kLeftTurn: h[i] = angle * u; break;
      case Template::kRightTurn: h[i] = -angle * u; break;
      case Template::kCurve: h[i] = curve_sign * angle * std::sin(M_PI * u); break;
    }
  }
  return h;
}

AgentState agent_state_at(const Polyline& road, double s, double lateral, double speed) {
  const double heading = road.heading_at(s);
  const Vec2 p = road.point_at(s) + left_normal(heading) * lateral;
  return {p.x, p.y, heading, speed, 1.0};
}

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

}  // namespace

WorldState generate_world(const WorldSpec& spec, Template kind, std::uint64_t seed,
                          const GeneratorParams& params, const ScenarioOverrides& overrides) {
  spec.validate();
  std::mt19937_64 rng(splitmix64(seed));

  // Every draw happens unconditionally so overrides do not shift later samples.
  const double speed_draw = uniform(rng, params.min_speed, params.max_speed);
  const double accel_draw = uniform(rng, -params.max_abs_accel, params.max_abs_accel);
  const double turn_draw = uniform(rng, params.min_turn_angle, params.max_turn_angle);
  const double curve_draw = uniform(rng, params.min_curve_amplitude, params.max_curve_amplitude);
  const double curve_sign = uniform(rng, 0.0, 1.0) < 0.5 ? -1.0 : 1.0;
  const int agents_draw = std::uniform_int_distribution<int>(0, std::max(spec.max_agents, 0))(rng);

  const double speed = overrides.speed.value_or(speed_draw);
  const double accel = overrides.accel.value_or(accel_draw);
  const double angle = overrides.turn_angle.value_or(kind == Template::kCurve ? curve_draw : turn_draw);
  const int num_agents = std::min(overrides.num_agents.value_or(agents_draw), spec.max_agents);

  const auto speeds = speed_profile(spec, speed, accel);
  const auto headings = heading_profile(spec, kind, angle, curve_sign);

  WorldState world;
  world.ego_speed = speed;
  world.ego_accel = accel;
  world.ego_poses.push_back({{0.0, 0.0}, 0.0});
  Vec2 p{0.0, 0.0};
  for (int i = 0; i < spec.future_len; ++i) {
    p = p + unit(headings[i]) * (speeds[i] * spec.dt());
    world.ego_poses.push_back({p, headings[i]});
  }
  for (int i = 1; i <= spec.future_len; ++i) {
    if (!spec.contains(world.ego_poses[i].position)) {
      throw ConfigError("template '" + std::string(template_name(kind)) +
                        "' does not fit the grid extent (future waypoint " + std::to_string(i) + " leaves the grid)");
    }
  }
  const double history_reach = (spec.history_len - 1) * speed * spec.dt();
  if (history_reach >= spec.half_extent()) {
    throw ConfigError("template '" + std::string(template_name(kind)) + "' history does not fit the grid extent");
  }

  const double lead = 3.0 * spec.half_extent() + 1.0;
  std::vector<Vec2> centerline{{-lead, 0.0}, {0.0, 0.0}};
  for (int i = 1; i <= spec.future_len; ++i) centerline.push_back(world.ego_poses[i].position);
  centerline.push_back(world.ego_poses.back().position + unit(world.ego_poses.back().heading) * lead);
  world.road = Polyline(std::move(centerline));

  const double w = params.lane_width;
  world.road_right = -0.5 * w;
  world.road_left = 1.5 * w;
  world.lane_boundaries = {-0.5 * w, 0.5 * w, 1.5 * w};

  // Gap checks only look at the ground-truth future, so they run against it directly.
  std::vector<Vec2> gt_future;
  for (int i = 1; i <= spec.future_len; ++i) gt_future.push_back(world.ego_poses[i].position);
  const double max_ego_speed = *std::max_element(speeds.begin(), speeds.end());
  const double ego_s0 = lead;
  const Footprint ego_fp{params.ego_length, params.ego_width};
  const Footprint agent_fp{params.agent_length, params.agent_width};

  for (int slot = 0; slot < num_agents; ++slot) {
    for (int attempt = 0; attempt < params.agent_retries; ++attempt) {
      const bool same_lane = uniform(rng, 0.0, 1.0) < 0.5;
      const double lateral = same_lane ? 0.0 : w;
      const double s_rel = same_lane ? uniform(rng, 9.0, 15.0) : uniform(rng, -12.0, 14.0);
      const double v = same_lane ? uniform(rng, max_ego_speed + 0.5, max_ego_speed + 1.5) : uniform(rng, 1.0, 4.0);

      AgentTrack track{params.agent_length, params.agent_width, {}};
      for (int t = 0; t <= spec.future_len; ++t) {
        track.states.push_back(agent_state_at(world.road, ego_s0 + s_rel + v * t * spec.dt(), lateral, v));
      }
      if (!spec.contains({track.states[0].x, track.states[0].y})) continue;

      std::vector<std::vector<AgentState>> future(spec.future_len);
      for (int t = 1; t <= spec.future_len; ++t) future[t - 1] = {track.states[t]};
      if (collides(gt_future, future, ego_fp, agent_fp)) continue;
      if (min_time_gap(gt_future, future, spec.rate_hz, ego_fp, agent_fp) < params.min_time_gap) continue;
      bool overlaps_other = false;
      for (const AgentTrack& other : world.agents) {
        for (int t = 0; t <= spec.future_len && !overlaps_other; ++t) {
          const AgentState& a = track.states[t];
          const AgentState& b = other.states[t];
          overlaps_other = boxes_overlap({{a.x, a.y}, a.heading, track.length, track.width},
                                         {{b.x, b.y}, b.heading, other.length, other.width});
        }
      }
      if (overlaps_other) continue;
      world.agents.push_back(std::move(track));
      break;
    }
  }
  return world;
}

SemanticGrid render_bev(const WorldSpec& spec, const WorldState& world, int time_index, const RenderOptions& options) {
  const int n = spec.grid_size;
  SemanticGrid grid(n, n);
  const Pose frame = time_index < static_cast<int>(world.ego_poses.size())
                         ? world.ego_poses[static_cast<std::size_t>(time_index)]
                         : Pose{};
  const double c = std::cos(frame.heading);
  const double s = std::sin(frame.heading);
  auto to_parent = [&](Vec2 local) {
    return frame.position + Vec2{c * local.x - s * local.y, s * local.x + c * local.y};
  };
  const double band = 0.5 * spec.cell_size;

  if (world.has_road) {
    for (int r = 0; r < n; ++r) {
      for (int col = 0; col < n; ++col) {
        const auto proj = world.road.project(to_parent(spec.cell_center(r, col)));
        const double lat = proj.lateral;
        if (lat < world.road_right - band || lat > world.road_left + band) continue;
        bool marking = false;
        for (double b : world.lane_boundaries) marking = marking || std::abs(lat - b) <= band;
        if (marking) {
          grid.at(r, col) = kLaneMarking;
        } else if (lat >= world.road_right && lat <= world.road_left) {
          grid.at(r, col) = kDrivable;
        }
      }
    }
  }

  for (const AgentTrack& agent : world.agents) {
    if (time_index >= static_cast<int>(agent.states.size())) continue;
    const AgentState& a = agent.states[static_cast<std::size_t>(time_index)];
    if (a.valid < 0.5) continue;
    const OrientedBox box{{a.x, a.y}, a.heading, agent.length, agent.width};
    for (int r = 0; r < n; ++r) {
      for (int col = 0; col < n; ++col) {
        if (box.contains(to_parent(spec.cell_center(r, col)))) grid.at(r, col) = kAgent;
      }
    }
  }

  if (options.ego_marker) {
    for (Vec2 local : {Vec2{0.0, 0.0}, Vec2{spec.cell_size, 0.0}}) {
      if (auto cell = spec.cell_of(local)) grid.at(cell->row, cell->col) = kAgent;
    }
  }
  return grid;
}

ScenarioRecord generate_scenario(const WorldSpec& spec, Template kind, std::uint64_t seed,
                                 const std::vector<int>& future_steps, const GeneratorParams& params,
                                 const ScenarioOverrides& overrides) {
  const WorldState world = generate_world(spec, kind, seed, params, overrides);
  std::vector<int> steps = future_steps.empty() ? std::vector<int>{spec.future_len} : future_steps;
  for (int st : steps) {
    if (st < 1 || st > spec.future_len) {
      throw ConfigError("future step " + std::to_string(st) + " outside [1, " + std::to_string(spec.future_len) + "]");
    }
  }

  ScenarioRecord rec;
  rec.scenario_id = std::string(template_name(kind)) + "-" + std::to_string(seed);
  rec.template_kind = kind;
  rec.command = command_for(kind);
  rec.bev_current = render_bev(spec, world, 0);
  rec.future_steps = steps;
  for (int st : steps) rec.bev_future.push_back(render_bev(spec, world, st));

  // History: constant-speed straight approach ending at the origin.
  for (int j = 0; j < spec.history_len; ++j) {
    rec.history.push_back({-(spec.history_len - 1 - j) * world.ego_speed * spec.dt(), 0.0});
  }
  for (int i = 1; i <= spec.future_len; ++i) rec.gt_future.push_back(world.ego_poses[i].position);
  rec.ego_status = {world.ego_speed, 0.0, world.ego_accel, 0.0, rec.command[0], rec.command[1], rec.command[2]};

  rec.agents.assign(static_cast<std::size_t>(spec.max_agents), AgentState{});
  rec.agent_future.assign(static_cast<std::size_t>(spec.future_len),
                          std::vector<AgentState>(static_cast<std::size_t>(spec.max_agents)));
  for (std::size_t slot = 0; slot < world.agents.size(); ++slot) {
    rec.agents[slot] = world.agents[slot].states[0];
    for (int i = 1; i <= spec.future_len; ++i) rec.agent_future[i - 1][slot] = world.agents[slot].states[i];
  }
  return rec;
}

}  // namespace mapworld::scenario
