#include "mapworld/scenario/safety.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace mapworld::scenario {

std::vector<Pose> poses_along(std::span<const Vec2> future) {
  std::vector<Pose> poses;
  poses.reserve(future.size());
  Vec2 prev{0.0, 0.0};
  double heading = 0.0;
  for (const Vec2& p : future) {
    const Vec2 d = p - prev;
    if (d.norm() > 1e-9) heading = std::atan2(d.y, d.x);
    poses.push_back({p, heading});
    prev = p;
  }
  return poses;
}

bool collides(std::span<const Vec2> future, const std::vector<std::vector<AgentState>>& agent_future,
              Footprint ego, Footprint agent) {
  const auto poses = poses_along(future);
  const std::size_t steps = std::min(poses.size(), agent_future.size());
  for (std::size_t i = 0; i < steps; ++i) {
    const OrientedBox ego_box{poses[i].position, poses[i].heading, ego.length, ego.width};
    for (const AgentState& a : agent_future[i]) {
      if (a.valid < 0.5) continue;
      const OrientedBox agent_box{{a.x, a.y}, a.heading, agent.length, agent.width};
      if (boxes_overlap(ego_box, agent_box)) return true;
    }
  }
  return false;
}

double min_time_gap(std::span<const Vec2> future, const std::vector<std::vector<AgentState>>& agent_future,
                    double rate_hz, Footprint ego, Footprint agent) {
  const auto poses = poses_along(future);
  const std::size_t steps = std::min(poses.size(), agent_future.size());
  const double corridor = 0.5 * (ego.width + agent.width);
  const double bumper = 0.5 * (ego.length + agent.length);
  double best = std::numeric_limits<double>::infinity();
  Vec2 prev{0.0, 0.0};
  for (std::size_t i = 0; i < steps; ++i) {
    const double speed = std::max((poses[i].position - prev).norm() * rate_hz, 0.1);
    prev = poses[i].position;
    for (const AgentState& a : agent_future[i]) {
      if (a.valid < 0.5) continue;
      const Vec2 rel = to_local(poses[i], {a.x, a.y});
      if (rel.x <= 0.0 || std::abs(rel.y) >= corridor) continue;
      best = std::min(best, (rel.x - bumper) / speed);
    }
  }
  return best;
}

}  // namespace mapworld::scenario
