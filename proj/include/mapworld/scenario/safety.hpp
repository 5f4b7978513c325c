#pragma once

#include <span>
#include <vector>

#include "mapworld/scenario/geometry.hpp"
#include "mapworld/scenario/scenario.hpp"

namespace mapworld::scenario {

struct Footprint {
  double length = 4.0;
  double width = 2.0;
};

/// Poses along a future trajectory starting at the origin with heading 0. The pose
/// at waypoint i takes the heading of the segment ending there; zero-length segments
/// keep the previous heading.
std::vector<Pose> poses_along(std::span<const Vec2> future);

/// True if the ego footprint overlaps any valid agent at any future step.
bool collides(std::span<const Vec2> future, const std::vector<std::vector<AgentState>>& agent_future,
              Footprint ego, Footprint agent);

/// Smallest longitudinal time gap to an agent ahead in the ego corridor over the
/// horizon, in seconds. Returns +inf when nothing is ahead; negative when overlapping.
double min_time_gap(std::span<const Vec2> future, const std::vector<std::vector<AgentState>>& agent_future,
                    double rate_hz, Footprint ego, Footprint agent);

}  // namespace mapworld::scenario
