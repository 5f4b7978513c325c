#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

namespace mapworld::scenario {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  Vec2 operator+(Vec2 o) const { return {x + o.x, y + o.y}; }
  Vec2 operator-(Vec2 o) const { return {x - o.x, y - o.y}; }
  Vec2 operator*(double s) const { return {x * s, y * s}; }
  bool operator==(const Vec2&) const = default;

  double norm() const { return std::hypot(x, y); }
  double dot(Vec2 o) const { return x * o.x + y * o.y; }
  double cross(Vec2 o) const { return x * o.y - y * o.x; }
};

inline Vec2 unit(double heading) { return {std::cos(heading), std::sin(heading)}; }
inline Vec2 left_normal(double heading) { return {-std::sin(heading), std::cos(heading)}; }

/// Position plus heading. Heading 0 points along +x; positive is counter-clockwise (left).
struct Pose {
  Vec2 position;
  double heading = 0.0;
};

/// Expresses `p` (given in the parent frame) in the local frame of `frame`.
inline Vec2 to_local(const Pose& frame, Vec2 p) {
  const Vec2 d = p - frame.position;
  const double c = std::cos(frame.heading);
  const double s = std::sin(frame.heading);
  return {c * d.x + s * d.y, -s * d.x + c * d.y};
}

inline double wrap_angle(double a) {
  return std::remainder(a, 2.0 * M_PI);
}

struct OrientedBox {
  Vec2 center;
  double heading = 0.0;
  double length = 0.0;  // along heading
  double width = 0.0;

  bool contains(Vec2 p) const {
    const Vec2 q = to_local({center, heading}, p);
    return std::abs(q.x) <= 0.5 * length && std::abs(q.y) <= 0.5 * width;
  }
};

/// Separating-axis overlap test for two oriented rectangles.
bool boxes_overlap(const OrientedBox& a, const OrientedBox& b);

/// Piecewise-linear path with arc-length parameterization. Queries past either end
/// extrapolate along the first/last segment.
class Polyline {
 public:
  Polyline() = default;
  explicit Polyline(std::vector<Vec2> points);

  double length() const { return cumulative_.empty() ? 0.0 : cumulative_.back(); }
  const std::vector<Vec2>& points() const { return points_; }

  Vec2 point_at(double s) const;
  double heading_at(double s) const;

  /// Signed lateral offset of `p` from the path (positive to the left) and the
  /// arc position of its closest point.
  struct Projection {
    double s = 0.0;
    double lateral = 0.0;
  };
  Projection project(Vec2 p) const;

 private:
  std::size_t segment_for(double s) const;

  std::vector<Vec2> points_;
  std::vector<double> cumulative_;
};

double path_length(std::span<const Vec2> points);

}  // namespace mapworld::scenario
