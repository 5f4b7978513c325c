#include "mapworld/scenario/geometry.hpp"

#include <algorithm>
#include <array>
#include <limits>
#include <stdexcept>

namespace mapworld::scenario {

namespace {

std::array<Vec2, 4> corners(const OrientedBox& b) {
  const Vec2 f = unit(b.heading) * (0.5 * b.length);
  const Vec2 l = left_normal(b.heading) * (0.5 * b.width);
  return {b.center + f + l, b.center + f - l, b.center - f - l, b.center - f + l};
}

bool separated_on(Vec2 axis, const std::array<Vec2, 4>& a, const std::array<Vec2, 4>& b) {
  double amin = std::numeric_limits<double>::infinity(), amax = -amin;
  double bmin = amin, bmax = -amin;
  for (const Vec2& p : a) {
    const double d = axis.dot(p);
    amin = std::min(amin, d);
    amax = std::max(amax, d);
  }
  for (const Vec2& p : b) {
    const double d = axis.dot(p);
    bmin = std::min(bmin, d);
    bmax = std::max(bmax, d);
  }
  return amax < bmin || bmax < amin;
}

}  // namespace

bool boxes_overlap(const OrientedBox& a, const OrientedBox& b) {
  const auto ca = corners(a);
  const auto cb = corners(b);
  for (double h : {a.heading, b.heading}) {
    if (separated_on(unit(h), ca, cb) || separated_on(left_normal(h), ca, cb)) {
      return false;
    }
  }
  return true;
}

Polyline::Polyline(std::vector<Vec2> points) : points_(std::move(points)) {
  if (points_.size() < 2) {
    throw std::invalid_argument("Polyline needs at least two points");
  }
  cumulative_.resize(points_.size());
  cumulative_[0] = 0.0;
  for (std::size_t i = 1; i < points_.size(); ++i) {
    cumulative_[i] = cumulative_[i - 1] + (points_[i] - points_[i - 1]).norm();
  }
}

std::size_t Polyline::segment_for(double s) const {
  auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), s);
  std::size_t idx = it == cumulative_.begin() ? 0 : static_cast<std::size_t>(it - cumulative_.begin()) - 1;
  return std::min(idx, points_.size() - 2);
}

Vec2 Polyline::point_at(double s) const {
  const std::size_t i = segment_for(s);
  const Vec2 a = points_[i];
  const Vec2 b = points_[i + 1];
  const double len = cumulative_[i + 1] - cumulative_[i];
  const double t = len > 0.0 ? (s - cumulative_[i]) / len : 0.0;
  return a + (b - a) * t;
}

double Polyline::heading_at(double s) const {
  const std::size_t i = segment_for(s);
  const Vec2 d = points_[i + 1] - points_[i];
  return std::atan2(d.y, d.x);
}

Polyline::Projection Polyline::project(Vec2 p) const {
  Projection best;
  double best_dist = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i + 1 < points_.size(); ++i) {
    const Vec2 a = points_[i];
    const Vec2 d = points_[i + 1] - a;
    const double len2 = d.dot(d);
    double t = len2 > 0.0 ? (p - a).dot(d) / len2 : 0.0;
    // First and last segments extend to infinity so the road continues past the data.
    if (i != 0) t = std::max(t, 0.0);
    if (i + 2 != points_.size()) t = std::min(t, 1.0);
    const Vec2 c = a + d * t;
    const double dist = (p - c).norm();
    if (dist < best_dist) {
      best_dist = dist;
      const double sign = d.cross(p - a) >= 0.0 ? 1.0 : -1.0;
      best.s = cumulative_[i] + t * std::sqrt(len2);
      best.lateral = sign * dist;
    }
  }
  return best;
}

double path_length(std::span<const Vec2> points) {
  double total = 0.0;
  for (std::size_t i = 1; i < points.size(); ++i) total += (points[i] - points[i - 1]).norm();
  return total;
}

}  // namespace mapworld::scenario
