#pragma once

#include <array>
#include <optional>
#include <vector>

#include "driveweave/common.hpp"

namespace driveweave {

// Oriented box, used for vehicle footprints.
struct Obb {
  Vec2 center;
  double heading = 0.0;
  double half_len = 0.0;  // along heading
  double half_wid = 0.0;

  bool contains(const Vec2& p) const;
  std::array<Vec2, 4> corners() const;
  // Distance from p to the closest point of the box (0 if inside).
  double distance_to(const Vec2& p) const;
  // Farthest corner distance from p.
  double far_distance_to(const Vec2& p) const;
};

bool obb_overlap(const Obb& a, const Obb& b);

// First intersection parameter t >= 0 of ray origin + t*dir with the box.
std::optional<double> ray_obb(const Vec2& origin, const Vec2& dir, const Obb& box);

// First intersection parameter t >= 0 of the ray with segment [a, b].
std::optional<double> ray_segment(const Vec2& origin, const Vec2& dir,
                                  const Vec2& a, const Vec2& b);

// Piecewise-linear curve with arc-length parameterisation. Lateral offsets
// are signed positive to the left of the travel direction.
class Polyline {
 public:
  Polyline() = default;
  explicit Polyline(std::vector<Vec2> pts);

  const std::vector<Vec2>& points() const { return pts_; }
  double length() const { return cum_.empty() ? 0.0 : cum_.back(); }

  Vec2 point_at(double s) const;
  Vec2 tangent_at(double s) const;
  double heading_at(double s) const;
  // Point displaced laterally from the curve.
  Vec2 offset_point(double s, double lateral) const;

  struct Projection {
    double s = 0.0;        // arc length of the closest point
    double lateral = 0.0;  // signed offset, left positive
  };
  Projection project(const Vec2& p) const;

  // Parallel curve at the given signed lateral offset.
  Polyline offset_curve(double lateral) const;

 private:
  std::vector<Vec2> pts_;
  std::vector<double> cum_;
};

}  // namespace driveweave
