#include "driveweave/geometry.hpp"

#include <algorithm>
#include <array>
#include <limits>

namespace driveweave {

bool Obb::contains(const Vec2& p) const {
  Vec2 local = (p - center).rotated(-heading);
  return std::abs(local.x) <= half_len && std::abs(local.y) <= half_wid;
}

std::array<Vec2, 4> Obb::corners() const {
  std::array<Vec2, 4> out;
  const std::array<Vec2, 4> local = {Vec2{half_len, half_wid}, Vec2{half_len, -half_wid},
                                     Vec2{-half_len, -half_wid}, Vec2{-half_len, half_wid}};
  for (int i = 0; i < 4; ++i) out[i] = center + local[i].rotated(heading);
  return out;
}

double Obb::distance_to(const Vec2& p) const {
  Vec2 local = (p - center).rotated(-heading);
  double dx = std::max(std::abs(local.x) - half_len, 0.0);
  double dy = std::max(std::abs(local.y) - half_wid, 0.0);
  return std::hypot(dx, dy);
}

double Obb::far_distance_to(const Vec2& p) const {
  double best = 0.0;
  for (const Vec2& c : corners()) best = std::max(best, (c - p).norm());
  return best;
}

namespace {

// Separating axis test helper: projects box b onto the given axis and checks
// against the projection of box a (axis is unit-length, in world frame).
bool separated_on_axis(const Vec2& axis, const Obb& a, const Obb& b) {
  auto project = [&axis](const Obb& box, double& lo, double& hi) {
    lo = std::numeric_limits<double>::infinity();
    hi = -lo;
    for (const Vec2& c : box.corners()) {
      double v = c.dot(axis);
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  };
  double alo, ahi, blo, bhi;
  project(a, alo, ahi);
  project(b, blo, bhi);
  return ahi < blo || bhi < alo;
}

}  // namespace

bool obb_overlap(const Obb& a, const Obb& b) {
  const std::array<Vec2, 4> axes = {
      Vec2{1.0, 0.0}.rotated(a.heading), Vec2{0.0, 1.0}.rotated(a.heading),
      Vec2{1.0, 0.0}.rotated(b.heading), Vec2{0.0, 1.0}.rotated(b.heading)};
  for (const Vec2& ax : axes)
    if (separated_on_axis(ax, a, b)) return false;
  return true;
}

std::optional<double> ray_obb(const Vec2& origin, const Vec2& dir, const Obb& box) {
  // Slab method in the box frame.
  Vec2 o = (origin - box.center).rotated(-box.heading);
  Vec2 d = dir.rotated(-box.heading);
  double tmin = 0.0;
  double tmax = std::numeric_limits<double>::infinity();
  const double half[2] = {box.half_len, box.half_wid};
  const double oc[2] = {o.x, o.y};
  const double dc[2] = {d.x, d.y};
  for (int i = 0; i < 2; ++i) {
    if (std::abs(dc[i]) < 1e-12) {
      if (std::abs(oc[i]) > half[i]) return std::nullopt;
      continue;
    }
    double t1 = (-half[i] - oc[i]) / dc[i];
    double t2 = (half[i] - oc[i]) / dc[i];
    if (t1 > t2) std::swap(t1, t2);
    tmin = std::max(tmin, t1);
    tmax = std::min(tmax, t2);
    if (tmin > tmax) return std::nullopt;
  }
  return tmin;
}

std::optional<double> ray_segment(const Vec2& origin, const Vec2& dir,
                                  const Vec2& a, const Vec2& b) {
  Vec2 seg = b - a;
  double denom = dir.cross(seg);
  if (std::abs(denom) < 1e-12) return std::nullopt;
  Vec2 diff = a - origin;
  double t = diff.cross(seg) / denom;
  double u = diff.cross(dir) / denom;
  if (t < 0.0 || u < 0.0 || u > 1.0) return std::nullopt;
  return t;
}

Polyline::Polyline(std::vector<Vec2> pts) : pts_(std::move(pts)) {
  if (pts_.size() < 2) throw std::invalid_argument("polyline needs >= 2 points");
  cum_.resize(pts_.size());
  cum_[0] = 0.0;
  for (size_t i = 1; i < pts_.size(); ++i)
    cum_[i] = cum_[i - 1] + (pts_[i] - pts_[i - 1]).norm();
}

Vec2 Polyline::point_at(double s) const {
  s = std::clamp(s, 0.0, length());
  auto it = std::upper_bound(cum_.begin(), cum_.end(), s);
  size_t i = std::min<size_t>(std::max<ptrdiff_t>(it - cum_.begin() - 1, 0), pts_.size() - 2);
  double seg = cum_[i + 1] - cum_[i];
  double f = seg > 0.0 ? (s - cum_[i]) / seg : 0.0;
  return pts_[i] + (pts_[i + 1] - pts_[i]) * f;
}

Vec2 Polyline::tangent_at(double s) const {
  s = std::clamp(s, 0.0, length());
  auto it = std::upper_bound(cum_.begin(), cum_.end(), s);
  size_t i = std::min<size_t>(std::max<ptrdiff_t>(it - cum_.begin() - 1, 0), pts_.size() - 2);
  return (pts_[i + 1] - pts_[i]).normalized();
}

double Polyline::heading_at(double s) const {
  Vec2 t = tangent_at(s);
  return std::atan2(t.y, t.x);
}

Vec2 Polyline::offset_point(double s, double lateral) const {
  Vec2 t = tangent_at(s);
  Vec2 n{-t.y, t.x};  // left normal
  return point_at(s) + n * lateral;
}

Polyline::Projection Polyline::project(const Vec2& p) const {
  double best_d2 = std::numeric_limits<double>::infinity();
  Projection best;
  for (size_t i = 0; i + 1 < pts_.size(); ++i) {
    Vec2 a = pts_[i], b = pts_[i + 1];
    Vec2 ab = b - a;
    double len2 = ab.dot(ab);
    double u = len2 > 0.0 ? std::clamp((p - a).dot(ab) / len2, 0.0, 1.0) : 0.0;
    Vec2 q = a + ab * u;
    double d2 = (p - q).dot(p - q);
    if (d2 < best_d2) {
      best_d2 = d2;
      Vec2 t = ab.normalized();
      best.s = cum_[i] + u * std::sqrt(len2);
      best.lateral = t.cross(p - q);  // left positive
    }
  }
  return best;
}

Polyline Polyline::offset_curve(double lateral) const {
  std::vector<Vec2> out;
  out.reserve(pts_.size());
  for (size_t i = 0; i < pts_.size(); ++i) {
    Vec2 t;
    if (i == 0)
      t = (pts_[1] - pts_[0]).normalized();
    else if (i + 1 == pts_.size())
      t = (pts_[i] - pts_[i - 1]).normalized();
    else
      t = ((pts_[i + 1] - pts_[i]).normalized() + (pts_[i] - pts_[i - 1]).normalized()).normalized();
    out.push_back(pts_[i] + Vec2{-t.y, t.x} * lateral);
  }
  return Polyline(std::move(out));
}

}  // namespace driveweave
