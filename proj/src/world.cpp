#include "driveweave/world.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <nlohmann/json.hpp>

#include "driveweave/io.hpp"

namespace driveweave {

using json = nlohmann::ordered_json;

namespace {

void require_finite_controls(double accel, double yaw_rate, double dt) {
  if (!is_finite(accel) || !is_finite(yaw_rate) || !is_finite(dt))
    throw std::invalid_argument("step_world: non-finite input");
  if (dt <= 0.0) throw std::invalid_argument("step_world: dt must be positive");
}

// Exact constant-turn-rate displacement over one step at fixed speed.
void advance_arc(Pose& pose, double speed, double yaw_rate, double dt) {
  double h0 = pose.heading;
  if (std::abs(yaw_rate) < 1e-9) {
    pose.pos.x += speed * std::cos(h0) * dt;
    pose.pos.y += speed * std::sin(h0) * dt;
  } else {
    double h1 = h0 + yaw_rate * dt;
    double r = speed / yaw_rate;
    pose.pos.x += r * (std::sin(h1) - std::sin(h0));
    pose.pos.y += -r * (std::cos(h1) - std::cos(h0));
  }
  pose.heading = wrap_angle(h0 + yaw_rate * dt);
}

}  // namespace

Obb ego_footprint(const WorldState& state, const WorldConfig& cfg) {
  return {state.ego.pose.pos, state.ego.pose.heading, cfg.ego_len * 0.5, cfg.ego_wid * 0.5};
}

Obb agent_footprint(const Agent& a) {
  return {a.pose.pos, a.pose.heading, a.length * 0.5, a.width * 0.5};
}

void sync_agent_pose(Agent& a, const RoadSpec& road) {
  a.pose.pos = road.centerline.offset_point(a.s, a.lateral);
  Vec2 t = road.centerline.tangent_at(a.s);
  a.pose.heading = std::atan2(t.y, t.x);
  a.velocity = t * a.speed;
}

WorldState step_world(const WorldState& state, double accel, double yaw_rate, double dt,
                      const WorldConfig& cfg) {
  require_finite_controls(accel, yaw_rate, dt);
  (void)cfg;
  WorldState next = state;

  advance_arc(next.ego.pose, next.ego.speed, yaw_rate, dt);
  next.ego.speed = std::max(0.0, next.ego.speed + accel * dt);
  next.ego.accel = accel;
  next.ego.yaw_rate = yaw_rate;

  for (Agent& a : next.agents) {
    double lat_rate = 0.0;
    switch (a.behavior) {
      case BehaviorKind::kConstVel:
        break;
      case BehaviorKind::kLeadBrake:
        if (state.time >= a.brake_time)
          a.speed = std::max(a.min_speed, a.speed - a.brake_rate * dt);
        break;
      case BehaviorKind::kCutIn:
        if (state.time >= a.cutin_time && a.lateral != a.target_lateral) {
          double step = std::clamp(a.target_lateral - a.lateral, -a.cutin_rate * dt,
                                   a.cutin_rate * dt);
          a.lateral += step;
          lat_rate = step / dt;
        }
        break;
    }
    a.s = std::min(a.s + a.speed * dt, state.road.centerline.length());
    a.pose.pos = state.road.centerline.offset_point(a.s, a.lateral);
    Vec2 t = state.road.centerline.tangent_at(a.s);
    Vec2 n{-t.y, t.x};
    a.velocity = t * a.speed + n * lat_rate;
    a.pose.heading = a.speed > 0.1 ? std::atan2(a.velocity.y, a.velocity.x)
                                   : std::atan2(t.y, t.x);
  }

  next.time = state.time + dt;
  return next;
}

namespace {

// Local projection with a moving segment hint; falls back to a full scan when
// the best match sits at the edge of the scanned window.
struct ProjectCursor {
  const Polyline* line = nullptr;
  size_t seg = 0;

  Polyline::Projection project(const Vec2& p) {
    const auto& pts = line->points();
    size_t nseg = pts.size() - 1;
    const size_t window = 16;
    size_t lo = seg > window ? seg - window : 0;
    size_t hi = std::min(seg + window, nseg - 1);
    auto best = scan(p, lo, hi);
    if ((best.second == lo && lo > 0) || (best.second == hi && hi + 1 < nseg))
      best = scan(p, 0, nseg - 1);
    seg = best.second;
    return best.first;
  }

 private:
  std::pair<Polyline::Projection, size_t> scan(const Vec2& p, size_t lo, size_t hi) {
    const auto& pts = line->points();
    double best_d2 = std::numeric_limits<double>::infinity();
    Polyline::Projection best;
    size_t best_i = lo;
    double cum = 0.0;
    // Arc length up to segment lo, then accumulate.
    for (size_t i = 0; i < lo; ++i) cum += (pts[i + 1] - pts[i]).norm();
    for (size_t i = lo; i <= hi; ++i) {
      Vec2 a = pts[i], b = pts[i + 1];
      Vec2 ab = b - a;
      double len = ab.norm();
      double len2 = len * len;
      double u = len2 > 0.0 ? std::clamp((p - a).dot(ab) / len2, 0.0, 1.0) : 0.0;
      Vec2 q = a + ab * u;
      double d2 = (p - q).dot(p - q);
      if (d2 < best_d2) {
        best_d2 = d2;
        best.s = cum + u * len;
        best.lateral = ab.normalized().cross(p - q);
        best_i = i;
      }
      cum += len;
    }
    return {best, best_i};
  }
};

// Angular candidate index for ray casting from a shared origin.
class RayIndex {
 public:
  RayIndex(const Vec2& origin, int bins) : origin_(origin), bins_(bins), table_(bins) {}

  void add_segment(const Vec2& a, const Vec2& b, int id) {
    int ba = bin_of(a), bb = bin_of(b);
    int diff = bb - ba;
    if (diff > bins_ / 2) diff -= bins_;
    if (diff < -bins_ / 2) diff += bins_;
    int lo = diff >= 0 ? ba : bb;
    int steps = std::abs(diff);
    for (int k = -1; k <= steps + 1; ++k) table_[mod(lo + k)].push_back(id);
  }

  const std::vector<int>& candidates(const Vec2& dir) const {
    double ang = std::atan2(dir.y, dir.x);
    int b = static_cast<int>(std::floor((ang + M_PI) / (2.0 * M_PI) * bins_));
    return table_[mod(b)];
  }

 private:
  int bin_of(const Vec2& p) const {
    Vec2 d = p - origin_;
    double ang = std::atan2(d.y, d.x);
    return mod(static_cast<int>(std::floor((ang + M_PI) / (2.0 * M_PI) * bins_)));
  }
  int mod(int b) const { return ((b % bins_) + bins_) % bins_; }

  Vec2 origin_;
  int bins_;
  std::vector<std::vector<int>> table_;
};

}  // namespace

FrameRaster render_frame(const WorldState& state, const RasterGrid& grid,
                         const WorldConfig& cfg, double timestamp) {
  FrameRaster out;
  out.rows = grid.rows;
  out.cols = grid.cols;
  out.cell_m = grid.cell_m;
  out.timestamp = timestamp;
  size_t n = static_cast<size_t>(grid.rows) * grid.cols;
  out.semantic.assign(n, kOffRoad);
  out.depth.assign(n, static_cast<float>(cfg.max_depth));
  std::vector<int8_t> cell_agent(n, -1);

  const Polyline& center = state.road.centerline;
  double hw = state.road.half_width;
  ProjectCursor cursor{&center, 0};
  cursor.project(state.ego.pose.pos);  // warm start near the ego

  // Background classes from lane geometry.
  for (int r = 0; r < grid.rows; ++r) {
    for (int c = 0; c < grid.cols; ++c) {
      Vec2 world_pt = state.ego.pose.to_world(grid.cell_center(r, c));
      auto proj = cursor.project(world_pt);
      // Beyond the road end caps counts as off-road.
      Vec2 at = center.point_at(proj.s);
      Vec2 tangent = center.tangent_at(proj.s);
      double overshoot = tangent.dot(world_pt - at);
      bool capped = (proj.s <= 0.0 && overshoot < -0.5 * grid.cell_m) ||
                    (proj.s >= center.length() && overshoot > 0.5 * grid.cell_m);
      uint8_t cls = kOffRoad;
      if (!capped) {
        double alat = std::abs(proj.lateral);
        if (alat < hw)
          cls = kRoad;
        else if (cfg.marking_w > 0.0 && alat <= hw + cfg.marking_w)
          cls = kLaneMarking;
      }
      out.semantic[static_cast<size_t>(r) * grid.cols + c] = cls;
    }
  }

  // Agents. Cells whose centers fall inside a footprint take the agent class;
  // the cell holding the agent center is stamped too so no in-range agent can
  // vanish between cell centers.
  double reach = 0.5 * std::hypot(grid.rows * grid.cell_m, grid.cols * grid.cell_m) + 10.0;
  auto stamp = [&](int r, int c, int idx) {
    if (r < 0 || r >= grid.rows || c < 0 || c >= grid.cols) return;
    size_t at = static_cast<size_t>(r) * grid.cols + c;
    out.semantic[at] = kAgentClass;
    cell_agent[at] = static_cast<int8_t>(idx);
  };
  for (size_t ai = 0; ai < state.agents.size(); ++ai) {
    const Agent& a = state.agents[ai];
    if ((a.pose.pos - state.ego.pose.pos).norm() > reach) continue;
    Obb box = agent_footprint(a);
    // Index bounds from the box corners in ego frame.
    int rmin = grid.rows, rmax = -1, cmin = grid.cols, cmax = -1;
    for (const Vec2& corner : box.corners()) {
      Vec2 local = state.ego.pose.to_local(corner);
      int c = grid.anchor_col + static_cast<int>(std::lround(local.x / grid.cell_m));
      int r = grid.anchor_row - static_cast<int>(std::lround(local.y / grid.cell_m));
      rmin = std::min(rmin, r - 1);
      rmax = std::max(rmax, r + 1);
      cmin = std::min(cmin, c - 1);
      cmax = std::max(cmax, c + 1);
    }
    for (int r = std::max(rmin, 0); r <= std::min(rmax, grid.rows - 1); ++r)
      for (int c = std::max(cmin, 0); c <= std::min(cmax, grid.cols - 1); ++c) {
        Vec2 world_pt = state.ego.pose.to_world(grid.cell_center(r, c));
        if (box.contains(world_pt)) stamp(r, c, static_cast<int>(ai));
      }
    Vec2 local = state.ego.pose.to_local(a.pose.pos);
    int cc = grid.anchor_col + static_cast<int>(std::lround(local.x / grid.cell_m));
    int cr = grid.anchor_row - static_cast<int>(std::lround(local.y / grid.cell_m));
    stamp(cr, cc, static_cast<int>(ai));
  }

  // Ego footprint, highest precedence.
  for (int r = 0; r < grid.rows; ++r)
    for (int c = 0; c < grid.cols; ++c) {
      Vec2 local = grid.cell_center(r, c);
      if (std::abs(local.x) <= cfg.ego_len * 0.5 && std::abs(local.y) <= cfg.ego_wid * 0.5)
        out.semantic[static_cast<size_t>(r) * grid.cols + c] = kEgoClass;
    }

  // Depth: first occluder along the ray from the ego through each cell
  // center. Occluders are agent boxes and the lane edge polylines. Edge
  // segments are pruned with an angular index; agent boxes are few enough to
  // test directly.
  Vec2 origin = state.ego.pose.pos;
  double ego_s = cursor.project(origin).s;
  double window = cfg.max_depth + 20.0;
  Polyline left = center.offset_curve(hw);
  Polyline right = center.offset_curve(-hw);
  struct Seg {
    Vec2 a, b;
  };
  std::vector<Seg> segs;
  auto collect = [&](const Polyline& edge) {
    const auto& pts = edge.points();
    double cum = 0.0;
    for (size_t i = 0; i + 1 < pts.size(); ++i) {
      double nlen = (pts[i + 1] - pts[i]).norm();
      if (cum + nlen >= ego_s - window && cum <= ego_s + window)
        segs.push_back({pts[i], pts[i + 1]});
      cum += nlen;
    }
  };
  collect(left);
  collect(right);
  RayIndex index(origin, 1024);
  for (size_t i = 0; i < segs.size(); ++i)
    index.add_segment(segs[i].a, segs[i].b, static_cast<int>(i));

  std::vector<Obb> agent_boxes;
  for (const Agent& a : state.agents) agent_boxes.push_back(agent_footprint(a));

  for (int r = 0; r < grid.rows; ++r)
    for (int c = 0; c < grid.cols; ++c) {
      size_t at = static_cast<size_t>(r) * grid.cols + c;
      if (r == grid.anchor_row && c == grid.anchor_col) {
        out.depth[at] = 0.0f;
        continue;
      }
      Vec2 local = grid.cell_center(r, c);
      Vec2 dir = local.rotated(state.ego.pose.heading).normalized();
      double best = cfg.max_depth;
      for (const Obb& box : agent_boxes)
        if (auto t = ray_obb(origin, dir, box)) best = std::min(best, *t);
      for (int si : index.candidates(dir))
        if (auto t = ray_segment(origin, dir, segs[si].a, segs[si].b))
          best = std::min(best, *t);
      if (cell_agent[at] >= 0)
        best = std::min(best, agent_boxes[cell_agent[at]].distance_to(origin));
      out.depth[at] = static_cast<float>(std::min(best, cfg.max_depth));
    }

  return out;
}

Command current_command(const WorldState& state, const WorldConfig& cfg) {
  const Polyline& center = state.road.centerline;
  double s = center.project(state.ego.pose.pos).s;
  double h0 = center.heading_at(s);
  double h1 = center.heading_at(std::min(s + cfg.command_window_m, center.length()));
  double d = wrap_angle(h1 - h0);
  if (d > cfg.command_thresh_rad) return Command::kLeft;
  if (d < -cfg.command_thresh_rad) return Command::kRight;
  return Command::kStraight;
}

EgoStatus ego_status(const EgoState& ego, Command cmd) {
  EgoStatus s;
  s.velocity = Vec2{ego.speed, 0.0};
  s.acceleration = Vec2{ego.accel, ego.speed * ego.yaw_rate};
  s.command = cmd;
  return s;
}

ExpertControl expert_policy(const WorldState& state, const WorldConfig& cfg) {
  const ExpertConfig& ex = cfg.expert;
  const Polyline& center = state.road.centerline;
  double v = state.ego.speed;
  auto proj = center.project(state.ego.pose.pos);

  // Pure pursuit on the centerline.
  double ld = std::clamp(ex.lookahead_gain * v, ex.lookahead_min, ex.lookahead_max);
  Vec2 target = center.offset_point(std::min(proj.s + ld, center.length()), 0.0);
  Vec2 local = state.ego.pose.to_local(target);
  double alpha = std::atan2(local.y, local.x);
  double yaw_rate = v * 2.0 * std::sin(alpha) / ld;

  // IDM speed control against the nearest in-corridor lead.
  double v0 = std::max(state.target_speed, 0.0);
  double gap = std::numeric_limits<double>::infinity();
  double lead_speed = 0.0;
  for (const Agent& a : state.agents) {
    if (std::abs(a.lateral) > cfg.ego_wid * 0.5 + a.width * 0.5 + 0.3) continue;
    double ds = a.s - proj.s - 0.5 * (a.length + cfg.ego_len);
    if (ds > 0.0 && ds < gap) {
      gap = ds;
      lead_speed = a.speed;
    }
  }
  double interaction = 0.0;
  if (std::isfinite(gap)) {
    double dv = v - lead_speed;
    double s_star = ex.s0 + std::max(0.0, v * ex.headway +
                                              v * dv / (2.0 * std::sqrt(ex.a_max * ex.b_comf)));
    interaction = (s_star / std::max(gap, 0.1));
    interaction *= interaction;
  }
  // A zero target speed saturates the free-road term so a stopped ego stays
  // stopped instead of dividing by zero.
  double free_term;
  if (v0 > 1e-9) {
    free_term = std::pow(v / v0, 4.0);
  } else {
    free_term = (v > 0.0) ? std::numeric_limits<double>::infinity() : 1.0;
  }
  double accel = ex.a_max * (1.0 - free_term - interaction);
  accel = std::clamp(accel, -2.0 * ex.b_comf, ex.a_max);
  return {accel, yaw_rate};
}

double reference_progress(const WorldState& state, double horizon, const WorldConfig& cfg) {
  if (horizon <= 0.0) return 0.0;
  WorldState s = state;
  double arc = 0.0;
  int steps = static_cast<int>(std::round(horizon / cfg.dt));
  for (int i = 0; i < steps; ++i) {
    double v_before = s.ego.speed;
    ExpertControl u = expert_policy(s, cfg);
    s = step_world(s, u.accel, u.yaw_rate, cfg.dt, cfg);
    arc += 0.5 * (v_before + s.ego.speed) * cfg.dt;
  }
  return arc;
}

double projected_ttc(const WorldState& state, const WorldConfig& cfg, double horizon,
                     double step) {
  Vec2 ego_vel = Vec2{std::cos(state.ego.pose.heading), std::sin(state.ego.pose.heading)} *
                 state.ego.speed;
  Obb ego = ego_footprint(state, cfg);
  for (double t = 0.0; t <= horizon + 1e-9; t += step) {
    Obb e = ego;
    e.center = ego.center + ego_vel * t;
    for (const Agent& a : state.agents) {
      Obb box = agent_footprint(a);
      box.center = box.center + a.velocity * t;
      if (t > 0.0 && obb_overlap(e, box)) return t;
    }
  }
  return std::numeric_limits<double>::infinity();
}

const char* scenario_family_name(ScenarioFamily f) {
  switch (f) {
    case ScenarioFamily::kStraightFollow: return "straight-follow";
    case ScenarioFamily::kLeadBrake: return "lead-brake";
    case ScenarioFamily::kCurveLeft: return "curve-left";
    case ScenarioFamily::kCurveRight: return "curve-right";
    case ScenarioFamily::kMergeCutIn: return "merge-cut-in";
  }
  return "unknown";
}

namespace {

Polyline make_straight_road(double length) {
  std::vector<Vec2> pts;
  for (double x = 0.0; x <= length + 1e-9; x += 1.0) pts.push_back({x, 0.0});
  return Polyline(std::move(pts));
}

Polyline make_curve_road(double lead_in, double radius, double arc_angle, double tail) {
  std::vector<Vec2> pts;
  for (double x = 0.0; x < lead_in; x += 1.0) pts.push_back({x, 0.0});
  double sign = arc_angle >= 0.0 ? 1.0 : -1.0;
  Vec2 pivot{lead_in, sign * radius};
  double total = std::abs(arc_angle);
  double dtheta = 1.0 / radius;
  for (double th = 0.0; th <= total + 1e-9; th += dtheta) {
    double a = -sign * M_PI / 2.0 + sign * th;
    pts.push_back(pivot + Vec2{std::cos(a), std::sin(a)} * radius);
  }
  Vec2 end_t = (pts.back() - pts[pts.size() - 2]).normalized();
  Vec2 last = pts.back();
  for (double d = 1.0; d <= tail; d += 1.0) pts.push_back(last + end_t * d);
  return Polyline(std::move(pts));
}

struct FeasibilityIssue {
  bool failed = false;
  std::string reason;
};

Agent make_lane_agent(BehaviorKind kind, double s, double lateral, double speed,
                      const WorldConfig& cfg, const RoadSpec& road) {
  Agent a;
  a.behavior = kind;
  a.s = s;
  a.lateral = lateral;
  a.speed = speed;
  a.length = cfg.agent_len;
  a.width = cfg.agent_wid;
  sync_agent_pose(a, road);
  return a;
}

WorldState build_scenario_world(const ScenarioConfig& scenario, Rng& rng) {
  const WorldConfig& cfg = scenario.world;
  WorldState w;
  double ego_start_s = 40.0;
  double target = rng.uniform(7.0, 11.0);
  w.target_speed = target;

  switch (scenario.family) {
    case ScenarioFamily::kStraightFollow: {
      w.road = {make_straight_road(220.0), 3.5};
      double gap = rng.uniform(18.0, 30.0);
      double lead_speed = target * rng.uniform(0.7, 0.95);
      w.agents.push_back(make_lane_agent(BehaviorKind::kConstVel, ego_start_s + gap, 0.0,
                                         lead_speed, cfg, w.road));
      break;
    }
    case ScenarioFamily::kLeadBrake: {
      w.road = {make_straight_road(220.0), 3.5};
      double gap = rng.uniform(24.0, 36.0);
      Agent a = make_lane_agent(BehaviorKind::kLeadBrake, ego_start_s + gap, 0.0, target,
                                cfg, w.road);
      a.brake_time = rng.uniform(2.5, 4.5);
      a.brake_rate = rng.uniform(2.5, 3.5);
      a.min_speed = rng.uniform(0.0, 2.0);
      w.agents.push_back(a);
      break;
    }
    case ScenarioFamily::kCurveLeft:
    case ScenarioFamily::kCurveRight: {
      double radius = rng.uniform(40.0, 80.0);
      double angle = rng.uniform(M_PI / 3.0, M_PI / 2.0);
      if (scenario.family == ScenarioFamily::kCurveRight) angle = -angle;
      w.road = {make_curve_road(70.0, radius, angle, 80.0), 3.5};
      if (rng.uniform() < 0.5) {
        double gap = rng.uniform(20.0, 32.0);
        double lead_speed = target * rng.uniform(0.75, 0.95);
        w.agents.push_back(make_lane_agent(BehaviorKind::kConstVel, ego_start_s + gap, 0.0,
                                           lead_speed, cfg, w.road));
      }
      break;
    }
    case ScenarioFamily::kMergeCutIn: {
      w.road = {make_straight_road(220.0), 5.25};
      double side = rng.uniform() < 0.5 ? 3.5 : -3.5;
      double ahead = rng.uniform(4.0, 10.0);
      Agent a = make_lane_agent(BehaviorKind::kCutIn, ego_start_s + ahead, side,
                                target * rng.uniform(0.8, 0.9), cfg, w.road);
      a.cutin_time = rng.uniform(2.5, 4.0);
      a.cutin_rate = rng.uniform(1.2, 1.8);
      a.target_lateral = 0.0;
      w.agents.push_back(a);
      break;
    }
  }

  w.ego.pose.pos = w.road.centerline.point_at(ego_start_s);
  w.ego.pose.heading = w.road.centerline.heading_at(ego_start_s);
  w.ego.speed = target * rng.uniform(0.85, 1.0);
  w.time = 0.0;
  return w;
}

FeasibilityIssue check_tick_feasible(const WorldState& s, const WorldConfig& cfg) {
  Obb ego = ego_footprint(s, cfg);
  for (const Agent& a : s.agents)
    if (obb_overlap(ego, agent_footprint(a))) return {true, "expert collision"};
  auto proj = s.road.centerline.project(s.ego.pose.pos);
  if (std::abs(proj.lateral) > s.road.half_width + cfg.shoulder_m)
    return {true, "expert off shoulder"};
  return {};
}

}  // namespace

int EpisodeRecord::tick_of_time(double t) const {
  int i = static_cast<int>(std::lround(t / wcfg.dt));
  if (i < 0 || i >= static_cast<int>(ticks.size()))
    throw std::invalid_argument("tick time out of range");
  return i;
}

int EpisodeRecord::ctx_index_of_time(double t) const {
  int i = static_cast<int>(std::lround(t / 0.5));
  if (i < 0 || i >= static_cast<int>(ctx_frames.size()))
    throw std::invalid_argument("contextual frame time out of range");
  return i;
}

WorldState EpisodeRecord::state_at(int tick) const {
  const EpisodeTick& tk = ticks.at(static_cast<size_t>(tick));
  WorldState s;
  s.road = road;
  s.ego = tk.ego;
  s.agents = tk.agents;
  s.time = tick * wcfg.dt;
  s.target_speed = target_speed;
  return s;
}

Vec2 EpisodeRecord::waypoint(double anchor_t, double tau) const {
  const Pose& anchor = ticks.at(static_cast<size_t>(tick_of_time(anchor_t))).ego.pose;
  const Pose& future = ticks.at(static_cast<size_t>(tick_of_time(anchor_t + tau))).ego.pose;
  return anchor.to_local(future.pos);
}

EpisodeRecord generate_episode(const ScenarioConfig& scenario) {
  const WorldConfig& cfg = scenario.world;
  const int max_attempts = 16;
  for (int attempt = 0; attempt < max_attempts; ++attempt) {
    Rng rng = Rng(scenario.seed).derive("scenario-attempt-" + std::to_string(attempt));
    WorldState w = build_scenario_world(scenario, rng);

    EpisodeRecord ep;
    ep.family = scenario.family;
    ep.seed = scenario.seed;
    ep.retries = attempt;
    ep.wcfg = cfg;
    ep.road = w.road;
    ep.duration = scenario.duration;
    ep.target_speed = w.target_speed;

    int steps = static_cast<int>(std::round(scenario.duration / cfg.dt));
    bool feasible = true;
    double min_ttc = std::numeric_limits<double>::infinity();
    for (int i = 0; i <= steps; ++i) {
      FeasibilityIssue issue = check_tick_feasible(w, cfg);
      if (issue.failed) {
        feasible = false;
        break;
      }
      min_ttc = std::min(min_ttc, projected_ttc(w, cfg, 3.0, 0.05));

      EpisodeTick tk;
      tk.ego = w.ego;
      tk.agents = w.agents;
      tk.command = current_command(w, cfg);
      ExpertControl u = expert_policy(w, cfg);
      tk.accel_cmd = u.accel;
      tk.yaw_cmd = u.yaw_rate;
      ep.ticks.push_back(std::move(tk));

      double t = i * cfg.dt;
      ep.dyn_frames.push_back(render_frame(w, cfg.dynamic, cfg, t));
      if (i % 5 == 0) ep.ctx_frames.push_back(render_frame(w, cfg.contextual, cfg, t));

      if (i < steps) w = step_world(w, u.accel, u.yaw_rate, cfg.dt, cfg);
    }
    if (feasible && min_ttc < cfg.expert_ttc_floor) feasible = false;
    if (feasible) return ep;
  }
  throw DataError("scenario infeasible after " + std::to_string(max_attempts) +
                  " attempts: family=" + scenario_family_name(scenario.family) +
                  " seed=" + std::to_string(scenario.seed));
}

namespace {

json agent_to_json(const Agent& a) {
  return json::array({static_cast<int>(a.behavior), a.s, a.lateral, a.speed, a.length,
                      a.width, a.brake_time, a.brake_rate, a.min_speed, a.cutin_time,
                      a.cutin_rate, a.target_lateral, a.pose.pos.x, a.pose.pos.y,
                      a.pose.heading, a.velocity.x, a.velocity.y});
}

Agent agent_from_json(const json& j) {
  Agent a;
  a.behavior = static_cast<BehaviorKind>(j.at(0).get<int>());
  a.s = j.at(1);
  a.lateral = j.at(2);
  a.speed = j.at(3);
  a.length = j.at(4);
  a.width = j.at(5);
  a.brake_time = j.at(6);
  a.brake_rate = j.at(7);
  a.min_speed = j.at(8);
  a.cutin_time = j.at(9);
  a.cutin_rate = j.at(10);
  a.target_lateral = j.at(11);
  a.pose.pos = {j.at(12), j.at(13)};
  a.pose.heading = j.at(14);
  a.velocity = {j.at(15), j.at(16)};
  return a;
}

json grid_to_json(const RasterGrid& g) {
  return json{{"rows", g.rows}, {"cols", g.cols}, {"cell_m", g.cell_m},
              {"anchor_row", g.anchor_row}, {"anchor_col", g.anchor_col}};
}

RasterGrid grid_from_json(const json& j) {
  return {j.at("rows"), j.at("cols"), j.at("cell_m"), j.at("anchor_row"), j.at("anchor_col")};
}

json wcfg_to_json(const WorldConfig& c) {
  return json{{"contextual", grid_to_json(c.contextual)},
              {"dynamic", grid_to_json(c.dynamic)},
              {"dt", c.dt},
              {"max_depth", c.max_depth},
              {"marking_w", c.marking_w},
              {"shoulder_m", c.shoulder_m},
              {"agent_len", c.agent_len},
              {"agent_wid", c.agent_wid},
              {"ego_len", c.ego_len},
              {"ego_wid", c.ego_wid},
              {"command_window_m", c.command_window_m},
              {"command_thresh_rad", c.command_thresh_rad},
              {"expert_ttc_floor", c.expert_ttc_floor},
              {"expert",
               {{"a_max", c.expert.a_max},
                {"b_comf", c.expert.b_comf},
                {"s0", c.expert.s0},
                {"headway", c.expert.headway},
                {"lookahead_gain", c.expert.lookahead_gain},
                {"lookahead_min", c.expert.lookahead_min},
                {"lookahead_max", c.expert.lookahead_max}}}};
}

WorldConfig wcfg_from_json(const json& j) {
  WorldConfig c;
  c.contextual = grid_from_json(j.at("contextual"));
  c.dynamic = grid_from_json(j.at("dynamic"));
  c.dt = j.at("dt");
  c.max_depth = j.at("max_depth");
  c.marking_w = j.at("marking_w");
  c.shoulder_m = j.at("shoulder_m");
  c.agent_len = j.at("agent_len");
  c.agent_wid = j.at("agent_wid");
  c.ego_len = j.at("ego_len");
  c.ego_wid = j.at("ego_wid");
  c.command_window_m = j.at("command_window_m");
  c.command_thresh_rad = j.at("command_thresh_rad");
  c.expert_ttc_floor = j.at("expert_ttc_floor");
  const json& e = j.at("expert");
  c.expert = {e.at("a_max"), e.at("b_comf"), e.at("s0"), e.at("headway"),
              e.at("lookahead_gain"), e.at("lookahead_min"), e.at("lookahead_max")};
  return c;
}

}  // namespace

void save_episode(const EpisodeRecord& ep, const std::string& json_path,
                  const std::string& blob_path) {
  json j;
  j["format"] = "driveweave-episode-v1";
  j["family"] = static_cast<int>(ep.family);
  j["family_name"] = scenario_family_name(ep.family);
  j["seed"] = ep.seed;
  j["retries"] = ep.retries;
  j["duration"] = ep.duration;
  j["target_speed"] = ep.target_speed;
  j["world"] = wcfg_to_json(ep.wcfg);
  j["road"]["half_width"] = ep.road.half_width;
  json pts = json::array();
  for (const Vec2& p : ep.road.centerline.points()) pts.push_back(json::array({p.x, p.y}));
  j["road"]["centerline"] = std::move(pts);

  json ticks = json::array();
  for (const EpisodeTick& tk : ep.ticks) {
    json t;
    t["ego"] = json::array({tk.ego.pose.pos.x, tk.ego.pose.pos.y, tk.ego.pose.heading,
                            tk.ego.speed, tk.ego.accel, tk.ego.yaw_rate});
    t["cmd"] = static_cast<int>(tk.command);
    t["ctrl"] = json::array({tk.accel_cmd, tk.yaw_cmd});
    json ags = json::array();
    for (const Agent& a : tk.agents) ags.push_back(agent_to_json(a));
    t["agents"] = std::move(ags);
    ticks.push_back(std::move(t));
  }
  j["ticks"] = std::move(ticks);

  BlobWriter blob;
  auto put_frames = [&](const std::vector<FrameRaster>& frames, const char* key) {
    json meta;
    meta["count"] = frames.size();
    meta["rows"] = frames.empty() ? 0 : frames[0].rows;
    meta["cols"] = frames.empty() ? 0 : frames[0].cols;
    meta["cell_m"] = frames.empty() ? 0.0 : frames[0].cell_m;
    json times = json::array();
    meta["offset"] = blob.size();
    for (const FrameRaster& f : frames) {
      times.push_back(f.timestamp);
      blob.put_u8(f.semantic);
      blob.put_f32(f.depth);
    }
    meta["times"] = std::move(times);
    j[key] = std::move(meta);
  };
  put_frames(ep.ctx_frames, "ctx_frames");
  put_frames(ep.dyn_frames, "dyn_frames");
  j["blob_file"] = blob_path.substr(blob_path.find_last_of('/') + 1);

  blob.save(blob_path);
  write_text_file(json_path, j.dump(1));
}

EpisodeRecord load_episode(const std::string& json_path) {
  json j;
  try {
    j = json::parse(read_text_file(json_path));
  } catch (const json::exception& e) {
    throw DataError("bad episode manifest " + json_path + ": " + e.what());
  }
  if (j.value("format", "") != "driveweave-episode-v1")
    throw DataError("unrecognised episode format in " + json_path);

  EpisodeRecord ep;
  ep.family = static_cast<ScenarioFamily>(j.at("family").get<int>());
  ep.seed = j.at("seed");
  ep.retries = j.at("retries");
  ep.duration = j.at("duration");
  ep.target_speed = j.at("target_speed");
  ep.wcfg = wcfg_from_json(j.at("world"));
  std::vector<Vec2> pts;
  for (const auto& p : j.at("road").at("centerline")) pts.push_back({p.at(0), p.at(1)});
  ep.road = {Polyline(std::move(pts)), j.at("road").at("half_width")};

  for (const auto& t : j.at("ticks")) {
    EpisodeTick tk;
    const auto& e = t.at("ego");
    tk.ego.pose.pos = {e.at(0), e.at(1)};
    tk.ego.pose.heading = e.at(2);
    tk.ego.speed = e.at(3);
    tk.ego.accel = e.at(4);
    tk.ego.yaw_rate = e.at(5);
    tk.command = static_cast<Command>(t.at("cmd").get<int>());
    tk.accel_cmd = t.at("ctrl").at(0);
    tk.yaw_cmd = t.at("ctrl").at(1);
    for (const auto& a : t.at("agents")) tk.agents.push_back(agent_from_json(a));
    ep.ticks.push_back(std::move(tk));
  }

  std::string dir = json_path.substr(0, json_path.find_last_of('/') + 1);
  BlobReader blob(dir + j.at("blob_file").get<std::string>());
  auto get_frames = [&](const char* key, std::vector<FrameRaster>& out) {
    const json& meta = j.at(key);
    int rows = meta.at("rows"), cols = meta.at("cols");
    double cell = meta.at("cell_m");
    size_t count = meta.at("count");
    size_t offset = meta.at("offset");
    size_t n = static_cast<size_t>(rows) * cols;
    size_t stride = n + n * sizeof(float);
    for (size_t i = 0; i < count; ++i) {
      FrameRaster f;
      f.rows = rows;
      f.cols = cols;
      f.cell_m = cell;
      f.timestamp = meta.at("times").at(i);
      f.semantic = blob.get_u8(offset + i * stride, n);
      f.depth = blob.get_f32(offset + i * stride + n, n);
      out.push_back(std::move(f));
    }
  };
  get_frames("ctx_frames", ep.ctx_frames);
  get_frames("dyn_frames", ep.dyn_frames);
  return ep;
}

}  // namespace driveweave
