#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "driveweave/world.hpp"

using namespace driveweave;
namespace fs = std::filesystem;

namespace {

Polyline straight_line(double length, double step = 1.0) {
  std::vector<Vec2> pts;
  for (double x = 0.0; x <= length + 1e-9; x += step) pts.push_back({x, 0.0});
  return Polyline(std::move(pts));
}

WorldState straight_world(double road_len, double half_width, double ego_x, double speed,
                          double target) {
  WorldState w;
  w.road = {straight_line(road_len), half_width};
  w.ego.pose.pos = {ego_x, 0.0};
  w.ego.pose.heading = 0.0;
  w.ego.speed = speed;
  w.target_speed = target;
  return w;
}

Agent lane_agent(const RoadSpec& road, double s, double lateral, double speed) {
  Agent a;
  a.s = s;
  a.lateral = lateral;
  a.speed = speed;
  sync_agent_pose(a, road);
  return a;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path temp_dir() {
  fs::path d = fs::temp_directory_path() / "driveweave_test_world";
  fs::create_directories(d);
  return d;
}

}  // namespace

TEST_CASE("straight step covers v*dt") {
  WorldConfig cfg;
  WorldState w = straight_world(400.0, 3.5, 0.0, 10.0, 10.0);
  WorldState n = step_world(w, 0.0, 0.0, 0.5, cfg);
  CHECK(n.ego.pose.pos.x == doctest::Approx(5.0).epsilon(1e-12));
  CHECK(n.ego.pose.pos.y == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(n.ego.pose.heading == doctest::Approx(0.0));
  CHECK(n.time == doctest::Approx(0.5));
}

TEST_CASE("speed clamps at zero") {
  WorldConfig cfg;
  WorldState w = straight_world(400.0, 3.5, 0.0, 0.0, 10.0);
  WorldState n = step_world(w, -1.0, 0.0, 0.1, cfg);
  CHECK(n.ego.speed == 0.0);
}

TEST_CASE("ten constant-turn steps match the closed-form arc") {
  WorldConfig cfg;
  WorldState w = straight_world(400.0, 3.5, 0.0, 10.0, 10.0);
  for (int i = 0; i < 10; ++i) w = step_world(w, 0.0, 0.2, 0.1, cfg);
  double r = 10.0 / 0.2;
  double dh = 0.2 * 1.0;
  CHECK(std::abs(w.ego.pose.pos.x - r * std::sin(dh)) < 1e-6);
  CHECK(std::abs(w.ego.pose.pos.y - r * (1.0 - std::cos(dh))) < 1e-6);
  CHECK(std::abs(w.ego.pose.heading - dh) < 1e-9);
}

TEST_CASE("bad step inputs are rejected") {
  WorldConfig cfg;
  WorldState w = straight_world(100.0, 3.5, 0.0, 5.0, 8.0);
  CHECK_THROWS_AS(step_world(w, std::nan(""), 0.0, 0.1, cfg), std::invalid_argument);
  CHECK_THROWS_AS(step_world(w, 0.0, std::numeric_limits<double>::infinity(), 0.1, cfg),
                  std::invalid_argument);
  CHECK_THROWS_AS(step_world(w, 0.0, 0.0, 0.0, cfg), std::invalid_argument);
  CHECK_THROWS_AS(step_world(w, 0.0, 0.0, -0.1, cfg), std::invalid_argument);
}

TEST_CASE("empty road renders lane band as road, rest off-road") {
  WorldConfig cfg;
  cfg.marking_w = 0.0;  // no painted band in the degenerate scene
  WorldState w = straight_world(400.0, 3.5, 200.0, 10.0, 10.0);
  FrameRaster f = render_frame(w, cfg.contextual, cfg, 0.0);
  for (int r = 0; r < f.rows; ++r)
    for (int c = 0; c < f.cols; ++c) {
      Vec2 local = cfg.contextual.cell_center(r, c);
      bool ego_cell = std::abs(local.x) <= cfg.ego_len * 0.5 &&
                      std::abs(local.y) <= cfg.ego_wid * 0.5;
      uint8_t expect = ego_cell ? kEgoClass
                       : std::abs(local.y) < 3.5 ? kRoad
                                                 : kOffRoad;
      CAPTURE(r);
      CAPTURE(c);
      CHECK(f.sem_at(r, c) == expect);
    }
}

TEST_CASE("painted band sits just outside the lane edge") {
  WorldConfig cfg;  // marking_w 0.6 by default
  WorldState w = straight_world(400.0, 3.5, 200.0, 10.0, 10.0);
  FrameRaster f = render_frame(w, cfg.contextual, cfg, 0.0);
  // Cell centers at |y| = 4 fall inside [3.5, 4.1]; |y| = 3 is road, 5 is off.
  for (int c = 0; c < f.cols; ++c) {
    CHECK(f.sem_at(cfg.contextual.anchor_row - 4, c) == kLaneMarking);
    CHECK(f.sem_at(cfg.contextual.anchor_row + 4, c) == kLaneMarking);
    CHECK(f.sem_at(cfg.contextual.anchor_row - 5, c) == kOffRoad);
    if (c < 6 || c > 10) CHECK(f.sem_at(cfg.contextual.anchor_row - 3, c) == kRoad);
  }
}

TEST_CASE("agent ten metres ahead stamps a block ten cells ahead") {
  WorldConfig cfg;
  WorldState w = straight_world(400.0, 3.5, 200.0, 10.0, 10.0);
  w.agents.push_back(lane_agent(w.road, 210.0, 0.0, 0.0));
  FrameRaster f = render_frame(w, cfg.contextual, cfg, 0.0);
  int ar = cfg.contextual.anchor_row, ac = cfg.contextual.anchor_col;
  CHECK(f.sem_at(ar, ac + 10) == kAgentClass);
  // Footprint 4.5 x 2.0 at 1 m cells: columns ac+8..ac+12, rows ar-1..ar+1.
  for (int r = ar - 1; r <= ar + 1; ++r)
    for (int c = ac + 8; c <= ac + 12; ++c) {
      CAPTURE(r);
      CAPTURE(c);
      CHECK(f.sem_at(r, c) == kAgentClass);
    }
  CHECK(f.sem_at(ar, ac + 7) == kRoad);
  CHECK(f.sem_at(ar, ac + 13) == kRoad);
  CHECK(f.sem_at(ar - 2, ac + 10) == kRoad);
  CHECK(f.sem_at(ar + 2, ac + 10) == kRoad);
}

TEST_CASE("rendering the same state twice is identical") {
  WorldConfig cfg;
  WorldState w = straight_world(400.0, 3.5, 200.0, 10.0, 10.0);
  w.agents.push_back(lane_agent(w.road, 215.0, 1.0, 3.0));
  FrameRaster a = render_frame(w, cfg.contextual, cfg, 1.0);
  FrameRaster b = render_frame(w, cfg.contextual, cfg, 1.0);
  CHECK(a.semantic == b.semantic);
  CHECK(a.depth == b.depth);
}

TEST_CASE("depth with no occluder in range is the sentinel") {
  WorldConfig cfg;
  // Lane edges 100 m out, beyond the 60 m sentinel.
  WorldState w = straight_world(400.0, 100.0, 200.0, 10.0, 10.0);
  FrameRaster f = render_frame(w, cfg.contextual, cfg, 0.0);
  for (int r = 0; r < f.rows; ++r)
    for (int c = 0; c < f.cols; ++c) {
      if (r == cfg.contextual.anchor_row && c == cfg.contextual.anchor_col) {
        CHECK(f.depth_at(r, c) == 0.0f);
      } else {
        CAPTURE(r);
        CAPTURE(c);
        CHECK(f.depth_at(r, c) == doctest::Approx(cfg.max_depth));
      }
    }
}

TEST_CASE("wall of agents twenty metres ahead reads twenty") {
  WorldConfig cfg;
  WorldState w = straight_world(400.0, 3.5, 200.0, 10.0, 10.0);
  // Three stopped agents abreast, near faces exactly 20 m from the ego center.
  double wall_s = 200.0 + 20.0 + 0.5 * cfg.agent_len;
  for (double lat : {-2.0, 0.0, 2.0})
    w.agents.push_back(lane_agent(w.road, wall_s, lat, 0.0));
  FrameRaster f = render_frame(w, cfg.contextual, cfg, 0.0);
  int ar = cfg.contextual.anchor_row, ac = cfg.contextual.anchor_col;
  for (int c = ac + 4; c <= ac + 30; ++c) {
    CAPTURE(c);
    CHECK(f.depth_at(ar, c) == doctest::Approx(20.0).epsilon(0.025));
  }
  CHECK(f.depth_at(ar - 1, ac + 20) == doctest::Approx(20.0).epsilon(0.025));
  CHECK(f.depth_at(ar + 1, ac + 20) == doctest::Approx(20.0).epsilon(0.025));
}

TEST_CASE("constant-speed expert waypoints advance five metres per half second") {
  WorldConfig cfg;
  EpisodeRecord ep;
  ep.wcfg = cfg;
  ep.road = {straight_line(400.0), 3.5};
  ep.duration = 10.0;
  ep.target_speed = 10.0;
  WorldState w = straight_world(400.0, 3.5, 40.0, 10.0, 10.0);
  w.road = ep.road;
  int steps = static_cast<int>(std::round(ep.duration / cfg.dt));
  for (int i = 0; i <= steps; ++i) {
    EpisodeTick tk;
    tk.ego = w.ego;
    tk.agents = w.agents;
    ExpertControl u = expert_policy(w, cfg);
    tk.accel_cmd = u.accel;
    tk.yaw_cmd = u.yaw_rate;
    tk.command = current_command(w, cfg);
    ep.ticks.push_back(tk);
    if (i < steps) w = step_world(w, u.accel, u.yaw_rate, cfg.dt, cfg);
  }
  for (int k = 1; k <= 8; ++k) {
    Vec2 wp = ep.waypoint(2.0, 0.5 * k);
    CHECK(std::abs(wp.x - 5.0 * k) < 0.1);
    CHECK(std::abs(wp.y) < 0.1);
  }
}

TEST_CASE("same scenario seed produces byte-identical files") {
  ScenarioConfig sc;
  sc.family = ScenarioFamily::kStraightFollow;
  sc.seed = 11;
  fs::path d = temp_dir();
  EpisodeRecord e1 = generate_episode(sc);
  EpisodeRecord e2 = generate_episode(sc);
  save_episode(e1, (d / "a.json").string(), (d / "a.blob").string());
  save_episode(e2, (d / "b.json").string(), (d / "b.blob").string());
  CHECK(file_bytes(d / "a.blob") == file_bytes(d / "b.blob"));
  // Manifests differ only in the referenced blob file name.
  std::string ja = file_bytes(d / "a.json"), jb = file_bytes(d / "b.json");
  size_t pa = ja.find("a.blob");
  size_t pb = jb.find("b.blob");
  REQUIRE(pa != std::string::npos);
  REQUIRE(pb != std::string::npos);
  ja.replace(pa, 6, "x.blob");
  jb.replace(pb, 6, "x.blob");
  CHECK(ja == jb);
}

TEST_CASE("episode survives a save/load round trip") {
  ScenarioConfig sc;
  sc.family = ScenarioFamily::kMergeCutIn;
  sc.seed = 5;
  fs::path d = temp_dir();
  EpisodeRecord e1 = generate_episode(sc);
  save_episode(e1, (d / "rt.json").string(), (d / "rt.blob").string());
  EpisodeRecord e2 = load_episode((d / "rt.json").string());
  REQUIRE(e2.ticks.size() == e1.ticks.size());
  REQUIRE(e2.ctx_frames.size() == e1.ctx_frames.size());
  REQUIRE(e2.dyn_frames.size() == e1.dyn_frames.size());
  CHECK(e2.target_speed == e1.target_speed);
  CHECK(e2.road.centerline.length() == doctest::Approx(e1.road.centerline.length()));
  for (size_t i = 0; i < e1.ticks.size(); ++i) {
    CHECK(e2.ticks[i].ego.pose.pos.x == e1.ticks[i].ego.pose.pos.x);
    CHECK(e2.ticks[i].ego.pose.pos.y == e1.ticks[i].ego.pose.pos.y);
    CHECK(e2.ticks[i].ego.speed == e1.ticks[i].ego.speed);
    CHECK(e2.ticks[i].accel_cmd == e1.ticks[i].accel_cmd);
    REQUIRE(e2.ticks[i].agents.size() == e1.ticks[i].agents.size());
    for (size_t a = 0; a < e1.ticks[i].agents.size(); ++a) {
      CHECK(e2.ticks[i].agents[a].s == e1.ticks[i].agents[a].s);
      CHECK(e2.ticks[i].agents[a].lateral == e1.ticks[i].agents[a].lateral);
    }
  }
  for (size_t i = 0; i < e1.dyn_frames.size(); ++i) {
    CHECK(e2.dyn_frames[i].semantic == e1.dyn_frames[i].semantic);
    CHECK(e2.dyn_frames[i].depth == e1.dyn_frames[i].depth);
  }
}

TEST_CASE("replaying logged controls reproduces logged poses") {
  ScenarioConfig sc;
  sc.family = ScenarioFamily::kLeadBrake;
  sc.seed = 7;
  EpisodeRecord ep = generate_episode(sc);
  WorldState s = ep.state_at(0);
  for (size_t i = 0; i + 1 < ep.ticks.size(); ++i) {
    s = step_world(s, ep.ticks[i].accel_cmd, ep.ticks[i].yaw_cmd, ep.wcfg.dt, ep.wcfg);
    const EpisodeTick& tk = ep.ticks[i + 1];
    CHECK(std::abs(s.ego.pose.pos.x - tk.ego.pose.pos.x) < 1e-9);
    CHECK(std::abs(s.ego.pose.pos.y - tk.ego.pose.pos.y) < 1e-9);
    CHECK(std::abs(s.ego.pose.heading - tk.ego.pose.heading) < 1e-9);
    REQUIRE(s.agents.size() == tk.agents.size());
    for (size_t a = 0; a < s.agents.size(); ++a)
      CHECK(std::abs(s.agents[a].s - tk.agents[a].s) < 1e-9);
  }
}

TEST_CASE("lead-brake episode keeps projected contact above the floor") {
  ScenarioConfig sc;
  sc.family = ScenarioFamily::kLeadBrake;
  sc.seed = 21;
  EpisodeRecord ep = generate_episode(sc);
  double min_ttc = std::numeric_limits<double>::infinity();
  for (size_t i = 0; i < ep.ticks.size(); ++i)
    min_ttc = std::min(min_ttc, projected_ttc(ep.state_at(static_cast<int>(i)), ep.wcfg));
  CHECK(min_ttc > ep.wcfg.expert_ttc_floor);
}

TEST_CASE("agents inside the grid always occupy at least one cell") {
  ScenarioConfig sc;
  sc.family = ScenarioFamily::kStraightFollow;
  sc.seed = 13;
  EpisodeRecord ep = generate_episode(sc);
  const RasterGrid& g = ep.wcfg.dynamic;
  for (size_t i = 0; i < ep.dyn_frames.size(); ++i) {
    const EpisodeTick& tk = ep.ticks[i];
    const FrameRaster& f = ep.dyn_frames[i];
    for (const Agent& a : tk.agents) {
      Vec2 local = tk.ego.pose.to_local(a.pose.pos);
      double x_min = (0 - g.anchor_col - 0.5) * g.cell_m;
      double x_max = (g.cols - 1 - g.anchor_col + 0.5) * g.cell_m;
      double y_min = (g.anchor_row - (g.rows - 1) - 0.5) * g.cell_m;
      double y_max = (g.anchor_row + 0.5) * g.cell_m;
      if (local.x < x_min || local.x > x_max || local.y < y_min || local.y > y_max)
        continue;
      int agent_cells = 0;
      for (uint8_t s : f.semantic) agent_cells += (s == kAgentClass);
      CAPTURE(i);
      CHECK(agent_cells >= 1);
    }
  }
}

TEST_CASE("agent-cell depth never exceeds the far edge of that agent") {
  ScenarioConfig sc;
  sc.family = ScenarioFamily::kStraightFollow;
  sc.seed = 17;
  EpisodeRecord ep = generate_episode(sc);
  for (size_t ci = 0; ci < ep.ctx_frames.size(); ++ci) {
    const FrameRaster& f = ep.ctx_frames[ci];
    int tick = static_cast<int>(ci) * 5;
    WorldState s = ep.state_at(tick);
    REQUIRE(s.agents.size() == 1);
    double far = agent_footprint(s.agents[0]).far_distance_to(s.ego.pose.pos);
    for (int r = 0; r < f.rows; ++r)
      for (int c = 0; c < f.cols; ++c)
        if (f.sem_at(r, c) == kAgentClass) {
          CAPTURE(tick);
          CHECK(f.depth_at(r, c) <= far + 1e-4);
        }
  }
}

TEST_CASE("reference progress at constant speed is speed times horizon") {
  WorldConfig cfg;
  WorldState w = straight_world(400.0, 3.5, 40.0, 10.0, 10.0);
  CHECK(reference_progress(w, 4.0, cfg) == doctest::Approx(40.0).epsilon(1e-9));
}

TEST_CASE("reference progress matches an external trapezoid sum") {
  WorldConfig cfg;
  WorldState w = straight_world(400.0, 3.5, 40.0, 10.0, 10.0);
  // A stopped lead forces the expert to brake over the horizon.
  w.agents.push_back(lane_agent(w.road, 65.0, 0.0, 0.0));
  double got = reference_progress(w, 4.0, cfg);
  WorldState s = w;
  double expect = 0.0;
  for (int i = 0; i < 40; ++i) {
    double v0 = s.ego.speed;
    ExpertControl u = expert_policy(s, cfg);
    s = step_world(s, u.accel, u.yaw_rate, cfg.dt, cfg);
    expect += 0.5 * (v0 + s.ego.speed) * cfg.dt;
  }
  CHECK(std::abs(got - expect) < 1e-6);
  CHECK(got < 40.0);  // it really braked
  CHECK(got > 0.0);
}

TEST_CASE("reference progress of a parked expert is zero") {
  WorldConfig cfg;
  WorldState w = straight_world(400.0, 3.5, 40.0, 0.0, 0.0);
  CHECK(reference_progress(w, 4.0, cfg) == 0.0);
}

TEST_CASE("projected contact time against a stopped agent") {
  WorldConfig cfg;
  WorldState w = straight_world(400.0, 3.5, 50.0, 10.0, 10.0);
  // Face-to-face gap 20 m closing at 10 m/s.
  w.agents.push_back(lane_agent(w.road, 74.5, 0.0, 0.0));
  CHECK(projected_ttc(w, cfg) == doctest::Approx(2.0).epsilon(0.026));
  // Gap 5 m: contact at half a second.
  w.agents[0] = lane_agent(w.road, 59.5, 0.0, 0.0);
  CHECK(projected_ttc(w, cfg) == doctest::Approx(0.5).epsilon(0.11));
  // Matched speeds never meet.
  w.agents[0] = lane_agent(w.road, 74.5, 0.0, 10.0);
  CHECK(std::isinf(projected_ttc(w, cfg)));
}

TEST_CASE("command follows upcoming curvature") {
  WorldConfig cfg;
  WorldState w = straight_world(400.0, 3.5, 40.0, 8.0, 8.0);
  CHECK(current_command(w, cfg) == Command::kStraight);

  for (double sign : {1.0, -1.0}) {
    std::vector<Vec2> pts;
    for (double x = 0.0; x <= 30.0; x += 1.0) pts.push_back({x, 0.0});
    Vec2 pivot{30.0, sign * 40.0};
    for (double th = 1.0 / 40.0; th <= M_PI / 2.0; th += 1.0 / 40.0) {
      double a = -sign * M_PI / 2.0 + sign * th;
      pts.push_back(pivot + Vec2{std::cos(a), std::sin(a)} * 40.0);
    }
    WorldState c;
    c.road = {Polyline(pts), 3.5};
    c.ego.pose.pos = c.road.centerline.point_at(20.0);
    c.ego.pose.heading = c.road.centerline.heading_at(20.0);
    c.ego.speed = 8.0;
    CHECK(current_command(c, cfg) == (sign > 0 ? Command::kLeft : Command::kRight));
  }
}

TEST_CASE("ego status reports body-frame kinematics") {
  EgoState e;
  e.speed = 6.0;
  e.accel = 1.5;
  e.yaw_rate = 0.2;
  EgoStatus s = ego_status(e, Command::kLeft);
  CHECK(s.velocity.x == doctest::Approx(6.0));
  CHECK(s.velocity.y == doctest::Approx(0.0));
  CHECK(s.acceleration.x == doctest::Approx(1.5));
  CHECK(s.acceleration.y == doctest::Approx(1.2));
  CHECK(s.command == Command::kLeft);
}
