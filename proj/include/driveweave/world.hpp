#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "driveweave/geometry.hpp"

namespace driveweave {

// Semantic raster classes.
enum SemClass : uint8_t {
  kOffRoad = 0,
  kRoad = 1,
  kLaneMarking = 2,
  kAgentClass = 3,
  kEgoClass = 4,
};
constexpr int kNumSemClasses = 5;

enum class Command : int { kLeft = 0, kStraight = 1, kRight = 2 };

// Ego kinematic summary fed to the sequence model, in the ego body frame.
struct EgoStatus {
  Vec2 velocity;      // (longitudinal, lateral); lateral is 0 for unicycle motion
  Vec2 acceleration;  // (longitudinal, centripetal)
  Command command = Command::kStraight;
};

// Ego-centric raster geometry. Cell (r, c) covers the point
// x_forward = (c - anchor_col) * cell_m, y_left = (anchor_row - r) * cell_m
// in the ego frame; the ego sits at its anchor cell in every frame.
struct RasterGrid {
  int rows = 0;
  int cols = 0;
  double cell_m = 1.0;
  int anchor_row = 0;
  int anchor_col = 0;

  int patches() const { return (rows / 4) * (cols / 4); }
  Vec2 cell_center(int r, int c) const {
    return {(c - anchor_col) * cell_m, (anchor_row - r) * cell_m};
  }
};

struct ExpertConfig {
  double a_max = 2.0;       // IDM max acceleration
  double b_comf = 3.0;      // IDM comfortable braking
  double s0 = 4.0;          // IDM minimum gap
  double headway = 1.2;     // IDM time headway
  double lookahead_gain = 0.6;
  double lookahead_min = 4.0;
  double lookahead_max = 15.0;
};

struct WorldConfig {
  RasterGrid contextual{32, 56, 1.0, 16, 8};
  RasterGrid dynamic{16, 28, 2.0, 8, 4};
  double dt = 0.1;
  double max_depth = 60.0;      // ray-cast sentinel, metres
  double marking_w = 0.6;       // painted band just outside each lane edge; 0 disables
  double shoulder_m = 0.5;      // drivable slack beyond the lane edge
  double agent_len = 4.5;
  double agent_wid = 2.0;
  double ego_len = 4.5;
  double ego_wid = 2.0;
  double command_window_m = 25.0;
  double command_thresh_rad = 0.15;
  double expert_ttc_floor = 0.4;  // scenario feasibility gate
  ExpertConfig expert;
};

struct EgoState {
  Pose pose;
  double speed = 0.0;
  // Last applied controls, kept for comfort metrics and replay.
  double accel = 0.0;
  double yaw_rate = 0.0;
};

enum class BehaviorKind : int { kConstVel = 0, kLeadBrake = 1, kCutIn = 2 };

// Scripted agent. Motion is described in lane coordinates (arc length s,
// signed lateral offset) so curves are followed exactly.
struct Agent {
  BehaviorKind behavior = BehaviorKind::kConstVel;
  double s = 0.0;
  double lateral = 0.0;
  double speed = 0.0;
  double length = 4.5;
  double width = 2.0;
  // Script parameters (interpreted per behavior).
  double brake_time = 0.0;
  double brake_rate = 0.0;
  double min_speed = 0.0;
  double cutin_time = 0.0;
  double cutin_rate = 0.0;
  double target_lateral = 0.0;
  // Derived world-frame pose and velocity, refreshed every step.
  Pose pose;
  Vec2 velocity;
};

struct RoadSpec {
  Polyline centerline;
  double half_width = 3.5;
};

struct WorldState {
  RoadSpec road;
  EgoState ego;
  std::vector<Agent> agents;
  double time = 0.0;
  double target_speed = 8.0;  // expert cruise speed for this episode
};

struct FrameRaster {
  int rows = 0;
  int cols = 0;
  double cell_m = 1.0;
  double timestamp = 0.0;
  std::vector<uint8_t> semantic;  // row-major, rows*cols
  std::vector<float> depth;       // same layout, metres

  uint8_t sem_at(int r, int c) const { return semantic[static_cast<size_t>(r) * cols + c]; }
  float depth_at(int r, int c) const { return depth[static_cast<size_t>(r) * cols + c]; }
};

// Advances the world by dt under the given ego controls. Scripted agents
// advance with their own policies. Position integrates along the exact
// constant-turn-rate arc within the step; speed updates afterwards and is
// clamped at zero (no reverse).
WorldState step_world(const WorldState& state, double accel, double yaw_rate, double dt,
                      const WorldConfig& cfg);

Obb ego_footprint(const WorldState& state, const WorldConfig& cfg);
Obb agent_footprint(const Agent& a);

// Refreshes agent world poses from lane coordinates. Exposed for scenario
// construction.
void sync_agent_pose(Agent& a, const RoadSpec& road);

FrameRaster render_frame(const WorldState& state, const RasterGrid& grid,
                         const WorldConfig& cfg, double timestamp);

// High-level navigation command from upcoming road curvature.
Command current_command(const WorldState& state, const WorldConfig& cfg);

// Body-frame kinematic summary for the ego projection input.
EgoStatus ego_status(const EgoState& ego, Command cmd);

// Pure-pursuit steering + IDM speed control along the lane centerline.
struct ExpertControl {
  double accel = 0.0;
  double yaw_rate = 0.0;
};
ExpertControl expert_policy(const WorldState& state, const WorldConfig& cfg);

// Expert-driven arc length over the horizon starting from `state`,
// integrated with the trapezoid rule over simulation ticks.
double reference_progress(const WorldState& state, double horizon, const WorldConfig& cfg);

// Earliest constant-velocity-projected ego/agent overlap time, sampled every
// `step` seconds up to `horizon`; +inf when no projected contact.
double projected_ttc(const WorldState& state, const WorldConfig& cfg, double horizon = 3.0,
                     double step = 0.05);

enum class ScenarioFamily : int {
  kStraightFollow = 0,
  kLeadBrake = 1,
  kCurveLeft = 2,
  kCurveRight = 3,
  kMergeCutIn = 4,
};
const char* scenario_family_name(ScenarioFamily f);

struct ScenarioConfig {
  ScenarioFamily family = ScenarioFamily::kStraightFollow;
  uint64_t seed = 0;
  double duration = 10.0;
  WorldConfig world;
};

struct EpisodeTick {
  EgoState ego;
  std::vector<Agent> agents;
  double accel_cmd = 0.0;
  double yaw_cmd = 0.0;
  Command command = Command::kStraight;
};

// One recorded expert-driven episode. Dynamic-resolution rasters are stored
// at every simulation tick (10 Hz); contextual-resolution rasters every
// 0.5 s so that any 0.5 s anchor has exactly 1 s spaced context history.
struct EpisodeRecord {
  ScenarioFamily family = ScenarioFamily::kStraightFollow;
  uint64_t seed = 0;
  int retries = 0;  // feasibility rejections before this seed variant
  WorldConfig wcfg;
  RoadSpec road;
  double duration = 10.0;
  double target_speed = 8.0;
  std::vector<EpisodeTick> ticks;        // dt-spaced, duration/dt + 1 entries
  std::vector<FrameRaster> ctx_frames;   // every 0.5 s
  std::vector<FrameRaster> dyn_frames;   // every tick

  int tick_of_time(double t) const;
  int ctx_index_of_time(double t) const;
  WorldState state_at(int tick) const;
  // Ego pose at absolute time tau mapped into the ego frame at anchor time.
  Vec2 waypoint(double anchor_t, double tau) const;
};

// Runs the expert driver through the scenario. Infeasible draws (expert
// collision or TTC below the configured floor) are rejected and retried with
// a derived seed; the retry count is recorded.
EpisodeRecord generate_episode(const ScenarioConfig& scenario);

// Episode files: JSON manifest + little-endian binary raster blob.
void save_episode(const EpisodeRecord& ep, const std::string& json_path,
                  const std::string& blob_path);
EpisodeRecord load_episode(const std::string& json_path);

}  // namespace driveweave
