#pragma once

#include <functional>
#include <string>
#include <vector>

#include "driveweave/layout.hpp"
#include "driveweave/nnet.hpp"

namespace driveweave {

// Decoding controls. temperature == 0 selects greedy argmax; otherwise ids
// are drawn from the softmax at the given temperature, optionally truncated
// to the top_k highest logits. force_ids bypasses selection entirely and
// replays the given dynamic ids (diagnostics and sensitivity probes).
struct SamplingConfig {
  double temperature = 0.0;
  int top_k = 0;
  bool branch_restrict = true;
  bool emit_frames = true;  // false: action blocks only (no-future-frames mode)
  uint64_t seed = 0;
  bool record_logits = false;
  const std::vector<int>* force_ids = nullptr;
};

struct StepStats {
  double mean_max_prob = 0.0;  // mean argmax probability over the frame tokens
  double wall_ms = 0.0;
  int cache_len = 0;  // cache length once the step's blocks are appended
};

struct RolloutResult {
  std::vector<FrameTokens> frames;    // predicted dynamic tokens, steps 1..N
  std::vector<FrameRaster> rasters;   // conditioned decodes, contextual resolution
  std::vector<Vec2> waypoints;        // regressed offsets in the anchor ego frame
  std::vector<StepStats> stats;
  std::vector<int> emitted;           // full id stream appended after the prompt
  MatX<float> decision_logits;        // one row per generated dynamic token when recorded
  int prompt_len = 0;
  int final_len = 0;
};

// Tokenizer-side assets the generation loop needs for decoding and
// self-conditioning.
struct RolloutContext {
  const Codebook* ctx_cb = nullptr;
  const Codebook* dyn_cb = nullptr;
  const Vocabulary* vocab = nullptr;
  RasterGrid ctx_grid;
  RasterGrid dyn_grid;
  FrameTokens anchor_ctx;      // contextual tokens at the anchor (condition 0)
  bool decode_rasters = true;  // skip the decode stage when only tokens matter
};

// Interleaved generation: per step a <|sod|>-marked frame of dynamic tokens
// (emitted causally in raster order, then the frame's cache entries are
// refreshed once under the full intra-frame mask), an <|eod|>, and an action
// block whose query position feeds the waypoint head. Decoded rasters are
// conditioned on the re-encoded decode of the latest whole-second frame.
RolloutResult rollout(const ModelParams<float>& p, const TokenSequence& prompt,
                      const EgoStatus& ego, const std::vector<const FrameRaster*>& depth,
                      const RolloutContext& rc, int n_steps, const SamplingConfig& sc);

// Waypoint tracking: the commanded arc through the waypoint fixes the heading
// change, proportional gains convert the arc speed and heading errors into
// acceleration and yaw-rate commands.
struct ControllerConfig {
  double kp_speed = 4.0;
  double kp_heading = 2.0;
  double max_accel = 6.0;  // covers the scripted driver's emergency braking
  double max_yaw_rate = 1.2;
};
ExpertControl waypoint_controller(const Vec2& wp, double speed, double horizon,
                                  const ControllerConfig& cc);

// A planner examines the driven record so far and returns the waypoint to
// track over the next control interval (ego frame at time t).
struct PlanRequest {
  const EpisodeRecord& driven;
  const WorldState& state;
  double t = 0.0;
};
using PlannerFn = std::function<Vec2(const PlanRequest&)>;

// Stock planners. The oracle chases the reference episode's own future
// position, re-expressed in the driven ego frame so position feedback closes
// the loop; `reference` must outlive the returned planner. The other two are
// the standard baselines.
PlannerFn expert_oracle_planner(const EpisodeRecord& reference, double horizon = 0.5);
PlannerFn constant_velocity_planner(double horizon = 0.5);
PlannerFn zero_motion_planner();

struct DriveConfig {
  HistoryConfig history;
  PlanKind plan = PlanKind::kSchemeE;
  int n_steps = 2;       // rollout depth per anchor
  double cadence = 0.5;  // seconds between replan anchors
  ControllerConfig controller;
  SamplingConfig sampling;
  bool depth = true;
  bool keep_rollouts = false;  // retain per-anchor rollout results (memory heavy)
};

struct DriveOutcome {
  EpisodeRecord driven;  // expert-replayed warmup, then planner-driven ticks
  std::vector<double> anchor_times;
  std::vector<Vec2> planned;  // waypoint consumed at each anchor
  std::vector<RolloutResult> rollouts;
  bool aborted = false;
  std::string diagnostics;
};

// Closed-loop execution: replays the expert controls until enough history
// exists for the configured prompt, then replans every cadence seconds,
// holding each control for the interval. The expert episode supplies the
// initial world; `planner` (when given) replaces the model, which lets
// oracle and baseline planners run through the identical loop.
DriveOutcome closed_loop_drive(const ModelParams<float>* params, const Codebook& ctx_cb,
                               const Codebook& dyn_cb, const Vocabulary& v,
                               const EpisodeRecord& expert, const DriveConfig& cfg,
                               const PlannerFn& planner = {});

// Plain-text artifact dumps.
std::string rollout_waypoints_csv(const RolloutResult& r);
std::string rollout_trace_tsv(const RolloutResult& r, const Vocabulary& v);
std::string semantic_ppm(const FrameRaster& f);  // 5-class palette, P3
std::string depth_pgm(const FrameRaster& f, double max_depth);  // grayscale P2

}  // namespace driveweave
