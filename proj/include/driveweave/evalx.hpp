#pragma once

#include "driveweave/rollout.hpp"
#include "driveweave/training.hpp"

namespace driveweave {

// Fixed pass/fail thresholds for the binary sub-scores.
struct MetricThresholds {
  double shoulder = 0.5;        // lateral tolerance beyond the lane band, m
  double ttc_min = 1.0;         // projected time-to-collision floor, s
  double max_long_accel = 4.0;  // m/s^2, inclusive
  double max_lat_accel = 4.0;   // m/s^2, inclusive
  double max_jerk = 8.0;        // m/s^3, inclusive
};

struct PdmsWeights {
  double ttc = 5.0;
  double ep = 5.0;
  double comfort = 2.0;
};

// Per-scenario sub-scores score a single driven episode.
//
// No-collision: 1 unless the ego's front half contacts an agent or its
// footprint leaves the widened lane band (an at-fault event); an agent
// striking the ego's rear half is not at fault.
double score_nc(const EpisodeRecord& driven, const MetricThresholds& thr = {});
// Drivable-area compliance: 1 while every footprint corner stays strictly
// inside the lane band widened by the shoulder tolerance.
double score_dac(const EpisodeRecord& driven, const MetricThresholds& thr = {});
// 1 when the constant-velocity-projected time to contact never drops below
// the floor.
double score_ttc(const EpisodeRecord& driven, const MetricThresholds& thr = {});
// 1 while longitudinal/lateral acceleration and jerk stay inside inclusive
// bounds.
double score_comfort(const EpisodeRecord& driven, const MetricThresholds& thr = {});
// Driven arc length over the reference arc length, clamped to [0, 1]. A
// non-positive reference counts as full progress.
double score_ep(const EpisodeRecord& driven, double reference_meters);

// Multiplicative gate times the weighted average of the graded terms.
double pdms(double nc, double dac, double ttc, double ep, double comfort,
            const PdmsWeights& w = {});

struct ScenarioScore {
  int id = 0;
  ScenarioFamily family = ScenarioFamily::kStraightFollow;
  uint64_t seed = 0;
  double nc = 0.0, dac = 0.0, ttc = 0.0, comfort = 0.0, ep = 0.0;
  double pdms = 0.0;
};

// Scores one driven episode against the expert recording of the same
// scenario; the progress reference comes from re-simulating the expert.
ScenarioScore score_scenario(const EpisodeRecord& driven, const EpisodeRecord& expert,
                             const MetricThresholds& thr = {}, const PdmsWeights& w = {});

// Suite aggregate: plain means of the per-scenario binary scores, rows kept
// in input order.
struct PdmsReport {
  double nc = 0.0, dac = 0.0, ttc = 0.0, comfort = 0.0, ep = 0.0;
  double pdms = 0.0;
  std::vector<ScenarioScore> scenarios;
};
PdmsReport merge_scores(std::vector<ScenarioScore> scores);
std::string pdms_csv(const PdmsReport& r);
std::string pdms_summary_json(const PdmsReport& r);

// Open-loop diagnostics.
double open_loop_ade(const std::vector<Vec2>& pred, const std::vector<Vec2>& gt);
double frame_token_accuracy(const std::vector<FrameTokens>& pred,
                            const std::vector<FrameTokens>& gt);

// Distribution distance between generated and reference raster streams.
// Each consecutive frame pair yields one feature row: 5-bin class histogram
// of the later frame, 4x4 mean-pool of its class indices, and a 9-bin
// histogram of per-cell class differences between the pair.
MatX<double> frechet_features(const std::vector<FrameRaster>& stream);

struct GaussianStats {
  Eigen::VectorXd mu;
  Eigen::MatrixXd cov;  // sample covariance, n-1 denominator
};
GaussianStats fit_gaussian(const MatX<double>& rows);
// |mu1-mu2|^2 + Tr(S1 + S2 - 2 sqrt(S1 S2)), the matrix square root taken by
// eigendecomposition of the symmetric product; tiny negative eigenvalues and
// a tiny negative total are clamped to zero.
double frechet_gaussian(const GaussianStats& a, const GaussianStats& b);

struct FrechetReport {
  int dim = 0;
  GaussianStats pred, ref;
  double score = 0.0;
};
FrechetReport simplified_frechet(const std::vector<FrameRaster>& pred,
                                 const std::vector<FrameRaster>& ref);

// Closed-loop evaluation of a trained model (or a stock planner) over a
// scenario suite, plus open-loop frame-fidelity metrics where the plan
// generates half-second-grid frames.
struct EvalConfig {
  DriveConfig drive;
  MetricThresholds thresholds;
  PdmsWeights weights;
  double fidelity_anchor = 2.0;  // open-loop rollout anchor, s
  int fidelity_steps = 4;        // frames per fidelity rollout
  bool fidelity = true;
};

struct EvalFidelity {
  bool available = false;
  double token_accuracy = 0.0;
  double frechet = 0.0;
};

struct PolicyEvaluation {
  PdmsReport report;
  EvalFidelity fidelity;
  int aborted = 0;  // scenarios whose replanning failed (scored zero)
};

PolicyEvaluation evaluate_policy(const ModelParams<float>& params, const Codebook& ctx_cb,
                                 const Codebook& dyn_cb, const Vocabulary& v,
                                 const std::vector<EpisodeRecord>& eval_eps,
                                 const EvalConfig& cfg);
PdmsReport evaluate_planner(const PlannerFn& planner, const Codebook& ctx_cb,
                            const Codebook& dyn_cb, const Vocabulary& v,
                            const std::vector<EpisodeRecord>& eval_eps, const EvalConfig& cfg);

// Ablation harness: trains the variant matrix along one study axis with
// shared seeds and scores every variant on the same evaluation suite.
enum class AblationAxis : int {
  kPretrainAnalog = 0,  // warm-started stage pair vs from-scratch joint stage
  kFutureFrames = 1,    // interleaved frames+actions vs action-only plan
  kDepth = 2,           // depth-feature fusion on vs off
  kScheme = 3,          // interleaving schemes A..E
  kHistory = 4,         // history window modes
};
AblationAxis ablation_axis_from_string(const std::string& s);
const char* ablation_axis_name(AblationAxis axis);

struct AblationVariant {
  std::string name;
  bool warm_start = true;  // run the depth-fitting stage first
  bool depth = true;
  PlanKind plan = PlanKind::kSchemeE;
  HistoryConfig history;
};
std::vector<AblationVariant> ablation_variants(AblationAxis axis);

struct AblationConfig {
  ModelConfig model;
  TrainConfig stage1;
  TrainConfig stage2;
  EvalConfig eval;
  int plan_frames = 2;    // training depth for the half-second plans
  int scheme_frames = 8;  // frame count on the scheme axis (fixed-depth plans)
};

struct AblationRow {
  std::string variant;
  PdmsReport report;
  EvalFidelity fidelity;
  int aborted = 0;
};

std::vector<AblationRow> run_ablation(AblationAxis axis, const TrainDataset& train,
                                      const std::vector<EpisodeRecord>& eval_eps,
                                      const AblationConfig& cfg);
std::string ablation_csv(const std::vector<AblationRow>& rows);

}  // namespace driveweave
