#pragma once

#include <functional>
#include <string>
#include <vector>

#include "driveweave/layout.hpp"
#include "driveweave/nnet.hpp"

namespace driveweave {

// Loss weighting. alpha scales tokens that changed since the previous frame,
// beta scales static ones; lambda1/lambda2 mix the frame and waypoint terms.
struct LossConfig {
  double alpha = 2.0;
  double beta = 0.5;
  double lambda1 = 1.0;
  double lambda2 = 5.0;
  double label_smooth = 0.0;
  // Optional analysis mode: restrict the frame softmax to a contiguous id
  // range instead of the full vocabulary. count == 0 means full vocabulary.
  int restrict_lo = 0;
  int restrict_count = 0;
};
void validate(const LossConfig& cfg);

double dynamic_weight(int cur_id, int prev_id, double alpha, double beta);

// Mean over frames of the weighted per-token cross-entropy sums. logits rows
// are the predicting rows for every future-frame token, frames concatenated
// in emission order; targets/prev hold the token ids per frame.
double dyn_focal_loss(const MatX<double>& logits,
                      const std::vector<std::vector<int>>& targets,
                      const std::vector<std::vector<int>>& prev,
                      const LossConfig& cfg);

// Mean over steps of the per-step L1 displacement error.
double traj_loss(const std::vector<Vec2>& pred, const std::vector<Vec2>& gt);

double total_loss(double ldyn, double ltraj, const LossConfig& cfg);

// Loss nodes attached to a training graph, plus their scalar values.
template <typename T>
struct LossBreakdown {
  int dyn_node = -1;
  int traj_node = -1;
  int total_node = -1;
  double dyn = 0.0;
  double traj = 0.0;
  double total = 0.0;
  int n_frames = 0;
  int n_actions = 0;
};

// Scans the sequence for supervised frame tokens and action queries and
// attaches the differentiable losses to the graph. prev_frames supplies the
// change-weight reference ids, one list per supervised frame in emission
// order (the first entry is the frame observed at the anchor itself).
template <typename T>
LossBreakdown<T> attach_losses(Graph<T>& g, const TokenSequence& seq,
                               const std::vector<std::vector<int>>& prev_frames,
                               const LossConfig& cfg);

// Optimizer configuration and schedule. peak_lr has no default rate: direct
// users set it, and the training stages substitute their own when it is
// still unset (non-positive).
struct OptimConfig {
  double peak_lr = 0.0;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int total_steps = 1;
  int warmup_steps = 0;
  int batch_size = 2;
};
void validate(const OptimConfig& cfg);

// Linear warmup to the peak rate, then cosine decay to zero.
double lr_at(int step, const OptimConfig& cfg);

template <typename T>
struct AdamState {
  std::vector<MatX<T>> m;
  std::vector<MatX<T>> v;
  int64_t t = 0;
  void init(const ModelParams<T>& p) {
    m.clear();
    v.clear();
    for (const MatX<T>& a : p.arrays) {
      m.push_back(MatX<T>::Zero(a.rows(), a.cols()));
      v.push_back(MatX<T>::Zero(a.rows(), a.cols()));
    }
    t = 0;
  }
};

// One decoupled-weight-decay Adam update. grads must parallel params.arrays.
// frozen entries (nonzero) are skipped entirely: no weight change, no moment
// update, no decay.
template <typename T>
void optimizer_step(ModelParams<T>& params, const std::vector<MatX<T>>& grads,
                    AdamState<T>& state, const OptimConfig& cfg, int step,
                    const std::vector<uint8_t>& frozen);

// Which parameter families a stage holds fixed.
enum class FreezeSet {
  kNone,
  kBackbone,       // sequence model: embeddings, positions, blocks, output
  kDepthEncoders,  // per-patch depth feature extractors of both branches
};
std::vector<uint8_t> freeze_mask(const ModelParams<float>& p, FreezeSet which);

// Episodes with their precomputed token lists.
struct TrainDataset {
  std::vector<EpisodeRecord> episodes;
  std::vector<EpisodeTokens> tokens;
  Codebook ctx_cb;
  Codebook dyn_cb;
  Vocabulary vocab;
};
TrainDataset make_dataset(std::vector<EpisodeRecord> episodes, const Codebook& ctx_cb,
                          const Codebook& dyn_cb, const Vocabulary& vocab);

struct SampleRef {
  int episode = 0;
  double anchor = 0.0;
};

// All anchors on the stride grid with enough history behind them and enough
// episode left to cover the future horizon.
std::vector<SampleRef> enumerate_anchors(const TrainDataset& ds, const HistoryConfig& hc,
                                         double horizon, double stride);

// One materialized training sequence.
struct TrainSample {
  TokenSequence seq;
  AttentionMask mask;
  EgoStatus ego;
  std::vector<const FrameRaster*> depth;        // empty when depth is off
  std::vector<std::vector<int>> prev_frames;    // change-weight references
};
TrainSample make_sample(const TrainDataset& ds, const SampleRef& ref, PlanKind plan,
                        int n_frames, const HistoryConfig& hc, bool with_depth);

struct TrainConfig {
  LossConfig loss;
  OptimConfig optim;  // peak_lr <= 0 picks the stage default (3e-5 / 2e-5)
  HistoryConfig history;
  int epochs = -1;      // negative picks the stage default (5 / 16)
  int warm_epochs = 1;  // first-stage unfrozen warm-fit epochs
  bool depth = true;
  uint64_t seed = 0;
  double anchor_stride = 0.5;
  std::string metrics_path;  // CSV of step, lr, L_dyn, L_traj, total; empty = off
};

struct StageResult {
  ModelParams<float> params;
  double first_loss = 0.0;
  double final_loss = 0.0;
  int steps = 0;
};

// Scored once per epoch on candidate weights; the best-scoring epoch wins.
using ValidationFn = std::function<double(const ModelParams<float>& params, int epoch)>;

// Depth-feature fitting stage: a short unfrozen warm-fit with depth off
// stands in for a pretrained sequence model, then the backbone freezes and
// the depth encoders plus fusion train on frame supervision alone, ten
// future frames at 10 Hz.
StageResult train_stage1(const TrainDataset& ds, const ModelConfig& mc, TrainConfig cfg);

// Joint stage: depth encoders frozen, everything else trains on interleaved
// frame plus waypoint supervision. stage1 may be null only when depth is off.
StageResult train_stage2(const TrainDataset& ds, const ModelParams<float>* stage1,
                         PlanKind scheme, int n_frames, const ModelConfig& mc,
                         TrainConfig cfg, const ValidationFn& validation = {});

}  // namespace driveweave
