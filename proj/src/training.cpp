#include "driveweave/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace driveweave {

void validate(const LossConfig& cfg) {
  if (!(cfg.alpha > cfg.beta) || !(cfg.beta > 0))
    throw ConfigError("loss weights need alpha > beta > 0, got alpha=" +
                      std::to_string(cfg.alpha) + " beta=" + std::to_string(cfg.beta));
  if (cfg.lambda1 < 0 || cfg.lambda2 < 0)
    throw ConfigError("loss mixing weights must be non-negative");
  if (cfg.label_smooth < 0 || cfg.label_smooth >= 1)
    throw ConfigError("label smoothing must lie in [0, 1)");
  if (cfg.restrict_count < 0 || cfg.restrict_lo < 0)
    throw ConfigError("softmax restriction range must be non-negative");
}

double dynamic_weight(int cur_id, int prev_id, double alpha, double beta) {
  return cur_id != prev_id ? alpha : beta;
}

namespace {

// Log-probabilities of one logits row over the active id range.
std::vector<double> row_log_softmax(const MatX<double>& logits, int row, int lo, int count) {
  double mx = logits(row, lo);
  for (int c = lo; c < lo + count; ++c) mx = std::max(mx, logits(row, c));
  double z = 0.0;
  for (int c = lo; c < lo + count; ++c) z += std::exp(logits(row, c) - mx);
  double logz = std::log(z) + mx;
  std::vector<double> out(static_cast<size_t>(count));
  for (int c = 0; c < count; ++c) out[static_cast<size_t>(c)] = logits(row, lo + c) - logz;
  return out;
}

// One token's weighted smoothed cross-entropy given its log-probabilities.
double token_ce(const std::vector<double>& logp, int target_off, double w, double smooth) {
  double loss = -(1.0 - smooth) * logp[static_cast<size_t>(target_off)];
  if (smooth > 0) {
    double acc = 0.0;
    for (double lp : logp) acc += lp;
    loss -= smooth / static_cast<double>(logp.size()) * acc;
  }
  return w * loss;
}

}  // namespace

double dyn_focal_loss(const MatX<double>& logits,
                      const std::vector<std::vector<int>>& targets,
                      const std::vector<std::vector<int>>& prev,
                      const LossConfig& cfg) {
  validate(cfg);
  size_t n_frames = targets.size();
  if (n_frames == 0) throw ConfigError("frame loss needs at least one frame");
  if (prev.size() != n_frames)
    throw ConfigError("frame loss got " + std::to_string(prev.size()) +
                      " reference frames for " + std::to_string(n_frames) + " target frames");
  size_t total = 0;
  for (size_t f = 0; f < n_frames; ++f) {
    if (targets[f].size() != prev[f].size() || targets[f].empty())
      throw ConfigError("frame " + std::to_string(f) + " target/reference size mismatch");
    total += targets[f].size();
  }
  if (static_cast<size_t>(logits.rows()) != total)
    throw ConfigError("frame loss got " + std::to_string(logits.rows()) + " logit rows for " +
                      std::to_string(total) + " tokens");
  int lo = cfg.restrict_count > 0 ? cfg.restrict_lo : 0;
  int count = cfg.restrict_count > 0 ? cfg.restrict_count : static_cast<int>(logits.cols());
  if (lo + count > logits.cols()) throw ConfigError("softmax restriction exceeds vocabulary");

  double acc = 0.0;
  int row = 0;
  for (size_t f = 0; f < n_frames; ++f)
    for (size_t i = 0; i < targets[f].size(); ++i, ++row) {
      int tgt = targets[f][i];
      if (tgt < lo || tgt >= lo + count)
        throw DataError("target id " + std::to_string(tgt) + " outside the softmax range");
      double w = dynamic_weight(tgt, prev[f][i], cfg.alpha, cfg.beta);
      std::vector<double> logp = row_log_softmax(logits, row, lo, count);
      acc += token_ce(logp, tgt - lo, w, cfg.label_smooth);
    }
  return acc / static_cast<double>(n_frames);
}

double traj_loss(const std::vector<Vec2>& pred, const std::vector<Vec2>& gt) {
  if (pred.size() != gt.size())
    throw ConfigError("waypoint loss got " + std::to_string(pred.size()) + " predictions for " +
                      std::to_string(gt.size()) + " targets");
  if (pred.empty()) throw ConfigError("waypoint loss needs at least one step");
  double acc = 0.0;
  for (size_t i = 0; i < pred.size(); ++i)
    acc += std::abs(pred[i].x - gt[i].x) + std::abs(pred[i].y - gt[i].y);
  return acc / static_cast<double>(pred.size());
}

double total_loss(double ldyn, double ltraj, const LossConfig& cfg) {
  validate(cfg);
  return cfg.lambda1 * ldyn + cfg.lambda2 * ltraj;
}

template <typename T>
LossBreakdown<T> attach_losses(Graph<T>& g, const TokenSequence& seq,
                               const std::vector<std::vector<int>>& prev_frames,
                               const LossConfig& cfg) {
  validate(cfg);
  Tape<T>& t = g.tape;

  // Supervised frame tokens grouped by frame in emission order.
  std::vector<std::vector<int>> positions;
  int last_frame = -1;
  for (int i = 0; i < seq.size(); ++i) {
    const TokenMeta& m = seq.meta[static_cast<size_t>(i)];
    if (!m.supervised) continue;
    if (m.kind == TokenKind::kCtxVis || m.kind == TokenKind::kDynVis) {
      if (m.frame_index != last_frame) {
        positions.emplace_back();
        last_frame = m.frame_index;
      }
      positions.back().push_back(i);
    }
  }
  if (positions.empty()) throw ConfigError("sequence has no supervised frame tokens");
  if (prev_frames.size() != positions.size())
    throw ConfigError("got " + std::to_string(prev_frames.size()) +
                      " reference frames for " + std::to_string(positions.size()) +
                      " supervised frames");
  for (size_t f = 0; f < positions.size(); ++f)
    if (prev_frames[f].size() != positions[f].size())
      throw ConfigError("reference frame " + std::to_string(f) + " size mismatch");

  int lo = cfg.restrict_count > 0 ? cfg.restrict_lo : 0;
  int count = cfg.restrict_count > 0 ? cfg.restrict_count
                                     : static_cast<int>(t.val(g.logits).cols());
  if (lo + count > t.val(g.logits).cols())
    throw ConfigError("softmax restriction exceeds vocabulary");

  LossBreakdown<T> out;
  out.n_frames = static_cast<int>(positions.size());

  // Frame term: each token at position p is predicted by logits row p-1.
  struct Pick {
    int row;
    int target;
    double weight;
  };
  auto picks = std::make_shared<std::vector<Pick>>();
  const MatX<T>& lg = t.val(g.logits);
  MatX<double> lgd = lg.template cast<double>();
  double dyn_acc = 0.0;
  for (size_t f = 0; f < positions.size(); ++f)
    for (size_t i = 0; i < positions[f].size(); ++i) {
      int pos = positions[f][i];
      int tgt = seq.ids[static_cast<size_t>(pos)];
      if (tgt < lo || tgt >= lo + count)
        throw DataError("supervised id " + std::to_string(tgt) + " outside the softmax range");
      double w = dynamic_weight(tgt, prev_frames[f][i], cfg.alpha, cfg.beta);
      picks->push_back({pos - 1, tgt, w});
      std::vector<double> logp = row_log_softmax(lgd, pos - 1, lo, count);
      dyn_acc += token_ce(logp, tgt - lo, w, cfg.label_smooth);
    }
  double inv_n = 1.0 / static_cast<double>(positions.size());
  out.dyn = dyn_acc * inv_n;

  MatX<T> dyn_val(1, 1);
  dyn_val(0, 0) = static_cast<T>(out.dyn);
  int logits_node = g.logits;
  double smooth = cfg.label_smooth;
  out.dyn_node =
      t.custom(dyn_val, [logits_node, picks, lo, count, inv_n, smooth](Tape<T>& tp, int self) {
        const MatX<T>& lgv = tp.val(logits_node);
        MatX<double> ld = lgv.template cast<double>();
        MatX<T> grad = MatX<T>::Zero(lgv.rows(), lgv.cols());
        double go = static_cast<double>(tp.grad(self)(0, 0));
        for (const Pick& pk : *picks) {
          std::vector<double> logp = row_log_softmax(ld, pk.row, lo, count);
          double scale = go * inv_n * pk.weight;
          double even = smooth / static_cast<double>(count);
          for (int c = 0; c < count; ++c) {
            double q = (c + lo == pk.target ? 1.0 - smooth : 0.0) + even;
            grad(pk.row, lo + c) +=
                static_cast<T>(scale * (std::exp(logp[static_cast<size_t>(c)]) - q));
          }
        }
        tp.accum(logits_node, grad);
      });

  // Waypoint term over the action-query outputs.
  std::vector<Vec2> targets;
  for (int i = 0; i < seq.size(); ++i) {
    const TokenMeta& m = seq.meta[static_cast<size_t>(i)];
    if (m.supervised && m.kind == TokenKind::kActionQueryTok) targets.push_back(m.action_target);
  }
  out.n_actions = static_cast<int>(targets.size());
  if (targets.size() != g.action_out.size())
    throw ConfigError("graph exposes " + std::to_string(g.action_out.size()) +
                      " action outputs for " + std::to_string(targets.size()) +
                      " supervised queries");

  int total_node;
  if (!targets.empty()) {
    double inv_a = 1.0 / static_cast<double>(targets.size());
    double traj_acc = 0.0;
    std::vector<int> nodes = g.action_out;
    for (size_t a = 0; a < targets.size(); ++a) {
      const MatX<T>& pv = t.val(nodes[a]);
      traj_acc += std::abs(static_cast<double>(pv(0, 0)) - targets[a].x) +
                  std::abs(static_cast<double>(pv(0, 1)) - targets[a].y);
    }
    out.traj = traj_acc * inv_a;
    MatX<T> traj_val(1, 1);
    traj_val(0, 0) = static_cast<T>(out.traj);
    auto tgts = std::make_shared<std::vector<Vec2>>(targets);
    out.traj_node = t.custom(traj_val, [nodes, tgts, inv_a](Tape<T>& tp, int self) {
      double go = static_cast<double>(tp.grad(self)(0, 0));
      for (size_t a = 0; a < nodes.size(); ++a) {
        const MatX<T>& pv = tp.val(nodes[a]);
        double dx = static_cast<double>(pv(0, 0)) - (*tgts)[a].x;
        double dy = static_cast<double>(pv(0, 1)) - (*tgts)[a].y;
        MatX<T> gm(1, 2);
        gm(0, 0) = static_cast<T>(go * inv_a * (dx > 0 ? 1.0 : (dx < 0 ? -1.0 : 0.0)));
        gm(0, 1) = static_cast<T>(go * inv_a * (dy > 0 ? 1.0 : (dy < 0 ? -1.0 : 0.0)));
        tp.accum(nodes[a], gm);
      }
    });
    total_node = t.add(t.scale(out.dyn_node, static_cast<T>(cfg.lambda1)),
                       t.scale(out.traj_node, static_cast<T>(cfg.lambda2)));
  } else {
    total_node = t.scale(out.dyn_node, static_cast<T>(cfg.lambda1));
  }
  out.total_node = total_node;
  out.total = total_loss(out.dyn, out.traj, cfg);
  return out;
}

template LossBreakdown<float> attach_losses(Graph<float>&, const TokenSequence&,
                                            const std::vector<std::vector<int>>&,
                                            const LossConfig&);
template LossBreakdown<double> attach_losses(Graph<double>&, const TokenSequence&,
                                             const std::vector<std::vector<int>>&,
                                             const LossConfig&);

void validate(const OptimConfig& cfg) {
  if (cfg.peak_lr <= 0) throw ConfigError("peak learning rate must be positive");
  if (cfg.weight_decay < 0) throw ConfigError("weight decay must be non-negative");
  if (cfg.beta1 < 0 || cfg.beta1 >= 1 || cfg.beta2 < 0 || cfg.beta2 >= 1)
    throw ConfigError("moment decay factors must lie in [0, 1)");
  if (cfg.eps <= 0) throw ConfigError("optimizer epsilon must be positive");
  if (cfg.total_steps <= 0) throw ConfigError("total step count must be positive");
  if (cfg.warmup_steps < 0 || cfg.warmup_steps > cfg.total_steps)
    throw ConfigError("warmup must lie within the total step count");
  if (cfg.batch_size <= 0) throw ConfigError("batch size must be positive");
}

double lr_at(int step, const OptimConfig& cfg) {
  validate(cfg);
  if (step < 0) throw ConfigError("schedule step must be non-negative");
  if (step < cfg.warmup_steps)
    return cfg.peak_lr * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
  double denom = static_cast<double>(cfg.total_steps - cfg.warmup_steps);
  double progress = denom > 0 ? static_cast<double>(step - cfg.warmup_steps) / denom : 1.0;
  progress = std::clamp(progress, 0.0, 1.0);
  return 0.5 * cfg.peak_lr * (1.0 + std::cos(M_PI * progress));
}

template <typename T>
void optimizer_step(ModelParams<T>& params, const std::vector<MatX<T>>& grads,
                    AdamState<T>& state, const OptimConfig& cfg, int step,
                    const std::vector<uint8_t>& frozen) {
  validate(cfg);
  size_t n = params.arrays.size();
  if (grads.size() != n || state.m.size() != n || state.v.size() != n || frozen.size() != n)
    throw ConfigError("optimizer arrays out of step with the parameter set");
  double lr = lr_at(step, cfg);
  state.t += 1;
  double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  for (size_t i = 0; i < n; ++i) {
    if (frozen[i]) continue;
    MatX<T>& th = params.arrays[i];
    const MatX<T>& gr = grads[i];
    if (gr.rows() != th.rows() || gr.cols() != th.cols())
      throw ConfigError("gradient shape mismatch for '" + params.names[i] + "'");
    MatX<T>& m = state.m[i];
    MatX<T>& v = state.v[i];
    for (int r = 0; r < th.rows(); ++r)
      for (int c = 0; c < th.cols(); ++c) {
        T gg = gr(r, c);
        m(r, c) = b1 * m(r, c) + (T(1) - b1) * gg;
        v(r, c) = b2 * v(r, c) + (T(1) - b2) * gg * gg;
        double mhat = static_cast<double>(m(r, c)) / bc1;
        double vhat = static_cast<double>(v(r, c)) / bc2;
        double upd = lr * (mhat / (std::sqrt(vhat) + cfg.eps) +
                           cfg.weight_decay * static_cast<double>(th(r, c)));
        th(r, c) = static_cast<T>(static_cast<double>(th(r, c)) - upd);
      }
  }
}

template void optimizer_step(ModelParams<float>&, const std::vector<MatX<float>>&,
                             AdamState<float>&, const OptimConfig&, int,
                             const std::vector<uint8_t>&);
template void optimizer_step(ModelParams<double>&, const std::vector<MatX<double>>&,
                             AdamState<double>&, const OptimConfig&, int,
                             const std::vector<uint8_t>&);

std::vector<uint8_t> freeze_mask(const ModelParams<float>& p, FreezeSet which) {
  std::vector<uint8_t> out(p.arrays.size(), 0);
  auto starts = [](const std::string& s, const char* pre) { return s.rfind(pre, 0) == 0; };
  for (size_t i = 0; i < p.names.size(); ++i) {
    const std::string& nm = p.names[i];
    bool frozen = false;
    switch (which) {
      case FreezeSet::kNone:
        break;
      case FreezeSet::kBackbone:
        frozen = starts(nm, "embed") || starts(nm, "pos") || starts(nm, "L") ||
                 starts(nm, "lnf.") || starts(nm, "out.");
        break;
      case FreezeSet::kDepthEncoders:
        frozen = starts(nm, "cde.") || starts(nm, "dde.");
        break;
    }
    out[i] = frozen ? 1 : 0;
  }
  return out;
}

TrainDataset make_dataset(std::vector<EpisodeRecord> episodes, const Codebook& ctx_cb,
                          const Codebook& dyn_cb, const Vocabulary& vocab) {
  if (episodes.empty()) throw DataError("dataset needs at least one episode");
  if (ctx_cb.K != vocab.ctx_codes || dyn_cb.K != vocab.dyn_codes)
    throw ConfigError("codebook sizes disagree with the vocabulary");
  TrainDataset ds;
  ds.episodes = std::move(episodes);
  ds.ctx_cb = ctx_cb;
  ds.dyn_cb = dyn_cb;
  ds.vocab = vocab;
  ds.tokens.reserve(ds.episodes.size());
  for (const EpisodeRecord& ep : ds.episodes)
    ds.tokens.push_back(tokenize_episode(ep, ds.ctx_cb, ds.dyn_cb, ds.vocab));
  return ds;
}

namespace {

double history_span(const HistoryConfig& hc) {
  return hc.mode == HistoryConfig::kOneSecond ? 1.0 : 2.0;
}

bool wants_ctx_frames(const HistoryConfig& hc) {
  return hc.mode != HistoryConfig::kDynamicOnly;
}

double layout_horizon(const std::vector<FutureBlock>& blocks) {
  double h = 0.0;
  for (const FutureBlock& b : blocks) h = std::max(h, b.tau);
  return h;
}

}  // namespace

std::vector<SampleRef> enumerate_anchors(const TrainDataset& ds, const HistoryConfig& hc,
                                         double horizon, double stride) {
  if (stride <= 0) throw ConfigError("anchor stride must be positive");
  double tol = 1e-9;
  if (std::abs(stride / 0.1 - std::lround(stride / 0.1)) > tol)
    throw ConfigError("anchor stride must sit on the tick grid");
  std::vector<SampleRef> out;
  double min_t = history_span(hc);
  for (int e = 0; e < static_cast<int>(ds.episodes.size()); ++e) {
    const EpisodeRecord& ep = ds.episodes[static_cast<size_t>(e)];
    for (int k = static_cast<int>(std::ceil(min_t / stride - tol));; ++k) {
      double t = stride * k;
      if (t + horizon > ep.duration + tol) break;
      if (t < min_t - tol) continue;
      if (wants_ctx_frames(hc) &&
          std::abs(t / 0.5 - std::lround(t / 0.5)) > tol)
        continue;
      out.push_back({e, t});
    }
  }
  return out;
}

TrainSample make_sample(const TrainDataset& ds, const SampleRef& ref, PlanKind plan,
                        int n_frames, const HistoryConfig& hc, bool with_depth) {
  if (ref.episode < 0 || ref.episode >= static_cast<int>(ds.episodes.size()))
    throw ConfigError("sample references episode " + std::to_string(ref.episode) +
                      " of " + std::to_string(ds.episodes.size()));
  const EpisodeRecord& ep = ds.episodes[static_cast<size_t>(ref.episode)];
  const EpisodeTokens& toks = ds.tokens[static_cast<size_t>(ref.episode)];

  PromptBundle pb = build_history_prompt(ep, toks, ref.anchor, ds.vocab, hc);
  std::vector<FutureBlock> layout = build_future_layout(plan, n_frames);

  TrainSample s;
  s.ego = pb.ego;
  FutureTargets gt;
  std::vector<int> prev_ids = toks.dyn[static_cast<size_t>(ep.tick_of_time(ref.anchor))].ids;
  for (const FutureBlock& blk : layout) {
    if (blk.kind == FutureBlock::kFrame) {
      const FrameTokens& ft = toks.dyn[static_cast<size_t>(ep.tick_of_time(ref.anchor + blk.tau))];
      gt.frames.push_back(ft);
      s.prev_frames.push_back(prev_ids);
      prev_ids = ft.ids;
    } else {
      gt.waypoints.push_back(ep.waypoint(ref.anchor, blk.tau));
    }
  }
  s.seq = assemble_training_sequence(pb.seq, layout, gt, ds.vocab, plan);
  s.mask = build_attention_mask(s.seq);
  if (with_depth)
    for (const HistoryFrameRef& f : pb.frames)
      s.depth.push_back(f.branch == Branch::kContextual
                            ? &ep.ctx_frames[static_cast<size_t>(f.index)]
                            : &ep.dyn_frames[static_cast<size_t>(f.index)]);
  return s;
}

namespace {

struct LoopPhase {
  PlanKind plan;
  int n_frames;
  bool depth;
  FreezeSet freeze;
  int epochs;
  double peak_lr;
  const char* tag;
};

struct LoopState {
  int step = 0;        // global row index for the metrics log
  int phase_step = 0;  // schedule position within the current phase
  double first_loss = -1.0;
  double final_loss = 0.0;
  std::ofstream metrics;
};

void run_phase(ModelParams<float>& params, const TrainDataset& ds, const TrainConfig& cfg,
               const LoopPhase& ph, LoopState& ls,
               const std::function<void(int)>& on_epoch_end = {}) {
  std::vector<FutureBlock> layout = build_future_layout(ph.plan, ph.n_frames);
  std::vector<SampleRef> refs =
      enumerate_anchors(ds, cfg.history, layout_horizon(layout), cfg.anchor_stride);
  if (refs.empty()) throw DataError("no usable anchors: episodes too short for the horizon");

  OptimConfig oc = cfg.optim;
  oc.peak_lr = ph.peak_lr;
  int steps_per_epoch =
      static_cast<int>((refs.size() + oc.batch_size - 1) / static_cast<size_t>(oc.batch_size));
  oc.total_steps = std::max(1, steps_per_epoch * ph.epochs);
  oc.warmup_steps = std::min(cfg.optim.warmup_steps, oc.total_steps);
  validate(oc);

  AdamState<float> st;
  st.init(params);
  std::vector<uint8_t> frozen = freeze_mask(params, ph.freeze);

  std::vector<MatX<float>> grads;
  for (const MatX<float>& a : params.arrays) grads.push_back(MatX<float>::Zero(a.rows(), a.cols()));

  ls.phase_step = 0;
  for (int epoch = 0; epoch < ph.epochs; ++epoch) {
    Rng shuffle = Rng(cfg.seed).derive(std::string(ph.tag) + ":shuffle:" + std::to_string(epoch));
    std::vector<SampleRef> order = refs;
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[static_cast<size_t>(shuffle.uniform_int(static_cast<int>(i)))]);

    for (size_t at = 0; at < order.size(); at += static_cast<size_t>(oc.batch_size)) {
      size_t hi = std::min(order.size(), at + static_cast<size_t>(oc.batch_size));
      int batch_n = static_cast<int>(hi - at);
      for (MatX<float>& gm : grads) gm.setZero();
      double sum_dyn = 0, sum_traj = 0, sum_total = 0;
      for (size_t s = at; s < hi; ++s) {
        TrainSample sample = make_sample(ds, order[s], ph.plan, ph.n_frames, cfg.history, ph.depth);
        Graph<float> g = build_graph(params, sample.seq, sample.ego, sample.depth, sample.mask);
        LossBreakdown<float> lb = attach_losses(g, sample.seq, sample.prev_frames, cfg.loss);
        g.tape.backward(lb.total_node);
        for (size_t a = 0; a < grads.size(); ++a)
          if (g.tape.has_grad(g.param_leaf[a])) grads[a] += g.tape.grad(g.param_leaf[a]);
        sum_dyn += lb.dyn;
        sum_traj += lb.traj;
        sum_total += lb.total;
      }
      float inv = 1.0f / static_cast<float>(batch_n);
      for (MatX<float>& gm : grads) gm *= inv;
      optimizer_step(params, grads, st, oc, ls.phase_step, frozen);

      double mean_total = sum_total / batch_n;
      if (ls.first_loss < 0) ls.first_loss = mean_total;
      ls.final_loss = mean_total;
      if (ls.metrics.is_open()) {
        char line[160];
        std::snprintf(line, sizeof(line), "%d,%.9g,%.9g,%.9g,%.9g\n", ls.step,
                      lr_at(ls.phase_step, oc), sum_dyn / batch_n, sum_traj / batch_n,
                      mean_total);
        ls.metrics << line;
      }
      ls.step += 1;
      ls.phase_step += 1;
    }
    if (on_epoch_end) on_epoch_end(epoch);
  }
}

}  // namespace

StageResult train_stage1(const TrainDataset& ds, const ModelConfig& mc, TrainConfig cfg) {
  validate(cfg.loss);
  if (cfg.epochs < 0) cfg.epochs = 5;
  double lr = cfg.optim.peak_lr > 0 ? cfg.optim.peak_lr : 3e-5;

  StageResult out;
  out.params = init_params<float>(mc);
  LoopState ls;
  if (!cfg.metrics_path.empty()) {
    ls.metrics.open(cfg.metrics_path);
    if (!ls.metrics) throw DataError("cannot open metrics file: " + cfg.metrics_path);
    ls.metrics << "step,lr,L_dyn,L_traj,total\n";
  }
  if (cfg.warm_epochs > 0)
    run_phase(out.params, ds, cfg,
              {PlanKind::kFramesOnly, 10, false, FreezeSet::kNone, cfg.warm_epochs, lr, "warm"},
              ls);
  // With depth disabled only the warm fit runs, leaving a plain sequence
  // model; the ablation study relies on this split.
  if (cfg.depth && cfg.epochs > 0)
    run_phase(out.params, ds, cfg,
              {PlanKind::kFramesOnly, 10, true, FreezeSet::kBackbone, cfg.epochs, lr, "depth"},
              ls);
  out.first_loss = ls.first_loss;
  out.final_loss = ls.final_loss;
  out.steps = ls.step;
  return out;
}

StageResult train_stage2(const TrainDataset& ds, const ModelParams<float>* stage1,
                         PlanKind scheme, int n_frames, const ModelConfig& mc,
                         TrainConfig cfg, const ValidationFn& validation) {
  validate(cfg.loss);
  if (cfg.depth && stage1 == nullptr)
    throw ConfigError("joint training with depth enabled needs the depth-fitting checkpoint");
  if (cfg.epochs < 0) cfg.epochs = 16;
  double lr = cfg.optim.peak_lr > 0 ? cfg.optim.peak_lr : 2e-5;

  StageResult out;
  if (stage1 != nullptr) {
    if (stage1->cfg.d != mc.d || stage1->cfg.layers != mc.layers ||
        stage1->cfg.vocab != mc.vocab || stage1->cfg.heads != mc.heads ||
        stage1->cfg.dff != mc.dff || stage1->cfg.max_len != mc.max_len)
      throw ConfigError("depth-fitting checkpoint architecture disagrees with the model config");
    out.params = *stage1;
  } else {
    out.params = init_params<float>(mc);
  }

  LoopState ls;
  if (!cfg.metrics_path.empty()) {
    ls.metrics.open(cfg.metrics_path);
    if (!ls.metrics) throw DataError("cannot open metrics file: " + cfg.metrics_path);
    ls.metrics << "step,lr,L_dyn,L_traj,total\n";
  }

  ModelParams<float> best = out.params;
  double best_score = -1e300;
  bool tracked = false;
  auto on_epoch = [&](int epoch) {
    if (!validation) return;
    double score = validation(out.params, epoch);
    if (!tracked || score > best_score) {
      best_score = score;
      best = out.params;
      tracked = true;
    }
  };
  if (cfg.epochs > 0)
    run_phase(out.params, ds, cfg,
              {scheme, n_frames, cfg.depth, FreezeSet::kDepthEncoders, cfg.epochs, lr, "joint"},
              ls, on_epoch);
  if (tracked) out.params = best;
  out.first_loss = ls.first_loss;
  out.final_loss = ls.final_loss;
  out.steps = ls.step;
  return out;
}

}  // namespace driveweave
