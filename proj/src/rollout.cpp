#include "driveweave/rollout.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>

namespace driveweave {

namespace {

// Dynamic-frame token count for a grid, one id per 4x4 patch.
int frame_token_count(const RasterGrid& g) {
  if (g.rows <= 0 || g.cols <= 0 || g.rows % kPatch != 0 || g.cols % kPatch != 0)
    throw ConfigError("dynamic grid " + std::to_string(g.rows) + "x" + std::to_string(g.cols) +
                      " is not patchable into 4x4 tiles");
  return (g.rows / kPatch) * (g.cols / kPatch);
}

struct Emitter {
  const ModelParams<float>& p;
  KVCache<float> cache;
  MatX<float> last_logits;  // outputs of the most recently appended position
  MatX<float> last_hidden;

  explicit Emitter(const ModelParams<float>& params) : p(params) { cache.init(p.cfg); }

  void ingest_prompt(const TokenSequence& prompt, const EgoStatus& ego,
                     const std::vector<const FrameRaster*>& depth) {
    MatX<float> embeds = embed_sequence(p, prompt, ego, depth);
    AttentionMask mask = build_attention_mask(prompt);
    ForwardOut<float> out = incremental_forward(p, cache, embeds, mask.allow_until);
    int last = static_cast<int>(out.logits.rows()) - 1;
    last_logits = out.logits.row(last);
    last_hidden = out.hidden.row(last);
  }

  MatX<float> token_embed(int id, int pos) const {
    MatX<float> row = p.at("embed").row(id) + p.at("pos").row(pos);
    return row;
  }

  // Appends one token causally and returns its embedding row for later reuse.
  MatX<float> append(int id) {
    int pos = cache.len;
    if (pos >= p.cfg.max_len)
      throw ConfigError("context overflow: position " + std::to_string(pos) +
                        " reached the model limit " + std::to_string(p.cfg.max_len));
    MatX<float> row = token_embed(id, pos);
    ForwardOut<float> out = incremental_forward(p, cache, row, {pos});
    last_logits = out.logits;
    last_hidden = out.hidden;
    return row;
  }

  // Recomputes the frame's cache entries once under the bidirectional
  // intra-frame bound [0, hi].
  void refresh_frame(int frame_start, const MatX<float>& frame_embeds) {
    int hi = frame_start + static_cast<int>(frame_embeds.rows()) - 1;
    cache.truncate(frame_start);
    std::vector<int> allow(static_cast<size_t>(frame_embeds.rows()), hi);
    ForwardOut<float> out = incremental_forward(p, cache, frame_embeds, allow);
    int last = static_cast<int>(out.logits.rows()) - 1;
    last_logits = out.logits.row(last);
    last_hidden = out.hidden.row(last);
  }
};

struct Chooser {
  const SamplingConfig& sc;
  int lo, count;  // allowed id range
  Rng rng;
  size_t forced_at = 0;

  Chooser(const SamplingConfig& cfg, const Vocabulary& v, int vocab_size)
      : sc(cfg), lo(0), count(vocab_size), rng(cfg.seed) {
    if (sc.branch_restrict) {
      lo = v.dyn_base();
      count = v.dyn_codes;
    }
  }

  // Returns the chosen id and the argmax probability of the allowed range.
  std::pair<int, double> choose(const MatX<float>& logits_row) {
    double mx = -1e300;
    int best = lo;
    for (int c = lo; c < lo + count; ++c) {
      double z = logits_row(0, c);
      if (z > mx) {
        mx = z;
        best = c;
      }
    }
    double denom = 0.0;
    for (int c = lo; c < lo + count; ++c) denom += std::exp(logits_row(0, c) - mx);
    double max_prob = 1.0 / denom;

    int chosen;
    if (sc.force_ids != nullptr) {
      if (forced_at >= sc.force_ids->size())
        throw ConfigError("forced id list ended after " +
                          std::to_string(sc.force_ids->size()) + " tokens");
      chosen = (*sc.force_ids)[forced_at++];
      if (chosen < lo || chosen >= lo + count)
        throw DataError("forced id " + std::to_string(chosen) + " outside range [" +
                        std::to_string(lo) + ", " + std::to_string(lo + count) + ")");
    } else if (sc.temperature <= 0.0) {
      chosen = best;
    } else {
      std::vector<std::pair<double, int>> zs;
      zs.reserve(static_cast<size_t>(count));
      for (int c = lo; c < lo + count; ++c) zs.push_back({logits_row(0, c), c});
      if (sc.top_k > 0 && sc.top_k < count) {
        std::partial_sort(zs.begin(), zs.begin() + sc.top_k, zs.end(),
                          [](const auto& a, const auto& b) { return a.first > b.first; });
        zs.resize(static_cast<size_t>(sc.top_k));
      }
      double d = 0.0;
      for (auto& z : zs) {
        z.first = std::exp((z.first - mx) / sc.temperature);
        d += z.first;
      }
      double u = rng.uniform() * d, acc = 0.0;
      chosen = zs.back().second;
      for (const auto& z : zs) {
        acc += z.first;
        if (u <= acc) {
          chosen = z.second;
          break;
        }
      }
    }
    return {chosen, max_prob};
  }
};

double history_span_s(const HistoryConfig& hc) {
  return hc.mode == HistoryConfig::kOneSecond ? 1.0 : 2.0;
}

// Walks the plan's emission layout (frames causally with one bidirectional
// refresh each, action queries read by the head) and stops at the first
// half-second action. Plans whose opening block is not a 0.5 s pair need
// their own prefix generated before the controller's waypoint exists.
Vec2 plan_first_half_second(const ModelParams<float>& p, const TokenSequence& prompt,
                            const EgoStatus& ego, const std::vector<const FrameRaster*>& depth,
                            const Vocabulary& v, PlanKind plan, int frame_len,
                            const SamplingConfig& sc) {
  std::vector<FutureBlock> blocks = build_future_layout(plan, 8);
  int needed = prompt.size();
  int upto = -1;
  for (size_t b = 0; b < blocks.size(); ++b) {
    needed += blocks[b].kind == FutureBlock::kFrame ? frame_len + 2 : 3;
    if (blocks[b].kind == FutureBlock::kAction && std::abs(blocks[b].tau - 0.5) < 1e-9) {
      upto = static_cast<int>(b);
      break;
    }
  }
  if (upto < 0) throw ConfigError("plan never regresses a half-second waypoint");
  if (needed > p.cfg.max_len)
    throw ConfigError("context overflow: prompt of " + std::to_string(prompt.size()) +
                      " plus the plan prefix needs " + std::to_string(needed) +
                      " positions but the model holds " + std::to_string(p.cfg.max_len));

  Emitter em(p);
  em.ingest_prompt(prompt, ego, depth);
  Chooser ch(sc, v, p.cfg.vocab);
  for (int b = 0; b <= upto; ++b) {
    if (blocks[static_cast<size_t>(b)].kind == FutureBlock::kFrame) {
      em.append(Vocabulary::kSod);
      int frame_start = em.cache.len;
      MatX<float> frame_embeds(frame_len, p.cfg.d);
      for (int i = 0; i < frame_len; ++i) {
        auto [id, prob] = ch.choose(em.last_logits);
        (void)prob;
        frame_embeds.row(i) = em.append(id);
      }
      em.refresh_frame(frame_start, frame_embeds);
      em.append(Vocabulary::kEod);
    } else {
      em.append(Vocabulary::kAct);
      em.append(Vocabulary::kActionQuery);
      if (b == upto) return action_head(p, em.last_hidden);
      em.append(Vocabulary::kAct);
    }
  }
  throw NumericError("plan walk passed its stop block");
}

}  // namespace

RolloutResult rollout(const ModelParams<float>& p, const TokenSequence& prompt,
                      const EgoStatus& ego, const std::vector<const FrameRaster*>& depth,
                      const RolloutContext& rc, int n_steps, const SamplingConfig& sc) {
  if (n_steps < 0) throw ConfigError("rollout needs a non-negative step count");
  if (prompt.prompt_len != prompt.size())
    throw ConfigError("rollout expects a pure history prompt without future blocks");
  int frame_len = sc.emit_frames ? frame_token_count(rc.dyn_grid) : 0;
  int per_step = (sc.emit_frames ? frame_len + 2 : 0) + 3;
  int needed = prompt.size() + n_steps * per_step;
  if (needed > p.cfg.max_len)
    throw ConfigError("context overflow: prompt of " + std::to_string(prompt.size()) +
                      " plus " + std::to_string(n_steps) + " generation steps needs " +
                      std::to_string(needed) + " positions but the model holds " +
                      std::to_string(p.cfg.max_len));
  if (rc.vocab == nullptr) throw ConfigError("rollout context is missing the vocabulary");
  if (rc.decode_rasters && sc.emit_frames &&
      (rc.ctx_cb == nullptr || rc.dyn_cb == nullptr))
    throw ConfigError("raster decoding needs both codebooks in the rollout context");

  RolloutResult res;
  res.prompt_len = prompt.size();
  if (n_steps == 0) {
    res.final_len = 0;
    return res;
  }

  if (sc.force_ids != nullptr &&
      static_cast<int>(sc.force_ids->size()) != n_steps * frame_len)
    throw ConfigError("forced id list has " + std::to_string(sc.force_ids->size()) +
                      " entries but the rollout emits " + std::to_string(n_steps * frame_len) +
                      " dynamic tokens");

  Emitter em(p);
  em.ingest_prompt(prompt, ego, depth);
  Chooser ch(sc, *rc.vocab, p.cfg.vocab);
  if (sc.record_logits && sc.emit_frames)
    res.decision_logits.resize(n_steps * frame_len, p.cfg.vocab);

  // Self-conditioning state: re-encoded decodes of whole-second frames.
  FrameTokens cond0 = rc.anchor_ctx;
  FrameTokens cond_even = cond0;  // latest whole-second condition

  for (int k = 1; k <= n_steps; ++k) {
    auto t0 = std::chrono::steady_clock::now();
    StepStats stats;

    if (sc.emit_frames) {
      em.append(Vocabulary::kSod);
      res.emitted.push_back(Vocabulary::kSod);
      int frame_start = em.cache.len;
      MatX<float> frame_embeds(frame_len, p.cfg.d);
      FrameTokens ft;
      ft.branch = Branch::kDynamic;
      ft.timestamp = 0.5 * k;
      double prob_acc = 0.0;
      for (int i = 0; i < frame_len; ++i) {
        if (sc.record_logits)
          res.decision_logits.row((k - 1) * frame_len + i) = em.last_logits.row(0);
        auto [id, max_prob] = ch.choose(em.last_logits);
        prob_acc += max_prob;
        ft.ids.push_back(id);
        frame_embeds.row(i) = em.append(id);
        res.emitted.push_back(id);
      }
      em.refresh_frame(frame_start, frame_embeds);
      em.append(Vocabulary::kEod);
      res.emitted.push_back(Vocabulary::kEod);
      stats.mean_max_prob = prob_acc / frame_len;
      res.frames.push_back(std::move(ft));
    }

    em.append(Vocabulary::kAct);
    res.emitted.push_back(Vocabulary::kAct);
    em.append(Vocabulary::kActionQuery);
    res.emitted.push_back(Vocabulary::kActionQuery);
    res.waypoints.push_back(action_head(p, em.last_hidden));
    em.append(Vocabulary::kAct);
    res.emitted.push_back(Vocabulary::kAct);

    if (sc.emit_frames && rc.decode_rasters) {
      const FrameTokens& ft = res.frames.back();
      int j = conditioning_index(k);
      if (j == k) {
        // A whole-second step conditions on its own re-encoded decode; the
        // base decode borrows the latest available per-second condition.
        FrameRaster base = decode_frame_conditioned(ft, *rc.dyn_cb, cond_even, *rc.ctx_cb,
                                                    *rc.vocab, rc.dyn_grid, rc.ctx_grid);
        cond_even = encode_frame(base, *rc.ctx_cb, *rc.vocab);
      }
      const FrameTokens& cond = (j == 0) ? cond0 : cond_even;
      FrameRaster raster = decode_frame_conditioned(ft, *rc.dyn_cb, cond, *rc.ctx_cb,
                                                    *rc.vocab, rc.dyn_grid, rc.ctx_grid);
      raster.timestamp = 0.5 * k;
      res.rasters.push_back(std::move(raster));
    }

    stats.cache_len = em.cache.len;
    stats.wall_ms = std::chrono::duration<double, std::milli>(
                        std::chrono::steady_clock::now() - t0)
                        .count();
    res.stats.push_back(stats);
  }
  res.final_len = em.cache.len;
  return res;
}

ExpertControl waypoint_controller(const Vec2& wp, double speed, double horizon,
                                  const ControllerConfig& cc) {
  if (horizon <= 0) throw ConfigError("controller horizon must be positive");
  double chord = std::hypot(wp.x, wp.y);
  double theta = chord < 1e-12 ? 0.0 : 2.0 * std::atan2(wp.y, wp.x);
  double half = std::clamp(theta / 2.0, -1.3, 1.3);
  double arc = std::abs(half) < 1e-9 ? chord : chord * half / std::sin(half);
  double v_des = arc / horizon;
  ExpertControl u;
  u.accel = std::clamp(cc.kp_speed * (v_des - speed), -cc.max_accel, cc.max_accel);
  u.yaw_rate = std::clamp(cc.kp_heading * theta, -cc.max_yaw_rate, cc.max_yaw_rate);
  return u;
}

PlannerFn expert_oracle_planner(const EpisodeRecord& reference, double horizon) {
  const EpisodeRecord* ref = &reference;
  return [ref, horizon](const PlanRequest& rq) {
    double target_t = std::min(rq.t + horizon, ref->duration);
    const Pose& goal = ref->ticks[static_cast<size_t>(ref->tick_of_time(target_t))].ego.pose;
    const Pose& here = rq.state.ego.pose;
    double dx = goal.pos.x - here.pos.x, dy = goal.pos.y - here.pos.y;
    double ch = std::cos(here.heading), sh = std::sin(here.heading);
    return Vec2{ch * dx + sh * dy, -sh * dx + ch * dy};
  };
}

PlannerFn constant_velocity_planner(double horizon) {
  return [horizon](const PlanRequest& rq) { return Vec2{rq.state.ego.speed * horizon, 0.0}; };
}

PlannerFn zero_motion_planner() {
  return [](const PlanRequest&) { return Vec2{0.0, 0.0}; };
}

DriveOutcome closed_loop_drive(const ModelParams<float>* params, const Codebook& ctx_cb,
                               const Codebook& dyn_cb, const Vocabulary& v,
                               const EpisodeRecord& expert, const DriveConfig& cfg,
                               const PlannerFn& planner) {
  if (params == nullptr && !planner)
    throw ConfigError("closed-loop drive needs a model or a planner");
  if (expert.ticks.empty()) throw DataError("expert episode has no ticks");
  const WorldConfig& wc = expert.wcfg;
  double dt = wc.dt;
  if (cfg.cadence <= 0 ||
      std::abs(cfg.cadence / 0.5 - std::lround(cfg.cadence / 0.5)) > 1e-9)
    throw ConfigError("replan cadence must be a positive multiple of 0.5 s");
  int cadence_ticks = static_cast<int>(std::lround(cfg.cadence / dt));
  int warm_ticks =
      static_cast<int>(std::lround(history_span_s(cfg.history) / dt));
  if (warm_ticks >= static_cast<int>(expert.ticks.size()))
    throw DataError("expert episode shorter than the history warmup");
  if (cfg.n_steps < 1) throw ConfigError("closed-loop drive needs at least one rollout step");
  if (cfg.plan == PlanKind::kFramesOnly)
    throw ConfigError("a frames-only plan never regresses a waypoint to track");
  bool direct_plan = cfg.plan == PlanKind::kSchemeE || cfg.plan == PlanKind::kActionsOnly;
  if (cfg.keep_rollouts && !direct_plan)
    throw ConfigError("per-anchor rollout retention needs a half-second interleaved plan");

  DriveOutcome out;
  out.driven.family = expert.family;
  out.driven.seed = expert.seed;
  out.driven.wcfg = wc;
  out.driven.road = expert.road;
  out.driven.duration = expert.duration;
  out.driven.target_speed = expert.target_speed;

  WorldState w = expert.state_at(0);
  EpisodeTokens toks;
  SamplingConfig sampling = cfg.sampling;
  sampling.emit_frames = cfg.plan != PlanKind::kActionsOnly;

  int steps = static_cast<int>(std::lround(expert.duration / dt));
  double accel = 0.0, yaw = 0.0;
  for (int i = 0; i <= steps; ++i) {
    double t = i * dt;

    EpisodeTick tk;
    tk.ego = w.ego;
    tk.agents = w.agents;
    tk.command = current_command(w, wc);
    out.driven.ticks.push_back(tk);
    out.driven.dyn_frames.push_back(render_frame(w, wc.dynamic, wc, t));
    if (i % 5 == 0) out.driven.ctx_frames.push_back(render_frame(w, wc.contextual, wc, t));
    if (params != nullptr && !planner) {
      toks.dyn.push_back(encode_frame(out.driven.dyn_frames.back(), dyn_cb, v));
      if (i % 5 == 0) toks.ctx.push_back(encode_frame(out.driven.ctx_frames.back(), ctx_cb, v));
    }

    if (i < steps) {
      if (i < warm_ticks) {
        accel = expert.ticks[static_cast<size_t>(i)].accel_cmd;
        yaw = expert.ticks[static_cast<size_t>(i)].yaw_cmd;
      } else if ((i - warm_ticks) % cadence_ticks == 0) {
        Vec2 wp;
        try {
          if (planner) {
            wp = planner({out.driven, w, t});
          } else {
            PromptBundle pb = build_history_prompt(out.driven, toks, t, v, cfg.history);
            std::vector<const FrameRaster*> depth;
            if (cfg.depth)
              for (const HistoryFrameRef& f : pb.frames)
                depth.push_back(f.branch == Branch::kContextual
                                    ? &out.driven.ctx_frames[static_cast<size_t>(f.index)]
                                    : &out.driven.dyn_frames[static_cast<size_t>(f.index)]);
            RolloutContext rc;
            rc.ctx_cb = &ctx_cb;
            rc.dyn_cb = &dyn_cb;
            rc.vocab = &v;
            rc.ctx_grid = wc.contextual;
            rc.dyn_grid = wc.dynamic;
            if (direct_plan) {
              rc.anchor_ctx = toks.ctx[static_cast<size_t>(out.driven.ctx_index_of_time(t))];
              rc.decode_rasters = cfg.keep_rollouts;
              RolloutResult rr = rollout(*params, pb.seq, pb.ego, depth, rc, cfg.n_steps,
                                         sampling);
              wp = rr.waypoints.at(0);
              if (cfg.keep_rollouts) out.rollouts.push_back(std::move(rr));
            } else {
              wp = plan_first_half_second(*params, pb.seq, pb.ego, depth, v, cfg.plan,
                                          frame_token_count(wc.dynamic), sampling);
            }
          }
        } catch (const std::exception& e) {
          out.aborted = true;
          out.diagnostics = std::string("replan at t=") + std::to_string(t) +
                            " failed: " + e.what();
          out.driven.ticks.back().accel_cmd = accel;
          out.driven.ticks.back().yaw_cmd = yaw;
          return out;
        }
        out.anchor_times.push_back(t);
        out.planned.push_back(wp);
        ExpertControl u = waypoint_controller(wp, w.ego.speed, 0.5, cfg.controller);
        accel = u.accel;
        yaw = u.yaw_rate;
      }
    }

    out.driven.ticks.back().accel_cmd = accel;
    out.driven.ticks.back().yaw_cmd = yaw;
    if (i < steps) w = step_world(w, accel, yaw, dt, wc);
  }
  return out;
}

std::string rollout_waypoints_csv(const RolloutResult& r) {
  std::string s = "step,tau,x,y\n";
  char line[128];
  for (size_t i = 0; i < r.waypoints.size(); ++i) {
    std::snprintf(line, sizeof(line), "%zu,%.1f,%.9g,%.9g\n", i + 1, 0.5 * (i + 1),
                  r.waypoints[i].x, r.waypoints[i].y);
    s += line;
  }
  return s;
}

std::string rollout_trace_tsv(const RolloutResult& r, const Vocabulary& v) {
  std::string s = "pos\tid\tname\n";
  char line[96];
  for (size_t i = 0; i < r.emitted.size(); ++i) {
    int id = r.emitted[i];
    std::string name;
    if (v.is_special(id))
      name = v.special_name(id);
    else if (v.is_dyn_code(id))
      name = "dyn" + std::to_string(id - v.dyn_base());
    else if (v.is_ctx_code(id))
      name = "ctx" + std::to_string(id - v.ctx_base());
    else
      name = "?";
    std::snprintf(line, sizeof(line), "%d\t%d\t%s\n", r.prompt_len + static_cast<int>(i), id,
                  name.c_str());
    s += line;
  }
  return s;
}

std::string semantic_ppm(const FrameRaster& f) {
  static const int palette[kNumSemClasses][3] = {
      {40, 40, 40},     // off-road
      {90, 90, 105},    // road
      {235, 235, 235},  // lane marking
      {240, 80, 60},    // agent
      {60, 160, 240},   // ego
  };
  std::string s = "P3\n" + std::to_string(f.cols) + " " + std::to_string(f.rows) + "\n255\n";
  for (int r = 0; r < f.rows; ++r) {
    for (int c = 0; c < f.cols; ++c) {
      int cls = std::min<int>(f.sem_at(r, c), kNumSemClasses - 1);
      s += std::to_string(palette[cls][0]) + " " + std::to_string(palette[cls][1]) + " " +
           std::to_string(palette[cls][2]);
      s += c + 1 == f.cols ? "\n" : " ";
    }
  }
  return s;
}

std::string depth_pgm(const FrameRaster& f, double max_depth) {
  if (max_depth <= 0) throw ConfigError("depth scale must be positive");
  std::string s = "P2\n" + std::to_string(f.cols) + " " + std::to_string(f.rows) + "\n255\n";
  for (int r = 0; r < f.rows; ++r) {
    for (int c = 0; c < f.cols; ++c) {
      int g = static_cast<int>(std::lround(255.0 * std::clamp(
                                               static_cast<double>(f.depth_at(r, c)) / max_depth,
                                               0.0, 1.0)));
      s += std::to_string(g);
      s += c + 1 == f.cols ? "\n" : " ";
    }
  }
  return s;
}

}  // namespace driveweave
