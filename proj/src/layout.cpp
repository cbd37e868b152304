#include "driveweave/layout.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "driveweave/common.hpp"

namespace driveweave {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError(msg);
}

double tenths(int k) { return static_cast<double>(k) * 0.1; }
double halves(int k) { return static_cast<double>(k) * 0.5; }

}  // namespace

const char* token_kind_name(TokenKind k) {
  switch (k) {
    case TokenKind::kSpecialTok: return "SPECIAL";
    case TokenKind::kCtxVis: return "CTX_VIS";
    case TokenKind::kDynVis: return "DYN_VIS";
    case TokenKind::kEgoTok: return "EGO";
    case TokenKind::kActionQueryTok: return "ACTION_QUERY";
    case TokenKind::kTextStub: return "TEXT_STUB";
  }
  return "?";
}

char plan_letter(PlanKind p) {
  switch (p) {
    case PlanKind::kSchemeA: return 'A';
    case PlanKind::kSchemeB: return 'B';
    case PlanKind::kSchemeC: return 'C';
    case PlanKind::kSchemeD: return 'D';
    case PlanKind::kSchemeE: return 'E';
    case PlanKind::kFramesOnly: return 'F';
    case PlanKind::kActionsOnly: return 'Q';
  }
  return '?';
}

PlanKind plan_from_letter(char c) {
  switch (c) {
    case 'A': return PlanKind::kSchemeA;
    case 'B': return PlanKind::kSchemeB;
    case 'C': return PlanKind::kSchemeC;
    case 'D': return PlanKind::kSchemeD;
    case 'E': return PlanKind::kSchemeE;
    case 'F': return PlanKind::kFramesOnly;
    case 'Q': return PlanKind::kActionsOnly;
  }
  throw ConfigError(std::string("unknown plan letter '") + c + "'");
}

const char* history_mode_name(HistoryConfig::Mode m) {
  switch (m) {
    case HistoryConfig::kFull: return "full";
    case HistoryConfig::kOneSecond: return "1s";
    case HistoryConfig::kContextOnly: return "ctx";
    case HistoryConfig::kDynamicOnly: return "dyn";
  }
  return "?";
}

HistoryConfig::Mode history_mode_from_name(const std::string& s) {
  if (s == "full") return HistoryConfig::kFull;
  if (s == "1s") return HistoryConfig::kOneSecond;
  if (s == "ctx") return HistoryConfig::kContextOnly;
  if (s == "dyn") return HistoryConfig::kDynamicOnly;
  throw ConfigError("unknown history mode '" + s + "' (expected full, 1s, ctx, dyn)");
}

std::vector<FutureBlock> build_future_layout(PlanKind plan, int n_frames) {
  std::vector<FutureBlock> out;
  auto frame = [&out](double tau) { out.push_back({FutureBlock::kFrame, tau}); };
  auto action = [&out](double tau) { out.push_back({FutureBlock::kAction, tau}); };

  bool fixed = plan == PlanKind::kSchemeA || plan == PlanKind::kSchemeB ||
               plan == PlanKind::kSchemeC || plan == PlanKind::kSchemeD;
  require(!fixed || n_frames == 8,
          "schemes A-D are fixed 4 s patterns and require n_frames=8, got " +
              std::to_string(n_frames));
  require(n_frames >= 0, "n_frames must be non-negative");

  switch (plan) {
    case PlanKind::kSchemeA:
      // Sparse frames at 10 Hz, each followed by one 0.5 s-spaced action;
      // two trailing frames close out the first second.
      for (int j = 1; j <= 8; ++j) {
        frame(tenths(j));
        action(halves(j));
      }
      frame(tenths(9));
      frame(tenths(10));
      break;
    case PlanKind::kSchemeB:
      // Frame/action pairs through 0.9 s, the 1.0 s frame, then a dense
      // 10 Hz action tail out to 4 s.
      for (int j = 1; j <= 9; ++j) {
        frame(tenths(j));
        action(tenths(j));
      }
      frame(tenths(10));
      for (int k = 10; k <= 40; ++k) action(tenths(k));
      break;
    case PlanKind::kSchemeC:
      // Same pairs through 1.0 s, then a coarse 0.5 s action tail.
      for (int j = 1; j <= 9; ++j) {
        frame(tenths(j));
        action(tenths(j));
      }
      frame(tenths(10));
      action(halves(2));
      for (int m = 3; m <= 8; ++m) action(halves(m));
      break;
    case PlanKind::kSchemeD:
      // Every frame is followed by a full 1 s action window starting at the
      // frame's own timestamp; the final frame carries a mixed-resolution
      // window covering the whole horizon.
      for (int i = 1; i <= 9; ++i) {
        frame(tenths(i));
        for (int j = 0; j <= 9; ++j) action(tenths(i + j));
      }
      frame(tenths(10));
      for (int k = 1; k <= 20; ++k) action(tenths(k));
      for (int m = 5; m <= 8; ++m) action(halves(m));
      break;
    case PlanKind::kSchemeE:
      for (int k = 1; k <= n_frames; ++k) {
        frame(halves(k));
        action(halves(k));
      }
      break;
    case PlanKind::kFramesOnly:
      for (int j = 1; j <= n_frames; ++j) frame(tenths(j));
      break;
    case PlanKind::kActionsOnly:
      for (int k = 1; k <= n_frames; ++k) action(halves(k));
      break;
  }
  return out;
}

std::string layout_signature(const std::vector<FutureBlock>& blocks) {
  std::string out;
  char buf[32];
  for (size_t i = 0; i < blocks.size(); ++i) {
    if (i) out += ' ';
    std::snprintf(buf, sizeof(buf), "%c%.1f",
                  blocks[i].kind == FutureBlock::kFrame ? 'F' : 'A', blocks[i].tau);
    out += buf;
  }
  return out;
}

EpisodeTokens tokenize_episode(const EpisodeRecord& ep, const Codebook& ctx_cb,
                               const Codebook& dyn_cb, const Vocabulary& v) {
  EpisodeTokens out;
  out.ctx.reserve(ep.ctx_frames.size());
  for (const FrameRaster& f : ep.ctx_frames) out.ctx.push_back(encode_frame(f, ctx_cb, v));
  out.dyn.reserve(ep.dyn_frames.size());
  for (const FrameRaster& f : ep.dyn_frames) out.dyn.push_back(encode_frame(f, dyn_cb, v));
  return out;
}

namespace {

struct SeqBuilder {
  TokenSequence seq;
  int next_frame = 0;

  void special(int id) {
    seq.ids.push_back(id);
    seq.meta.push_back(TokenMeta{});
  }
  void special_at(int id, double t) {
    seq.ids.push_back(id);
    TokenMeta m;
    m.timestamp = t;
    m.has_timestamp = true;
    seq.meta.push_back(m);
  }
  void stub(int id) {
    seq.ids.push_back(id);
    TokenMeta m;
    m.kind = TokenKind::kTextStub;
    seq.meta.push_back(m);
  }
  // One delimited visual block; returns its frame index.
  int frame_block(const std::vector<int>& ids, TokenKind kind, double t, bool supervised,
                  const Vocabulary& v) {
    int fi = next_frame++;
    bool ctx = kind == TokenKind::kCtxVis;
    special_at(ctx ? Vocabulary::kSoi : Vocabulary::kSod, t);
    for (int id : ids) {
      bool in_range = ctx ? v.is_ctx_code(id) : v.is_dyn_code(id);
      if (!in_range)
        throw DataError("frame token " + std::to_string(id) + " outside the " +
                        std::string(branch_name(ctx ? Branch::kContextual : Branch::kDynamic)) +
                        " code range");
      seq.ids.push_back(id);
      TokenMeta m;
      m.kind = kind;
      m.frame_index = fi;
      m.timestamp = t;
      m.has_timestamp = true;
      m.supervised = supervised;
      seq.meta.push_back(m);
    }
    special_at(ctx ? Vocabulary::kEoi : Vocabulary::kEod, t);
    return fi;
  }
  void action_block(double t, bool supervised, Vec2 target) {
    special_at(Vocabulary::kAct, t);
    seq.ids.push_back(Vocabulary::kActionQuery);
    TokenMeta m;
    m.kind = TokenKind::kActionQueryTok;
    m.timestamp = t;
    m.has_timestamp = true;
    m.supervised = supervised;
    m.action_target = target;
    seq.meta.push_back(m);
    special_at(Vocabulary::kAct, t);
  }
};

}  // namespace

PromptBundle build_history_prompt(const EpisodeRecord& ep, const EpisodeTokens& toks,
                                  double anchor_t, const Vocabulary& v,
                                  const HistoryConfig& hc) {
  bool want_ctx = hc.mode != HistoryConfig::kDynamicOnly;
  bool want_dyn = hc.mode != HistoryConfig::kContextOnly;
  double span = hc.mode == HistoryConfig::kOneSecond ? 1.0 : 2.0;
  double dt = ep.wcfg.dt;

  if (std::abs(anchor_t - dt * std::lround(anchor_t / dt)) > 1e-9)
    throw DataError("anchor " + std::to_string(anchor_t) + " is not tick-aligned");
  if (want_ctx && std::abs(anchor_t - 0.5 * std::lround(anchor_t / 0.5)) > 1e-9)
    throw DataError("anchor " + std::to_string(anchor_t) +
                    " is not aligned to the 0.5 s contextual frame grid");
  if (anchor_t - span < -1e-9)
    throw DataError("anchor " + std::to_string(anchor_t) + " has less than " +
                    std::to_string(span) + " s of history");
  if (anchor_t > ep.duration + 1e-9)
    throw DataError("anchor " + std::to_string(anchor_t) + " is past the episode end " +
                    std::to_string(ep.duration));
  if (toks.ctx.size() != ep.ctx_frames.size() || toks.dyn.size() != ep.dyn_frames.size())
    throw DataError("episode token lists do not match the episode's frame lists");

  PromptBundle out;
  SeqBuilder b;
  b.seq.anchor_t = anchor_t;
  b.special(hc.task_token);
  if (hc.text_stubs) b.stub(Vocabulary::kSys);

  if (want_ctx) {
    int n_ctx = hc.mode == HistoryConfig::kOneSecond ? 2 : 3;
    for (int k = n_ctx - 1; k >= 0; --k) {
      double rel = -static_cast<double>(k);
      int idx = ep.ctx_index_of_time(anchor_t + rel);
      b.frame_block(toks.ctx[idx].ids, TokenKind::kCtxVis, rel, false, v);
      out.frames.push_back({Branch::kContextual, idx, rel});
    }
  }
  if (want_dyn) {
    int n_dyn = static_cast<int>(std::lround(span / dt));
    for (int k = n_dyn - 1; k >= 0; --k) {
      double rel = -dt * k;
      int idx = ep.tick_of_time(anchor_t + rel);
      b.frame_block(toks.dyn[idx].ids, TokenKind::kDynVis, rel, false, v);
      out.frames.push_back({Branch::kDynamic, idx, rel});
    }
  }

  b.special(Vocabulary::kSot);
  if (hc.text_stubs) b.stub(Vocabulary::kUsr);
  b.special(Vocabulary::kEot);
  b.seq.ids.push_back(Vocabulary::kEgoSlot);
  {
    TokenMeta m;
    m.kind = TokenKind::kEgoTok;
    m.timestamp = 0.0;
    m.has_timestamp = true;
    b.seq.meta.push_back(m);
  }
  b.seq.prompt_len = b.seq.size();

  int tick = ep.tick_of_time(anchor_t);
  out.ego = ego_status(ep.ticks[static_cast<size_t>(tick)].ego,
                       ep.ticks[static_cast<size_t>(tick)].command);
  out.seq = std::move(b.seq);
  return out;
}

TokenSequence assemble_training_sequence(const TokenSequence& prompt,
                                         const std::vector<FutureBlock>& layout,
                                         const FutureTargets& gt, const Vocabulary& v,
                                         PlanKind plan) {
  size_t n_frames = 0, n_actions = 0;
  for (const FutureBlock& blk : layout)
    (blk.kind == FutureBlock::kFrame ? n_frames : n_actions)++;
  require(gt.frames.size() == n_frames,
          "layout has " + std::to_string(n_frames) + " frame blocks but " +
              std::to_string(gt.frames.size()) + " frame targets were given");
  require(gt.waypoints.size() == n_actions,
          "layout has " + std::to_string(n_actions) + " action blocks but " +
              std::to_string(gt.waypoints.size()) + " waypoints were given");

  SeqBuilder b;
  b.seq = prompt;
  b.seq.plan = plan;
  b.next_frame = 0;
  for (const TokenMeta& m : prompt.meta)
    if (m.frame_index >= 0) b.next_frame = std::max(b.next_frame, m.frame_index + 1);

  size_t fi = 0, ai = 0;
  for (const FutureBlock& blk : layout) {
    if (blk.kind == FutureBlock::kFrame)
      b.frame_block(gt.frames[fi++].ids, TokenKind::kDynVis, blk.tau, true, v);
    else
      b.action_block(blk.tau, true, gt.waypoints[ai++]);
  }
  return b.seq;
}

AttentionMask build_attention_mask(const TokenSequence& seq) {
  int n = seq.size();
  int max_fi = -1;
  for (const TokenMeta& m : seq.meta) max_fi = std::max(max_fi, m.frame_index);
  std::vector<int> last_of(static_cast<size_t>(max_fi + 1), -1);
  for (int q = 0; q < n; ++q) {
    int fi = seq.meta[static_cast<size_t>(q)].frame_index;
    if (fi >= 0) last_of[static_cast<size_t>(fi)] = q;
  }

  AttentionMask mask;
  mask.n = n;
  mask.allow_until.resize(static_cast<size_t>(n));
  for (int q = 0; q < n; ++q) {
    const TokenMeta& m = seq.meta[static_cast<size_t>(q)];
    bool visual = m.kind == TokenKind::kCtxVis || m.kind == TokenKind::kDynVis;
    mask.allow_until[static_cast<size_t>(q)] =
        visual ? last_of[static_cast<size_t>(m.frame_index)] : q;
  }
  return mask;
}

std::vector<uint8_t> AttentionMask::dense() const {
  std::vector<uint8_t> out(static_cast<size_t>(n) * static_cast<size_t>(n), 0);
  for (int q = 0; q < n; ++q) {
    int hi = allow_until[static_cast<size_t>(q)];
    for (int k = 0; k <= hi; ++k)
      out[static_cast<size_t>(q) * static_cast<size_t>(n) + static_cast<size_t>(k)] = 1;
  }
  return out;
}

std::string sequence_tsv(const TokenSequence& seq, const Vocabulary& v) {
  std::string out = "index\tkind\tframe\ttime\tsupervised\tid\tname\n";
  char buf[160];
  for (int i = 0; i < seq.size(); ++i) {
    const TokenMeta& m = seq.meta[static_cast<size_t>(i)];
    int id = seq.ids[static_cast<size_t>(i)];
    std::string name;
    if (v.is_special(id))
      name = Vocabulary::special_name(id);
    else if (v.is_ctx_code(id))
      name = "ctx[" + std::to_string(id - v.ctx_base()) + "]";
    else
      name = "dyn[" + std::to_string(id - v.dyn_base()) + "]";
    char time_buf[32];
    if (m.has_timestamp)
      std::snprintf(time_buf, sizeof(time_buf), "%.1f", m.timestamp);
    else
      std::snprintf(time_buf, sizeof(time_buf), "-");
    std::snprintf(buf, sizeof(buf), "%d\t%s\t%d\t%s\t%d\t%d\t%s\n", i,
                  token_kind_name(m.kind), m.frame_index, time_buf, m.supervised ? 1 : 0,
                  id, name.c_str());
    out += buf;
  }
  return out;
}

std::string mask_pbm(const AttentionMask& m) {
  std::string out = "P1\n" + std::to_string(m.n) + " " + std::to_string(m.n) + "\n";
  out.reserve(out.size() + static_cast<size_t>(m.n) * static_cast<size_t>(m.n + 1));
  for (int q = 0; q < m.n; ++q) {
    int hi = m.allow_until[static_cast<size_t>(q)];
    for (int k = 0; k < m.n; ++k) out += (k <= hi) ? '1' : '0';
    out += '\n';
  }
  return out;
}

}  // namespace driveweave
