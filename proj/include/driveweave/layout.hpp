#pragma once

#include <string>
#include <vector>

#include "driveweave/tokenizer.hpp"
#include "driveweave/world.hpp"

namespace driveweave {

enum class TokenKind : int {
  kSpecialTok = 0,
  kCtxVis,
  kDynVis,
  kEgoTok,
  kActionQueryTok,
  kTextStub,
};
const char* token_kind_name(TokenKind k);

struct TokenMeta {
  TokenKind kind = TokenKind::kSpecialTok;
  int frame_index = -1;  // shared by all visual tokens of one frame block
  double timestamp = 0.0;  // seconds relative to the anchor
  bool has_timestamp = false;
  bool supervised = false;
  Vec2 action_target;  // regression target; valid on supervised action queries
};

// Future-block plans: the five ablation schemes plus the frames-only warmup
// plan and the actions-only plan used by the no-future-frames ablation.
enum class PlanKind : int {
  kSchemeA = 0,
  kSchemeB,
  kSchemeC,
  kSchemeD,
  kSchemeE,
  kFramesOnly,
  kActionsOnly,
};
char plan_letter(PlanKind p);          // 'A'..'E', 'F', 'Q'
PlanKind plan_from_letter(char c);     // inverse; ConfigError on unknown

struct TokenSequence {
  std::vector<int> ids;
  std::vector<TokenMeta> meta;
  PlanKind plan = PlanKind::kSchemeE;
  double anchor_t = 0.0;
  int prompt_len = 0;  // positions before the first future block

  int size() const { return static_cast<int>(ids.size()); }
};

struct HistoryConfig {
  enum Mode : int { kFull = 0, kOneSecond, kContextOnly, kDynamicOnly };
  Mode mode = kFull;
  bool text_stubs = true;                 // emit <|sys|>/<|usr|> filler tokens
  int task_token = Vocabulary::kMmu;      // leading task special
};
const char* history_mode_name(HistoryConfig::Mode m);
HistoryConfig::Mode history_mode_from_name(const std::string& s);

struct FutureBlock {
  enum Kind : int { kFrame = 0, kAction = 1 };
  Kind kind = kFrame;
  double tau = 0.0;  // seconds past the anchor
};

// Ordered future blocks for a plan. Schemes A-D are fixed 4 s patterns and
// require n_frames=8; scheme E emits n_frames 0.5 s frame/action pairs.
std::vector<FutureBlock> build_future_layout(PlanKind plan, int n_frames);

// Compact "F0.1 A0.5 ..." serialization used by the golden fixtures.
std::string layout_signature(const std::vector<FutureBlock>& blocks);

// All frames of one episode encoded once, so prompts over many anchors reuse
// the same token lists.
struct EpisodeTokens {
  std::vector<FrameTokens> ctx;  // one per stored contextual frame (0.5 s)
  std::vector<FrameTokens> dyn;  // one per tick
};
EpisodeTokens tokenize_episode(const EpisodeRecord& ep, const Codebook& ctx_cb,
                               const Codebook& dyn_cb, const Vocabulary& v);

// Which stored frames a prompt consumed, in block order; lets callers fetch
// the matching depth rasters without re-deriving the history schedule.
struct HistoryFrameRef {
  Branch branch = Branch::kContextual;
  int index = 0;    // into EpisodeRecord::ctx_frames or ::dyn_frames
  double rel_t = 0.0;
};

struct PromptBundle {
  TokenSequence seq;
  std::vector<HistoryFrameRef> frames;
  EgoStatus ego;
};

// Chat-style history prompt at the anchor: task special, system stub,
// contextual blocks, dynamic blocks, user stub, ego slot.
PromptBundle build_history_prompt(const EpisodeRecord& ep, const EpisodeTokens& toks,
                                  double anchor_t, const Vocabulary& v,
                                  const HistoryConfig& hc);

struct FutureTargets {
  std::vector<FrameTokens> frames;  // one per frame block, layout order
  std::vector<Vec2> waypoints;      // one per action block, layout order
};

// Prompt + teacher-forced future blocks. Frame blocks carry supervised
// ground-truth ids; action blocks carry a supervised query with its target.
TokenSequence assemble_training_sequence(const TokenSequence& prompt,
                                         const std::vector<FutureBlock>& layout,
                                         const FutureTargets& gt, const Vocabulary& v,
                                         PlanKind plan);

// Hybrid mask: visual tokens see everything through the end of their own
// frame block (bidirectional within the frame, causal before it); every
// other token is strictly causal. Each row's allowed keys form the single
// interval [0, allow_until[q]].
struct AttentionMask {
  int n = 0;
  std::vector<int> allow_until;

  bool allow(int q, int k) const { return k >= 0 && k <= allow_until[q]; }
  std::vector<uint8_t> dense() const;  // n*n row-major booleans
};
AttentionMask build_attention_mask(const TokenSequence& seq);

// Debug dumps: one row per token (index, kind, frame, time, supervised, id,
// name) and a PBM bitmap of the dense mask.
std::string sequence_tsv(const TokenSequence& seq, const Vocabulary& v);
std::string mask_pbm(const AttentionMask& m);

}  // namespace driveweave
