#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "driveweave/layout.hpp"
#include "driveweave/tape.hpp"

namespace driveweave {

struct ModelConfig {
  int vocab = 1056;   // specials + contextual codes + dynamic codes
  int d = 128;
  int layers = 4;
  int heads = 4;
  int dff = 512;
  int max_len = 2048;
  int ego_dim = 7;       // vx, vy, ax, ay, 3-way command one-hot
  int act_hidden = 128;  // waypoint head hidden width
  double depth_range = 60.0;  // divisor normalizing raw depth cells
  uint64_t seed = 0;
};

// Named parameter arrays in a fixed order so checkpoints, gradients, and
// optimizer state all align index-for-index.
template <typename T>
struct ModelParams {
  ModelConfig cfg;
  std::vector<std::string> names;
  std::vector<MatX<T>> arrays;
  std::unordered_map<std::string, int> index;

  int add(const std::string& name, MatX<T> m) {
    index[name] = static_cast<int>(names.size());
    names.push_back(name);
    arrays.push_back(std::move(m));
    return static_cast<int>(names.size()) - 1;
  }
  const MatX<T>& at(const std::string& name) const {
    auto it = index.find(name);
    if (it == index.end()) throw ConfigError("unknown parameter array '" + name + "'");
    return arrays[static_cast<size_t>(it->second)];
  }
  MatX<T>& at(const std::string& name) {
    auto it = index.find(name);
    if (it == index.end()) throw ConfigError("unknown parameter array '" + name + "'");
    return arrays[static_cast<size_t>(it->second)];
  }
  int64_t count() const {
    int64_t n = 0;
    for (const auto& a : arrays) n += static_cast<int64_t>(a.size());
    return n;
  }
};

template <typename T>
ModelParams<T> init_params(const ModelConfig& cfg);

template <typename T>
struct DepthFeatures {
  Branch branch = Branch::kContextual;
  MatX<T> feats;  // [tokens x d]
};

// One contiguous run of visual tokens belonging to a single frame block.
struct FrameSpan {
  int start = 0;
  int count = 0;
  int frame_index = -1;
  TokenKind kind = TokenKind::kDynVis;
};
std::vector<FrameSpan> frame_spans(const TokenSequence& seq);
std::vector<FrameSpan> history_frame_spans(const TokenSequence& seq);

template <typename T>
DepthFeatures<T> encode_depth(const ModelParams<T>& p, const FrameRaster& raster,
                              Branch branch);

template <typename T>
MatX<T> fuse_depth(const ModelParams<T>& p, const MatX<T>& queries,
                   const DepthFeatures<T>& feats, Branch query_branch);

// Token + positional embeddings with the ego slot projected and history
// frames depth-fused when rasters are supplied (aligned with
// history_frame_spans order; empty disables fusion).
template <typename T>
MatX<T> embed_sequence(const ModelParams<T>& p, const TokenSequence& seq,
                       const EgoStatus& ego, const std::vector<const FrameRaster*>& depth);

// Taped forward pass: parameter leaves, final embeddings, hidden states,
// full-vocabulary logits, and one [1 x 2] waypoint output per action query.
template <typename T>
struct Graph {
  Tape<T> tape;
  std::vector<int> param_leaf;
  int embeddings = -1;
  int hidden = -1;
  int logits = -1;
  std::vector<int> action_out;
  std::vector<int> action_pos;
};

template <typename T>
Graph<T> build_graph(const ModelParams<T>& p, const TokenSequence& seq,
                     const EgoStatus& ego, const std::vector<const FrameRaster*>& depth,
                     const AttentionMask& mask);

// Per-layer projected keys/values for every processed position.
template <typename T>
struct KVCache {
  int len = 0;
  std::vector<MatX<T>> k, v;  // layers x [len x d]

  void init(const ModelConfig& cfg) {
    len = 0;
    k.assign(static_cast<size_t>(cfg.layers), MatX<T>());
    v.assign(static_cast<size_t>(cfg.layers), MatX<T>());
  }
  void truncate(int new_len) {
    if (new_len < 0 || new_len > len)
      throw ConfigError("cache truncate to " + std::to_string(new_len) +
                        " outside current length " + std::to_string(len));
    for (auto& m : k) m.conservativeResize(new_len, Eigen::NoChange);
    for (auto& m : v) m.conservativeResize(new_len, Eigen::NoChange);
    len = new_len;
  }
};

template <typename T>
struct ForwardOut {
  MatX<T> logits;  // [m x vocab]
  MatX<T> hidden;  // [m x d]
};

// Appends m new positions to the cache and returns their outputs. Rows may
// attend forward within the chunk (bidirectional frame interiors), bounded
// by allow_until in global positions.
template <typename T>
ForwardOut<T> incremental_forward(const ModelParams<T>& p, KVCache<T>& cache,
                                  const MatX<T>& new_embeds,
                                  const std::vector<int>& allow_until);

// Whole sequence in one chunk from an empty cache.
template <typename T>
ForwardOut<T> full_forward(const ModelParams<T>& p, const MatX<T>& embeds,
                           const AttentionMask& mask);

template <typename T>
Vec2 action_head(const ModelParams<T>& p, const MatX<T>& hidden_row);

ModelParams<double> to_double(const ModelParams<float>& p);
ModelParams<float> to_float(const ModelParams<double>& p);

void save_checkpoint(const ModelParams<float>& p, int64_t step,
                     const std::string& json_path, const std::string& blob_path);
struct Checkpoint {
  ModelParams<float> params;
  int64_t step = 0;
};
Checkpoint load_checkpoint(const std::string& json_path);

// ---- implementation of the templated pieces ----

template <typename T>
ModelParams<T> init_params(const ModelConfig& cfg) {
  if (cfg.d % cfg.heads != 0)
    throw ConfigError("model width " + std::to_string(cfg.d) +
                      " is not divisible by " + std::to_string(cfg.heads) + " heads");
  ModelParams<T> p;
  p.cfg = cfg;
  Rng root(cfg.seed);

  auto randn = [&root](const std::string& tag, int rows, int cols, double sd) {
    Rng r = root.derive(tag);
    MatX<T> m(rows, cols);
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) m(i, j) = static_cast<T>(r.normal() * sd);
    return m;
  };
  auto zeros = [](int rows, int cols) { return MatX<T>::Zero(rows, cols); };
  auto ones = [](int rows, int cols) { return MatX<T>::Ones(rows, cols); };

  const double sd = 0.02;
  p.add("embed", randn("embed", cfg.vocab, cfg.d, sd));
  p.add("pos", randn("pos", cfg.max_len, cfg.d, sd));
  for (int l = 0; l < cfg.layers; ++l) {
    std::string pre = "L" + std::to_string(l) + ".";
    p.add(pre + "ln1.scale", ones(1, cfg.d));
    p.add(pre + "ln1.offset", zeros(1, cfg.d));
    p.add(pre + "attn.wq", randn(pre + "attn.wq", cfg.d, cfg.d, sd));
    p.add(pre + "attn.bq", zeros(1, cfg.d));
    p.add(pre + "attn.wk", randn(pre + "attn.wk", cfg.d, cfg.d, sd));
    p.add(pre + "attn.bk", zeros(1, cfg.d));
    p.add(pre + "attn.wv", randn(pre + "attn.wv", cfg.d, cfg.d, sd));
    p.add(pre + "attn.bv", zeros(1, cfg.d));
    p.add(pre + "attn.wo", randn(pre + "attn.wo", cfg.d, cfg.d, sd));
    p.add(pre + "attn.bo", zeros(1, cfg.d));
    p.add(pre + "ln2.scale", ones(1, cfg.d));
    p.add(pre + "ln2.offset", zeros(1, cfg.d));
    p.add(pre + "ff.w1", randn(pre + "ff.w1", cfg.d, cfg.dff, sd));
    p.add(pre + "ff.b1", zeros(1, cfg.dff));
    p.add(pre + "ff.w2", randn(pre + "ff.w2", cfg.dff, cfg.d, sd));
    p.add(pre + "ff.b2", zeros(1, cfg.d));
  }
  p.add("lnf.scale", ones(1, cfg.d));
  p.add("lnf.offset", zeros(1, cfg.d));
  p.add("out.w", randn("out.w", cfg.d, cfg.vocab, sd));
  p.add("out.b", zeros(1, cfg.vocab));
  p.add("ego.w1", randn("ego.w1", cfg.ego_dim, cfg.d, sd));
  p.add("ego.b1", zeros(1, cfg.d));
  p.add("ego.w2", randn("ego.w2", cfg.d, cfg.d, sd));
  p.add("ego.b2", zeros(1, cfg.d));
  for (const char* enc : {"cde", "dde"}) {
    std::string pre = std::string(enc) + ".";
    p.add(pre + "proj.w", randn(pre + "proj.w", kPatch * kPatch, cfg.d, sd));
    p.add(pre + "proj.b", zeros(1, cfg.d));
    p.add(pre + "mlp.w1", randn(pre + "mlp.w1", cfg.d, cfg.d, sd));
    p.add(pre + "mlp.b1", zeros(1, cfg.d));
    p.add(pre + "mlp.w2", randn(pre + "mlp.w2", cfg.d, cfg.d, sd));
    p.add(pre + "mlp.b2", zeros(1, cfg.d));
  }
  // Fusion starts at exact zero so depth is a no-op until trained.
  for (const char* path : {"fuse.ctx", "fuse.dyn"}) {
    std::string pre = std::string(path) + ".";
    p.add(pre + "wk", zeros(cfg.d, cfg.d));
    p.add(pre + "bk", zeros(1, cfg.d));
    p.add(pre + "wv", zeros(cfg.d, cfg.d));
    p.add(pre + "bv", zeros(1, cfg.d));
  }
  p.add("act.w1", randn("act.w1", cfg.d, cfg.act_hidden, sd));
  p.add("act.b1", zeros(1, cfg.act_hidden));
  p.add("act.w2", randn("act.w2", cfg.act_hidden, 2, sd));
  p.add("act.b2", zeros(1, 2));
  return p;
}

namespace detail {

// Patch rows of normalized depth, matching the semantic patch raster order.
template <typename T>
MatX<T> depth_patch_matrix(const FrameRaster& raster, double range) {
  if (raster.rows % kPatch != 0 || raster.cols % kPatch != 0)
    throw DataError("depth raster " + std::to_string(raster.rows) + "x" +
                    std::to_string(raster.cols) + " is not divisible into patches");
  int pr = raster.rows / kPatch, pc = raster.cols / kPatch;
  MatX<T> out(pr * pc, kPatch * kPatch);
  for (int bi = 0; bi < pr; ++bi)
    for (int bj = 0; bj < pc; ++bj) {
      int row = bi * pc + bj;
      for (int i = 0; i < kPatch; ++i)
        for (int j = 0; j < kPatch; ++j)
          out(row, i * kPatch + j) = static_cast<T>(
              raster.depth_at(bi * kPatch + i, bj * kPatch + j) / range);
    }
  return out;
}

inline const char* enc_prefix(Branch b) {
  return b == Branch::kContextual ? "cde" : "dde";
}
inline const char* fuse_prefix(Branch b) {
  return b == Branch::kContextual ? "fuse.ctx" : "fuse.dyn";
}

}  // namespace detail

template <typename T>
DepthFeatures<T> encode_depth(const ModelParams<T>& p, const FrameRaster& raster,
                              Branch branch) {
  std::string pre = std::string(detail::enc_prefix(branch)) + ".";
  MatX<T> x = detail::depth_patch_matrix<T>(raster, p.cfg.depth_range);
  MatX<T> t0 = (x * p.at(pre + "proj.w")).rowwise() + p.at(pre + "proj.b").row(0);
  MatX<T> t1 = (t0 * p.at(pre + "mlp.w1")).rowwise() + p.at(pre + "mlp.b1").row(0);
  t1 = t1.unaryExpr(&Tape<T>::gelu_fn);
  DepthFeatures<T> out;
  out.branch = branch;
  out.feats = (t1 * p.at(pre + "mlp.w2")).rowwise() + p.at(pre + "mlp.b2").row(0);
  return out;
}

template <typename T>
MatX<T> fuse_depth(const ModelParams<T>& p, const MatX<T>& queries,
                   const DepthFeatures<T>& feats, Branch query_branch) {
  if (feats.branch != query_branch)
    throw ConfigError(std::string("depth features for the ") + branch_name(feats.branch) +
                      " branch cannot fuse into " + branch_name(query_branch) + " queries");
  if (queries.rows() != feats.feats.rows())
    throw ConfigError("fusion query count " + std::to_string(queries.rows()) +
                      " does not match feature count " + std::to_string(feats.feats.rows()));
  std::string pre = std::string(detail::fuse_prefix(query_branch)) + ".";
  MatX<T> K = (feats.feats * p.at(pre + "wk")).rowwise() + p.at(pre + "bk").row(0);
  MatX<T> V = (feats.feats * p.at(pre + "wv")).rowwise() + p.at(pre + "bv").row(0);
  T scale = T(1) / std::sqrt(static_cast<T>(p.cfg.d));
  MatX<T> scores = (queries * K.transpose()) * scale;
  MatX<T> probs(scores.rows(), scores.cols());
  for (int r = 0; r < scores.rows(); ++r) {
    T mx = scores.row(r).maxCoeff();
    Eigen::Array<T, 1, Eigen::Dynamic> e = (scores.row(r).array() - mx).exp();
    probs.row(r) = (e / e.sum()).matrix();
  }
  return queries + probs * V;
}

inline std::vector<FrameSpan> frame_spans(const TokenSequence& seq) {
  std::vector<FrameSpan> out;
  int n = seq.size();
  for (int i = 0; i < n;) {
    const TokenMeta& m = seq.meta[static_cast<size_t>(i)];
    bool visual = m.kind == TokenKind::kCtxVis || m.kind == TokenKind::kDynVis;
    if (!visual) {
      ++i;
      continue;
    }
    int j = i;
    while (j < n && seq.meta[static_cast<size_t>(j)].frame_index == m.frame_index &&
           (seq.meta[static_cast<size_t>(j)].kind == TokenKind::kCtxVis ||
            seq.meta[static_cast<size_t>(j)].kind == TokenKind::kDynVis))
      ++j;
    out.push_back(FrameSpan{i, j - i, m.frame_index, m.kind});
    i = j;
  }
  return out;
}

inline std::vector<FrameSpan> history_frame_spans(const TokenSequence& seq) {
  std::vector<FrameSpan> out;
  for (const FrameSpan& s : frame_spans(seq))
    if (s.start < seq.prompt_len) out.push_back(s);
  return out;
}

namespace detail {

template <typename T>
MatX<T> ego_vector(const EgoStatus& ego) {
  MatX<T> e = MatX<T>::Zero(1, 7);
  e(0, 0) = static_cast<T>(ego.velocity.x);
  e(0, 1) = static_cast<T>(ego.velocity.y);
  e(0, 2) = static_cast<T>(ego.acceleration.x);
  e(0, 3) = static_cast<T>(ego.acceleration.y);
  e(0, 4 + static_cast<int>(ego.command)) = T(1);
  return e;
}

inline int find_ego_pos(const TokenSequence& seq) {
  for (int i = 0; i < seq.size(); ++i)
    if (seq.meta[static_cast<size_t>(i)].kind == TokenKind::kEgoTok) return i;
  return -1;
}

template <typename T>
void check_depth_inputs(const std::vector<FrameSpan>& spans,
                        const std::vector<const FrameRaster*>& depth) {
  if (depth.empty()) return;
  if (depth.size() != spans.size())
    throw ConfigError("got " + std::to_string(depth.size()) + " depth rasters for " +
                      std::to_string(spans.size()) + " history frames");
}

}  // namespace detail

template <typename T>
MatX<T> embed_sequence(const ModelParams<T>& p, const TokenSequence& seq,
                       const EgoStatus& ego, const std::vector<const FrameRaster*>& depth) {
  int n = seq.size();
  if (n > p.cfg.max_len)
    throw ConfigError("sequence length " + std::to_string(n) +
                      " exceeds the positional table length " +
                      std::to_string(p.cfg.max_len));
  const MatX<T>& table = p.at("embed");
  const MatX<T>& pos = p.at("pos");
  MatX<T> out(n, p.cfg.d);
  for (int i = 0; i < n; ++i) {
    int id = seq.ids[static_cast<size_t>(i)];
    if (id < 0 || id >= p.cfg.vocab)
      throw DataError("token id " + std::to_string(id) + " outside vocabulary of " +
                      std::to_string(p.cfg.vocab));
    out.row(i) = table.row(id) + pos.row(i);
  }
  int ego_pos = detail::find_ego_pos(seq);
  if (ego_pos >= 0) {
    MatX<T> e = detail::ego_vector<T>(ego);
    MatX<T> h = (e * p.at("ego.w1")).rowwise() + p.at("ego.b1").row(0);
    h = h.unaryExpr(&Tape<T>::gelu_fn);
    MatX<T> proj = (h * p.at("ego.w2")).rowwise() + p.at("ego.b2").row(0);
    out.row(ego_pos) = proj.row(0) + pos.row(ego_pos);
  }
  auto spans = history_frame_spans(seq);
  detail::check_depth_inputs<T>(spans, depth);
  if (!depth.empty()) {
    for (size_t s = 0; s < spans.size(); ++s) {
      Branch b = spans[s].kind == TokenKind::kCtxVis ? Branch::kContextual : Branch::kDynamic;
      DepthFeatures<T> feats = encode_depth(p, *depth[s], b);
      MatX<T> q = out.middleRows(spans[s].start, spans[s].count);
      out.middleRows(spans[s].start, spans[s].count) = fuse_depth(p, q, feats, b);
    }
  }
  return out;
}

template <typename T>
Graph<T> build_graph(const ModelParams<T>& p, const TokenSequence& seq,
                     const EgoStatus& ego, const std::vector<const FrameRaster*>& depth,
                     const AttentionMask& mask) {
  int n = seq.size();
  if (mask.n != n)
    throw ConfigError("mask covers " + std::to_string(mask.n) + " positions but the sequence has " +
                      std::to_string(n));
  if (n > p.cfg.max_len)
    throw ConfigError("sequence length " + std::to_string(n) +
                      " exceeds the positional table length " +
                      std::to_string(p.cfg.max_len));

  Graph<T> g;
  Tape<T>& t = g.tape;
  g.param_leaf.reserve(p.arrays.size());
  for (const auto& a : p.arrays) g.param_leaf.push_back(t.leaf(a));
  auto P = [&](const std::string& name) {
    return g.param_leaf[static_cast<size_t>(p.index.at(name))];
  };

  for (int id : seq.ids)
    if (id < 0 || id >= p.cfg.vocab)
      throw DataError("token id " + std::to_string(id) + " outside vocabulary of " +
                      std::to_string(p.cfg.vocab));
  std::vector<int> iota(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) iota[static_cast<size_t>(i)] = i;
  int pos_rows = t.gather_rows(P("pos"), iota);
  int base = t.add(t.gather_rows(P("embed"), seq.ids), pos_rows);

  std::vector<typename Tape<T>::Overwrite> spans_ow;
  int ego_pos = detail::find_ego_pos(seq);
  if (ego_pos >= 0) {
    int e = t.leaf(detail::ego_vector<T>(ego));
    int h = t.gelu(t.add_row(t.matmul(e, P("ego.w1")), P("ego.b1")));
    int proj = t.add_row(t.matmul(h, P("ego.w2")), P("ego.b2"));
    int with_pos = t.add(proj, t.slice_rows(pos_rows, ego_pos, 1));
    spans_ow.push_back({ego_pos, with_pos});
  }

  auto hspans = history_frame_spans(seq);
  detail::check_depth_inputs<T>(hspans, depth);
  if (!depth.empty()) {
    T fuse_scale = T(1) / std::sqrt(static_cast<T>(p.cfg.d));
    for (size_t s = 0; s < hspans.size(); ++s) {
      const FrameSpan& sp = hspans[s];
      Branch b = sp.kind == TokenKind::kCtxVis ? Branch::kContextual : Branch::kDynamic;
      std::string enc = std::string(detail::enc_prefix(b)) + ".";
      std::string fus = std::string(detail::fuse_prefix(b)) + ".";
      int x = t.leaf(detail::depth_patch_matrix<T>(*depth[s], p.cfg.depth_range));
      if (t.val(x).rows() != sp.count)
        throw DataError("depth raster yields " + std::to_string(t.val(x).rows()) +
                        " patches for a frame of " + std::to_string(sp.count) + " tokens");
      int t0 = t.add_row(t.matmul(x, P(enc + "proj.w")), P(enc + "proj.b"));
      int t1 = t.gelu(t.add_row(t.matmul(t0, P(enc + "mlp.w1")), P(enc + "mlp.b1")));
      int feats = t.add_row(t.matmul(t1, P(enc + "mlp.w2")), P(enc + "mlp.b2"));
      int K = t.add_row(t.matmul(feats, P(fus + "wk")), P(fus + "bk"));
      int V = t.add_row(t.matmul(feats, P(fus + "wv")), P(fus + "bv"));
      int q = t.slice_rows(base, sp.start, sp.count);
      int scores = t.scale(t.matmul_nt(q, K), fuse_scale);
      std::vector<int> full(static_cast<size_t>(sp.count),
                            static_cast<int>(t.val(K).rows()) - 1);
      int probs = t.softmax_rows(scores, full);
      int fused = t.add(q, t.matmul(probs, V));
      spans_ow.push_back({sp.start, fused});
    }
  }
  int x = spans_ow.empty() ? base : t.overwrite_rows(base, spans_ow);
  g.embeddings = x;

  int dh = p.cfg.d / p.cfg.heads;
  T att_scale = T(1) / std::sqrt(static_cast<T>(dh));
  for (int l = 0; l < p.cfg.layers; ++l) {
    std::string pre = "L" + std::to_string(l) + ".";
    int ln1 = t.layernorm(x, P(pre + "ln1.scale"), P(pre + "ln1.offset"));
    int q = t.add_row(t.matmul(ln1, P(pre + "attn.wq")), P(pre + "attn.bq"));
    int k = t.add_row(t.matmul(ln1, P(pre + "attn.wk")), P(pre + "attn.bk"));
    int v = t.add_row(t.matmul(ln1, P(pre + "attn.wv")), P(pre + "attn.bv"));
    std::vector<int> heads_out;
    for (int h = 0; h < p.cfg.heads; ++h) {
      int qh = t.slice_cols(q, h * dh, dh);
      int kh = t.slice_cols(k, h * dh, dh);
      int vh = t.slice_cols(v, h * dh, dh);
      int sc = t.scale(t.matmul_nt(qh, kh), att_scale);
      int pr = t.softmax_rows(sc, mask.allow_until);
      heads_out.push_back(t.matmul(pr, vh));
    }
    int cat = t.concat_cols(heads_out);
    int attn = t.add_row(t.matmul(cat, P(pre + "attn.wo")), P(pre + "attn.bo"));
    x = t.add(x, attn);
    int ln2 = t.layernorm(x, P(pre + "ln2.scale"), P(pre + "ln2.offset"));
    int f1 = t.gelu(t.add_row(t.matmul(ln2, P(pre + "ff.w1")), P(pre + "ff.b1")));
    int f2 = t.add_row(t.matmul(f1, P(pre + "ff.w2")), P(pre + "ff.b2"));
    x = t.add(x, f2);
  }
  g.hidden = t.layernorm(x, P("lnf.scale"), P("lnf.offset"));
  g.logits = t.add_row(t.matmul(g.hidden, P("out.w")), P("out.b"));

  for (int i = 0; i < n; ++i) {
    if (seq.meta[static_cast<size_t>(i)].kind != TokenKind::kActionQueryTok) continue;
    int hrow = t.slice_rows(g.hidden, i, 1);
    int a1 = t.gelu(t.add_row(t.matmul(hrow, P("act.w1")), P("act.b1")));
    g.action_out.push_back(t.add_row(t.matmul(a1, P("act.w2")), P("act.b2")));
    g.action_pos.push_back(i);
  }
  return g;
}

template <typename T>
ForwardOut<T> incremental_forward(const ModelParams<T>& p, KVCache<T>& cache,
                                  const MatX<T>& new_embeds,
                                  const std::vector<int>& allow_until) {
  int m = static_cast<int>(new_embeds.rows());
  if (static_cast<int>(allow_until.size()) != m)
    throw ConfigError("allow bounds cover " + std::to_string(allow_until.size()) +
                      " rows but the chunk has " + std::to_string(m));
  if (static_cast<int>(cache.k.size()) != p.cfg.layers)
    throw ConfigError("cache was not initialized for this model");
  int base = cache.len;
  int total = base + m;
  if (total > p.cfg.max_len)
    throw ConfigError("context of " + std::to_string(total) +
                      " positions exceeds the model maximum " +
                      std::to_string(p.cfg.max_len));
  for (int r = 0; r < m; ++r) {
    int hi = allow_until[static_cast<size_t>(r)];
    if (hi < 0 || hi >= total)
      throw ConfigError("allow bound " + std::to_string(hi) + " for new position " +
                        std::to_string(base + r) + " is outside the context of " +
                        std::to_string(total));
  }

  auto layer_norm = [&](const MatX<T>& x, const std::string& s, const std::string& o) {
    MatX<T> out(x.rows(), x.cols());
    const MatX<T>& sc = p.at(s);
    const MatX<T>& of = p.at(o);
    for (int r = 0; r < x.rows(); ++r) {
      T mean = x.row(r).mean();
      T var = (x.row(r).array() - mean).square().sum() / static_cast<T>(x.cols());
      T rstd = T(1) / std::sqrt(var + T(1e-5));
      out.row(r) = (((x.row(r).array() - mean) * rstd) * sc.row(0).array() +
                    of.row(0).array())
                       .matrix();
    }
    return out;
  };

  int dh = p.cfg.d / p.cfg.heads;
  T att_scale = T(1) / std::sqrt(static_cast<T>(dh));
  MatX<T> x = new_embeds;
  for (int l = 0; l < p.cfg.layers; ++l) {
    std::string pre = "L" + std::to_string(l) + ".";
    MatX<T> ln1 = layer_norm(x, pre + "ln1.scale", pre + "ln1.offset");
    MatX<T> q = (ln1 * p.at(pre + "attn.wq")).rowwise() + p.at(pre + "attn.bq").row(0);
    MatX<T> k = (ln1 * p.at(pre + "attn.wk")).rowwise() + p.at(pre + "attn.bk").row(0);
    MatX<T> v = (ln1 * p.at(pre + "attn.wv")).rowwise() + p.at(pre + "attn.bv").row(0);
    MatX<T>& ck = cache.k[static_cast<size_t>(l)];
    MatX<T>& cv = cache.v[static_cast<size_t>(l)];
    ck.conservativeResize(total, p.cfg.d);
    cv.conservativeResize(total, p.cfg.d);
    ck.middleRows(base, m) = k;
    cv.middleRows(base, m) = v;

    MatX<T> attn(m, p.cfg.d);
    for (int h = 0; h < p.cfg.heads; ++h) {
      auto kh = ck.middleCols(h * dh, dh);
      auto vh = cv.middleCols(h * dh, dh);
      auto qh = q.middleCols(h * dh, dh);
      for (int r = 0; r < m; ++r) {
        int hi = allow_until[static_cast<size_t>(r)];
        Eigen::Array<T, 1, Eigen::Dynamic> sc =
            (qh.row(r) * kh.topRows(hi + 1).transpose()).array() * att_scale;
        T mx = sc.maxCoeff();
        Eigen::Array<T, 1, Eigen::Dynamic> e = (sc - mx).exp();
        e /= e.sum();
        attn.block(r, h * dh, 1, dh) = e.matrix() * vh.topRows(hi + 1);
      }
    }
    MatX<T> proj = (attn * p.at(pre + "attn.wo")).rowwise() + p.at(pre + "attn.bo").row(0);
    x += proj;
    MatX<T> ln2 = layer_norm(x, pre + "ln2.scale", pre + "ln2.offset");
    MatX<T> f1 = ((ln2 * p.at(pre + "ff.w1")).rowwise() + p.at(pre + "ff.b1").row(0))
                     .unaryExpr(&Tape<T>::gelu_fn);
    MatX<T> f2 = (f1 * p.at(pre + "ff.w2")).rowwise() + p.at(pre + "ff.b2").row(0);
    x += f2;
  }
  cache.len = total;

  ForwardOut<T> out;
  out.hidden = layer_norm(x, "lnf.scale", "lnf.offset");
  out.logits = (out.hidden * p.at("out.w")).rowwise() + p.at("out.b").row(0);
  return out;
}

template <typename T>
ForwardOut<T> full_forward(const ModelParams<T>& p, const MatX<T>& embeds,
                           const AttentionMask& mask) {
  if (mask.n != embeds.rows())
    throw ConfigError("mask covers " + std::to_string(mask.n) +
                      " positions but embeddings have " + std::to_string(embeds.rows()));
  KVCache<T> cache;
  cache.init(p.cfg);
  return incremental_forward(p, cache, embeds, mask.allow_until);
}

template <typename T>
Vec2 action_head(const ModelParams<T>& p, const MatX<T>& hidden_row) {
  if (hidden_row.rows() != 1 || hidden_row.cols() != p.cfg.d)
    throw ConfigError("action head expects a single hidden row of width " +
                      std::to_string(p.cfg.d));
  MatX<T> a1 = ((hidden_row * p.at("act.w1")).rowwise() + p.at("act.b1").row(0))
                   .unaryExpr(&Tape<T>::gelu_fn);
  MatX<T> out = (a1 * p.at("act.w2")).rowwise() + p.at("act.b2").row(0);
  return Vec2{static_cast<double>(out(0, 0)), static_cast<double>(out(0, 1))};
}

}  // namespace driveweave
