#include "driveweave/tokenizer.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <unordered_set>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "driveweave/io.hpp"

namespace driveweave {

using json = nlohmann::ordered_json;
using MatrixRf = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

const char* branch_name(Branch b) {
  return b == Branch::kContextual ? "contextual" : "dynamic";
}

const char* Vocabulary::special_name(int id) {
  static const char* names[kNumSpecials] = {
      "<|pad|>", "<|soi|>", "<|eoi|>", "<|sod|>", "<|eod|>", "<|mmu|>", "<|t2d|>",
      "<|act|>", "<|sot|>", "<|eot|>", "<|sys|>", "<|usr|>", "<|ego|>", "<|aq|>",
  };
  return id >= 0 && id < kNumSpecials ? names[id] : "<|reserved|>";
}

void save_vocabulary(const Vocabulary& v, const std::string& path) {
  json j;
  j["format"] = "driveweave-vocab-v1";
  j["reserved"] = v.reserved;
  j["ctx_codes"] = v.ctx_codes;
  j["dyn_codes"] = v.dyn_codes;
  j["size"] = v.size();
  j["ctx_base"] = v.ctx_base();
  j["dyn_base"] = v.dyn_base();
  json sp;
  for (int i = 0; i < Vocabulary::kNumSpecials; ++i) sp[Vocabulary::special_name(i)] = i;
  j["specials"] = std::move(sp);
  write_text_file(path, j.dump(1));
}

std::vector<float> patch_vectors(const FrameRaster& raster) {
  if (raster.rows % kPatch != 0 || raster.cols % kPatch != 0)
    throw DataError("raster shape is not a multiple of the patch size");
  int prows = raster.rows / kPatch, pcols = raster.cols / kPatch;
  std::vector<float> out(static_cast<size_t>(prows) * pcols * kPatchDim, 0.0f);
  for (int pr = 0; pr < prows; ++pr)
    for (int pc = 0; pc < pcols; ++pc) {
      size_t base = (static_cast<size_t>(pr) * pcols + pc) * kPatchDim;
      for (int i = 0; i < kPatch; ++i)
        for (int j = 0; j < kPatch; ++j) {
          uint8_t cls = raster.sem_at(pr * kPatch + i, pc * kPatch + j);
          if (cls >= kNumSemClasses) throw DataError("semantic class outside palette");
          out[base + (static_cast<size_t>(i) * kPatch + j) * kNumSemClasses + cls] = 1.0f;
        }
    }
  return out;
}

namespace {

double dist2(const float* a, const float* b, int P) {
  double d = 0.0;
  for (int i = 0; i < P; ++i) {
    double t = static_cast<double>(a[i]) - b[i];
    d += t * t;
  }
  return d;
}

int count_distinct_up_to(const std::vector<float>& samples, int n, int P, int limit) {
  std::unordered_set<std::string> seen;
  for (int i = 0; i < n; ++i) {
    seen.insert(std::string(reinterpret_cast<const char*>(samples.data() + static_cast<size_t>(i) * P),
                            sizeof(float) * P));
    if (static_cast<int>(seen.size()) >= limit) return limit;
  }
  return static_cast<int>(seen.size());
}

}  // namespace

Codebook fit_codebook(const std::vector<float>& samples, int P, int K, Branch branch,
                      uint64_t seed) {
  if (P <= 0 || samples.size() % static_cast<size_t>(P) != 0)
    throw ConfigError("sample buffer is not a whole number of vectors");
  int n = static_cast<int>(samples.size() / static_cast<size_t>(P));
  if (K < 2) throw ConfigError("codebook needs at least 2 entries");
  if (n < K) throw ConfigError("k-means needs at least K samples, got " + std::to_string(n) +
                               " for K=" + std::to_string(K));
  for (float f : samples)
    if (!std::isfinite(f)) throw DataError("non-finite sample fed to codebook fit");
  int distinct = count_distinct_up_to(samples, n, P, K);
  if (distinct < K)
    throw ConfigError("K=" + std::to_string(K) + " exceeds the " + std::to_string(distinct) +
                      " distinct samples (deficit " + std::to_string(K - distinct) + ")");

  Eigen::Map<const MatrixRf> X(samples.data(), n, P);
  MatrixRf C(K, P);
  Rng rng = Rng(seed).derive("kmeans++");

  // k-means++ seeding: squared-distance-weighted draws.
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  int first = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(n)));
  C.row(0) = X.row(first);
  for (int k = 1; k < K; ++k) {
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
      double d = dist2(samples.data() + static_cast<size_t>(i) * P, &C(k - 1, 0), P);
      d2[i] = std::min(d2[i], d);
      total += d2[i];
    }
    double r = rng.uniform() * total;
    int pick = n - 1;
    for (int i = 0; i < n; ++i) {
      r -= d2[i];
      if (r <= 0.0) {
        pick = i;
        break;
      }
    }
    C.row(k) = X.row(pick);
  }

  // Lloyd iterations.
  std::vector<int> assign(n, 0);
  std::vector<int> count(K, 0);
  Eigen::MatrixXd sums(K, P);
  int iters = 0;
  const int max_iters = 100;
  const double tol2 = 1e-6 * 1e-6;
  for (; iters < max_iters; ++iters) {
    // Assignment via G = X C^T; dist^2 = |x|^2 + |c|^2 - 2 x.c and |x|^2 is
    // constant per row, so argmin over |c|^2 - 2 x.c suffices.
    MatrixRf G = X * C.transpose();
    Eigen::VectorXd cn(K);
    for (int k = 0; k < K; ++k) cn(k) = C.row(k).cast<double>().squaredNorm();
    for (int i = 0; i < n; ++i) {
      int best = 0;
      double best_v = cn(0) - 2.0 * G(i, 0);
      for (int k = 1; k < K; ++k) {
        double v = cn(k) - 2.0 * G(i, k);
        if (v < best_v) {
          best_v = v;
          best = k;
        }
      }
      assign[i] = best;
    }

    sums.setZero();
    std::fill(count.begin(), count.end(), 0);
    for (int i = 0; i < n; ++i) {
      sums.row(assign[i]) += X.row(i).cast<double>();
      ++count[assign[i]];
    }

    MatrixRf next(K, P);
    for (int k = 0; k < K; ++k) {
      if (count[k] > 0)
        next.row(k) = (sums.row(k) / count[k]).cast<float>();
      else
        next.row(k) = C.row(k);  // refilled below
    }

    // Re-seed empty clusters from the farthest samples.
    std::vector<double> cur(n);
    for (int i = 0; i < n; ++i)
      cur[i] = dist2(samples.data() + static_cast<size_t>(i) * P, &next(assign[i], 0), P);
    for (int k = 0; k < K; ++k) {
      if (count[k] > 0) continue;
      int far = 0;
      for (int i = 1; i < n; ++i)
        if (cur[i] > cur[far]) far = i;
      next.row(k) = X.row(far);
      cur[far] = -1.0;  // one reseed per sample
    }

    double moved = 0.0;
    for (int k = 0; k < K; ++k)
      moved = std::max(moved, (next.row(k) - C.row(k)).cast<double>().squaredNorm());
    C = next;
    if (moved < tol2) {
      ++iters;
      break;
    }
  }

  Codebook cb;
  cb.branch = branch;
  cb.K = K;
  cb.P = P;
  cb.seed = seed;
  cb.iterations = iters;
  cb.centroids.assign(C.data(), C.data() + static_cast<size_t>(K) * P);
  cb.inertia = 0.0;
  for (int i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (int k = 0; k < K; ++k)
      best = std::min(best, dist2(samples.data() + static_cast<size_t>(i) * P,
                                  cb.centroid(k), P));
    cb.inertia += best;
  }
  return cb;
}

namespace {

void require_branch_shape(const Codebook& cb, int rows, int cols, const RasterGrid& grid) {
  if (rows != grid.rows || cols != grid.cols)
    throw DataError(std::string("raster shape does not match the ") + branch_name(cb.branch) +
                    " branch");
}

}  // namespace

FrameTokens encode_frame(const FrameRaster& raster, const Codebook& cb, const Vocabulary& v) {
  if (cb.P != kPatchDim) throw DataError("codebook patch dimension mismatch");
  if (raster.rows % kPatch != 0 || raster.cols % kPatch != 0 ||
      (raster.rows / kPatch) * (raster.cols / kPatch) == 0)
    throw DataError("raster shape is not patchable");
  if (cb.K > v.code_count(cb.branch))
    throw DataError("codebook larger than its vocabulary range");

  // Semantic rasters are exactly one-hot per cell, so x.c reduces to a
  // 16-entry gather and dist^2 ranking to |c|^2 - 2 x.c.
  std::vector<double> cn(cb.K);
  for (int k = 0; k < cb.K; ++k) {
    double s = 0.0;
    const float* c = cb.centroid(k);
    for (int i = 0; i < cb.P; ++i) s += static_cast<double>(c[i]) * c[i];
    cn[k] = s;
  }

  int prows = raster.rows / kPatch, pcols = raster.cols / kPatch;
  FrameTokens out;
  out.branch = cb.branch;
  out.timestamp = raster.timestamp;
  out.ids.resize(static_cast<size_t>(prows) * pcols);
  int base = v.code_base(cb.branch);
  std::array<int, kPatch * kPatch> active;
  for (int pr = 0; pr < prows; ++pr)
    for (int pc = 0; pc < pcols; ++pc) {
      for (int i = 0; i < kPatch; ++i)
        for (int j = 0; j < kPatch; ++j) {
          uint8_t cls = raster.sem_at(pr * kPatch + i, pc * kPatch + j);
          if (cls >= kNumSemClasses) throw DataError("semantic class outside palette");
          active[i * kPatch + j] = (i * kPatch + j) * kNumSemClasses + cls;
        }
      int best = 0;
      double best_v = std::numeric_limits<double>::infinity();
      for (int k = 0; k < cb.K; ++k) {
        const float* c = cb.centroid(k);
        double g = 0.0;
        for (int a : active) g += c[a];
        double val = cn[k] - 2.0 * g;
        if (val < best_v) {
          best_v = val;
          best = k;
        }
      }
      out.ids[static_cast<size_t>(pr) * pcols + pc] = base + best;
    }
  return out;
}

namespace {

uint8_t snap_class(const float* cell) {
  int best = 0;
  for (int ch = 1; ch < kNumSemClasses; ++ch)
    if (cell[ch] > cell[best]) best = ch;
  return static_cast<uint8_t>(best);
}

}  // namespace

FrameRaster decode_frame(const FrameTokens& toks, const Codebook& cb, const Vocabulary& v,
                         const RasterGrid& grid) {
  int prows = grid.rows / kPatch, pcols = grid.cols / kPatch;
  if (static_cast<int>(toks.ids.size()) != prows * pcols)
    throw DataError("token count does not match the grid patching");
  int base = v.code_base(cb.branch);
  FrameRaster out;
  out.rows = grid.rows;
  out.cols = grid.cols;
  out.cell_m = grid.cell_m;
  out.timestamp = toks.timestamp;
  size_t n = static_cast<size_t>(grid.rows) * grid.cols;
  out.semantic.assign(n, 0);
  out.depth.assign(n, 0.0f);
  for (int pr = 0; pr < prows; ++pr)
    for (int pc = 0; pc < pcols; ++pc) {
      int id = toks.ids[static_cast<size_t>(pr) * pcols + pc];
      int k = id - base;
      if (k < 0 || k >= cb.K)
        throw DataError("token id " + std::to_string(id) + " outside the " +
                        branch_name(cb.branch) + " range");
      const float* c = cb.centroid(k);
      for (int i = 0; i < kPatch; ++i)
        for (int j = 0; j < kPatch; ++j) {
          uint8_t cls = snap_class(c + (static_cast<size_t>(i) * kPatch + j) * kNumSemClasses);
          out.semantic[static_cast<size_t>(pr * kPatch + i) * grid.cols + pc * kPatch + j] =
              cls;
        }
    }
  return out;
}

FrameRaster decode_frame_conditioned(const FrameTokens& dyn_toks, const Codebook& dyn_cb,
                                     const FrameTokens& ctx_cond, const Codebook& ctx_cb,
                                     const Vocabulary& v, const RasterGrid& dyn_grid,
                                     const RasterGrid& ctx_grid) {
  FrameRaster dyn = decode_frame(dyn_toks, dyn_cb, v, dyn_grid);
  FrameRaster cond = decode_frame(ctx_cond, ctx_cb, v, ctx_grid);

  int prows = dyn_grid.rows / kPatch, pcols = dyn_grid.cols / kPatch;
  std::vector<char> is_static(static_cast<size_t>(prows) * pcols, 1);
  for (int pr = 0; pr < prows; ++pr)
    for (int pc = 0; pc < pcols; ++pc) {
      for (int i = 0; i < kPatch && is_static[pr * pcols + pc]; ++i)
        for (int j = 0; j < kPatch; ++j) {
          uint8_t cls = dyn.sem_at(pr * kPatch + i, pc * kPatch + j);
          if (cls != kOffRoad && cls != kRoad) {
            is_static[pr * pcols + pc] = 0;
            break;
          }
        }
    }

  FrameRaster out;
  out.rows = ctx_grid.rows;
  out.cols = ctx_grid.cols;
  out.cell_m = ctx_grid.cell_m;
  out.timestamp = dyn_toks.timestamp;
  size_t n = static_cast<size_t>(ctx_grid.rows) * ctx_grid.cols;
  out.semantic.assign(n, 0);
  out.depth.assign(n, 0.0f);
  for (int r = 0; r < ctx_grid.rows; ++r)
    for (int c = 0; c < ctx_grid.cols; ++c) {
      Vec2 local = ctx_grid.cell_center(r, c);
      int dc = dyn_grid.anchor_col + static_cast<int>(std::lround(local.x / dyn_grid.cell_m));
      int dr = dyn_grid.anchor_row - static_cast<int>(std::lround(local.y / dyn_grid.cell_m));
      dr = std::clamp(dr, 0, dyn_grid.rows - 1);
      dc = std::clamp(dc, 0, dyn_grid.cols - 1);
      uint8_t cls = is_static[(dr / kPatch) * pcols + dc / kPatch] ? cond.sem_at(r, c)
                                                                   : dyn.sem_at(dr, dc);
      out.semantic[static_cast<size_t>(r) * ctx_grid.cols + c] = cls;
    }
  return out;
}

int conditioning_index(int k) {
  if (k < 1) throw ConfigError("generation steps count from 1");
  return 2 * (k / 2);
}

void save_codebook(const Codebook& cb, const std::string& json_path,
                   const std::string& blob_path) {
  json j;
  j["format"] = "driveweave-codebook-v1";
  j["branch"] = branch_name(cb.branch);
  j["K"] = cb.K;
  j["P"] = cb.P;
  j["seed"] = cb.seed;
  j["iterations"] = cb.iterations;
  j["inertia"] = cb.inertia;
  j["blob_file"] = blob_path.substr(blob_path.find_last_of('/') + 1);
  BlobWriter blob;
  blob.put_f32(cb.centroids);
  blob.save(blob_path);
  write_text_file(json_path, j.dump(1));
}

Codebook load_codebook(const std::string& json_path) {
  json j;
  try {
    j = json::parse(read_text_file(json_path));
  } catch (const json::exception& e) {
    throw DataError("bad codebook header " + json_path + ": " + e.what());
  }
  if (j.value("format", "") != "driveweave-codebook-v1")
    throw DataError("unrecognised codebook format in " + json_path);
  Codebook cb;
  std::string br = j.at("branch");
  if (br == "contextual")
    cb.branch = Branch::kContextual;
  else if (br == "dynamic")
    cb.branch = Branch::kDynamic;
  else
    throw DataError("unknown codebook branch " + br);
  cb.K = j.at("K");
  cb.P = j.at("P");
  cb.seed = j.at("seed");
  cb.iterations = j.at("iterations");
  cb.inertia = j.at("inertia");
  std::string dir = json_path.substr(0, json_path.find_last_of('/') + 1);
  BlobReader blob(dir + j.at("blob_file").get<std::string>());
  cb.centroids = blob.get_f32(0, static_cast<size_t>(cb.K) * cb.P);
  if (blob.size() != sizeof(float) * cb.centroids.size())
    throw DataError("codebook blob size mismatch in " + json_path);
  for (float f : cb.centroids)
    if (!std::isfinite(f)) throw DataError("non-finite centroid in " + json_path);
  return cb;
}

}  // namespace driveweave
