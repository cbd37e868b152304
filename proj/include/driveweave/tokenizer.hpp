#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "driveweave/world.hpp"

namespace driveweave {

enum class Branch : int { kContextual = 0, kDynamic = 1 };
const char* branch_name(Branch b);

// Square patch edge in cells; every raster side is a multiple of it.
constexpr int kPatch = 4;
// Patch vector dimension: 16 cells, one-hot over the semantic palette.
constexpr int kPatchDim = kPatch * kPatch * kNumSemClasses;

struct Codebook {
  Branch branch = Branch::kContextual;
  int K = 0;
  int P = kPatchDim;
  uint64_t seed = 0;
  int iterations = 0;    // Lloyd iterations run during fit
  double inertia = 0.0;  // final sum of squared sample-to-centroid distances
  std::vector<float> centroids;  // K x P, row-major

  const float* centroid(int k) const { return centroids.data() + static_cast<size_t>(k) * P; }
};

// Unified id space: [0, reserved) specials, then contextual codes, then
// dynamic codes.
struct Vocabulary {
  enum Special : int {
    kPad = 0,
    kSoi,
    kEoi,
    kSod,
    kEod,
    kMmu,
    kT2d,
    kAct,
    kSot,
    kEot,
    kSys,
    kUsr,
    kEgoSlot,
    kActionQuery,
    kNumSpecials,
  };

  int reserved = 32;
  int ctx_codes = 512;
  int dyn_codes = 512;

  int size() const { return reserved + ctx_codes + dyn_codes; }
  int ctx_base() const { return reserved; }
  int dyn_base() const { return reserved + ctx_codes; }
  bool is_special(int id) const { return id >= 0 && id < reserved; }
  bool is_ctx_code(int id) const { return id >= ctx_base() && id < ctx_base() + ctx_codes; }
  bool is_dyn_code(int id) const { return id >= dyn_base() && id < size(); }
  int code_base(Branch b) const { return b == Branch::kContextual ? ctx_base() : dyn_base(); }
  int code_count(Branch b) const { return b == Branch::kContextual ? ctx_codes : dyn_codes; }

  static const char* special_name(int id);  // valid for id < kNumSpecials
};

void save_vocabulary(const Vocabulary& v, const std::string& path);

struct FrameTokens {
  Branch branch = Branch::kDynamic;
  std::vector<int> ids;  // vocabulary ids, row-major patch order
  double timestamp = 0.0;
};

// Flattens a semantic raster into row-major 4x4 patch vectors, each cell
// one-hot over the palette (depth never enters the codebooks).
std::vector<float> patch_vectors(const FrameRaster& raster);

// k-means++ then Lloyd to movement tolerance 1e-6 or 100 iterations; empty
// clusters are re-seeded from the farthest sample. `samples` is n x P flat.
// Throws ConfigError when K exceeds the number of distinct samples.
Codebook fit_codebook(const std::vector<float>& samples, int P, int K, Branch branch,
                      uint64_t seed);

// Nearest-centroid ids for each patch, offset into the vocabulary range of
// the codebook's branch; ties break toward the lowest id.
FrameTokens encode_frame(const FrameRaster& raster, const Codebook& cb, const Vocabulary& v);

// Centroid-patch reconstruction; each cell snaps to the nearest class
// (highest one-hot channel, ties toward the lowest class id). Only the
// semantic grid is produced; depth is left zero.
FrameRaster decode_frame(const FrameTokens& toks, const Codebook& cb, const Vocabulary& v,
                         const RasterGrid& grid);

// Dynamic-frame decode with per-second visual guidance: the dynamic
// reconstruction is upsampled to contextual resolution and every cell whose
// source dynamic patch is static background (road/off-road only) is
// overwritten from the decoded contextual condition.
FrameRaster decode_frame_conditioned(const FrameTokens& dyn_toks, const Codebook& dyn_cb,
                                     const FrameTokens& ctx_cond, const Codebook& ctx_cb,
                                     const Vocabulary& v, const RasterGrid& dyn_grid,
                                     const RasterGrid& ctx_grid);

// Contextual frame offset (in 0.5 s steps past the anchor) that conditions
// generation step k: the latest even step not after k.
int conditioning_index(int k);

// Codebook files: JSON header + f32 little-endian centroid blob.
void save_codebook(const Codebook& cb, const std::string& json_path,
                   const std::string& blob_path);
Codebook load_codebook(const std::string& json_path);

}  // namespace driveweave
