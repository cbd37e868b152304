#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <set>

#include "driveweave/tokenizer.hpp"

using namespace driveweave;
namespace fs = std::filesystem;

namespace {

// Exhaustive nearest-centroid scan over full squared distances, ties toward
// the lowest id. Independent of the gather shortcut inside encode_frame.
int brute_nearest(const float* x, const Codebook& cb) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (int k = 0; k < cb.K; ++k) {
    const float* c = cb.centroid(k);
    double d = 0.0;
    for (int i = 0; i < cb.P; ++i) {
      double t = static_cast<double>(x[i]) - c[i];
      d += t * t;
    }
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return best;
}

FrameRaster raster_of(int rows, int cols, const std::vector<uint8_t>& sem) {
  FrameRaster f;
  f.rows = rows;
  f.cols = cols;
  f.semantic = sem;
  f.depth.assign(sem.size(), 0.0f);
  return f;
}

FrameRaster random_raster(int rows, int cols, Rng& rng) {
  std::vector<uint8_t> sem(static_cast<size_t>(rows) * cols);
  for (auto& s : sem) s = static_cast<uint8_t>(rng.uniform_int(kNumSemClasses));
  return raster_of(rows, cols, sem);
}

// Codebook whose centroids are exact one-hot tiles of the given per-patch
// class patterns (each pattern is 16 class ids).
Codebook tile_codebook(Branch branch, const std::vector<std::vector<uint8_t>>& patterns) {
  Codebook cb;
  cb.branch = branch;
  cb.K = static_cast<int>(patterns.size());
  cb.P = kPatchDim;
  cb.centroids.assign(static_cast<size_t>(cb.K) * kPatchDim, 0.0f);
  for (int k = 0; k < cb.K; ++k)
    for (int cell = 0; cell < kPatch * kPatch; ++cell)
      cb.centroids[static_cast<size_t>(k) * kPatchDim + cell * kNumSemClasses +
                   patterns[k][cell]] = 1.0f;
  return cb;
}

std::vector<uint8_t> uniform_pattern(uint8_t cls) {
  return std::vector<uint8_t>(kPatch * kPatch, cls);
}

FrameRaster tile_raster(int rows, int cols, const std::vector<uint8_t>& pattern) {
  FrameRaster f;
  f.rows = rows;
  f.cols = cols;
  f.semantic.resize(static_cast<size_t>(rows) * cols);
  f.depth.assign(f.semantic.size(), 0.0f);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c)
      f.semantic[static_cast<size_t>(r) * cols + c] =
          pattern[(r % kPatch) * kPatch + (c % kPatch)];
  return f;
}

}  // namespace

TEST_CASE("two well-separated clusters recover their means") {
  std::vector<float> samples;
  for (int i = 0; i < 10; ++i) {
    samples.push_back(0.0f);
    samples.push_back(0.0f);
  }
  for (int i = 0; i < 10; ++i) {
    samples.push_back(9.0f);
    samples.push_back(9.0f);
  }
  Codebook cb = fit_codebook(samples, 2, 2, Branch::kContextual, 42);
  REQUIRE(cb.K == 2);
  std::set<std::pair<float, float>> got{{cb.centroids[0], cb.centroids[1]},
                                        {cb.centroids[2], cb.centroids[3]}};
  std::set<std::pair<float, float>> want{{0.0f, 0.0f}, {9.0f, 9.0f}};
  CHECK(got == want);
  CHECK(cb.inertia == doctest::Approx(0.0));
}

TEST_CASE("K equal to the distinct sample count reaches zero inertia") {
  std::vector<float> samples;
  for (int v : {1, 1, 2, 2, 3, 3, 4, 4, 5, 5, 5}) {
    samples.push_back(static_cast<float>(v));
    samples.push_back(static_cast<float>(-v));
    samples.push_back(0.5f * v);
  }
  Codebook cb = fit_codebook(samples, 3, 5, Branch::kDynamic, 7);
  CHECK(cb.inertia == doctest::Approx(0.0));
}

TEST_CASE("fitted inertia beats random-restart assignments") {
  Rng rng(123);
  int n = 200, P = 8, K = 8;
  std::vector<float> samples(static_cast<size_t>(n) * P);
  for (auto& s : samples) s = static_cast<float>(rng.uniform(-1.0, 1.0));
  Codebook cb = fit_codebook(samples, P, K, Branch::kContextual, 99);

  auto restart_inertia = [&](Rng& r) {
    std::vector<int> picks;
    while (static_cast<int>(picks.size()) < K) {
      int cand = static_cast<int>(r.uniform_int(n));
      if (std::find(picks.begin(), picks.end(), cand) == picks.end()) picks.push_back(cand);
    }
    double inertia = 0.0;
    for (int i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (int k : picks) {
        double d = 0.0;
        for (int p = 0; p < P; ++p) {
          double t = samples[static_cast<size_t>(i) * P + p] -
                     samples[static_cast<size_t>(k) * P + p];
          d += t * t;
        }
        best = std::min(best, d);
      }
      inertia += best;
    }
    return inertia;
  };
  Rng rr(321);
  for (int trial = 0; trial < 10; ++trial) CHECK(cb.inertia <= restart_inertia(rr));
}

TEST_CASE("asking for more clusters than distinct samples reports the deficit") {
  std::vector<float> samples;
  for (int i = 0; i < 12; ++i) {
    samples.push_back(static_cast<float>(i % 3));
    samples.push_back(0.0f);
  }
  CHECK_THROWS_WITH_AS(fit_codebook(samples, 2, 8, Branch::kContextual, 1),
                       doctest::Contains("deficit 5"), ConfigError);
}

TEST_CASE("fit survives heavy duplication without empty clusters") {
  Rng rng(5);
  int P = 4;
  std::vector<float> samples;
  for (int i = 0; i < 64; ++i) {
    int v = static_cast<int>(rng.uniform_int(18));
    for (int p = 0; p < P; ++p) samples.push_back(static_cast<float>(v * (p + 1)));
  }
  Codebook cb = fit_codebook(samples, P, 16, Branch::kDynamic, 11);
  CHECK(cb.K == 16);
  for (float c : cb.centroids) CHECK(std::isfinite(c));
  CHECK(std::isfinite(cb.inertia));
  // Every centroid serves at least one sample once fitting settles.
  std::vector<int> hit(cb.K, 0);
  for (int i = 0; i < 64; ++i) ++hit[brute_nearest(samples.data() + i * P, cb)];
  for (int k = 0; k < cb.K; ++k) CHECK(hit[k] > 0);
}

TEST_CASE("a raster tiled from one centroid encodes to that id everywhere") {
  std::vector<std::vector<uint8_t>> pats = {
      uniform_pattern(kOffRoad), uniform_pattern(kRoad), uniform_pattern(kLaneMarking),
      uniform_pattern(kAgentClass), uniform_pattern(kEgoClass)};
  Codebook cb = tile_codebook(Branch::kDynamic, pats);
  Vocabulary v;
  FrameRaster f = tile_raster(16, 28, pats[3]);
  FrameTokens t = encode_frame(f, cb, v);
  REQUIRE(t.ids.size() == 28);
  for (int id : t.ids) CHECK(id == v.dyn_base() + 3);
}

TEST_CASE("encode matches the exhaustive nearest-centroid oracle") {
  Rng rng(2024);
  std::vector<float> samples;
  for (int i = 0; i < 60; ++i) {
    FrameRaster f = random_raster(16, 28, rng);
    std::vector<float> p = patch_vectors(f);
    samples.insert(samples.end(), p.begin(), p.end());
  }
  Codebook cb = fit_codebook(samples, kPatchDim, 24, Branch::kDynamic, 555);
  Vocabulary v;
  for (int trial = 0; trial < 100; ++trial) {
    FrameRaster f = random_raster(16, 28, rng);
    FrameTokens got = encode_frame(f, cb, v);
    std::vector<float> p = patch_vectors(f);
    for (size_t i = 0; i < got.ids.size(); ++i) {
      int want = v.dyn_base() + brute_nearest(p.data() + i * kPatchDim, cb);
      CHECK(got.ids[i] == want);
    }
  }
}

TEST_CASE("encode is deterministic") {
  Rng rng(9);
  FrameRaster f = random_raster(32, 56, rng);
  std::vector<float> samples = patch_vectors(f);
  Codebook cb = fit_codebook(samples, kPatchDim, 8, Branch::kContextual, 3);
  Vocabulary v;
  FrameTokens a = encode_frame(f, cb, v);
  FrameTokens b = encode_frame(f, cb, v);
  CHECK(a.ids == b.ids);
}

TEST_CASE("tokens stay inside their branch range") {
  Rng rng(31);
  Vocabulary v;
  std::vector<float> samples;
  for (int i = 0; i < 40; ++i) {
    FrameRaster f = random_raster(32, 56, rng);
    std::vector<float> p = patch_vectors(f);
    samples.insert(samples.end(), p.begin(), p.end());
  }
  Codebook cb = fit_codebook(samples, kPatchDim, 16, Branch::kContextual, 77);
  for (int trial = 0; trial < 10; ++trial) {
    FrameRaster f = random_raster(32, 56, rng);
    for (int id : encode_frame(f, cb, v).ids) CHECK(v.is_ctx_code(id));
  }
}

TEST_CASE("decode inverts encode on codebook-tile rasters") {
  std::vector<std::vector<uint8_t>> pats;
  pats.push_back(uniform_pattern(kRoad));
  pats.push_back(uniform_pattern(kOffRoad));
  std::vector<uint8_t> mixed = uniform_pattern(kRoad);
  mixed[5] = kAgentClass;
  mixed[6] = kAgentClass;
  mixed[10] = kEgoClass;
  pats.push_back(mixed);
  Codebook cb = tile_codebook(Branch::kDynamic, pats);
  Vocabulary v;
  RasterGrid grid{16, 28, 2.0, 8, 4};
  FrameRaster f = tile_raster(16, 28, mixed);
  FrameRaster back = decode_frame(encode_frame(f, cb, v), cb, v, grid);
  CHECK(back.semantic == f.semantic);
}

TEST_CASE("all-road dynamic frame defers fully to its condition") {
  Vocabulary v;
  std::vector<std::vector<uint8_t>> dyn_pats = {uniform_pattern(kRoad),
                                                uniform_pattern(kAgentClass)};
  Codebook dyn_cb = tile_codebook(Branch::kDynamic, dyn_pats);
  std::vector<uint8_t> stripe = uniform_pattern(kRoad);
  for (int j = 0; j < kPatch; ++j) stripe[j] = kLaneMarking;
  std::vector<std::vector<uint8_t>> ctx_pats = {uniform_pattern(kRoad), stripe,
                                                uniform_pattern(kOffRoad)};
  Codebook ctx_cb = tile_codebook(Branch::kContextual, ctx_pats);

  RasterGrid dyn_grid{16, 28, 2.0, 8, 4};
  RasterGrid ctx_grid{32, 56, 1.0, 16, 8};
  FrameRaster dyn_road = tile_raster(16, 28, uniform_pattern(kRoad));
  FrameRaster ctx_scene = tile_raster(32, 56, stripe);
  FrameTokens dyn_toks = encode_frame(dyn_road, dyn_cb, v);
  FrameTokens ctx_toks = encode_frame(ctx_scene, ctx_cb, v);

  FrameRaster fused =
      decode_frame_conditioned(dyn_toks, dyn_cb, ctx_toks, ctx_cb, v, dyn_grid, ctx_grid);
  FrameRaster cond = decode_frame(ctx_toks, ctx_cb, v, ctx_grid);
  CHECK(fused.semantic == cond.semantic);
  CHECK(fused.rows == 32);
  CHECK(fused.cols == 56);
}

TEST_CASE("agent patches survive conditioning, background does not") {
  Vocabulary v;
  std::vector<std::vector<uint8_t>> dyn_pats = {uniform_pattern(kRoad),
                                                uniform_pattern(kAgentClass)};
  Codebook dyn_cb = tile_codebook(Branch::kDynamic, dyn_pats);
  std::vector<std::vector<uint8_t>> ctx_pats = {uniform_pattern(kOffRoad)};
  Codebook ctx_cb = tile_codebook(Branch::kContextual, ctx_pats);

  RasterGrid dyn_grid{16, 28, 2.0, 8, 4};
  RasterGrid ctx_grid{32, 56, 1.0, 16, 8};

  // One agent patch at patch (1, 2): dynamic cells rows 4..7, cols 8..11.
  FrameRaster dyn = tile_raster(16, 28, uniform_pattern(kRoad));
  for (int r = 4; r < 8; ++r)
    for (int c = 8; c < 12; ++c) dyn.semantic[static_cast<size_t>(r) * 28 + c] = kAgentClass;
  FrameRaster ctx_scene = tile_raster(32, 56, uniform_pattern(kOffRoad));

  FrameTokens dyn_toks = encode_frame(dyn, dyn_cb, v);
  FrameTokens ctx_toks = encode_frame(ctx_scene, ctx_cb, v);
  FrameRaster fused =
      decode_frame_conditioned(dyn_toks, dyn_cb, ctx_toks, ctx_cb, v, dyn_grid, ctx_grid);

  int agents = 0, off = 0;
  for (uint8_t s : fused.semantic) {
    agents += (s == kAgentClass);
    off += (s == kOffRoad);
  }
  // The agent patch spans 8 m x 8 m of world, i.e. around 64 contextual cells.
  CHECK(agents >= 49);
  CHECK(off > 0);
  CHECK(agents + off == 32 * 56);
}

TEST_CASE("reconstruction beats a single-centroid codebook") {
  WorldConfig cfg;
  Vocabulary v;
  std::vector<float> samples;
  std::vector<FrameRaster> frames;
  for (uint64_t seed : {1ull, 2ull, 3ull, 4ull}) {
    ScenarioConfig sc;
    sc.family = static_cast<ScenarioFamily>(seed % 5);
    sc.seed = seed;
    EpisodeRecord ep = generate_episode(sc);
    for (size_t i = 0; i < ep.dyn_frames.size(); i += 10) {
      frames.push_back(ep.dyn_frames[i]);
      std::vector<float> p = patch_vectors(ep.dyn_frames[i]);
      samples.insert(samples.end(), p.begin(), p.end());
    }
  }
  Codebook big = fit_codebook(samples, kPatchDim, 32, Branch::kDynamic, 10);
  Codebook tiny = big;
  tiny.K = 2;  // fit_codebook requires K >= 2; keep entry 0 plus a decoy
  tiny.centroids.resize(2 * kPatchDim);
  {
    std::vector<float> all = samples;
    // Entry 0 becomes the global mean: the true 1-centroid optimum.
    std::vector<double> mean(kPatchDim, 0.0);
    size_t n = all.size() / kPatchDim;
    for (size_t i = 0; i < n; ++i)
      for (int p = 0; p < kPatchDim; ++p) mean[p] += all[i * kPatchDim + p];
    for (int p = 0; p < kPatchDim; ++p) {
      tiny.centroids[p] = static_cast<float>(mean[p] / n);
      tiny.centroids[kPatchDim + p] = 1e6f;  // decoy never wins
    }
  }
  RasterGrid grid = cfg.dynamic;
  size_t err_big = 0, err_tiny = 0, cells = 0;
  for (const FrameRaster& f : frames) {
    FrameRaster rb = decode_frame(encode_frame(f, big, v), big, v, grid);
    FrameRaster rt = decode_frame(encode_frame(f, tiny, v), tiny, v, grid);
    for (size_t i = 0; i < f.semantic.size(); ++i) {
      err_big += (rb.semantic[i] != f.semantic[i]);
      err_tiny += (rt.semantic[i] != f.semantic[i]);
      ++cells;
    }
  }
  CHECK(cells > 0);
  CHECK(err_big <= err_tiny);
}

TEST_CASE("decode rejects ids from the wrong branch") {
  std::vector<std::vector<uint8_t>> pats = {uniform_pattern(kRoad), uniform_pattern(kOffRoad)};
  Codebook cb = tile_codebook(Branch::kDynamic, pats);
  Vocabulary v;
  RasterGrid grid{16, 28, 2.0, 8, 4};
  FrameTokens t;
  t.branch = Branch::kDynamic;
  t.ids.assign(28, v.ctx_base());  // contextual id fed to a dynamic decode
  CHECK_THROWS_AS(decode_frame(t, cb, v, grid), DataError);
  t.ids.assign(28, v.dyn_base() + 7);  // beyond K=2
  CHECK_THROWS_AS(decode_frame(t, cb, v, grid), DataError);
  t.ids.assign(27, v.dyn_base());  // wrong count
  CHECK_THROWS_AS(decode_frame(t, cb, v, grid), DataError);
}

TEST_CASE("encode rejects mismatched shapes") {
  std::vector<std::vector<uint8_t>> pats = {uniform_pattern(kRoad), uniform_pattern(kOffRoad)};
  Codebook cb = tile_codebook(Branch::kDynamic, pats);
  Vocabulary v;
  FrameRaster f = tile_raster(15, 28, uniform_pattern(kRoad));  // 15 not patchable
  CHECK_THROWS_AS(encode_frame(f, cb, v), DataError);
}

TEST_CASE("conditioning steps use the newest even contextual offset") {
  CHECK(conditioning_index(1) == 0);
  CHECK(conditioning_index(2) == 2);
  CHECK(conditioning_index(3) == 2);
  CHECK(conditioning_index(5) == 4);
  CHECK(conditioning_index(8) == 8);
  CHECK_THROWS_AS(conditioning_index(0), ConfigError);
}

TEST_CASE("vocabulary ranges partition the id space") {
  Vocabulary v;
  v.ctx_codes = 64;
  v.dyn_codes = 48;
  for (int id = 0; id < v.size(); ++id) {
    int hits = static_cast<int>(v.is_special(id)) + static_cast<int>(v.is_ctx_code(id)) +
               static_cast<int>(v.is_dyn_code(id));
    CHECK(hits == 1);
  }
  CHECK(v.size() == 32 + 64 + 48);
  CHECK_FALSE(v.is_dyn_code(v.size()));
  std::set<std::string> names;
  for (int i = 0; i < Vocabulary::kNumSpecials; ++i)
    names.insert(Vocabulary::special_name(i));
  CHECK(names.size() == static_cast<size_t>(Vocabulary::kNumSpecials));
}

TEST_CASE("codebooks survive a save/load round trip") {
  Rng rng(77);
  std::vector<float> samples;
  for (int i = 0; i < 30; ++i) {
    FrameRaster f = random_raster(16, 28, rng);
    std::vector<float> p = patch_vectors(f);
    samples.insert(samples.end(), p.begin(), p.end());
  }
  Codebook cb = fit_codebook(samples, kPatchDim, 12, Branch::kDynamic, 8);
  fs::path d = fs::temp_directory_path() / "driveweave_test_tokenizer";
  fs::create_directories(d);
  save_codebook(cb, (d / "cb.json").string(), (d / "cb.blob").string());
  Codebook back = load_codebook((d / "cb.json").string());
  CHECK(back.branch == cb.branch);
  CHECK(back.K == cb.K);
  CHECK(back.P == cb.P);
  CHECK(back.seed == cb.seed);
  CHECK(back.iterations == cb.iterations);
  CHECK(back.inertia == doctest::Approx(cb.inertia));
  CHECK(back.centroids == cb.centroids);

  Vocabulary v;
  FrameRaster f = random_raster(16, 28, rng);
  CHECK(encode_frame(f, cb, v).ids == encode_frame(f, back, v).ids);
  save_vocabulary(v, (d / "vocab.json").string());
  CHECK(fs::exists(d / "vocab.json"));
}
