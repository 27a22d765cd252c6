#pragma once

#include <string>
#include <vector>

#include "coat/geometry.hpp"
#include "coat/tensor.hpp"

namespace coat {

// Box label for foreground instances whose identity is not annotated.
constexpr int kUnlabeledId = -1;

struct Identity {
  int id = 0;
  uint64_t texture_seed = 0;
  bool labeled = true;
};

struct Scene {
  Tensor image;  // [H,W,3] values in [0,1]
  std::vector<Box> boxes;
  std::vector<int> labels;  // identity id, or kUnlabeledId
};

struct SplitSpec {
  int n_train_scenes = 64;
  int n_test_scenes = 32;
  int n_identities = 16;  // labeled identities; unlabeled ones come on top
  int n_unlabeled = 4;
  int gallery_size = 16;
  uint64_t rng_seed = 0;
  int image_h = 96;
  int image_w = 160;
};

struct Query {
  int scene = 0;  // index into test scenes
  Box box;
  int identity = 0;
};

struct Benchmark {
  SplitSpec spec;
  std::vector<Identity> identities;
  std::vector<Scene> train;
  std::vector<Scene> test;  // the gallery pool; queries point into it
  std::vector<Query> queries;
};

// Procedural instance texture, a pure function of (texture_seed, u, v) with
// u,v in [0,1] box-relative coordinates. Returns RGB.
std::array<double, 3> identity_texture(uint64_t texture_seed, double u, double v);

// Deterministic under spec.rng_seed; per-scene streams are derived as
// hash(seed, scene_index) so generation order never matters.
Benchmark generate(const SplitSpec& spec);

// Per-query nested gallery subsets (scene indices into bench.test). Each
// subset always contains every true-positive scene of its query and never the
// query's own scene; smaller subsets are prefixes of larger ones.
std::vector<std::vector<std::vector<int>>> gallery_subsets(const Benchmark& bench,
                                                           const std::vector<int>& sizes, uint64_t seed);

void save_benchmark(const std::string& dir, const Benchmark& bench);
Benchmark load_benchmark(const std::string& dir);

}  // namespace coat
