#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "coat/toybench.hpp"

using namespace coat;

namespace {

SplitSpec small_spec(uint64_t seed = 7) {
  SplitSpec s;
  s.n_train_scenes = 8;
  s.n_test_scenes = 16;
  s.n_identities = 6;
  s.n_unlabeled = 2;
  s.gallery_size = 8;
  s.rng_seed = seed;
  return s;
}

std::string dir_fingerprint(const std::string& dir) {
  std::ostringstream all;
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir)) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    std::ifstream in(f, std::ios::binary);
    all << f.filename().string() << ":" << in.rdbuf() << "|";
  }
  return all.str();
}

}  // namespace

TEST_CASE("generation is deterministic byte for byte") {
  Benchmark a = generate(small_spec());
  Benchmark b = generate(small_spec());
  REQUIRE(a.train.size() == b.train.size());
  for (size_t i = 0; i < a.train.size(); ++i) {
    REQUIRE(a.train[i].image.size() == b.train[i].image.size());
    for (int64_t j = 0; j < a.train[i].image.size(); ++j)
      CHECK(a.train[i].image.data()[j] == b.train[i].image.data()[j]);
    CHECK(a.train[i].labels == b.train[i].labels);
  }

  const std::string d1 = "/tmp/coat_bench_a", d2 = "/tmp/coat_bench_b";
  std::filesystem::remove_all(d1);
  std::filesystem::remove_all(d2);
  save_benchmark(d1, a);
  save_benchmark(d2, b);
  CHECK(dir_fingerprint(d1) == dir_fingerprint(d2));
}

TEST_CASE("every query identity appears in the gallery") {
  SplitSpec spec = small_spec(3);
  spec.n_identities = 16;
  spec.n_test_scenes = 32;
  spec.gallery_size = 16;
  spec.n_train_scenes = 16;
  Benchmark bench = generate(spec);
  REQUIRE(bench.queries.size() == 16);
  for (const Query& q : bench.queries) {
    int hits = 0;
    for (size_t j = 0; j < bench.test.size(); ++j) {
      if (static_cast<int>(j) == q.scene) continue;
      for (int l : bench.test[j].labels) hits += (l == q.identity) ? 1 : 0;
    }
    CHECK(hits >= 1);
  }
}

TEST_CASE("unlabeled identity count matches the spec") {
  SplitSpec spec = small_spec(11);
  spec.n_unlabeled = 4;
  Benchmark bench = generate(spec);
  int unlabeled = 0;
  for (const Identity& id : bench.identities) unlabeled += id.labeled ? 0 : 1;
  CHECK(unlabeled == 4);

  // unlabeled instances carry the sentinel label in annotations
  bool saw_sentinel = false;
  for (const Scene& s : bench.train)
    for (int l : s.labels) {
      CHECK((l == kUnlabeledId || (l >= 0 && l < spec.n_identities)));
      saw_sentinel = saw_sentinel || l == kUnlabeledId;
    }
  CHECK(saw_sentinel);
}

TEST_CASE("scene boxes stay inside the image") {
  Benchmark bench = generate(small_spec(5));
  for (const Scene& s : bench.train) {
    for (const Box& b : s.boxes) {
      CHECK(b.x1 >= 0.0);
      CHECK(b.y1 >= 0.0);
      CHECK(b.x2 <= bench.spec.image_w);
      CHECK(b.y2 <= bench.spec.image_h);
      CHECK(b.x1 < b.x2);
      CHECK(b.y1 < b.y2);
    }
    CHECK(s.boxes.size() >= 1);
    CHECK(s.boxes.size() <= 5);
  }
}

TEST_CASE("texture rendering is a pure function of the seed") {
  for (uint64_t ts : {0ull, 3ull, 17ull}) {
    for (double v : {0.1, 0.37, 0.9}) {
      auto a = identity_texture(ts, 0.5, v);
      auto b = identity_texture(ts, 0.5, v);
      CHECK(a == b);
    }
  }
  // distinct seeds give distinct palettes somewhere
  bool differs = false;
  for (double v = 0.0; v < 1.0; v += 0.05)
    differs = differs || identity_texture(0, 0.5, v) != identity_texture(1, 0.5, v);
  CHECK(differs);
}

TEST_CASE("rendered instances match their texture up to the declared noise") {
  Benchmark bench = generate(small_spec(19));
  const Scene& s = bench.train[0];
  REQUIRE(!s.boxes.empty());
  // the last-painted instance is unoccluded; sample the top-most box painted
  const size_t last = s.boxes.size() - 1;
  const Box& b = s.boxes[last];
  int ident = s.labels[last];
  if (ident == kUnlabeledId) return;  // texture seed not exposed through annotations
  const int W = bench.spec.image_w;
  int checked = 0;
  for (int y = static_cast<int>(b.y1) + 2; y < static_cast<int>(b.y2) - 2 && checked < 50; ++y) {
    for (int x = static_cast<int>(b.x1) + 2; x < static_cast<int>(b.x2) - 2 && checked < 50; ++x) {
      const double u = (x + 0.5 - b.x1) / b.width();
      const double v = (y + 0.5 - b.y1) / b.height();
      // skip pixels within a stripe width of a color boundary
      const auto here = identity_texture(ident, u, v);
      const auto above = identity_texture(ident, u, v - 0.03);
      const auto below = identity_texture(ident, u, v + 0.03);
      if (here != above || here != below) continue;
      for (int c = 0; c < 3; ++c) {
        const double pix = s.image.at({y, x, c});
        if (pix == 0.0 || pix == 1.0) continue;  // clamped
        CHECK(std::abs(pix - here[c]) < 0.05 * 5);
      }
      ++checked;
    }
  }
  CHECK(checked > 0);
}

TEST_CASE("gallery subsets nest and always contain the positives") {
  Benchmark bench = generate(small_spec(23));
  const std::vector<int> sizes = {4, 8, 12};
  auto subsets = gallery_subsets(bench, sizes, 77);
  REQUIRE(subsets.size() == bench.queries.size());
  for (size_t q = 0; q < subsets.size(); ++q) {
    REQUIRE(subsets[q].size() == sizes.size());
    for (size_t si = 0; si + 1 < sizes.size(); ++si) {
      std::set<int> small(subsets[q][si].begin(), subsets[q][si].end());
      std::set<int> large(subsets[q][si + 1].begin(), subsets[q][si + 1].end());
      CHECK(std::includes(large.begin(), large.end(), small.begin(), small.end()));
    }
    // every subset holds at least one positive and never the query scene
    for (size_t si = 0; si < sizes.size(); ++si) {
      int positives = 0;
      for (int scene : subsets[q][si]) {
        CHECK(scene != bench.queries[q].scene);
        for (int l : bench.test[scene].labels) positives += (l == bench.queries[q].identity) ? 1 : 0;
      }
      CHECK(positives >= 1);
    }
  }

  SUBCASE("full-size subsets reuse the entire gallery pool") {
    auto full = gallery_subsets(bench, {static_cast<int>(bench.test.size())}, 77);
    for (size_t q = 0; q < full.size(); ++q)
      CHECK(full[q][0].size() == bench.test.size() - 1);  // the query scene is excluded
  }

  SUBCASE("oversized subsets are rejected") {
    CHECK_THROWS_AS(gallery_subsets(bench, {100}, 1), Error);
  }
}

TEST_CASE("save and load round trip") {
  Benchmark bench = generate(small_spec(29));
  const std::string dir = "/tmp/coat_bench_rt";
  std::filesystem::remove_all(dir);
  save_benchmark(dir, bench);
  Benchmark back = load_benchmark(dir);
  CHECK(back.spec.n_identities == bench.spec.n_identities);
  REQUIRE(back.train.size() == bench.train.size());
  REQUIRE(back.test.size() == bench.test.size());
  REQUIRE(back.queries.size() == bench.queries.size());
  for (size_t i = 0; i < bench.test.size(); ++i) {
    CHECK(back.test[i].labels == bench.test[i].labels);
    for (int64_t j = 0; j < bench.test[i].image.size(); ++j)
      CHECK(back.test[i].image.data()[j] == bench.test[i].image.data()[j]);
    for (size_t b = 0; b < bench.test[i].boxes.size(); ++b) {
      CHECK(back.test[i].boxes[b].x1 == bench.test[i].boxes[b].x1);
      CHECK(back.test[i].boxes[b].y2 == bench.test[i].boxes[b].y2);
    }
  }
}

TEST_CASE("infeasible specs are rejected") {
  SplitSpec bad = small_spec();
  bad.gallery_size = 100;
  CHECK_THROWS_AS(generate(bad), Error);

  SplitSpec tiny = small_spec();
  tiny.n_identities = 1;
  CHECK_THROWS_AS(generate(tiny), Error);
}
