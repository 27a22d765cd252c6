#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "coat/evaluation.hpp"

using namespace coat;

namespace {

// oracle: integrate the PR envelope by scanning every prefix for the best
// precision at each recall level
double ap_oracle(const std::vector<char>& ranked, int n_pos) {
  if (n_pos == 0) return ranked.empty() ? 1.0 : 0.0;
  const size_t n = ranked.size();
  double ap = 0.0;
  int tp_total = 0;
  for (char f : ranked) tp_total += f ? 1 : 0;
  for (int level = 1; level <= tp_total; ++level) {
    // precision of the best prefix achieving at least `level` true positives
    double best = 0.0;
    int tp = 0;
    for (size_t i = 0; i < n; ++i) {
      tp += ranked[i] ? 1 : 0;
      if (tp >= level) best = std::max(best, static_cast<double>(tp) / static_cast<double>(i + 1));
    }
    ap += best;
  }
  return ap / n_pos;
}

}  // namespace

TEST_CASE("match_detections basics") {
  const std::vector<Box> gts = {{10, 10, 20, 30}};

  SUBCASE("an exact hit is a TP") {
    auto flags = match_detections({gts[0]}, {0.9}, gts, 0.5);
    CHECK(flags == std::vector<char>{1});
  }

  SUBCASE("a duplicate on the same gt is an FP") {
    auto flags = match_detections({gts[0], gts[0]}, {0.9, 0.8}, gts, 0.5);
    CHECK(flags == std::vector<char>{1, 0});
  }

  SUBCASE("IoU exactly at the threshold fails the strictly-greater rule") {
    // nested box with exactly half the area
    Box half{10, 10, 20, 20};
    CHECK(iou(half, gts[0]) == doctest::Approx(0.5));
    auto flags = match_detections({half}, {0.9}, gts, 0.5);
    CHECK(flags == std::vector<char>{0});
  }
}

TEST_CASE("detection_ap worked example") {
  // ranked [TP,FP,TP] with two ground truths integrates to 5/6
  DetectionMetrics m = detection_ap(std::vector<char>{1, 0, 1}, 2);
  CHECK(m.ap == doctest::Approx(5.0 / 6.0).epsilon(1e-12));
  CHECK(m.recall == doctest::Approx(1.0));

  CHECK(detection_ap(std::vector<char>{1, 1}, 2).ap == doctest::Approx(1.0));
  CHECK(detection_ap(std::vector<char>{0, 0, 0}, 2).ap == doctest::Approx(0.0));

  SUBCASE("empty edge cases") {
    DetectionMetrics vac = detection_ap(std::vector<char>{}, 0);
    CHECK(vac.recall == 1.0);
    CHECK(vac.ap == 1.0);
    CHECK(detection_ap(std::vector<char>{0}, 0).ap == 0.0);
  }
}

TEST_CASE("detection_ap equals the brute-force oracle") {
  Rng rng(4);
  for (int trial = 0; trial < 500; ++trial) {
    const int n = 1 + static_cast<int>(rng.uniform_int(10));
    std::vector<char> flags(n);
    int tp = 0;
    for (char& f : flags) {
      f = rng.uniform() < 0.4;
      tp += f;
    }
    const int n_gt = tp + static_cast<int>(rng.uniform_int(4));
    if (n_gt == 0) continue;
    const double mine = detection_ap(flags, n_gt).ap;
    CHECK(std::abs(mine - ap_oracle(flags, n_gt)) < 1e-9);
  }
}

TEST_CASE("search_map on hand-built galleries") {
  // two scenes, one gt each of identity 0; a third distractor scene
  std::vector<GalleryScene> scenes(3);
  scenes[0].gt_boxes = {{10, 10, 20, 30}};
  scenes[0].gt_labels = {0};
  scenes[1].gt_boxes = {{40, 10, 50, 30}};
  scenes[1].gt_labels = {1};
  scenes[2].gt_boxes = {};

  auto det = [](const Box& b, double score, std::vector<double> e) {
    Detection d;
    d.box = b;
    d.score = score;
    d.embedding = std::move(e);
    return d;
  };

  std::vector<SceneDetections> dets(3);
  dets[0].scene = 0;
  dets[0].dets = {det({10, 10, 20, 30}, 0.9, {1, 0}), det({0, 0, 5, 5}, 0.5, {0.9, 0.1})};
  dets[1].scene = 1;
  dets[1].dets = {det({40, 10, 50, 30}, 0.8, {0, 1})};
  dets[2].scene = 2;
  dets[2].dets = {det({1, 1, 9, 9}, 0.7, {0.7, 0.7})};

  SUBCASE("true match ranked first") {
    QuerySpec q{{1, 0}, 0, {0, 1, 2}};
    RetrievalMetrics m = search_map({q}, dets, scenes);
    CHECK(m.map == doctest::Approx(1.0));
    CHECK(m.top1 == doctest::Approx(1.0));
  }

  SUBCASE("true match ranked second of two gives AP 1/2 and top1 0") {
    // scene 0 holds two detections; the query sits closer to the background one
    QuerySpec q{{0.6, 0.8}, 0, {0}};
    RetrievalMetrics m = search_map({q}, dets, scenes);
    CHECK(m.top1 == doctest::Approx(0.0));
    CHECK(m.map == doctest::Approx(0.5));
  }

  SUBCASE("queries without positives are skipped with a count") {
    QuerySpec q{{1, 0}, 7, {0, 1, 2}};
    RetrievalMetrics m = search_map({q}, dets, scenes);
    CHECK(m.evaluated_queries == 0);
    CHECK(m.skipped_queries == 1);
  }
}

TEST_CASE("search_map equals a brute-force evaluation on tiny galleries") {
  Rng rng(9);
  for (int trial = 0; trial < 200; ++trial) {
    // one scene, <=5 detections, one gt box of the query identity
    GalleryScene scene;
    scene.gt_boxes = {{10, 10, 26, 42}};
    scene.gt_labels = {0};
    SceneDetections sd;
    sd.scene = 0;
    const int n = 1 + static_cast<int>(rng.uniform_int(5));
    for (int i = 0; i < n; ++i) {
      Detection d;
      const bool on_gt = rng.uniform() < 0.5;
      d.box = on_gt ? Box{10 + rng.uniform(-1.0, 1.0), 10 + rng.uniform(-1.0, 1.0), 26, 42}
                    : Box{40 + rng.uniform(0.0, 5.0), 5, 55, 30};
      d.score = rng.uniform();
      d.embedding = {rng.normal(), rng.normal()};
      sd.dets.push_back(d);
    }
    QuerySpec q{{rng.normal(), rng.normal()}, 0, {0}};
    RetrievalMetrics m = search_map({q}, {sd}, {scene});

    // oracle: sort by similarity, greedy match, integrate the envelope
    std::vector<int> order(sd.dets.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      auto dot = [&](int i) {
        return q.embedding[0] * sd.dets[i].embedding[0] + q.embedding[1] * sd.dets[i].embedding[1];
      };
      return dot(a) > dot(b);
    });
    std::vector<char> ranked;
    bool used = false;
    for (int i : order) {
      const bool match = !used && iou(sd.dets[i].box, scene.gt_boxes[0]) > 0.5;
      ranked.push_back(match);
      used = used || match;
    }
    CHECK(std::abs(m.map - ap_oracle(ranked, 1)) < 1e-9);
  }
}

TEST_CASE("metrics are invariant to monotone similarity transforms") {
  GalleryScene scene;
  scene.gt_boxes = {{10, 10, 26, 42}, {40, 10, 56, 42}};
  scene.gt_labels = {0, 0};
  Rng rng(31);
  SceneDetections sd;
  sd.scene = 0;
  for (int i = 0; i < 8; ++i) {
    Detection d;
    d.box = Box{rng.uniform(5, 45), rng.uniform(5, 15), 0, 0};
    d.box.x2 = d.box.x1 + 16;
    d.box.y2 = d.box.y1 + 32;
    d.score = rng.uniform();
    d.embedding = {rng.normal(), rng.normal(), rng.normal()};
    sd.dets.push_back(d);
  }
  QuerySpec q{{0.3, -0.2, 0.9}, 0, {0}};
  RetrievalMetrics base = search_map({q}, {sd}, {scene});

  // scaling every embedding by a positive constant preserves the argsort
  SceneDetections scaled = sd;
  for (Detection& d : scaled.dets)
    for (double& v : d.embedding) v *= 3.7;
  RetrievalMetrics after = search_map({q}, {scaled}, {scene});
  CHECK(base.map == doctest::Approx(after.map));
  CHECK(base.top1 == doctest::Approx(after.top1));
}

TEST_CASE("metrics are permutation-invariant over query order") {
  GalleryScene scene;
  scene.gt_boxes = {{10, 10, 26, 42}, {40, 10, 56, 42}};
  scene.gt_labels = {0, 1};
  SceneDetections sd;
  sd.scene = 0;
  Rng rng(13);
  for (int i = 0; i < 6; ++i) {
    Detection d;
    d.box = i % 2 == 0 ? Box{10, 10, 26, 42} : Box{40, 10, 56, 42};
    d.score = rng.uniform();
    d.embedding = {rng.normal(), rng.normal()};
    sd.dets.push_back(d);
  }
  QuerySpec q0{{1, 0}, 0, {0}};
  QuerySpec q1{{0, 1}, 1, {0}};
  RetrievalMetrics ab = search_map({q0, q1}, {sd}, {scene});
  RetrievalMetrics ba = search_map({q1, q0}, {sd}, {scene});
  CHECK(ab.map == doctest::Approx(ba.map));
  CHECK(ab.top1 == doctest::Approx(ba.top1));
}

TEST_CASE("worst-case ranker matches the analytic value") {
  // all positives last: j/(n_neg+j) grows with j, so the envelope at every
  // recall level is n_pos/n and the interpolated AP collapses to n_pos/n
  const int n = 6, n_pos = 2;
  std::vector<char> ranked(n, 0);
  ranked[4] = ranked[5] = 1;
  const double expect = static_cast<double>(n_pos) / n;
  CHECK(detection_ap(ranked, n_pos).ap == doctest::Approx(expect).epsilon(1e-12));
  CHECK(std::abs(ap_oracle(ranked, n_pos) - expect) < 1e-12);
}

TEST_CASE("detections file round trip") {
  Rng rng(17);
  std::vector<SceneDetections> dets(2);
  for (int s = 0; s < 2; ++s) {
    dets[s].scene = s;
    for (int i = 0; i < 3; ++i) {
      Detection d;
      d.box = {rng.uniform(0, 10), rng.uniform(0, 10), rng.uniform(20, 30), rng.uniform(20, 30)};
      d.score = rng.uniform();
      for (int k = 0; k < 4; ++k) d.embedding.push_back(static_cast<double>(static_cast<float>(rng.normal())));
      dets[s].dets.push_back(d);
    }
  }
  const std::string path = "/tmp/coat_dets.jsonl";
  std::filesystem::remove(path);
  write_detections_jsonl(path, dets);
  auto back = read_detections_jsonl(path);
  REQUIRE(back.size() == 2);
  for (int s = 0; s < 2; ++s) {
    REQUIRE(back[s].dets.size() == 3);
    for (int i = 0; i < 3; ++i) {
      CHECK(back[s].dets[i].box.x1 == dets[s].dets[i].box.x1);
      CHECK(back[s].dets[i].score == dets[s].dets[i].score);
      CHECK(back[s].dets[i].embedding == dets[s].dets[i].embedding);
    }
  }
}
