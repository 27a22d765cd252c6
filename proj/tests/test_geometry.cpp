#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "coat/geometry.hpp"
#include "coat/gradcheck.hpp"

using namespace coat;

namespace {

// oracle: count sample points on a fine grid
double iou_rasterized(const Box& a, const Box& b, int cells_per_unit = 20) {
  const double x1 = std::min(a.x1, b.x1), x2 = std::max(a.x2, b.x2);
  const double y1 = std::min(a.y1, b.y1), y2 = std::max(a.y2, b.y2);
  const double step = 1.0 / cells_per_unit;
  long in_a = 0, in_b = 0, in_both = 0;
  for (double y = y1 + step / 2; y < y2; y += step) {
    for (double x = x1 + step / 2; x < x2; x += step) {
      const bool pa = x > a.x1 && x < a.x2 && y > a.y1 && y < a.y2;
      const bool pb = x > b.x1 && x < b.x2 && y > b.y1 && y < b.y2;
      in_a += pa;
      in_b += pb;
      in_both += pa && pb;
    }
  }
  return static_cast<double>(in_both) / static_cast<double>(in_a + in_b - in_both);
}

// oracle: naive all-pairs greedy suppression
std::vector<int> nms_oracle(const std::vector<Box>& boxes, const std::vector<double>& scores,
                            double threshold) {
  std::vector<int> order(boxes.size());
  for (size_t i = 0; i < boxes.size(); ++i) order[i] = static_cast<int>(i);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  });
  std::vector<char> dead(boxes.size(), 0);
  std::vector<int> kept;
  for (int i : order) {
    if (dead[i]) continue;
    kept.push_back(i);
    for (int j : order)
      if (!dead[j] && j != i && iou(boxes[i], boxes[j]) > threshold) dead[j] = 1;
  }
  return kept;
}

Box random_box(Rng& rng, double w, double h) {
  const double bw = rng.uniform(2.0, w / 2);
  const double bh = rng.uniform(2.0, h / 2);
  const double x1 = rng.uniform(0.0, w - bw);
  const double y1 = rng.uniform(0.0, h - bh);
  return {x1, y1, x1 + bw, y1 + bh};
}

}  // namespace

TEST_CASE("iou basics") {
  Box a{0, 0, 2, 2};
  CHECK(iou(a, a) == 1.0);
  CHECK(iou(a, Box{3, 3, 4, 4}) == 0.0);
  CHECK(iou(Box{0, 0, 2, 2}, Box{1, 0, 3, 2}) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK_THROWS_AS(iou(a, Box{1, 1, 1, 1}), Error);
}

TEST_CASE("iou matches the rasterization oracle") {
  Rng rng(5);
  for (int i = 0; i < 25; ++i) {
    Box a = random_box(rng, 40, 40);
    Box b = random_box(rng, 40, 40);
    CHECK(iou(a, b) == doctest::Approx(iou_rasterized(a, b)).epsilon(0.02));
  }
}

TEST_CASE("iou symmetry and self-identity") {
  Rng rng(17);
  for (int i = 0; i < 50; ++i) {
    Box a = random_box(rng, 30, 50);
    Box b = random_box(rng, 30, 50);
    CHECK(iou(a, b) == iou(b, a));
    CHECK(iou(a, a) == 1.0);
  }
}

TEST_CASE("delta encoding examples and round trip") {
  Box p{10, 10, 20, 30};
  BoxDelta zero = encode_delta(p, p);
  CHECK(zero.dx == doctest::Approx(0.0));
  CHECK(zero.dw == doctest::Approx(0.0));

  Box wider{5, 10, 25, 30};  // twice as wide, same center
  CHECK(encode_delta(p, wider).dw == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  Rng rng(2);
  for (int i = 0; i < 100; ++i) {
    Box prop = random_box(rng, 100, 100);
    Box gt = random_box(rng, 100, 100);
    Box back = decode_delta(encode_delta(prop, gt), prop);
    CHECK(std::abs(back.x1 - gt.x1) < 1e-5 * std::max(1.0, std::abs(gt.x1)));
    CHECK(std::abs(back.y2 - gt.y2) < 1e-5 * std::max(1.0, std::abs(gt.y2)));
  }
}

TEST_CASE("make_proposals spans the requested spectrum") {
  const std::vector<Box> gts = {{20, 20, 40, 60}, {80, 30, 100, 80}};
  const std::vector<int> labels = {0, 1};

  SUBCASE("zero jitter copies the ground truth") {
    ProposalParams params;
    params.jitter_center = 0.0;
    params.jitter_scale = 0.0;
    Rng rng(1);
    auto props = make_proposals(gts, labels, 160, 96, 8, params, rng);
    int exact = 0;
    for (const Proposal& p : props)
      if (p.gt_iou == doctest::Approx(1.0)) ++exact;
    CHECK(exact == 2);  // default 1:3 positive fraction of 8
  }

  SUBCASE("default count matches the per-image proposal budget") {
    ProposalParams params;
    Rng rng(3);
    auto props = make_proposals(gts, labels, 160, 96, 128, params, rng);
    CHECK(props.size() == 128);
  }

  SUBCASE("negatives stay below the IoU ceiling") {
    ProposalParams params;
    Rng rng(9);
    auto props = make_proposals(gts, labels, 160, 96, 64, params, rng);
    for (const Proposal& p : props) {
      if (p.matched_gt < 0 || p.gt_iou < 0.3) {
        double best = 0.0;
        for (const Box& g : gts) best = std::max(best, iou(p.box, g));
        CHECK(best < 0.3);
      }
    }
  }

  SUBCASE("scene without boxes yields all negatives") {
    ProposalParams params;
    Rng rng(4);
    auto props = make_proposals({}, {}, 160, 96, 16, params, rng);
    CHECK(props.size() == 16);
    for (const Proposal& p : props) CHECK(p.matched_gt == -1);
  }

  SUBCASE("recorded iou matches a recomputation") {
    ProposalParams params;
    Rng rng(12);
    auto props = make_proposals(gts, labels, 160, 96, 32, params, rng);
    for (const Proposal& p : props) {
      if (p.matched_gt < 0) continue;
      CHECK(std::abs(p.gt_iou - iou(p.box, gts[p.matched_gt])) < 1e-9);
    }
  }
}

TEST_CASE("roi_align on a constant map") {
  Tensor feat = Tensor::full({10, 12, 3}, 0.75);
  Tensor out = roi_align(feat, {Box{1.3, 2.7, 9.1, 8.2}}, 14, 14, 1.0);
  CHECK(out.shape() == Shape{1, 14, 14, 3});
  for (double v : out.data()) CHECK(v == doctest::Approx(0.75));
}

TEST_CASE("roi_align copies an aligned integer region exactly") {
  Rng rng(8);
  Tensor feat = Tensor::randn({20, 20, 2}, rng, 1.0);
  Tensor out = roi_align(feat, {Box{3, 2, 17, 16}}, 14, 14, 1.0);
  for (int r = 0; r < 14; ++r)
    for (int c = 0; c < 14; ++c)
      for (int ch = 0; ch < 2; ++ch)
        CHECK(out.at({0, r, c, ch}) == feat.at({2 + r, 3 + c, ch}));
}

TEST_CASE("roi_align is linear in the features") {
  set_precision(Precision::f64);
  Rng rng(10);
  Tensor x = Tensor::randn({8, 9, 2}, rng, 1.0);
  Tensor y = Tensor::randn({8, 9, 2}, rng, 1.0);
  const std::vector<Box> boxes = {{0.7, 1.1, 7.4, 8.3}};
  Tensor fx = roi_align(x, boxes, 5, 5, 1.0);
  Tensor fy = roi_align(y, boxes, 5, 5, 1.0);
  Tensor fxy = roi_align(add(x, y), boxes, 5, 5, 1.0);
  Tensor fax = roi_align(scale(x, 2.5), boxes, 5, 5, 1.0);
  for (int64_t i = 0; i < fx.size(); ++i) {
    CHECK(fxy.data()[i] == doctest::Approx(fx.data()[i] + fy.data()[i]).epsilon(1e-12));
    CHECK(fax.data()[i] == doctest::Approx(2.5 * fx.data()[i]).epsilon(1e-12));
  }
  set_precision(Precision::f32);
}

TEST_CASE("roi_align gradcheck") {
  set_precision(Precision::f64);
  Rng rng(21);
  Tensor feat = Tensor::randn({7, 7, 2}, rng, 1.0, true);
  Tensor w = Tensor::randn({2, 4, 4, 2}, rng, 1.0, false);
  const std::vector<Box> boxes = {{0.6, 0.9, 5.7, 6.2}, {2.0, 1.0, 7.0, 7.0}};
  auto fn = [&]() { return sum_all(mul(roi_align(feat, boxes, 4, 4, 1.0), w)); };
  CHECK(gradcheck(fn, {feat}, 1e-5, 1e-4).pass);
  set_precision(Precision::f32);
}

TEST_CASE("nms basics") {
  CHECK(nms({Box{0, 0, 2, 2}}, {0.5}, 0.4) == std::vector<int>{0});
  auto kept = nms({Box{0, 0, 2, 2}, Box{0, 0, 2, 2}}, {0.9, 0.8}, 0.4);
  CHECK(kept == std::vector<int>{0});
}

TEST_CASE("nms matches the naive oracle") {
  Rng rng(14);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 1 + static_cast<int>(rng.uniform_int(50));
    std::vector<Box> boxes;
    std::vector<double> scores;
    for (int i = 0; i < n; ++i) {
      boxes.push_back(random_box(rng, 60, 60));
      scores.push_back(rng.uniform());
    }
    CHECK(nms(boxes, scores, 0.4) == nms_oracle(boxes, scores, 0.4));
  }
}

TEST_CASE("nms keep-set is permutation invariant for distinct scores") {
  Rng rng(15);
  std::vector<Box> boxes;
  std::vector<double> scores;
  for (int i = 0; i < 20; ++i) {
    boxes.push_back(random_box(rng, 50, 50));
    scores.push_back(0.01 * i + rng.uniform() * 0.005);
  }
  auto canon = [&](const std::vector<Box>& bs, const std::vector<double>& ss) {
    std::multiset<double> kept_scores;
    for (int k : nms(bs, ss, 0.5)) kept_scores.insert(ss[k]);
    return kept_scores;
  };
  const auto base = canon(boxes, scores);

  std::vector<int> perm(boxes.size());
  for (size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<int>(i);
  Rng shuffle_rng(99);
  for (int trial = 0; trial < 5; ++trial) {
    shuffle_rng.shuffle(perm);
    std::vector<Box> pb;
    std::vector<double> ps;
    for (int i : perm) {
      pb.push_back(boxes[i]);
      ps.push_back(scores[i]);
    }
    CHECK(canon(pb, ps) == base);
  }
}
