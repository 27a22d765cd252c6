#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <sstream>

#include "coat/losses.hpp"
#include "coat/toybench.hpp"

using namespace coat;

namespace {

struct F64Mode {
  F64Mode() { set_precision(Precision::f64); }
  ~F64Mode() { set_precision(Precision::f32); }
};

OimState make_state(int64_t l, int64_t d, OimConfig cfg = {}, uint64_t seed = 1) {
  Rng rng(seed);
  return OimState(l, d, cfg, rng);
}

Tensor unit_rows(std::vector<std::vector<double>> rows) {
  std::vector<double> flat;
  const int64_t d = static_cast<int64_t>(rows[0].size());
  for (auto& r : rows) {
    double n = 0.0;
    for (double v : r) n += v * v;
    n = std::sqrt(n);
    for (double v : r) flat.push_back(v / n);
  }
  return make_tensor({static_cast<int64_t>(rows.size()), d}, std::move(flat));
}

}  // namespace

TEST_CASE("smooth_l1 analytic values") {
  CHECK(smooth_l1_mean(Tensor::from_data({1}, {0.5}), Tensor::zeros({1})).item() ==
        doctest::Approx(0.125));
  CHECK(smooth_l1_mean(Tensor::from_data({1}, {2.0}), Tensor::zeros({1})).item() ==
        doctest::Approx(1.5));
  Tensor p = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  CHECK(smooth_l1_mean(p, p).item() == doctest::Approx(0.0));
  CHECK_FALSE(smooth_l1(Tensor(), Tensor()).defined());  // no positives contribute nothing
}

TEST_CASE("detection classification loss") {
  F64Mode mode;
  // perfect one-hot logits drive the loss under 1e-6
  Tensor good = Tensor::from_data({2, 2}, {20, -20, -20, 20});
  CHECK(det_cls_loss(good, {0, 1}).item() < 1e-6);

  Tensor uniform = Tensor::zeros({4, 2});
  CHECK(det_cls_loss(uniform, {0, 1, 0, 1}).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("oim loss frozen value") {
  F64Mode mode;
  // L=2 orthogonal table, query equals its own row, tau=1, empty queue:
  // CE([1,0]) = log(1 + e^-1)
  OimConfig cfg;
  cfg.tau = 1.0;
  OimState state = make_state(2, 2, cfg);
  {
    auto lut = state.lut();
    auto data = lut.mutable_data();
    data[0] = 1.0;
    data[1] = 0.0;
    data[2] = 0.0;
    data[3] = 1.0;
  }
  Tensor emb = Tensor::from_data({1, 2}, {1.0, 0.0});
  const double loss = state.loss(emb, {0}).item();
  CHECK(loss == doctest::Approx(std::log(1.0 + std::exp(-1.0))).epsilon(1e-12));
  CHECK(loss == doctest::Approx(0.3133).epsilon(1e-3));
}

TEST_CASE("oim update semantics") {
  SUBCASE("momentum one freezes the table") {
    OimConfig cfg;
    cfg.momentum = 1.0;
    OimState state = make_state(3, 4, cfg);
    std::vector<double> before(state.lut().data().begin(), state.lut().data().end());
    Tensor emb = unit_rows({{1, 2, 3, 4}, {4, 3, 2, 1}});
    state.update(emb, {0, 2});
    for (size_t i = 0; i < before.size(); ++i) CHECK(state.lut().data()[i] == before[i]);
  }

  SUBCASE("queue eviction is FIFO") {
    OimConfig cfg;
    cfg.cq_capacity = 3;
    OimState state = make_state(2, 2, cfg);
    auto push = [&state](double x, double y) {
      Tensor e = unit_rows({{x, y}});
      state.update(e, {kUnlabeledId});
    };
    push(1, 0);
    push(0, 1);
    push(1, 1);
    CHECK(state.cq_count() == 3);
    push(2, 1);  // evicts the first
    CHECK(state.cq_count() == 3);
    auto rows = state.cq_rows();
    CHECK(rows[0][0] == doctest::Approx(0.0));  // (0,1) is now oldest
    CHECK(rows[0][1] == doctest::Approx(1.0));
    const double inv = 1.0 / std::sqrt(5.0);
    CHECK(rows[2][0] == doctest::Approx(2.0 * inv));
    CHECK(rows[2][1] == doctest::Approx(1.0 * inv));
  }

  SUBCASE("rows stay unit norm through updates") {
    OimState state = make_state(4, 8);
    Rng rng(3);
    for (int step = 0; step < 200; ++step) {
      Tensor e = l2_normalize_rows(Tensor::randn({3, 8}, rng, 1.0));
      const std::vector<int> ids = {static_cast<int>(rng.uniform_int(4)), kUnlabeledId,
                                    static_cast<int>(rng.uniform_int(4))};
      state.update(e, ids);
    }
    for (int64_t r = 0; r < 4; ++r) {
      double n = 0.0;
      for (int64_t d = 0; d < 8; ++d) n += state.lut().at({r, d}) * state.lut().at({r, d});
      CHECK(std::abs(std::sqrt(n) - 1.0) < 1e-6);
    }
    for (const auto& row : state.cq_rows()) {
      double n = 0.0;
      for (double v : row) n += v * v;
      CHECK(std::abs(std::sqrt(n) - 1.0) < 1e-6);
    }
  }

  SUBCASE("labeled ids outside the table are rejected") {
    OimState state = make_state(2, 2);
    Tensor e = unit_rows({{1, 0}});
    CHECK_THROWS_AS(state.update(e, {5}), Error);
    CHECK_THROWS_AS(state.loss(e, {5}), Error);
  }
}

TEST_CASE("oim loss decreases as the embedding rotates toward its row") {
  F64Mode mode;
  OimState state = make_state(4, 8, {}, 11);
  // rotate from an orthogonal direction toward the target row
  std::vector<double> target(state.lut().data().begin() + 0, state.lut().data().begin() + 8);
  Rng rng(5);
  std::vector<double> other(8);
  for (double& v : other) v = rng.normal();
  double dot = 0.0;
  for (int i = 0; i < 8; ++i) dot += other[i] * target[i];
  for (int i = 0; i < 8; ++i) other[i] -= dot * target[i];

  double prev = 1e9;
  for (int k = 0; k <= 10; ++k) {
    const double t = k / 10.0;
    std::vector<double> e(8);
    for (int i = 0; i < 8; ++i) e[i] = (1.0 - t) * other[i] + t * target[i];
    Tensor emb = l2_normalize_rows(make_tensor({1, 8}, std::move(e)));
    const double loss = state.loss(emb, {0}).item();
    CHECK(loss < prev);
    prev = loss;
  }
}

TEST_CASE("no gradient reaches the oim storage") {
  F64Mode mode;
  OimState state = make_state(3, 4);
  Rng rng(7);
  Tensor emb = Tensor::randn({2, 4}, rng, 1.0, true);
  Tape tape;
  Tensor loss = state.loss(l2_normalize_rows(emb), {0, 1});
  tape.backward(loss);
  CHECK(emb.has_grad());
  CHECK_FALSE(state.lut().has_grad());
  CHECK_FALSE(state.cq_storage().has_grad());
}

TEST_CASE("id loss") {
  F64Mode mode;
  SUBCASE("single-identity vocabulary is free") {
    Tensor emb = Tensor::from_data({2, 3}, {1, 0, 0, 0, 1, 0});
    Tensor w = Tensor::from_data({3, 1}, {0.3, -2.0, 5.0});
    Tensor b = Tensor::zeros({1});
    CHECK(id_loss(emb, {0, 0}, w, b).item() == doctest::Approx(0.0));
  }

  SUBCASE("uniform logits over 16 ids give ln 16") {
    Tensor emb = Tensor::zeros({3, 4});
    Tensor w = Tensor::zeros({4, 16});
    Tensor b = Tensor::zeros({16});
    CHECK(id_loss(emb, {3, 7, 15}, w, b).item() == doctest::Approx(std::log(16.0)).epsilon(1e-12));
  }

  SUBCASE("unlabeled rows are excluded") {
    Tensor emb = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    Tensor w = Tensor::zeros({2, 4});
    Tensor b = Tensor::zeros({4});
    CHECK(id_loss(emb, {kUnlabeledId, 2}, w, b).item() == doctest::Approx(std::log(4.0)));
    CHECK_FALSE(id_loss(emb, {kUnlabeledId, kUnlabeledId}, w, b).defined());
  }
}

TEST_CASE("total loss follows the multi-stage formula") {
  auto scalar = [](double v) { return Tensor::from_data({1}, {v}); };

  SUBCASE("three stages with the default weights") {
    std::vector<StageLossTerms> stages(3);
    for (int t = 0; t < 3; ++t) {
      stages[t].det_cls = scalar(0.5);
      stages[t].det_reg = scalar(0.5);
      stages[t].has_reid = t > 0;
      if (t > 0) {
        stages[t].oim = scalar(2.0);
        stages[t].id = scalar(4.0);
      }
    }
    LossReport report = total_loss(stages, 0.5, 0.5);
    CHECK(report.total_value == doctest::Approx(3.0 + 0.5 * 4.0 + 0.5 * 8.0));
  }

  SUBCASE("a single stage contributes detection terms only") {
    std::vector<StageLossTerms> stages(1);
    stages[0].det_cls = scalar(1.25);
    stages[0].det_reg = scalar(0.25);
    stages[0].oim = scalar(99.0);  // ignored: stage 1 has no reid
    stages[0].has_reid = false;
    CHECK(total_loss(stages, 0.5, 0.5).total_value == doctest::Approx(1.5));
  }

  SUBCASE("doubling lambda_oim doubles exactly the oim share") {
    std::vector<StageLossTerms> stages(2);
    stages[0].det_cls = scalar(1.0);
    stages[1].det_cls = scalar(1.0);
    stages[1].has_reid = true;
    stages[1].oim = scalar(3.0);
    stages[1].id = scalar(5.0);
    const double t1 = total_loss(stages, 0.5, 0.5).total_value;
    const double t2 = total_loss(stages, 1.0, 0.5).total_value;
    CHECK(t2 - t1 == doctest::Approx(0.5 * 3.0));
  }

  SUBCASE("the report decomposes back to the total") {
    std::vector<StageLossTerms> stages(3);
    Rng rng(13);
    for (int t = 0; t < 3; ++t) {
      stages[t].det_cls = scalar(rng.uniform(0.1, 2.0));
      stages[t].det_reg = scalar(rng.uniform(0.1, 2.0));
      stages[t].has_reid = t > 0;
      if (t > 0) {
        stages[t].oim = scalar(rng.uniform(0.1, 2.0));
        stages[t].id = scalar(rng.uniform(0.1, 2.0));
      }
    }
    LossReport report = total_loss(stages, 0.5, 0.5);
    double rebuilt = 0.0;
    for (const auto& st : report.stages) {
      rebuilt += st.det_cls + st.det_reg;
      if (st.has_reid) rebuilt += 0.5 * st.oim + 0.5 * st.id;
    }
    CHECK(std::abs(rebuilt - report.total_value) < 1e-6);
  }
}

TEST_CASE("oim state serialization round trip") {
  OimConfig cfg;
  cfg.cq_capacity = 5;
  OimState state = make_state(3, 4, cfg);
  Rng rng(2);
  for (int i = 0; i < 7; ++i) {
    Tensor e = l2_normalize_rows(Tensor::randn({1, 4}, rng, 1.0));
    state.update(e, {i % 2 == 0 ? kUnlabeledId : 1});
  }
  std::stringstream ss;
  state.serialize(ss);
  OimState back = OimState::deserialize(ss);
  CHECK(back.cq_count() == state.cq_count());
  CHECK(back.cq_cursor() == state.cq_cursor());
  CHECK(back.n_labeled() == 3);
  for (int64_t i = 0; i < state.lut().size(); ++i)
    CHECK(back.lut().data()[i] == state.lut().data()[i]);
  for (int64_t i = 0; i < state.cq_storage().size(); ++i)
    CHECK(back.cq_storage().data()[i] == state.cq_storage().data()[i]);
}
