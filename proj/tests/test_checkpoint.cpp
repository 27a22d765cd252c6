#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "coat/trainer.hpp"

using namespace coat;

namespace {

RunConfig tiny_run_config() {
  RunConfig cfg;
  cfg.bench.n_train_scenes = 4;
  cfg.bench.n_test_scenes = 10;
  cfg.bench.n_identities = 4;
  cfg.bench.n_unlabeled = 1;
  cfg.bench.gallery_size = 4;
  cfg.bench.image_h = 48;
  cfg.bench.image_w = 64;
  cfg.cascade.feat_channels = 16;
  cfg.cascade.embed_dim = 8;
  cfg.cascade.roi_size = 6;
  cfg.cascade.proposals_per_image = 8;
  cfg.cascade.stem_channels = {8};
  cfg.cascade.stem_strides = {2, 2};
  cfg.cascade.heads = 2;
  cfg.cascade.tokenizer.channels = 16;
  cfg.oim.cq_capacity = 8;
  cfg.optim.epochs = 2;
  cfg.optim.decay_epoch = 2;
  cfg.optim.batch_scenes = 2;
  cfg.eval_gallery_sizes = {4};
  cfg.precision_bits = 64;
  return cfg;
}

std::string file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace

TEST_CASE("config renders and parses losslessly") {
  RunConfig cfg = default_toy_config();
  cfg.seed = 123;
  cfg.lambda_oim = 0.75;
  cfg.cascade.iou_thresholds = {0.45, 0.55, 0.72};
  cfg.cascade.tokenizer.scales = {{1, 1, 0}, {3, 1, 1}};
  cfg.optim.lr = 0.0123;
  const std::string text = render_config(cfg);
  RunConfig back = parse_config(text);
  CHECK(render_config(back) == text);
  CHECK(back.seed == 123);
  CHECK(back.cascade.iou_thresholds[2] == 0.72);
  CHECK(back.optim.lr == 0.0123);
}

TEST_CASE("invalid configs are rejected with the config code") {
  RunConfig cfg = default_toy_config();
  cfg.cascade.iou_thresholds = {0.7, 0.6, 0.5};
  try {
    cfg.validate();
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.code() == "E_CONFIG");
  }
  CHECK_THROWS_AS(parse_config("{ not json"), Error);
}

TEST_CASE("learning rate schedule warms up then decays") {
  OptimConfig o;
  o.lr = 0.003;
  o.epochs = 30;
  o.warmup_epochs = 1;
  o.decay_epoch = 20;
  const int spe = 32;
  CHECK(lr_at(o, 0, 0, spe) == doctest::Approx(0.003 / 32));
  CHECK(lr_at(o, 0, 31, spe) == doctest::Approx(0.003));
  CHECK(lr_at(o, 5, 0, spe) == doctest::Approx(0.003));
  CHECK(lr_at(o, 19, 0, spe) == doctest::Approx(0.0003));
  CHECK(lr_at(o, 29, 0, spe) == doctest::Approx(0.0003));
}

TEST_CASE("checkpoint round trip is bit-exact") {
  set_precision(Precision::f64);
  RunConfig cfg = tiny_run_config();
  Benchmark bench = generate(cfg.bench);
  const std::string dir = "/tmp/coat_ckpt_rt";
  std::filesystem::remove_all(dir);
  train_run(cfg, bench, dir);

  const std::string path = dir + "/checkpoint.coat";
  Checkpoint ckpt = load_checkpoint(path);
  const std::string copy = dir + "/copy.coat";
  save_checkpoint(copy, ckpt);
  CHECK(file_bytes(path) == file_bytes(copy));
  CHECK(ckpt.epoch == 2);
  set_precision(Precision::f32);
}

TEST_CASE("two identical runs produce bit-identical checkpoints") {
  set_precision(Precision::f64);
  RunConfig cfg = tiny_run_config();
  Benchmark bench = generate(cfg.bench);
  const std::string d1 = "/tmp/coat_det_a", d2 = "/tmp/coat_det_b";
  std::filesystem::remove_all(d1);
  std::filesystem::remove_all(d2);
  train_run(cfg, bench, d1);
  train_run(cfg, bench, d2);
  CHECK(file_bytes(d1 + "/checkpoint.coat") == file_bytes(d2 + "/checkpoint.coat"));
  set_precision(Precision::f32);
}

TEST_CASE("resume reproduces the uninterrupted run bit-exactly") {
  set_precision(Precision::f64);
  RunConfig cfg = tiny_run_config();
  Benchmark bench = generate(cfg.bench);

  const std::string full_dir = "/tmp/coat_resume_full";
  std::filesystem::remove_all(full_dir);
  train_run(cfg, bench, full_dir);

  RunConfig first = cfg;
  first.optim.epochs = 1;
  const std::string part_dir = "/tmp/coat_resume_part";
  std::filesystem::remove_all(part_dir);
  train_run(first, bench, part_dir);

  // resuming needs the same schedule the checkpoint was cut from
  const std::string resumed_dir = "/tmp/coat_resume_cont";
  std::filesystem::remove_all(resumed_dir);
  Checkpoint one = load_checkpoint(part_dir + "/checkpoint.coat");
  one.config.optim.epochs = 2;
  save_checkpoint(part_dir + "/epoch1.coat", one);
  train_run(cfg, bench, resumed_dir, part_dir + "/epoch1.coat");

  CHECK(file_bytes(full_dir + "/checkpoint.coat") == file_bytes(resumed_dir + "/checkpoint.coat"));
  set_precision(Precision::f32);
}

TEST_CASE("loss log decomposes to the logged total") {
  set_precision(Precision::f64);
  RunConfig cfg = tiny_run_config();
  cfg.optim.epochs = 1;
  Benchmark bench = generate(cfg.bench);
  const std::string dir = "/tmp/coat_losslog";
  std::filesystem::remove_all(dir);
  train_run(cfg, bench, dir);

  std::ifstream log(dir + "/loss.csv");
  std::string header, row;
  REQUIRE(std::getline(log, header));
  REQUIRE(std::getline(log, row));
  std::vector<double> cols;
  std::stringstream ss(row);
  std::string cell;
  while (std::getline(ss, cell, ',')) cols.push_back(std::stod(cell));
  // epoch, step, lr, total, then 4 columns per stage
  REQUIRE(cols.size() == 4 + 4 * 3);
  const double total = cols[3];
  double rebuilt = 0.0;
  for (int t = 0; t < 3; ++t) {
    rebuilt += cols[4 + 4 * t] + cols[5 + 4 * t];
    if (t > 0) rebuilt += cfg.lambda_oim * cols[6 + 4 * t] + cfg.lambda_id * cols[7 + 4 * t];
  }
  CHECK(std::abs(total - rebuilt) < 1e-6);
  set_precision(Precision::f32);
}

TEST_CASE("non-finite weights abort training with the nan-loss code") {
  set_precision(Precision::f64);
  RunConfig cfg = tiny_run_config();
  cfg.optim.epochs = 1;
  Benchmark bench = generate(cfg.bench);

  Model model(cfg.cascade, cfg.bench.n_identities, 0);
  auto params = model.params();
  params[0].mutable_data()[0] = std::numeric_limits<double>::infinity();

  TrainPassInput in;
  in.model = &model;
  in.scenes = {&bench.train[0]};
  in.proposal_seed = 1;
  in.plan_seed = 2;
  try {
    run_train_pass(in);
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.code() == "E_NONFINITE");  // the trainer maps this to E_NAN_LOSS with context
  }
  set_precision(Precision::f32);
}

TEST_CASE("checkpoints with a corrupt header are rejected") {
  const std::string path = "/tmp/coat_bad.coat";
  {
    std::ofstream out(path, std::ios::binary);
    out << "NOTACKPT garbage";
  }
  try {
    load_checkpoint(path);
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.code() == "E_FORMAT");
  }
}
