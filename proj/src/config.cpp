#include "coat/config.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

namespace coat {

using nlohmann::json;

namespace {

json split_to_json(const SplitSpec& s) {
  return {{"n_train_scenes", s.n_train_scenes}, {"n_test_scenes", s.n_test_scenes},
          {"n_identities", s.n_identities},     {"n_unlabeled", s.n_unlabeled},
          {"gallery_size", s.gallery_size},     {"rng_seed", s.rng_seed},
          {"image_h", s.image_h},               {"image_w", s.image_w}};
}

SplitSpec split_from_json(const json& j) {
  SplitSpec s;
  s.n_train_scenes = j.value("n_train_scenes", s.n_train_scenes);
  s.n_test_scenes = j.value("n_test_scenes", s.n_test_scenes);
  s.n_identities = j.value("n_identities", s.n_identities);
  s.n_unlabeled = j.value("n_unlabeled", s.n_unlabeled);
  s.gallery_size = j.value("gallery_size", s.gallery_size);
  s.rng_seed = j.value("rng_seed", s.rng_seed);
  s.image_h = j.value("image_h", s.image_h);
  s.image_w = j.value("image_w", s.image_w);
  return s;
}

json tokenizer_to_json(const TokenizerConfig& t) {
  json scales = json::array();
  for (const ScaleSpec& sc : t.scales)
    scales.push_back({{"kernel", sc.kernel}, {"stride", sc.stride}, {"pad", sc.pad}});
  return {{"scales", scales}, {"patch", t.patch}};
}

TokenizerConfig tokenizer_from_json(const json& j, int64_t channels) {
  TokenizerConfig t;
  if (j.contains("scales")) {
    t.scales.clear();
    for (const auto& sc : j.at("scales"))
      t.scales.push_back({sc.value("kernel", int64_t{1}), sc.value("stride", int64_t{1}),
                          sc.value("pad", int64_t{0})});
  }
  t.patch = j.value("patch", t.patch);
  t.channels = channels;
  return t;
}

json cascade_to_json(const CascadeConfig& c) {
  return {{"stages", c.stages},
          {"iou_thresholds", c.iou_thresholds},
          {"nms_thresholds", c.nms_thresholds},
          {"proposals_per_image", c.proposals_per_image},
          {"embed_dim", c.embed_dim},
          {"feat_channels", c.feat_channels},
          {"roi_size", c.roi_size},
          {"stem_channels", c.stem_channels},
          {"stem_strides", c.stem_strides},
          {"reid_at_stage1", c.reid_at_stage1},
          {"vanilla_attention", c.vanilla_attention},
          {"donor_grad", c.donor_grad},
          {"proposal_jitter_center", c.proposals.jitter_center},
          {"proposal_jitter_scale", c.proposals.jitter_scale},
          {"proposal_pos_fraction", c.proposals.pos_fraction},
          {"proposal_neg_iou_max", c.proposals.neg_iou_max},
          {"tokenizer", tokenizer_to_json(c.tokenizer)},
          {"heads", c.heads},
          {"ffn_hidden", c.ffn_hidden},
          {"strip_thickness", c.strip_thickness}};
}

CascadeConfig cascade_from_json(const json& j) {
  CascadeConfig c;
  c.stages = j.value("stages", c.stages);
  c.iou_thresholds = j.value("iou_thresholds", c.iou_thresholds);
  c.nms_thresholds = j.value("nms_thresholds", c.nms_thresholds);
  c.proposals_per_image = j.value("proposals_per_image", c.proposals_per_image);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.feat_channels = j.value("feat_channels", c.feat_channels);
  c.roi_size = j.value("roi_size", c.roi_size);
  c.stem_channels = j.value("stem_channels", c.stem_channels);
  c.stem_strides = j.value("stem_strides", c.stem_strides);
  c.reid_at_stage1 = j.value("reid_at_stage1", c.reid_at_stage1);
  c.vanilla_attention = j.value("vanilla_attention", c.vanilla_attention);
  c.donor_grad = j.value("donor_grad", c.donor_grad);
  c.proposals.jitter_center = j.value("proposal_jitter_center", c.proposals.jitter_center);
  c.proposals.jitter_scale = j.value("proposal_jitter_scale", c.proposals.jitter_scale);
  c.proposals.pos_fraction = j.value("proposal_pos_fraction", c.proposals.pos_fraction);
  c.proposals.neg_iou_max = j.value("proposal_neg_iou_max", c.proposals.neg_iou_max);
  if (j.contains("tokenizer")) c.tokenizer = tokenizer_from_json(j.at("tokenizer"), c.feat_channels);
  c.tokenizer.channels = c.feat_channels;
  c.heads = j.value("heads", c.heads);
  c.ffn_hidden = j.value("ffn_hidden", c.ffn_hidden);
  c.strip_thickness = j.value("strip_thickness", c.strip_thickness);
  return c;
}

json optim_to_json(const OptimConfig& o) {
  return {{"lr", o.lr},
          {"momentum", o.momentum},
          {"epochs", o.epochs},
          {"warmup_epochs", o.warmup_epochs},
          {"decay_epoch", o.decay_epoch},
          {"decay_factor", o.decay_factor},
          {"batch_scenes", o.batch_scenes}};
}

OptimConfig optim_from_json(const json& j) {
  OptimConfig o;
  o.lr = j.value("lr", o.lr);
  o.momentum = j.value("momentum", o.momentum);
  o.epochs = j.value("epochs", o.epochs);
  o.warmup_epochs = j.value("warmup_epochs", o.warmup_epochs);
  o.decay_epoch = j.value("decay_epoch", o.decay_epoch);
  o.decay_factor = j.value("decay_factor", o.decay_factor);
  o.batch_scenes = j.value("batch_scenes", o.batch_scenes);
  return o;
}

}  // namespace

void RunConfig::validate() const {
  cascade.validate();
  check(lambda_oim >= 0.0 && lambda_id >= 0.0, "E_CONFIG", "loss weights must be non-negative");
  check(optim.epochs >= 1 && optim.batch_scenes >= 1, "E_CONFIG", "bad optimizer schedule");
  check(optim.lr > 0.0, "E_CONFIG", "learning rate must be positive");
  check(precision_bits == 0 || precision_bits == 32 || precision_bits == 64, "E_CONFIG",
        "precision must be 32 or 64");
  for (int s : eval_gallery_sizes)
    check(s >= 1 && s <= bench.n_test_scenes, "E_CONFIG", "gallery sweep size exceeds the test set");
}

RunConfig default_toy_config() {
  RunConfig cfg;
  cfg.bench = SplitSpec{};  // 16 labeled + 4 unlabeled identities, 64/32 scenes
  cfg.cascade.feat_channels = 32;
  cfg.cascade.embed_dim = 64;
  cfg.cascade.roi_size = 12;  // the paper-scale 14x14 overruns a laptop-CPU budget
  cfg.cascade.proposals_per_image = 16;
  cfg.cascade.stem_channels = {16, 32};
  cfg.cascade.stem_strides = {2, 2, 1};
  cfg.cascade.tokenizer.channels = cfg.cascade.feat_channels;
  cfg.oim.cq_capacity = 64;
  cfg.optim = OptimConfig{};
  return cfg;
}

std::string render_config(const RunConfig& cfg) {
  json j = {{"seed", cfg.seed},
            {"precision", cfg.precision_bits},
            {"bench", split_to_json(cfg.bench)},
            {"cascade", cascade_to_json(cfg.cascade)},
            {"oim", {{"tau", cfg.oim.tau}, {"momentum", cfg.oim.momentum}, {"cq_capacity", cfg.oim.cq_capacity}}},
            {"lambda_oim", cfg.lambda_oim},
            {"lambda_id", cfg.lambda_id},
            {"optim", optim_to_json(cfg.optim)},
            {"eval_gallery_sizes", cfg.eval_gallery_sizes}};
  return j.dump(2);
}

RunConfig parse_config(const std::string& text) {
  json j = json::parse(text, nullptr, false);
  check(!j.is_discarded(), "E_CONFIG", "config is not valid JSON");
  RunConfig cfg = default_toy_config();
  cfg.seed = j.value("seed", cfg.seed);
  cfg.precision_bits = j.value("precision", cfg.precision_bits);
  if (j.contains("bench")) cfg.bench = split_from_json(j.at("bench"));
  if (j.contains("cascade")) cfg.cascade = cascade_from_json(j.at("cascade"));
  if (j.contains("oim")) {
    cfg.oim.tau = j.at("oim").value("tau", cfg.oim.tau);
    cfg.oim.momentum = j.at("oim").value("momentum", cfg.oim.momentum);
    cfg.oim.cq_capacity = j.at("oim").value("cq_capacity", cfg.oim.cq_capacity);
  }
  cfg.lambda_oim = j.value("lambda_oim", cfg.lambda_oim);
  cfg.lambda_id = j.value("lambda_id", cfg.lambda_id);
  if (j.contains("optim")) cfg.optim = optim_from_json(j.at("optim"));
  cfg.eval_gallery_sizes = j.value("eval_gallery_sizes", cfg.eval_gallery_sizes);
  cfg.validate();
  return cfg;
}

RunConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  check(in.good(), "E_IO", "cannot open config file '" + path + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return parse_config(os.str());
}

void save_config_file(const std::string& path, const RunConfig& cfg) {
  std::ofstream out(path);
  check(out.good(), "E_IO", "cannot write config file '" + path + "'");
  out << render_config(cfg) << "\n";
}

}  // namespace coat
