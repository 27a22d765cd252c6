#pragma once

#include <string>
#include <vector>

#include "coat/attention.hpp"
#include "coat/evaluation.hpp"
#include "coat/geometry.hpp"
#include "coat/losses.hpp"
#include "coat/toybench.hpp"

namespace coat {

struct CascadeConfig {
  int stages = 3;                                        // T
  std::vector<double> iou_thresholds = {0.5, 0.6, 0.7};  // u_t, non-decreasing
  std::vector<double> nms_thresholds = {0.4, 0.4, 0.5};
  int proposals_per_image = 128;
  int64_t embed_dim = 256;
  int64_t feat_channels = 128;
  int64_t roi_size = 14;
  std::vector<int64_t> stem_channels = {32, 64};  // hidden widths; a final conv maps to feat_channels
  std::vector<int64_t> stem_strides = {2, 2, 1};  // one per stem conv, hidden + final
  bool reid_at_stage1 = false;
  bool vanilla_attention = false;  // ablation: no token exchange in training
  bool donor_grad = true;
  ProposalParams proposals;
  TokenizerConfig tokenizer;
  int64_t heads = 8;
  int64_t ffn_hidden = 0;       // 0 = 2 * scale channels
  int64_t strip_thickness = 0;  // 0 = ceil(extent/4)

  void validate() const;
  bool stage_has_reid(int t) const { return t > 0 || reid_at_stage1; }
};

struct Assignment {
  int label = 0;  // 1 person / 0 background
  int identity = kUnlabeledId;
  int gt_index = -1;
  double iou = 0.0;
};

// positive iff max-IoU >= u; positives inherit the argmax ground truth,
// ties to the lower index
std::vector<Assignment> assign_labels(const std::vector<Box>& boxes, const std::vector<Box>& gt_boxes,
                                      const std::vector<int>& gt_labels, double u);

struct StageModel {
  TransformerBlock block;
  Tensor cls_w, cls_b;    // c -> 2, index 1 = person
  Tensor reg_w, reg_b;    // c -> 4
  Tensor reid_w, reid_b;  // c -> embed_dim; undefined without a ReID head
  bool has_reid = false;
};

class Model {
 public:
  Model() = default;
  Model(CascadeConfig cfg, int64_t n_labeled_ids, uint64_t seed);

  const CascadeConfig& config() const { return cfg_; }
  int64_t n_labeled() const { return n_labeled_; }

  // [H,W,3] image -> [H',W',feat_channels] shared stem features
  Tensor stem_forward(const Tensor& image) const;
  double spatial_scale() const;

  std::vector<StageModel>& stages() { return stages_; }
  const std::vector<StageModel>& stages() const { return stages_; }
  const Tensor& id_classifier_w() const { return idcls_w_; }
  const Tensor& id_classifier_b() const { return idcls_b_; }
  bool has_id_classifier() const { return idcls_w_.defined(); }

  // all learned parameters, named, in a stable order
  std::vector<Tensor> params() const;

 private:
  CascadeConfig cfg_;
  int64_t n_labeled_ = 0;
  std::vector<Tensor> stem_w_, stem_b_;
  std::vector<StageModel> stages_;
  Tensor idcls_w_, idcls_b_;
};

// proposals (or refined boxes) feeding one stage, spanning the whole batch
struct StageBank {
  std::vector<int> scene;  // index into the batch
  std::vector<Box> boxes;
  std::vector<Assignment> assign;
};

struct StageTrainOutput {
  StageBank bank;
  Tensor cls_logits;  // [P,2]
  Tensor reg_deltas;  // [P,4]
  Tensor embeddings;  // [P,embed] unit rows; undefined without a ReID head
  std::vector<Box> refined;
  std::vector<char> refined_valid;  // false when the decoded box collapsed
  ExchangePlan plan;
};

struct TrainForward {
  std::vector<StageTrainOutput> stages;
  std::vector<StageLossTerms> loss_terms;
};

struct TrainPassInput {
  const Model* model = nullptr;
  std::vector<const Scene*> scenes;
  uint64_t proposal_seed = 0;
  uint64_t plan_seed = 0;
  // when set, stage banks/assignments are taken as given instead of being
  // derived from the live refinements (used by the full-loss gradient check)
  const std::vector<StageBank>* frozen_banks = nullptr;
  const std::vector<OimState>* oim_states = nullptr;  // size T, entries for ReID stages
  bool exchange_tokens = true;                        // false in vanilla-attention mode
};

// One taped pass over a mini-batch: stem -> per stage (roi-align -> occluded
// attention -> heads -> losses) with refined boxes carried to the next stage
// as plain geometry.
TrainForward run_train_pass(const TrainPassInput& in);

// deterministic inference on one scene; per-stage NMS, final-stage embeddings
std::vector<Detection> run_inference(const Model& model, const Scene& scene, uint64_t seed,
                                     uint64_t scene_tag);

// last-stage embedding of a ground-truth box (the query side of retrieval)
std::vector<double> embed_box(const Model& model, const Scene& scene, const Box& box);

}  // namespace coat
