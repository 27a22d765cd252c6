#include "coat/cascade.hpp"

#include <algorithm>
#include <cmath>

namespace coat {

void CascadeConfig::validate() const {
  check(stages >= 1, "E_CONFIG", "cascade needs at least one stage");
  check(static_cast<int>(iou_thresholds.size()) == stages, "E_CONFIG",
        "one IoU threshold per stage required");
  check(static_cast<int>(nms_thresholds.size()) == stages, "E_CONFIG",
        "one NMS threshold per stage required");
  for (double u : iou_thresholds) check(u > 0.0 && u < 1.0, "E_CONFIG", "IoU thresholds must lie in (0,1)");
  for (size_t i = 1; i < iou_thresholds.size(); ++i)
    check(iou_thresholds[i] >= iou_thresholds[i - 1], "E_CONFIG", "IoU thresholds must be non-decreasing");
  check(proposals_per_image >= 2, "E_CONFIG", "need at least two proposals per image");
  check(embed_dim >= 1 && feat_channels >= 1 && roi_size >= 1, "E_CONFIG", "bad model extents");
  check(stem_strides.size() == stem_channels.size() + 1, "E_CONFIG",
        "stem needs one stride per conv (hidden layers plus the output conv)");
  check(feat_channels % tokenizer.n_scales() == 0, "E_CONFIG", "channels must split across scales");
  check((feat_channels / tokenizer.n_scales()) % heads == 0, "E_CONFIG",
        "scale channels must split across heads");
}

std::vector<Assignment> assign_labels(const std::vector<Box>& boxes, const std::vector<Box>& gt_boxes,
                                      const std::vector<int>& gt_labels, double u) {
  check(u > 0.0 && u < 1.0, "E_CONFIG", "assignment threshold must lie in (0,1)");
  check(gt_boxes.size() == gt_labels.size(), "E_SHAPE", "gt box/label count mismatch");
  std::vector<Assignment> out(boxes.size());
  for (size_t i = 0; i < boxes.size(); ++i) {
    Assignment& a = out[i];
    for (size_t g = 0; g < gt_boxes.size(); ++g) {
      const double v = iou(boxes[i], gt_boxes[g]);
      if (v > a.iou) {
        a.iou = v;
        a.gt_index = static_cast<int>(g);
      }
    }
    if (a.gt_index >= 0 && a.iou >= u) {
      a.label = 1;
      a.identity = gt_labels[a.gt_index];
    }
  }
  return out;
}

// ---- model ---------------------------------------------------------------------

namespace {

Tensor xavier(int64_t fan_in, int64_t fan_out, const Shape& shape, Rng& rng) {
  const double std = std::sqrt(2.0 / static_cast<double>(fan_in + fan_out));
  return Tensor::randn(shape, rng, std, true);
}

}  // namespace

Model::Model(CascadeConfig cfg, int64_t n_labeled_ids, uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.tokenizer.channels = cfg_.feat_channels;
  cfg_.validate();
  cfg_.tokenizer.validate(cfg_.roi_size, cfg_.roi_size);
  n_labeled_ = n_labeled_ids;

  Rng rng = Rng::derive(seed, "model_init");
  std::vector<int64_t> widths = cfg_.stem_channels;
  widths.push_back(cfg_.feat_channels);
  int64_t cin = 3;
  for (int64_t cout : widths) {
    stem_w_.push_back(xavier(9 * cin, cout, {3, 3, cin, cout}, rng));
    stem_b_.push_back(Tensor::zeros({cout}, true));
    cin = cout;
  }

  const int64_t c = cfg_.feat_channels;
  for (int t = 0; t < cfg_.stages; ++t) {
    StageModel st;
    st.block = TransformerBlock(cfg_.tokenizer, cfg_.heads, cfg_.ffn_hidden, rng);
    // detector-head convention: small-variance init, zero deltas at start
    st.cls_w = Tensor::randn({c, 2}, rng, 0.01, true);
    st.cls_b = Tensor::zeros({2}, true);
    st.reg_w = Tensor::randn({c, 4}, rng, 0.001, true);
    st.reg_b = Tensor::zeros({4}, true);
    st.has_reid = cfg_.stage_has_reid(t);
    if (st.has_reid) {
      st.reid_w = xavier(c, cfg_.embed_dim, {c, cfg_.embed_dim}, rng);
      st.reid_b = Tensor::zeros({cfg_.embed_dim}, true);
    }
    stages_.push_back(std::move(st));
  }

  bool any_reid = false;
  for (const StageModel& st : stages_) any_reid = any_reid || st.has_reid;
  if (any_reid && n_labeled_ > 0) {
    idcls_w_ = xavier(cfg_.embed_dim, n_labeled_, {cfg_.embed_dim, n_labeled_}, rng);
    idcls_b_ = Tensor::zeros({n_labeled_}, true);
  }
}

Tensor Model::stem_forward(const Tensor& image) const {
  const Shape& s = image.shape();
  check(s.size() == 3 && s[2] == 3, "E_SHAPE", "stem expects an [H,W,3] image");
  Tensor x = reshape(image, {1, s[0], s[1], 3});
  for (size_t i = 0; i < stem_w_.size(); ++i) {
    x = conv2d(x, stem_w_[i], stem_b_[i], cfg_.stem_strides[i], 1);
    x = relu(x);
  }
  const Shape& o = x.shape();
  return reshape(x, {o[1], o[2], o[3]});
}

double Model::spatial_scale() const {
  double s = 1.0;
  for (int64_t st : cfg_.stem_strides) s /= static_cast<double>(st);
  return s;
}

std::vector<Tensor> Model::params() const {
  std::vector<Tensor> out;
  auto push = [&out](const std::string& name, Tensor t) {
    Tensor named = t;
    named.set_name(name);
    out.push_back(named);
  };
  for (size_t i = 0; i < stem_w_.size(); ++i) {
    push("stem.conv" + std::to_string(i) + ".w", stem_w_[i]);
    push("stem.conv" + std::to_string(i) + ".b", stem_b_[i]);
  }
  for (size_t t = 0; t < stages_.size(); ++t) {
    const std::string p = "stage" + std::to_string(t);
    stages_[t].block.collect_params(p + ".block", out);
    push(p + ".cls_w", stages_[t].cls_w);
    push(p + ".cls_b", stages_[t].cls_b);
    push(p + ".reg_w", stages_[t].reg_w);
    push(p + ".reg_b", stages_[t].reg_b);
    if (stages_[t].has_reid) {
      push(p + ".reid_w", stages_[t].reid_w);
      push(p + ".reid_b", stages_[t].reid_b);
    }
  }
  if (idcls_w_.defined()) {
    push("idcls.w", idcls_w_);
    push("idcls.b", idcls_b_);
  }
  return out;
}

// ---- shared stage plumbing -------------------------------------------------------

namespace {

// bank entries are grouped by scene; roi-align each contiguous run
Tensor bank_roi_features(const Model& model, const std::vector<Tensor>& stem_features,
                         const StageBank& bank) {
  const int64_t r = model.config().roi_size;
  std::vector<Tensor> parts;
  size_t i = 0;
  while (i < bank.boxes.size()) {
    size_t j = i;
    std::vector<Box> run;
    while (j < bank.boxes.size() && bank.scene[j] == bank.scene[i]) run.push_back(bank.boxes[j++]);
    parts.push_back(roi_align(stem_features[bank.scene[i]], run, r, r, model.spatial_scale()));
    i = j;
  }
  check(!parts.empty(), "E_STATE", "empty proposal bank");
  return parts.size() == 1 ? parts[0] : concat(parts, 0);
}

struct HeadOutputs {
  Tensor cls_logits, reg_deltas, embeddings;
};

HeadOutputs stage_heads(const StageModel& st, const Tensor& pooled) {
  HeadOutputs h;
  h.cls_logits = linear(pooled, st.cls_w, st.cls_b);
  h.reg_deltas = linear(pooled, st.reg_w, st.reg_b);
  if (st.has_reid) h.embeddings = l2_normalize_rows(linear(pooled, st.reid_w, st.reid_b));
  return h;
}

// decodes deltas against the bank boxes, clips, and flags collapsed boxes
void decode_refinements(const StageBank& bank, const Tensor& reg_deltas, double img_w, double img_h,
                        std::vector<Box>& refined, std::vector<char>& valid) {
  const int64_t P = reg_deltas.dim(0);
  refined.resize(P);
  valid.assign(P, 1);
  for (int64_t i = 0; i < P; ++i) {
    const double* d = reg_deltas.data().data() + i * 4;
    Box b = decode_delta({d[0], d[1], d[2], d[3]}, bank.boxes[i]);
    b = clip_to_image(b, img_w, img_h);
    refined[i] = b;
    if (!(b.width() >= 1.0 && b.height() >= 1.0)) valid[i] = 0;
  }
}

}  // namespace

TrainForward run_train_pass(const TrainPassInput& in) {
  const Model& model = *in.model;
  const CascadeConfig& cfg = model.config();
  check(!in.scenes.empty(), "E_STATE", "empty training batch");
  check(!in.oim_states || static_cast<int>(in.oim_states->size()) == cfg.stages, "E_SHAPE",
        "one OIM state per stage expected");

  std::vector<Tensor> stem_features;
  stem_features.reserve(in.scenes.size());
  for (const Scene* s : in.scenes) stem_features.push_back(model.stem_forward(s->image));

  const double img_w = in.scenes[0]->image.dim(1);
  const double img_h = in.scenes[0]->image.dim(0);
  const auto grid = cfg.tokenizer.validate(cfg.roi_size, cfg.roi_size);

  // stage-1 bank: the RPN stand-in
  StageBank bank;
  if (in.frozen_banks) {
    bank = (*in.frozen_banks)[0];
  } else {
    for (size_t s = 0; s < in.scenes.size(); ++s) {
      Rng rng = Rng::derive(in.proposal_seed, "proposals", s);
      auto props = make_proposals(in.scenes[s]->boxes, in.scenes[s]->labels, img_w, img_h,
                                  cfg.proposals_per_image, cfg.proposals, rng);
      for (const Proposal& p : props) {
        bank.scene.push_back(static_cast<int>(s));
        bank.boxes.push_back(p.box);
      }
    }
    bank.assign.clear();
  }

  TrainForward fwd;
  for (int t = 0; t < cfg.stages; ++t) {
    if (bank.assign.empty()) {
      // (re-)assign under this stage's threshold
      bank.assign.resize(bank.boxes.size());
      for (size_t i = 0; i < bank.boxes.size(); ++i) {
        const Scene* sc = in.scenes[bank.scene[i]];
        auto a = assign_labels({bank.boxes[i]}, sc->boxes, sc->labels, cfg.iou_thresholds[t]);
        bank.assign[i] = a[0];
      }
    }
    check(!bank.boxes.empty(), "E_STATE", "all proposals were dropped before stage " + std::to_string(t + 1));

    StageTrainOutput out;
    out.bank = bank;

    Rng plan_rng = Rng::derive(in.plan_seed, "exchange", static_cast<uint64_t>(t));
    out.plan = in.exchange_tokens
                   ? plan_exchange(static_cast<int64_t>(bank.boxes.size()), grid.first, grid.second,
                                   plan_rng, cfg.strip_thickness)
                   : ExchangePlan{};

    Tensor pooled_rois = bank_roi_features(model, stem_features, bank);
    const StageModel& st = model.stages()[t];
    Tensor feat = st.block.forward(pooled_rois, true, &out.plan, cfg.donor_grad);
    Tensor pooled = gap(feat);
    HeadOutputs heads = stage_heads(st, pooled);
    out.cls_logits = heads.cls_logits;
    out.reg_deltas = heads.reg_deltas;
    out.embeddings = heads.embeddings;

    // losses
    StageLossTerms terms;
    terms.has_reid = st.has_reid;
    std::vector<int64_t> cls_labels(bank.boxes.size());
    std::vector<int64_t> positive_rows;
    for (size_t i = 0; i < bank.boxes.size(); ++i) {
      cls_labels[i] = bank.assign[i].label;
      if (bank.assign[i].label == 1) positive_rows.push_back(static_cast<int64_t>(i));
    }
    terms.det_cls = det_cls_loss(heads.cls_logits, cls_labels);
    if (!positive_rows.empty()) {
      std::vector<double> target_data;
      target_data.reserve(positive_rows.size() * 4);
      for (int64_t i : positive_rows) {
        const Scene* sc = in.scenes[bank.scene[i]];
        const BoxDelta d = encode_delta(bank.boxes[i], sc->boxes[bank.assign[i].gt_index]);
        target_data.insert(target_data.end(), {d.dx, d.dy, d.dw, d.dh});
      }
      Tensor targets = make_tensor({static_cast<int64_t>(positive_rows.size()), 4}, std::move(target_data));
      terms.det_reg = smooth_l1(index_select0(heads.reg_deltas, positive_rows), targets);
    }
    if (st.has_reid && !positive_rows.empty()) {
      std::vector<int> fg_ids;
      fg_ids.reserve(positive_rows.size());
      for (int64_t i : positive_rows) fg_ids.push_back(bank.assign[i].identity);
      Tensor fg_emb = index_select0(heads.embeddings, positive_rows);
      if (in.oim_states) terms.oim = (*in.oim_states)[t].loss(fg_emb, fg_ids);
      if (model.has_id_classifier())
        terms.id = id_loss(fg_emb, fg_ids, model.id_classifier_w(), model.id_classifier_b());
    }
    fwd.loss_terms.push_back(std::move(terms));

    decode_refinements(bank, heads.reg_deltas, img_w, img_h, out.refined, out.refined_valid);

    // next stage consumes the refinements
    if (t + 1 < cfg.stages) {
      if (in.frozen_banks) {
        bank = (*in.frozen_banks)[t + 1];
      } else {
        StageBank next;
        for (size_t i = 0; i < out.refined.size(); ++i) {
          if (!out.refined_valid[i]) continue;
          next.scene.push_back(out.bank.scene[i]);
          next.boxes.push_back(out.refined[i]);
        }
        bank = std::move(next);
      }
    }
    fwd.stages.push_back(std::move(out));
  }
  return fwd;
}

std::vector<Detection> run_inference(const Model& model, const Scene& scene, uint64_t seed,
                                     uint64_t scene_tag) {
  const CascadeConfig& cfg = model.config();
  const double img_w = scene.image.dim(1);
  const double img_h = scene.image.dim(0);

  Tensor stem = model.stem_forward(scene.image);
  Rng rng = Rng::derive(seed, "eval_proposals", scene_tag);
  auto props = make_proposals(scene.boxes, scene.labels, img_w, img_h, cfg.proposals_per_image,
                              cfg.proposals, rng);
  std::vector<Box> boxes;
  boxes.reserve(props.size());
  for (const Proposal& p : props) boxes.push_back(p.box);

  std::vector<Detection> dets;
  for (int t = 0; t < cfg.stages; ++t) {
    if (boxes.empty()) return {};
    const int64_t r = cfg.roi_size;
    Tensor rois = roi_align(stem, boxes, r, r, model.spatial_scale());
    const StageModel& st = model.stages()[t];
    Tensor feat = st.block.forward(rois, false, nullptr);
    Tensor pooled = gap(feat);
    HeadOutputs heads = stage_heads(st, pooled);

    Tensor prob = softmax(heads.cls_logits, 1);
    std::vector<double> person_prob(boxes.size());
    for (size_t i = 0; i < boxes.size(); ++i) person_prob[i] = prob.at({static_cast<int64_t>(i), 1});

    StageBank bank;
    bank.scene.assign(boxes.size(), 0);
    bank.boxes = boxes;
    std::vector<Box> refined;
    std::vector<char> valid;
    decode_refinements(bank, heads.reg_deltas, img_w, img_h, refined, valid);

    std::vector<Box> kept_boxes;
    std::vector<double> kept_scores;
    std::vector<int64_t> kept_rows;
    for (size_t i = 0; i < refined.size(); ++i) {
      if (!valid[i]) continue;
      kept_boxes.push_back(refined[i]);
      kept_scores.push_back(person_prob[i]);
      kept_rows.push_back(static_cast<int64_t>(i));
    }
    if (kept_boxes.empty()) return {};
    const std::vector<int> keep = nms(kept_boxes, kept_scores, cfg.nms_thresholds[t]);

    if (t + 1 < cfg.stages) {
      std::vector<Box> next;
      next.reserve(keep.size());
      for (int k : keep) next.push_back(kept_boxes[k]);
      boxes = std::move(next);
    } else {
      for (int k : keep) {
        Detection d;
        d.box = kept_boxes[k];
        d.score = kept_scores[k];
        if (st.has_reid) {
          const int64_t row = kept_rows[k];
          const double* e = heads.embeddings.data().data() + row * cfg.embed_dim;
          d.embedding.assign(e, e + cfg.embed_dim);
        }
        dets.push_back(std::move(d));
      }
    }
  }
  return dets;
}

std::vector<double> embed_box(const Model& model, const Scene& scene, const Box& box) {
  const CascadeConfig& cfg = model.config();
  const StageModel& last = model.stages().back();
  check(last.has_reid, "E_STATE", "model has no ReID head to embed with");
  Tensor stem = model.stem_forward(scene.image);
  Tensor rois = roi_align(stem, {box}, cfg.roi_size, cfg.roi_size, model.spatial_scale());
  Tensor feat = last.block.forward(rois, false, nullptr);
  Tensor emb = l2_normalize_rows(linear(gap(feat), last.reid_w, last.reid_b));
  return {emb.data().begin(), emb.data().end()};
}

}  // namespace coat
