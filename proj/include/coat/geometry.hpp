#pragma once

#include <array>
#include <optional>
#include <vector>

#include "coat/rng.hpp"
#include "coat/tensor.hpp"

namespace coat {

// Corner-convention box in pixel coordinates, x1 < x2 and y1 < y2.
struct Box {
  double x1 = 0.0, y1 = 0.0, x2 = 0.0, y2 = 0.0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }
  bool valid() const { return x1 < x2 && y1 < y2; }
};

struct BoxDelta {
  double dx = 0.0, dy = 0.0, dw = 0.0, dh = 0.0;
};

double iou(const Box& a, const Box& b);

// dx=(gx-px)/pw, dy=(gy-py)/ph, dw=log(gw/pw), dh=log(gh/ph)
BoxDelta encode_delta(const Box& proposal, const Box& gt);
Box decode_delta(const BoxDelta& delta, const Box& proposal);

Box clip_to_image(const Box& b, double img_w, double img_h);

struct Proposal {
  Box box;
  double objectness = 0.0;
  int matched_gt = -1;           // index into the scene's gt list, -1 if none
  double gt_iou = 0.0;           // iou against matched_gt
  int identity = -1;             // identity of matched_gt (-1 unlabeled/none)
};

struct ProposalParams {
  double jitter_center = 0.25;   // center shift stddev as a fraction of box size
  double jitter_scale = 0.35;    // log-scale stddev
  double pos_fraction = 0.25;    // positives : negatives = 1 : 3
  double neg_iou_max = 0.3;
};

// RPN stand-in: jittered copies of the ground truth spanning a wide IoU range
// plus uniform negatives with max-IoU below neg_iou_max.
std::vector<Proposal> make_proposals(const std::vector<Box>& gt_boxes, const std::vector<int>& gt_labels,
                                     double img_w, double img_h, int n, const ProposalParams& params,
                                     Rng& rng);

// Bilinear pooling of box regions of a [H,W,C] feature map to [P,out,out,C],
// one sample per output cell center. Differentiable w.r.t. the feature map.
// Boxes are given in image pixels; spatial_scale maps them to feature coords.
Tensor roi_align(const Tensor& features, const std::vector<Box>& boxes, int64_t out_h, int64_t out_w,
                 double spatial_scale);

// Greedy descending-score suppression; ties broken by lower original index.
// Returns kept indices in descending score order.
std::vector<int> nms(const std::vector<Box>& boxes, const std::vector<double>& scores, double threshold);

}  // namespace coat
