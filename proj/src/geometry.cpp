#include "coat/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace coat {

double iou(const Box& a, const Box& b) {
  check(a.valid() && b.valid(), "E_BOX", "iou of a degenerate box");
  const double ix1 = std::max(a.x1, b.x1);
  const double iy1 = std::max(a.y1, b.y1);
  const double ix2 = std::min(a.x2, b.x2);
  const double iy2 = std::min(a.y2, b.y2);
  const double iw = ix2 - ix1;
  const double ih = iy2 - iy1;
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

BoxDelta encode_delta(const Box& proposal, const Box& gt) {
  check(proposal.valid() && gt.valid(), "E_BOX", "encode_delta requires positive-size boxes");
  BoxDelta d;
  d.dx = (gt.cx() - proposal.cx()) / proposal.width();
  d.dy = (gt.cy() - proposal.cy()) / proposal.height();
  d.dw = std::log(gt.width() / proposal.width());
  d.dh = std::log(gt.height() / proposal.height());
  return d;
}

Box decode_delta(const BoxDelta& delta, const Box& proposal) {
  check(proposal.valid(), "E_BOX", "decode_delta requires a positive-size proposal");
  const double cx = proposal.cx() + delta.dx * proposal.width();
  const double cy = proposal.cy() + delta.dy * proposal.height();
  const double w = proposal.width() * std::exp(delta.dw);
  const double h = proposal.height() * std::exp(delta.dh);
  return Box{cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

Box clip_to_image(const Box& b, double img_w, double img_h) {
  Box c;
  c.x1 = std::clamp(b.x1, 0.0, img_w);
  c.y1 = std::clamp(b.y1, 0.0, img_h);
  c.x2 = std::clamp(b.x2, 0.0, img_w);
  c.y2 = std::clamp(b.y2, 0.0, img_h);
  return c;
}

namespace {

void match_against_gt(Proposal& p, const std::vector<Box>& gt_boxes, const std::vector<int>& gt_labels) {
  for (size_t g = 0; g < gt_boxes.size(); ++g) {
    const double v = iou(p.box, gt_boxes[g]);
    if (v > p.gt_iou) {  // strict > keeps the lower index on ties
      p.gt_iou = v;
      p.matched_gt = static_cast<int>(g);
      p.identity = gt_labels[g];
    }
  }
}

}  // namespace

std::vector<Proposal> make_proposals(const std::vector<Box>& gt_boxes, const std::vector<int>& gt_labels,
                                     double img_w, double img_h, int n, const ProposalParams& params,
                                     Rng& rng) {
  check(gt_boxes.size() == gt_labels.size(), "E_SHAPE", "gt box/label count mismatch");
  check(gt_boxes.empty() || n >= 2 * static_cast<int>(gt_boxes.size()), "E_CONFIG",
        "proposal count must be at least twice the ground-truth count");
  std::vector<Proposal> out;
  out.reserve(n);

  const int n_pos = gt_boxes.empty() ? 0 : std::max(1, static_cast<int>(std::lround(n * params.pos_fraction)));
  for (int i = 0; i < n_pos; ++i) {
    const size_t g = i % gt_boxes.size();
    const Box& gt = gt_boxes[g];
    Proposal p;
    for (int attempt = 0; attempt < 32; ++attempt) {
      const double sx = std::exp(rng.normal(0.0, params.jitter_scale));
      const double sy = std::exp(rng.normal(0.0, params.jitter_scale));
      const double cx = gt.cx() + rng.normal(0.0, params.jitter_center) * gt.width();
      const double cy = gt.cy() + rng.normal(0.0, params.jitter_center) * gt.height();
      const double w = std::max(1.0, gt.width() * sx);
      const double h = std::max(1.0, gt.height() * sy);
      Box cand = clip_to_image(Box{cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h}, img_w, img_h);
      if (!cand.valid() || cand.width() < 1.0 || cand.height() < 1.0) continue;
      if (iou(cand, gt) >= 0.3) {
        p.box = cand;
        break;
      }
      if (attempt == 31) p.box = gt;  // jitter failed repeatedly; fall back to the gt box
    }
    if (!p.box.valid()) p.box = gt;
    match_against_gt(p, gt_boxes, gt_labels);
    p.objectness = p.gt_iou;
    out.push_back(p);
  }

  // uniform negatives, rejection-sampled below the IoU ceiling
  while (static_cast<int>(out.size()) < n) {
    Proposal p;
    for (int attempt = 0; attempt < 64; ++attempt) {
      const double w = rng.uniform(6.0, img_w * 0.5);
      const double h = rng.uniform(6.0, img_h * 0.5);
      const double x1 = rng.uniform(0.0, img_w - w);
      const double y1 = rng.uniform(0.0, img_h - h);
      Box cand{x1, y1, x1 + w, y1 + h};
      double best = 0.0;
      for (const Box& gt : gt_boxes) best = std::max(best, iou(cand, gt));
      if (best < params.neg_iou_max) {
        p.box = cand;
        break;
      }
      // shrink towards a corner if the scene is crowded
      if (attempt == 63) p.box = Box{0.0, 0.0, 6.0, 6.0};
    }
    if (!p.box.valid()) p.box = Box{0.0, 0.0, 6.0, 6.0};
    match_against_gt(p, gt_boxes, gt_labels);
    p.objectness = p.gt_iou;
    out.push_back(p);
  }
  return out;
}

Tensor roi_align(const Tensor& features, const std::vector<Box>& boxes, int64_t out_h, int64_t out_w,
                 double spatial_scale) {
  const Shape& s = features.shape();
  check(s.size() == 3, "E_SHAPE", "roi_align expects a [H,W,C] feature map");
  const int64_t H = s[0], W = s[1], C = s[2];
  const int64_t P = static_cast<int64_t>(boxes.size());
  check(out_h >= 1 && out_w >= 1, "E_SHAPE", "roi_align output size must be positive");

  // One bilinear sample per cell center; pixel i has its center at i + 0.5.
  struct Sample {
    int64_t x0, y0;
    double wx, wy;
  };
  auto samples = std::make_shared<std::vector<Sample>>();
  samples->reserve(P * out_h * out_w);
  const double img_w = static_cast<double>(W) / spatial_scale;
  const double img_h = static_cast<double>(H) / spatial_scale;
  for (const Box& raw : boxes) {
    Box b = clip_to_image(raw, img_w, img_h);
    if (!b.valid()) b = Box{0.0, 0.0, 1.0 / spatial_scale, 1.0 / spatial_scale};
    const double fx1 = b.x1 * spatial_scale, fy1 = b.y1 * spatial_scale;
    const double fw = b.width() * spatial_scale, fh = b.height() * spatial_scale;
    for (int64_t r = 0; r < out_h; ++r) {
      for (int64_t c = 0; c < out_w; ++c) {
        const double u = fx1 + (c + 0.5) * fw / static_cast<double>(out_w) - 0.5;
        const double v = fy1 + (r + 0.5) * fh / static_cast<double>(out_h) - 0.5;
        Sample sm;
        double fx = std::clamp(u, 0.0, static_cast<double>(W - 1));
        double fy = std::clamp(v, 0.0, static_cast<double>(H - 1));
        sm.x0 = std::min(static_cast<int64_t>(fx), W - 2 >= 0 ? W - 2 : 0);
        sm.y0 = std::min(static_cast<int64_t>(fy), H - 2 >= 0 ? H - 2 : 0);
        sm.wx = fx - static_cast<double>(sm.x0);
        sm.wy = fy - static_cast<double>(sm.y0);
        samples->push_back(sm);
      }
    }
  }

  std::vector<double> out(P * out_h * out_w * C, 0.0);
  const double* pf = features.data().data();
  for (int64_t i = 0; i < static_cast<int64_t>(samples->size()); ++i) {
    const Sample& sm = (*samples)[i];
    const int64_t x1i = std::min(sm.x0 + 1, W - 1);
    const int64_t y1i = std::min(sm.y0 + 1, H - 1);
    const double w00 = (1.0 - sm.wx) * (1.0 - sm.wy);
    const double w01 = sm.wx * (1.0 - sm.wy);
    const double w10 = (1.0 - sm.wx) * sm.wy;
    const double w11 = sm.wx * sm.wy;
    const double* p00 = pf + (sm.y0 * W + sm.x0) * C;
    const double* p01 = pf + (sm.y0 * W + x1i) * C;
    const double* p10 = pf + (y1i * W + sm.x0) * C;
    const double* p11 = pf + (y1i * W + x1i) * C;
    double* orow = out.data() + i * C;
    for (int64_t ch = 0; ch < C; ++ch)
      orow[ch] = w00 * p00[ch] + w01 * p01[ch] + w10 * p10[ch] + w11 * p11[ch];
  }

  Tensor result = make_tensor({P, out_h, out_w, C}, std::move(out));
  result.apply_precision();
  auto fn = features.node();
  auto on = result.node();
  if (Tape::recording() && features.requires_grad()) {
    result.set_requires_grad(true);
    result.node()->tape = Tape::current();
    Tape::current()->record([fn, on, samples, W, H, C]() {
      if (on->grad.empty()) return;
      fn->ensure_grad();
      for (int64_t i = 0; i < static_cast<int64_t>(samples->size()); ++i) {
        const Sample& sm = (*samples)[i];
        const int64_t x1i = std::min(sm.x0 + 1, W - 1);
        const int64_t y1i = std::min(sm.y0 + 1, H - 1);
        const double w00 = (1.0 - sm.wx) * (1.0 - sm.wy);
        const double w01 = sm.wx * (1.0 - sm.wy);
        const double w10 = (1.0 - sm.wx) * sm.wy;
        const double w11 = sm.wx * sm.wy;
        const double* g = on->grad.data() + i * C;
        double* g00 = fn->grad.data() + (sm.y0 * W + sm.x0) * C;
        double* g01 = fn->grad.data() + (sm.y0 * W + x1i) * C;
        double* g10 = fn->grad.data() + (y1i * W + sm.x0) * C;
        double* g11 = fn->grad.data() + (y1i * W + x1i) * C;
        for (int64_t ch = 0; ch < C; ++ch) {
          g00[ch] += w00 * g[ch];
          g01[ch] += w01 * g[ch];
          g10[ch] += w10 * g[ch];
          g11[ch] += w11 * g[ch];
        }
      }
    });
  }
  return result;
}

std::vector<int> nms(const std::vector<Box>& boxes, const std::vector<double>& scores, double threshold) {
  check(boxes.size() == scores.size(), "E_SHAPE", "nms box/score count mismatch");
  for (double s : scores) check(std::isfinite(s), "E_RANGE", "nms scores must be finite");
  std::vector<int> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  });
  std::vector<int> kept;
  std::vector<char> suppressed(boxes.size(), 0);
  for (int idx : order) {
    if (suppressed[idx]) continue;
    kept.push_back(idx);
    for (int other : order) {
      if (suppressed[other] || other == idx) continue;
      if (iou(boxes[idx], boxes[other]) > threshold) suppressed[other] = 1;
    }
  }
  return kept;
}

}  // namespace coat
