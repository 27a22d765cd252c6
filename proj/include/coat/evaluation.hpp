#pragma once

#include <string>
#include <vector>

#include "coat/geometry.hpp"

namespace coat {

struct Detection {
  Box box;
  double score = 0.0;
  std::vector<double> embedding;  // unit-norm; empty when the model has no ReID head
};

struct SceneDetections {
  int scene = 0;
  std::vector<Detection> dets;
};

// Greedy matching in descending score order; a detection is a TP iff it
// overlaps an unmatched ground-truth box with IoU strictly above the
// threshold (argmax IoU, ties to the lower GT index). Returns flags in the
// order of `order` (score-sorted detection indices).
std::vector<char> match_detections(const std::vector<Box>& det_boxes, const std::vector<double>& scores,
                                   const std::vector<Box>& gt_boxes, double iou_thresh = 0.5);

struct DetectionMetrics {
  double recall = 0.0;
  double ap = 0.0;
};

// flags must already be in ranking order. All-point interpolated AP (the
// precision envelope over recall).
DetectionMetrics detection_ap(const std::vector<char>& flags, int n_gt);
// sorts by score (descending, stable) first
DetectionMetrics detection_ap(const std::vector<char>& flags, const std::vector<double>& scores, int n_gt);

struct QuerySpec {
  std::vector<double> embedding;
  int identity = 0;
  std::vector<int> gallery;  // scene indices to rank over
};

struct GalleryScene {
  std::vector<Box> gt_boxes;
  std::vector<int> gt_labels;
};

struct RetrievalMetrics {
  double map = 0.0;
  double top1 = 0.0;
  int evaluated_queries = 0;
  int skipped_queries = 0;
};

// Ranks every detection in each query's gallery by embedding dot product; a
// ranked detection is a true match iff it overlaps (> 0.5 IoU) an unmatched
// ground-truth box of the query identity. Per-query all-point AP, averaged.
RetrievalMetrics search_map(const std::vector<QuerySpec>& queries,
                            const std::vector<SceneDetections>& scene_dets,
                            const std::vector<GalleryScene>& scenes);

struct SweepPoint {
  int size = 0;
  double map = 0.0;
  double top1 = 0.0;
};

struct EvalReport {
  DetectionMetrics detection;
  RetrievalMetrics retrieval;
  std::vector<SweepPoint> gallery_curve;
  bool retrieval_available = true;
};

std::string eval_report_json(const EvalReport& report);
std::string eval_curve_csv(const EvalReport& report);

// JSON-lines detections file: one record per scene
// {"scene_id":..,"boxes":[[x1,y1,x2,y2]..],"scores":[..],"embeddings":"<base64 tensor blob>"}
void write_detections_jsonl(const std::string& path, const std::vector<SceneDetections>& dets);
std::vector<SceneDetections> read_detections_jsonl(const std::string& path);

}  // namespace coat
