#include "coat/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "coat/tensor.hpp"

namespace coat {

namespace {

std::vector<int> rank_order(const std::vector<double>& scores) {
  std::vector<int> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return scores[a] > scores[b]; });
  return order;
}

// all-point interpolation: precision envelope integrated over recall
double envelope_ap(const std::vector<char>& ranked_flags, int n_pos) {
  if (n_pos <= 0) return ranked_flags.empty() ? 1.0 : 0.0;
  const size_t n = ranked_flags.size();
  std::vector<double> precision(n);
  int tp = 0;
  for (size_t i = 0; i < n; ++i) {
    if (ranked_flags[i]) ++tp;
    precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
  }
  double ap = 0.0;
  double pmax = 0.0;
  for (size_t i = n; i-- > 0;) {
    pmax = std::max(pmax, precision[i]);
    if (ranked_flags[i]) ap += pmax;
  }
  return ap / static_cast<double>(n_pos);
}

}  // namespace

std::vector<char> match_detections(const std::vector<Box>& det_boxes, const std::vector<double>& scores,
                                   const std::vector<Box>& gt_boxes, double iou_thresh) {
  check(det_boxes.size() == scores.size(), "E_SHAPE", "detection box/score count mismatch");
  std::vector<char> flags(det_boxes.size(), 0);
  std::vector<char> gt_used(gt_boxes.size(), 0);
  for (int idx : rank_order(scores)) {
    int best_gt = -1;
    double best_iou = iou_thresh;  // strictly-more-than rule
    for (size_t g = 0; g < gt_boxes.size(); ++g) {
      if (gt_used[g]) continue;
      const double v = iou(det_boxes[idx], gt_boxes[g]);
      if (v > best_iou) {
        best_iou = v;
        best_gt = static_cast<int>(g);
      }
    }
    if (best_gt >= 0) {
      gt_used[best_gt] = 1;
      flags[idx] = 1;
    }
  }
  return flags;
}

DetectionMetrics detection_ap(const std::vector<char>& flags, int n_gt) {
  DetectionMetrics m;
  if (n_gt == 0) {
    m.recall = 1.0;
    m.ap = flags.empty() ? 1.0 : 0.0;
    return m;
  }
  int tp = 0;
  for (char f : flags) tp += f ? 1 : 0;
  m.recall = static_cast<double>(tp) / static_cast<double>(n_gt);
  m.ap = envelope_ap(flags, n_gt);
  return m;
}

DetectionMetrics detection_ap(const std::vector<char>& flags, const std::vector<double>& scores, int n_gt) {
  check(flags.size() == scores.size(), "E_SHAPE", "flag/score count mismatch");
  std::vector<char> ranked;
  ranked.reserve(flags.size());
  for (int idx : rank_order(scores)) ranked.push_back(flags[idx]);
  return detection_ap(ranked, n_gt);
}

RetrievalMetrics search_map(const std::vector<QuerySpec>& queries,
                            const std::vector<SceneDetections>& scene_dets,
                            const std::vector<GalleryScene>& scenes) {
  check(scene_dets.size() == scenes.size(), "E_SHAPE", "detections/ground-truth scene count mismatch");
  RetrievalMetrics out;
  double ap_sum = 0.0;
  int top1_hits = 0;

  for (const QuerySpec& q : queries) {
    int n_pos = 0;
    for (int s : q.gallery) {
      check(s >= 0 && s < static_cast<int>(scenes.size()), "E_RANGE", "gallery scene index out of range");
      for (int l : scenes[s].gt_labels) n_pos += (l == q.identity) ? 1 : 0;
    }
    if (n_pos == 0) {
      ++out.skipped_queries;  // protocol guarantees this never happens on generated data
      continue;
    }

    struct Ranked {
      double sim;
      int scene;
      int det;
    };
    std::vector<Ranked> pool;
    for (int s : q.gallery) {
      const auto& dets = scene_dets[s].dets;
      for (size_t d = 0; d < dets.size(); ++d) {
        if (dets[d].embedding.empty()) continue;
        check(dets[d].embedding.size() == q.embedding.size(), "E_SHAPE", "embedding width mismatch");
        double sim = 0.0;
        for (size_t i = 0; i < q.embedding.size(); ++i) sim += q.embedding[i] * dets[d].embedding[i];
        pool.push_back({sim, s, static_cast<int>(d)});
      }
    }
    std::stable_sort(pool.begin(), pool.end(), [](const Ranked& a, const Ranked& b) { return a.sim > b.sim; });

    // greedy down the ranking: each ground-truth instance matches at most once
    std::vector<std::vector<char>> used(scenes.size());
    for (int s : q.gallery) used[s].assign(scenes[s].gt_boxes.size(), 0);
    std::vector<char> flags;
    flags.reserve(pool.size());
    for (const Ranked& r : pool) {
      const GalleryScene& sc = scenes[r.scene];
      const Box& db = scene_dets[r.scene].dets[r.det].box;
      int best_gt = -1;
      double best_iou = 0.5;
      for (size_t g = 0; g < sc.gt_boxes.size(); ++g) {
        if (sc.gt_labels[g] != q.identity || used[r.scene][g]) continue;
        const double v = iou(db, sc.gt_boxes[g]);
        if (v > best_iou) {
          best_iou = v;
          best_gt = static_cast<int>(g);
        }
      }
      if (best_gt >= 0) {
        used[r.scene][best_gt] = 1;
        flags.push_back(1);
      } else {
        flags.push_back(0);
      }
    }
    ap_sum += envelope_ap(flags, n_pos);
    top1_hits += (!flags.empty() && flags[0]) ? 1 : 0;
    ++out.evaluated_queries;
  }

  if (out.evaluated_queries > 0) {
    out.map = ap_sum / out.evaluated_queries;
    out.top1 = static_cast<double>(top1_hits) / out.evaluated_queries;
  }
  return out;
}

// ---- report/file io -----------------------------------------------------------

std::string eval_report_json(const EvalReport& r) {
  nlohmann::json curve = nlohmann::json::array();
  for (const SweepPoint& p : r.gallery_curve)
    curve.push_back({{"size", p.size}, {"map", p.map}, {"top1", p.top1}});
  nlohmann::json j = {{"detection", {{"recall", r.detection.recall}, {"ap", r.detection.ap}}},
                      {"retrieval",
                       {{"map", r.retrieval.map},
                        {"top1", r.retrieval.top1},
                        {"evaluated_queries", r.retrieval.evaluated_queries},
                        {"skipped_queries", r.retrieval.skipped_queries},
                        {"available", r.retrieval_available}}},
                      {"gallery_curve", curve}};
  return j.dump(2);
}

std::string eval_curve_csv(const EvalReport& r) {
  std::ostringstream os;
  os << "gallery_size,map,top1\n";
  for (const SweepPoint& p : r.gallery_curve) os << p.size << "," << p.map << "," << p.top1 << "\n";
  return os.str();
}

namespace {

const char kB64[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

std::string base64_encode(const std::string& bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  size_t i = 0;
  while (i + 2 < bytes.size()) {
    const uint32_t v = (static_cast<unsigned char>(bytes[i]) << 16) |
                       (static_cast<unsigned char>(bytes[i + 1]) << 8) | static_cast<unsigned char>(bytes[i + 2]);
    out.push_back(kB64[(v >> 18) & 63]);
    out.push_back(kB64[(v >> 12) & 63]);
    out.push_back(kB64[(v >> 6) & 63]);
    out.push_back(kB64[v & 63]);
    i += 3;
  }
  const size_t rem = bytes.size() - i;
  if (rem == 1) {
    const uint32_t v = static_cast<unsigned char>(bytes[i]) << 16;
    out.push_back(kB64[(v >> 18) & 63]);
    out.push_back(kB64[(v >> 12) & 63]);
    out += "==";
  } else if (rem == 2) {
    const uint32_t v =
        (static_cast<unsigned char>(bytes[i]) << 16) | (static_cast<unsigned char>(bytes[i + 1]) << 8);
    out.push_back(kB64[(v >> 18) & 63]);
    out.push_back(kB64[(v >> 12) & 63]);
    out.push_back(kB64[(v >> 6) & 63]);
    out.push_back('=');
  }
  return out;
}

std::string base64_decode(const std::string& text) {
  std::array<int, 256> lut;
  lut.fill(-1);
  for (int i = 0; i < 64; ++i) lut[static_cast<unsigned char>(kB64[i])] = i;
  std::string out;
  uint32_t acc = 0;
  int bits = 0;
  for (char c : text) {
    if (c == '=') break;
    const int v = lut[static_cast<unsigned char>(c)];
    check(v >= 0, "E_FORMAT", "invalid base64 character");
    acc = (acc << 6) | static_cast<uint32_t>(v);
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out.push_back(static_cast<char>((acc >> bits) & 0xFF));
    }
  }
  return out;
}

}  // namespace

void write_detections_jsonl(const std::string& path, const std::vector<SceneDetections>& dets) {
  std::ofstream out(path);
  check(out.good(), "E_IO", "cannot open '" + path + "' for writing");
  for (const SceneDetections& sd : dets) {
    nlohmann::json boxes = nlohmann::json::array();
    nlohmann::json scores = nlohmann::json::array();
    const int64_t dim = sd.dets.empty() ? 0 : static_cast<int64_t>(sd.dets[0].embedding.size());
    std::vector<double> emb;
    for (const Detection& d : sd.dets) {
      boxes.push_back({d.box.x1, d.box.y1, d.box.x2, d.box.y2});
      scores.push_back(d.score);
      check(static_cast<int64_t>(d.embedding.size()) == dim, "E_SHAPE",
            "embedding widths differ within one scene");
      emb.insert(emb.end(), d.embedding.begin(), d.embedding.end());
    }
    Tensor emb_t = make_tensor({static_cast<int64_t>(sd.dets.size()), dim}, std::move(emb));
    std::ostringstream blob;
    write_tensor_blob(blob, emb_t, "embeddings", Precision::f32);
    nlohmann::json j = {{"scene_id", sd.scene},
                        {"boxes", boxes},
                        {"scores", scores},
                        {"embeddings", base64_encode(blob.str())}};
    out << j.dump() << "\n";
  }
}

std::vector<SceneDetections> read_detections_jsonl(const std::string& path) {
  std::ifstream in(path);
  check(in.good(), "E_IO", "cannot open '" + path + "' for reading");
  std::vector<SceneDetections> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    check(!j.is_discarded(), "E_FORMAT", "invalid JSON line in detections file");
    SceneDetections sd;
    sd.scene = j.at("scene_id").get<int>();
    const auto& boxes = j.at("boxes");
    const auto& scores = j.at("scores");
    std::istringstream blob(base64_decode(j.at("embeddings").get<std::string>()));
    Tensor emb = read_tensor_blob(blob).tensor;
    check(emb.dim(0) == static_cast<int64_t>(boxes.size()), "E_FORMAT",
          "embedding row count does not match the box count");
    const int64_t dim = emb.dim(1);
    for (size_t i = 0; i < boxes.size(); ++i) {
      Detection d;
      d.box = Box{boxes[i][0].get<double>(), boxes[i][1].get<double>(), boxes[i][2].get<double>(),
                  boxes[i][3].get<double>()};
      d.score = scores[i].get<double>();
      const double* row = emb.data().data() + static_cast<int64_t>(i) * dim;
      d.embedding.assign(row, row + dim);
      sd.dets.push_back(std::move(d));
    }
    out.push_back(std::move(sd));
  }
  return out;
}

}  // namespace coat
