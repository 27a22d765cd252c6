#include "coat/toybench.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include <json.hpp>

namespace coat {

namespace {

std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  h = h - std::floor(h);
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  if (hp < 1)
    r = c, g = x;
  else if (hp < 2)
    r = x, g = c;
  else if (hp < 3)
    g = c, b = x;
  else if (hp < 4)
    g = x, b = c;
  else if (hp < 5)
    r = x, b = c;
  else
    r = c, b = x;
  const double m = v - c;
  return {r + m, g + m, b + m};
}

struct TextureParams {
  std::array<double, 3> head;
  std::array<double, 3> stripe_a;
  std::array<double, 3> stripe_b;
  double freq;
  double phase;
};

TextureParams texture_params(uint64_t texture_seed) {
  // golden-ratio hue spacing keeps consecutive seeds well separated
  const double hue = std::fmod((static_cast<double>(texture_seed) + 1.0) * 0.61803398875, 1.0);
  Rng rng = Rng::derive(texture_seed, "texture");
  TextureParams tp;
  tp.freq = 3.0 + static_cast<double>(rng.uniform_int(5));
  tp.phase = rng.uniform();
  const double hue_b = std::fmod(hue + 0.30 + 0.25 * rng.uniform(), 1.0);
  const double hue_head = std::fmod(hue + 0.55 + 0.20 * rng.uniform(), 1.0);
  tp.stripe_a = hsv_to_rgb(hue, 0.85, 0.90);
  tp.stripe_b = hsv_to_rgb(hue_b, 0.80, 0.55);
  tp.head = hsv_to_rgb(hue_head, 0.60, 0.75);
  return tp;
}

float quantize(double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); }

void paint_rect(std::vector<double>& img, int H, int W, const Box& b,
                const std::array<double, 3>& color) {
  const int x1 = std::clamp(static_cast<int>(std::lround(b.x1)), 0, W);
  const int x2 = std::clamp(static_cast<int>(std::lround(b.x2)), 0, W);
  const int y1 = std::clamp(static_cast<int>(std::lround(b.y1)), 0, H);
  const int y2 = std::clamp(static_cast<int>(std::lround(b.y2)), 0, H);
  for (int y = y1; y < y2; ++y)
    for (int x = x1; x < x2; ++x)
      for (int c = 0; c < 3; ++c) img[(y * W + x) * 3 + c] = color[c];
}

void paint_instance(std::vector<double>& img, int H, int W, const Box& b, uint64_t texture_seed,
                    Rng& noise_rng) {
  const int x1 = std::clamp(static_cast<int>(std::lround(b.x1)), 0, W);
  const int x2 = std::clamp(static_cast<int>(std::lround(b.x2)), 0, W);
  const int y1 = std::clamp(static_cast<int>(std::lround(b.y1)), 0, H);
  const int y2 = std::clamp(static_cast<int>(std::lround(b.y2)), 0, H);
  for (int y = y1; y < y2; ++y) {
    const double v = (static_cast<double>(y) + 0.5 - b.y1) / b.height();
    for (int x = x1; x < x2; ++x) {
      const double u = (static_cast<double>(x) + 0.5 - b.x1) / b.width();
      auto rgb = identity_texture(texture_seed, u, v);
      for (int c = 0; c < 3; ++c)
        img[(y * W + x) * 3 + c] = rgb[c] + noise_rng.normal(0.0, 0.05);
    }
  }
}

struct PlannedInstance {
  Box box;
  int identity;  // generator-internal id (always >= 0)
};

Box sample_instance_box(int H, int W, Rng& rng) {
  const double scale = std::exp(rng.uniform(std::log(0.5), std::log(2.0)));
  const double aspect = rng.uniform(0.9, 1.1);
  const double w = std::min(18.0 * scale * aspect, static_cast<double>(W) - 2.0);
  const double h = std::min(40.0 * scale / aspect, static_cast<double>(H) - 2.0);
  const double x1 = rng.uniform(0.0, static_cast<double>(W) - w);
  const double y1 = rng.uniform(0.0, static_cast<double>(H) - h);
  return Box{x1, y1, x1 + w, y1 + h};
}

// Places the box so it overlaps `target` with IoU >= 0.2 when possible.
Box sample_overlapping_box(const Box& target, int H, int W, Rng& rng) {
  for (int attempt = 0; attempt < 24; ++attempt) {
    Box b = sample_instance_box(H, W, rng);
    const double dx = rng.uniform(-0.6, 0.6) * target.width();
    const double dy = rng.uniform(-0.4, 0.4) * target.height();
    const double cx = std::clamp(target.cx() + dx, 0.5 * b.width(), W - 0.5 * b.width());
    const double cy = std::clamp(target.cy() + dy, 0.5 * b.height(), H - 0.5 * b.height());
    Box c{cx - 0.5 * b.width(), cy - 0.5 * b.height(), cx + 0.5 * b.width(), cy + 0.5 * b.height()};
    if (iou(c, target) >= 0.2) return c;
  }
  return sample_instance_box(H, W, rng);
}

Scene make_scene(const SplitSpec& spec, const std::vector<Identity>& identities, int forced_identity,
                 Rng& rng) {
  const int H = spec.image_h, W = spec.image_w;
  const int total_ids = static_cast<int>(identities.size());

  // background: tinted gradient plus clutter rectangles sharing the identity hue range
  std::vector<double> img(H * W * 3);
  const double base_r = rng.uniform(0.08, 0.40);
  const double base_g = rng.uniform(0.08, 0.40);
  const double base_b = rng.uniform(0.08, 0.40);
  const double grad = rng.uniform(-0.15, 0.15);
  for (int y = 0; y < H; ++y) {
    const double gy = grad * (static_cast<double>(y) / H);
    for (int x = 0; x < W; ++x) {
      img[(y * W + x) * 3 + 0] = base_r + gy;
      img[(y * W + x) * 3 + 1] = base_g + gy;
      img[(y * W + x) * 3 + 2] = base_b + gy;
    }
  }
  const int n_clutter = 3 + static_cast<int>(rng.uniform_int(4));
  for (int i = 0; i < n_clutter; ++i) {
    const double w = rng.uniform(8.0, 40.0);
    const double h = rng.uniform(8.0, 40.0);
    const double x1 = rng.uniform(0.0, W - w);
    const double y1 = rng.uniform(0.0, H - h);
    auto color = hsv_to_rgb(rng.uniform(), rng.uniform(0.4, 0.9), rng.uniform(0.3, 0.8));
    paint_rect(img, H, W, Box{x1, y1, x1 + w, y1 + h}, color);
  }

  // instances: forced identity first, extras without within-scene duplicates
  const int n_instances = 1 + static_cast<int>(rng.uniform_int(5));
  std::vector<PlannedInstance> planned;
  std::set<int> used;
  for (int i = 0; i < n_instances; ++i) {
    int ident;
    if (i == 0 && forced_identity >= 0) {
      ident = forced_identity;
    } else {
      ident = static_cast<int>(rng.uniform_int(total_ids));
      for (int tries = 0; tries < 8 && used.count(ident); ++tries)
        ident = static_cast<int>(rng.uniform_int(total_ids));
      if (used.count(ident)) continue;
    }
    used.insert(ident);
    Box box;
    if (i > 0 && rng.uniform() < 0.3) {
      const auto& target = planned[rng.uniform_int(planned.size())];
      box = sample_overlapping_box(target.box, H, W, rng);
    } else {
      box = sample_instance_box(H, W, rng);
    }
    planned.push_back({box, ident});
  }

  for (const auto& inst : planned)
    paint_instance(img, H, W, inst.box, identities[inst.identity].texture_seed, rng);

  // with probability 0.3, drop an occluding flat bar across one instance
  if (rng.uniform() < 0.3 && !planned.empty()) {
    const Box& target = planned[rng.uniform_int(planned.size())].box;
    auto color = hsv_to_rgb(rng.uniform(), rng.uniform(0.3, 0.8), rng.uniform(0.3, 0.8));
    Box bar;
    if (rng.uniform() < 0.5) {
      const double t = target.height() * rng.uniform(0.18, 0.35);
      const double y1 = target.y1 + rng.uniform(0.1, 0.8) * (target.height() - t);
      bar = Box{std::max(0.0, target.x1 - 4.0), y1, std::min<double>(W, target.x2 + 4.0), y1 + t};
    } else {
      const double t = target.width() * rng.uniform(0.18, 0.35);
      const double x1 = target.x1 + rng.uniform(0.1, 0.8) * (target.width() - t);
      bar = Box{x1, std::max(0.0, target.y1 - 4.0), x1 + t, std::min<double>(H, target.y2 + 4.0)};
    }
    paint_rect(img, H, W, bar, color);
  }

  std::vector<double> quantized(img.size());
  for (size_t i = 0; i < img.size(); ++i) quantized[i] = static_cast<double>(quantize(img[i]));

  Scene scene;
  scene.image = make_tensor({H, W, 3}, std::move(quantized));
  for (const auto& inst : planned) {
    scene.boxes.push_back(inst.box);
    scene.labels.push_back(identities[inst.identity].labeled ? inst.identity : kUnlabeledId);
  }
  return scene;
}

}  // namespace

std::array<double, 3> identity_texture(uint64_t texture_seed, double u, double v) {
  const TextureParams tp = texture_params(texture_seed);
  (void)u;
  if (v < 0.22) return tp.head;
  const double s = std::sin(6.283185307179586 * (tp.freq * v + tp.phase));
  return s > 0.0 ? tp.stripe_a : tp.stripe_b;
}

Benchmark generate(const SplitSpec& spec) {
  check(spec.n_identities >= 2, "E_CONFIG", "need at least 2 identities");
  check(spec.n_unlabeled >= 0, "E_CONFIG", "n_unlabeled must be non-negative");
  check(spec.n_train_scenes >= 1 && spec.n_test_scenes >= 2, "E_CONFIG", "scene counts too small");
  check(spec.gallery_size >= 1 && spec.gallery_size <= spec.n_test_scenes, "E_INFEASIBLE",
        "gallery_size exceeds the number of test scenes");
  check(spec.n_test_scenes >= 2 * spec.n_identities || spec.n_test_scenes >= spec.n_identities + 1,
        "E_INFEASIBLE", "not enough test scenes to give every identity a query and a gallery hit");
  check(spec.image_h >= 48 && spec.image_w >= 48, "E_CONFIG", "image too small");

  Benchmark bench;
  bench.spec = spec;
  const int total_ids = spec.n_identities + spec.n_unlabeled;
  for (int i = 0; i < total_ids; ++i)
    bench.identities.push_back({i, static_cast<uint64_t>(i), i < spec.n_identities});

  for (int i = 0; i < spec.n_train_scenes; ++i) {
    Rng rng = Rng::derive(spec.rng_seed, "train_scene", static_cast<uint64_t>(i));
    bench.train.push_back(make_scene(spec, bench.identities, i % spec.n_identities, rng));
  }
  for (int j = 0; j < spec.n_test_scenes; ++j) {
    Rng rng = Rng::derive(spec.rng_seed, "test_scene", static_cast<uint64_t>(j));
    bench.test.push_back(make_scene(spec, bench.identities, j % spec.n_identities, rng));
  }

  // queries: first test occurrence of each labeled identity; the remaining
  // occurrences are its gallery positives
  for (int id = 0; id < spec.n_identities; ++id) {
    int query_scene = -1;
    Box query_box;
    int positives = 0;
    for (int j = 0; j < spec.n_test_scenes; ++j) {
      const Scene& s = bench.test[j];
      for (size_t b = 0; b < s.boxes.size(); ++b) {
        if (s.labels[b] != id) continue;
        if (query_scene < 0) {
          query_scene = j;
          query_box = s.boxes[b];
        } else if (j != query_scene) {
          ++positives;
        }
        break;  // one instance per identity per scene
      }
    }
    check(query_scene >= 0 && positives >= 1, "E_INFEASIBLE",
          "identity " + std::to_string(id) + " lacks a query/gallery pair");
    bench.queries.push_back({query_scene, query_box, id});
  }
  return bench;
}

std::vector<std::vector<std::vector<int>>> gallery_subsets(const Benchmark& bench,
                                                           const std::vector<int>& sizes, uint64_t seed) {
  const int n_test = static_cast<int>(bench.test.size());
  for (int s : sizes)
    check(s >= 1 && s <= n_test, "E_RANGE", "gallery subset size " + std::to_string(s) + " exceeds gallery");

  std::vector<std::vector<std::vector<int>>> out(bench.queries.size());
  for (size_t q = 0; q < bench.queries.size(); ++q) {
    const Query& query = bench.queries[q];
    std::vector<int> positives, fillers;
    for (int j = 0; j < n_test; ++j) {
      if (j == query.scene) continue;
      bool has = false;
      for (int l : bench.test[j].labels) has = has || (l == query.identity);
      (has ? positives : fillers).push_back(j);
    }
    Rng rng = Rng::derive(seed, "gallery_subset", static_cast<uint64_t>(q));
    rng.shuffle(fillers);
    std::vector<int> order = positives;
    order.insert(order.end(), fillers.begin(), fillers.end());
    for (int s : sizes) {
      const int take = std::max<int>(s, static_cast<int>(positives.size()));
      std::vector<int> subset(order.begin(), order.begin() + std::min<int>(take, static_cast<int>(order.size())));
      out[q].push_back(std::move(subset));
    }
  }
  return out;
}

// ---- on-disk format ----------------------------------------------------------

namespace {

nlohmann::json spec_to_json(const SplitSpec& s) {
  return {{"n_train_scenes", s.n_train_scenes}, {"n_test_scenes", s.n_test_scenes},
          {"n_identities", s.n_identities},     {"n_unlabeled", s.n_unlabeled},
          {"gallery_size", s.gallery_size},     {"rng_seed", s.rng_seed},
          {"image_h", s.image_h},               {"image_w", s.image_w}};
}

SplitSpec spec_from_json(const nlohmann::json& j) {
  SplitSpec s;
  s.n_train_scenes = j.at("n_train_scenes").get<int>();
  s.n_test_scenes = j.at("n_test_scenes").get<int>();
  s.n_identities = j.at("n_identities").get<int>();
  s.n_unlabeled = j.at("n_unlabeled").get<int>();
  s.gallery_size = j.at("gallery_size").get<int>();
  s.rng_seed = j.at("rng_seed").get<uint64_t>();
  s.image_h = j.at("image_h").get<int>();
  s.image_w = j.at("image_w").get<int>();
  return s;
}

nlohmann::json scene_annotations(const Scene& s, const std::string& file, const char* split) {
  nlohmann::json boxes = nlohmann::json::array();
  for (const Box& b : s.boxes) boxes.push_back({b.x1, b.y1, b.x2, b.y2});
  return {{"file", file}, {"split", split}, {"boxes", boxes}, {"labels", s.labels}};
}

std::string scene_file(const char* split, int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s_%04d.bin", split, index);
  return buf;
}

}  // namespace

void save_benchmark(const std::string& dir, const Benchmark& bench) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  check(!ec, "E_IO", "cannot create benchmark directory '" + dir + "'");

  nlohmann::json scenes = nlohmann::json::array();
  for (size_t i = 0; i < bench.train.size(); ++i) {
    const std::string file = scene_file("train", static_cast<int>(i));
    std::ofstream out(fs::path(dir) / file, std::ios::binary);
    check(out.good(), "E_IO", "cannot write scene file");
    write_tensor_blob(out, bench.train[i].image, file, Precision::f32);
    scenes.push_back(scene_annotations(bench.train[i], file, "train"));
  }
  for (size_t i = 0; i < bench.test.size(); ++i) {
    const std::string file = scene_file("test", static_cast<int>(i));
    std::ofstream out(fs::path(dir) / file, std::ios::binary);
    check(out.good(), "E_IO", "cannot write scene file");
    write_tensor_blob(out, bench.test[i].image, file, Precision::f32);
    scenes.push_back(scene_annotations(bench.test[i], file, "test"));
  }

  nlohmann::json identities = nlohmann::json::array();
  for (const Identity& id : bench.identities)
    identities.push_back({{"id", id.id}, {"texture_seed", id.texture_seed}, {"labeled", id.labeled}});

  nlohmann::json queries = nlohmann::json::array();
  for (const Query& q : bench.queries)
    queries.push_back({{"scene", q.scene}, {"box", {q.box.x1, q.box.y1, q.box.x2, q.box.y2}}, {"id", q.identity}});

  nlohmann::json root = {{"format_version", 1},
                         {"spec", spec_to_json(bench.spec)},
                         {"identities", identities},
                         {"scenes", scenes},
                         {"queries", queries}};
  std::ofstream out(fs::path(dir) / "annotations.json");
  check(out.good(), "E_IO", "cannot write annotations.json");
  out << root.dump(2) << "\n";
}

Benchmark load_benchmark(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream in(fs::path(dir) / "annotations.json");
  check(in.good(), "E_IO", "cannot open '" + dir + "/annotations.json'");
  nlohmann::json root = nlohmann::json::parse(in, nullptr, false);
  check(!root.is_discarded(), "E_FORMAT", "annotations.json is not valid JSON");
  check(root.value("format_version", 0) == 1, "E_VERSION", "unsupported benchmark format version");

  Benchmark bench;
  bench.spec = spec_from_json(root.at("spec"));
  for (const auto& j : root.at("identities"))
    bench.identities.push_back({j.at("id").get<int>(), j.at("texture_seed").get<uint64_t>(),
                                j.at("labeled").get<bool>()});
  for (const auto& j : root.at("scenes")) {
    Scene s;
    const std::string file = j.at("file").get<std::string>();
    std::ifstream blob(fs::path(dir) / file, std::ios::binary);
    check(blob.good(), "E_IO", "cannot open scene file '" + file + "'");
    s.image = read_tensor_blob(blob).tensor;
    for (const auto& b : j.at("boxes"))
      s.boxes.push_back({b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()});
    s.labels = j.at("labels").get<std::vector<int>>();
    if (j.at("split").get<std::string>() == "train")
      bench.train.push_back(std::move(s));
    else
      bench.test.push_back(std::move(s));
  }
  for (const auto& j : root.at("queries")) {
    const auto& b = j.at("box");
    bench.queries.push_back({j.at("scene").get<int>(),
                             Box{b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()},
                             j.at("id").get<int>()});
  }
  return bench;
}

}  // namespace coat
