#pragma once

#include <functional>
#include <string>
#include <vector>

#include "coat/checkpoint.hpp"
#include "coat/config.hpp"
#include "coat/gradcheck.hpp"

namespace coat {

// v = momentum*v + g; w -= lr*v. Buffers live alongside the parameter list.
class Sgd {
 public:
  Sgd(std::vector<Tensor> params, double momentum);
  void step(double lr);
  void zero_grad();

  std::vector<std::vector<double>>& buffers() { return buffers_; }
  const std::vector<Tensor>& params() const { return params_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> buffers_;
  double momentum_;
};

// warmup to the base rate across the first epoch(s), step decay afterwards
double lr_at(const OptimConfig& cfg, int epoch, int step_in_epoch, int steps_per_epoch);

struct TrainOutcome {
  std::string checkpoint_path;
  double final_total_loss = 0.0;
  int steps = 0;
};

using StepHook = std::function<void(int epoch, int step, const LossReport&)>;

// Full training run: writes loss.csv and a checkpoint for every epoch under
// out_dir (checkpoint.coat is the latest). resume_from continues a previous
// run bit-exactly at its epoch boundary.
TrainOutcome train_run(const RunConfig& cfg, const Benchmark& bench, const std::string& out_dir,
                       const std::string& resume_from = "", const StepHook& hook = nullptr);

// Detection + retrieval evaluation of a model over the benchmark's test set,
// with the headline retrieval at bench gallery_size and a sweep across
// `sweep_sizes`. Pure given the weights; eval streams derive from eval_seed.
EvalReport evaluate_model(const Model& model, const Benchmark& bench, const std::vector<int>& sweep_sizes,
                          uint64_t eval_seed);

// Per-scene final detections, reusable for the detections file.
std::vector<SceneDetections> detect_all(const Model& model, const Benchmark& bench, uint64_t eval_seed);

struct AblationRow {
  std::string variant;
  double map = 0.0;
  double top1 = 0.0;
  double det_ap = 0.0;
};

// Presets along the paper's ablation axes. Every variant trains under the
// same seeds and budget; metrics are averaged over `seeds`.
std::vector<AblationRow> run_ablation(const std::string& preset, const RunConfig& base, int seeds,
                                      const std::string& work_dir);
std::vector<std::string> ablation_presets();

// Small-but-complete 3-stage setup used by the full-loss gradient check.
RunConfig gradcheck_config();

struct FullGradcheckResult {
  GradcheckReport report;
  uint64_t seed_used = 0;
  int64_t n_params = 0;
};

// Finite-difference sweep over every learned parameter of a 4-scene batch
// through the complete multi-stage objective. Reseeds until the evaluation
// point is clear of ReLU kinks / threshold boundaries.
FullGradcheckResult gradcheck_full_loss(uint64_t seed, double eps = 1e-5, double tol = 1e-4);

}  // namespace coat
