#pragma once

#include <string>
#include <vector>

#include "coat/cascade.hpp"
#include "coat/losses.hpp"
#include "coat/toybench.hpp"

namespace coat {

struct OptimConfig {
  double lr = 0.003;
  double momentum = 0.9;
  int epochs = 30;
  int warmup_epochs = 1;
  int decay_epoch = 20;  // lr is cut by decay_factor from this epoch on (1-based)
  double decay_factor = 0.1;
  int batch_scenes = 2;
};

// Everything a run needs; serializes to JSON and back without loss.
struct RunConfig {
  uint64_t seed = 0;
  int precision_bits = 0;  // 0 = inherit COAT_PRECISION / default
  SplitSpec bench;
  CascadeConfig cascade;
  OimConfig oim;
  double lambda_oim = 0.5;
  double lambda_id = 0.5;
  OptimConfig optim;
  std::vector<int> eval_gallery_sizes = {4, 8, 16};

  void validate() const;
};

// The defaults above keep the paper-sized model; the toy recipe shrinks it so
// the end-to-end run fits a laptop CPU budget.
RunConfig default_toy_config();

std::string render_config(const RunConfig& cfg);
RunConfig parse_config(const std::string& json_text);
RunConfig load_config_file(const std::string& path);
void save_config_file(const std::string& path, const RunConfig& cfg);

}  // namespace coat
