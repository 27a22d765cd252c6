#pragma once

#include <string>
#include <vector>

#include "coat/cascade.hpp"
#include "coat/config.hpp"
#include "coat/losses.hpp"

namespace coat {

constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  RunConfig config;
  int epoch = 0;  // completed epochs
  Model model;
  std::vector<OimState> oim;                   // one per stage; empty tables for stages without ReID
  std::vector<std::vector<double>> momentum;  // SGD buffers aligned with model.params()
};

// Single file: magic, version, JSON manifest, then the parameter / optimizer /
// OIM tensor blobs. load(save(x)) reproduces x bit-exactly.
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace coat
