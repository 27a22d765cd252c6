#pragma once

#include <functional>
#include <string>
#include <vector>

#include "coat/tensor.hpp"

namespace coat {

struct GradcheckEntry {
  std::string param;
  double max_rel_err = 0.0;
  int64_t worst_index = -1;
  bool pass = true;
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;
  double eps = 0.0;
  double tol = 0.0;
  bool pass = true;
  double max_rel_err = 0.0;
};

// Central finite differences against tape gradients for every element of
// every parameter. `forward` must be a pure function of the parameter values
// (state-free, fixed RNG draws). Requires 64-bit mode.
GradcheckReport gradcheck(const std::function<Tensor()>& forward, const std::vector<Tensor>& params,
                          double eps = 1e-5, double tol = 1e-4);

std::string format_report(const GradcheckReport& report);

struct BatteryEntry {
  std::string name;
  GradcheckReport report;
};

// Prebuilt finite-difference sweeps. scope "op" covers every primitive;
// "block" covers the composite pieces (attention block, pooling, losses).
std::vector<BatteryEntry> gradcheck_battery(const std::string& scope, uint64_t seed);

}  // namespace coat
