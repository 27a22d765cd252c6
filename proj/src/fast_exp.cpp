#include "fast_exp.hpp"

#include <bit>
#include <cmath>

namespace coat::detail {

void exp_batch_inplace(double* x, int64_t n) {
  constexpr double kMagic = 6755399441055744.0;  // 1.5 * 2^52
  for (int64_t i = 0; i < n; ++i) {
    double v = x[i];
    v = v < -700.0 ? -700.0 : v;
    v = v > 700.0 ? 700.0 : v;
    double kd = v * 1.4426950408889634074 + kMagic;
    const uint64_t kbits = std::bit_cast<uint64_t>(kd);
    kd -= kMagic;
    const double r = (v - kd * 6.93147180369123816490e-01) - kd * 1.90821492927058770002e-10;
    double p = 1.0 / 39916800.0;
    p = p * r + 1.0 / 3628800.0;
    p = p * r + 1.0 / 362880.0;
    p = p * r + 1.0 / 40320.0;
    p = p * r + 1.0 / 5040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    // the magic constant's low bits vanish in the shift
    x[i] = std::bit_cast<double>(std::bit_cast<uint64_t>(p) + (kbits << 52));
  }
}

}  // namespace coat::detail
