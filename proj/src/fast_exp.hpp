#pragma once

#include <cstdint>

namespace coat::detail {

// exp over a contiguous buffer, in place. 2^k * P(r) with |r| <= ln2/2 and a
// degree-11 polynomial; relative error ~6e-15. Lives in its own translation
// unit: the magic-constant rounding must not be compiled under
// -fassociative-math, which would fold it away.
void exp_batch_inplace(double* x, int64_t n);

}  // namespace coat::detail
