#pragma once

#include <cstddef>

namespace ctrlgen::detail {

// Inner loops of FasterScorer::logits_all for the non-saturated case. Tables
// are |V| x d_h row-major; `scratch` holds 3 |V| d_h doubles.
//   out[w] = sum_k w0[k] ReLU((1 - z) tanh(u) + z g[k])
// with u = an + hn / (1 + er xr), z = 1 / (1 + ez xz).
void faster_scores(const double* er, const double* ez, const double* an, std::size_t V,
                   std::size_t H, const double* xr, const double* xz, const double* hn,
                   const double* g, const double* w0, double* scratch, double* out);

/// exp(x) in place for x <= 0 (inputs below -708 are clamped).
void exp_nonpositive(double* x, std::size_t n);

}  // namespace ctrlgen::detail
