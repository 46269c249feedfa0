#include "faster_kernel.hpp"

#include <bit>
#include <cmath>
#include <cstdint>

// Built with -ftree-vectorize -fno-trapping-math. Every loop below is plain
// elementwise IEEE arithmetic, so the wide and scalar clones agree bit for bit.
#if defined(__x86_64__) && defined(__GNUC__) && !defined(__clang__)
#define CTRLGEN_CLONES __attribute__((target_clones("avx2", "default")))
#else
#define CTRLGEN_CLONES
#endif

namespace ctrlgen::detail {

namespace {

// x = k ln2 + r with |r| <= ln2 / 2; Taylor to r^12 leaves a relative error
// near 3e-16. k is read back from the low mantissa bits of x log2e + 1.5 2^52.
inline double exp_core(double x) {
  x = x < -708.0 ? -708.0 : x;
  constexpr double kShift = 6755399441055744.0;
  const double t = x * 1.4426950408889634 + kShift;
  const double k = t - kShift;
  const double r = (x - k * 0.6931471803691238) - k * 1.9082149292705877e-10;
  double p = 1.0 / 479001600.0;
  p = p * r + 1.0 / 39916800.0;
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
  const std::uint64_t scale = (std::bit_cast<std::uint64_t>(t) + 1023) << 52;
  return p * std::bit_cast<double>(scale);
}

}  // namespace

CTRLGEN_CLONES
void exp_nonpositive(double* __restrict x, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) x[i] = exp_core(x[i]);
}

CTRLGEN_CLONES
void faster_scores(const double* __restrict er, const double* __restrict ez,
                   const double* __restrict an, std::size_t V, std::size_t H,
                   const double* __restrict xr, const double* __restrict xz,
                   const double* __restrict hn, const double* __restrict g,
                   const double* __restrict w0, double* __restrict scratch,
                   double* __restrict out) {
  const std::size_t N = V * H;
  double* __restrict qz = scratch;
  double* __restrict u = scratch + N;
  double* __restrict e = scratch + 2 * N;
  for (std::size_t w = 0; w < V; ++w) {
    const std::size_t b = w * H;
    for (std::size_t k = 0; k < H; ++k) {
      qz[b + k] = ez[b + k] * xz[k];
      u[b + k] = an[b + k] + hn[k] / (1.0 + er[b + k] * xr[k]);
      e[b + k] = -2.0 * std::fabs(u[b + k]);
    }
  }
  for (std::size_t i = 0; i < N; ++i) e[i] = exp_core(e[i]);
  // tanh(u) = sgn(u) (1 - e) / (1 + e); (1 - z) tanh(u) + z g over the common
  // denominator (1 + qz)(1 + e). The ReLU-weighted terms overwrite e.
  for (std::size_t w = 0; w < V; ++w) {
    const std::size_t b = w * H;
    for (std::size_t k = 0; k < H; ++k) {
      const double ee = e[b + k];
      const double n_num = std::copysign(1.0 - ee, u[b + k]);
      const double o = (qz[b + k] * n_num + g[k] * (1.0 + ee)) / ((1.0 + qz[b + k]) * (1.0 + ee));
      e[b + k] = o > 0.0 ? w0[k] * o : 0.0;
    }
  }
  for (std::size_t w = 0; w < V; ++w) {
    double s = 0.0;
    for (std::size_t k = 0; k < H; ++k) s += e[w * H + k];
    out[w] = s;
  }
}

}  // namespace ctrlgen::detail
