#pragma once

// Gated recurrent cell shared by the reference backbone, the faster head and
// the GRU baseline head:
//
//   r   = sigmoid(W_ir x + W_hr h + b_r)
//   z   = sigmoid(W_iz x + W_hz h + b_z)
//   n   = tanh(W_in x + b_in + r * (W_hn h + b_hn))
//   out = (1 - z) * n + z * h
//
// Products marked * are elementwise.

#include <array>
#include <string>
#include <vector>

#include "ctrlgen/numerics.hpp"
#include "ctrlgen/tensor_io.hpp"

namespace ctrlgen {

struct GatedCellParams {
  Matrix w_ir, w_iz, w_in;  // hidden x input
  Matrix w_hr, w_hz, w_hn;  // hidden x hidden
  Vector b_r, b_z, b_in, b_hn;

  GatedCellParams() = default;
  GatedCellParams(std::size_t input, std::size_t hidden);

  std::size_t input_dim() const noexcept { return w_ir.cols(); }
  std::size_t hidden_dim() const noexcept { return w_ir.rows(); }

  /// Named views; `prefix` is prepended and `names` supplies the suffix for
  /// each of the ten tensors in declaration order.
  std::vector<TensorRef> tensors(const std::string& prefix,
                                 const std::array<const char*, 10>& names);

  bool operator==(const GatedCellParams&) const = default;
};

/// Activations kept from the forward pass for the backward pass.
struct GatedCellCache {
  Vector x, h;
  Vector r, z, n;
  Vector hn;  // W_hn h + b_hn
  Vector out;
};

/// Input-side pre-activations W_i{r,z,n} x. Exposed so callers can precompute
/// them for a fixed set of inputs and reuse across many hidden states.
struct GatedInputProjection {
  Vector r, z, n;
};

/// Hidden-side pre-activations W_h{r,z,n} h.
struct GatedHiddenProjection {
  Vector r, z, n;
};

GatedInputProjection project_input(const GatedCellParams& p, std::span<const double> x);
GatedHiddenProjection project_hidden(const GatedCellParams& p, std::span<const double> h);

/// Completes the cell from projections; identical rounding to gated_forward.
/// Writes r, z, n, hn and out into `cache` (x and h are left untouched).
void gated_combine(const GatedCellParams& p, const GatedInputProjection& in,
                   const GatedHiddenProjection& hid, std::span<const double> h,
                   GatedCellCache& cache);

Vector gated_forward(const GatedCellParams& p, std::span<const double> x,
                     std::span<const double> h, GatedCellCache* cache = nullptr);

/// Accumulates parameter gradients into `grad` and adds dL/dx, dL/dh into
/// dx and dh (which must be sized to the input and hidden widths).
void gated_backward(const GatedCellParams& p, const GatedCellCache& cache,
                    std::span<const double> d_out, GatedCellParams& grad, std::span<double> dx,
                    std::span<double> dh);

}  // namespace ctrlgen
