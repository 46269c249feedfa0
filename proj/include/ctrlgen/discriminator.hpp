#pragma once

// Twin attribute heads over frozen backbone features.
//
// Normal head (reads h_i, the state after the candidate token):
//   g = ReLU(W_g h + b_g),  M_n(h) = W_0 g
//
// Faster head (reads h_{i-1} and the candidate's embedding e_w):
//   g = W_g h_{i-1} + b_g                       (no ReLU here)
//   r = sigmoid(W_1r e + W_2r g + b_r)
//   z = sigmoid(W_1z e + W_2z g + b_z)
//   n = tanh(W_1n e + b_1n + r * (W_2n g + b_2n))
//   o = ReLU((1 - z) * n + z * g),  M_f(h_{i-1}, e) = W_0 o
//
// W_g, b_g and W_0 are stored once and used by both heads. The gated part of
// the faster head is a GatedCellParams with input e and hidden g.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ctrlgen/gated_cell.hpp"
#include "ctrlgen/numerics.hpp"
#include "ctrlgen/tensor_io.hpp"

namespace ctrlgen {

class BackboneModel;

struct DiscriminatorParams {
  std::string attribute;
  Matrix w_g;  // d_h x d_h, shared
  Vector b_g;  // d_h, shared
  Vector w_0;  // d_h, shared
  GatedCellParams fast;  // W_1* = input side (d_h x d_e), W_2* = hidden side (d_h x d_h)

  DiscriminatorParams() = default;
  DiscriminatorParams(std::size_t d_h, std::size_t d_e, std::string attribute = {});

  std::size_t d_h() const noexcept { return w_g.rows(); }
  std::size_t d_e() const noexcept { return fast.input_dim(); }

  /// Named views, lexicographic by name.
  std::vector<TensorRef> tensors();
  /// Only the three tensors both heads read.
  std::vector<TensorRef> shared_tensors();

  bool operator==(const DiscriminatorParams&) const = default;
};

/// Same shape as `p`, all zeros. Used as a gradient accumulator.
DiscriminatorParams zeros_like(const DiscriminatorParams& p);

/// Uniform(-b, b) per tensor, lexicographic order, from Rng(seed, 0). With an
/// explicit scale every tensor uses b = scale. Otherwise biases are zero and
/// weights use b = sqrt(6 / (fan_in + fan_out)), a vector counting as one row.
DiscriminatorParams init_discriminator(std::size_t d_h, std::size_t d_e, std::string attribute,
                                       std::uint64_t seed, std::optional<double> scale = std::nullopt);

double normal_logit(const DiscriminatorParams& p, std::span<const double> h);
double normal_prob(const DiscriminatorParams& p, std::span<const double> h);
double normal_log_prob(const DiscriminatorParams& p, std::span<const double> h);

double faster_logit(const DiscriminatorParams& p, std::span<const double> h_prev,
                    std::span<const double> e);
double faster_prob(const DiscriminatorParams& p, std::span<const double> h_prev,
                   std::span<const double> e);

/// Entry w equals faster_logit(p, h_prev, E.row(w)) bit for bit; the hidden-side
/// work is shared across all rows.
Vector faster_logits_all(const DiscriminatorParams& p, std::span<const double> h_prev,
                         const Matrix& embedding);

/// Faster head bound to a frozen embedding table. Everything that depends
/// only on e_w is computed once at construction, so a decode step costs one
/// hidden-side projection plus O(|V| d_h) elementwise work. Logits agree with
/// faster_logits_all to within rounding.
class FasterScorer {
 public:
  FasterScorer(const DiscriminatorParams& params, const Matrix& embedding);

  Vector logits_all(std::span<const double> h_prev) const;
  /// log sigmoid of logits_all, via -softplus(-m).
  Vector log_probs_all(std::span<const double> h_prev) const;

  const DiscriminatorParams& params() const noexcept { return params_; }
  std::size_t vocab_size() const noexcept { return pre_n_.rows(); }

 private:
  DiscriminatorParams params_;
  Matrix exp_neg_r_;  // exp(-W_1r e_w), one row per token
  Matrix exp_neg_z_;  // exp(-W_1z e_w)
  Matrix pre_n_;      // W_1n e_w + b_1n
  Matrix pre_r_, pre_z_;
  bool tables_finite_ = true;  // every exp_neg_r_, exp_neg_z_ entry normal and finite
  double max_exp_neg_z_ = 0.0;

  Vector logits_saturated(std::span<const double> h_prev) const;
};

// ------------------------------------------------------------- gradients

struct NormalCache {
  Vector h;
  Vector pre;  // W_g h + b_g
  Vector g;    // ReLU(pre)
  double logit = 0.0;
};

struct FasterCache {
  Vector h_prev;
  Vector g;  // W_g h_prev + b_g
  GatedCellCache cell;
  Vector o;  // ReLU(cell.out)
  double logit = 0.0;
};

double normal_forward(const DiscriminatorParams& p, std::span<const double> h, NormalCache& c);
double faster_forward(const DiscriminatorParams& p, std::span<const double> h_prev,
                      std::span<const double> e, FasterCache& c);

/// Accumulates upstream * dM_n/dtheta into `grad` (W_g, b_g, W_0 only) and
/// returns dM_n/dh * upstream. ReLU'(0) = 0.
Vector normal_backward(const DiscriminatorParams& p, const NormalCache& c, double upstream,
                       DiscriminatorParams& grad);
Vector normal_backward(const DiscriminatorParams& p, std::span<const double> h, double upstream,
                       DiscriminatorParams& grad);

/// Accumulates upstream * dM_f/dtheta into every faster and shared tensor of
/// `grad`. Optional outputs receive the input gradients.
void faster_backward(const DiscriminatorParams& p, const FasterCache& c, double upstream,
                     DiscriminatorParams& grad, Vector* d_h_prev = nullptr, Vector* d_e = nullptr);
void faster_backward(const DiscriminatorParams& p, std::span<const double> h_prev,
                     std::span<const double> e, double upstream, DiscriminatorParams& grad);

// -------------------------------------------------------- GRU baseline head

/// Recurrent classifier over the embedding sequence alone (no backbone
/// states): h_t = cell(e_{x_t}, h_{t-1}), h_0 = 0, logit_t = w_out . h_t + b_out.
struct GruBaselineParams {
  std::string attribute;
  GatedCellParams cell;
  Vector w_out;
  Vector b_out;  // size 1

  GruBaselineParams() = default;
  GruBaselineParams(std::size_t d_e, std::size_t hidden, std::string attribute = {});

  std::size_t hidden_dim() const noexcept { return cell.hidden_dim(); }
  std::vector<TensorRef> tensors();
  bool operator==(const GruBaselineParams&) const = default;
};

GruBaselineParams zeros_like(const GruBaselineParams& p);
GruBaselineParams init_gru_baseline(std::size_t d_e, std::size_t hidden, std::string attribute,
                                    std::uint64_t seed, std::optional<double> scale = std::nullopt);

/// One recurrence step; writes the new state to h_next when given.
double gru_baseline_step(const GruBaselineParams& p, std::span<const double> h_prev,
                         std::span<const double> e, Vector* h_next = nullptr);

/// Per-step logits over the rows of `embedded` (T x d_e). Throws on empty input.
Vector gru_baseline_logits(const GruBaselineParams& p, const Matrix& embedded);

/// Backprop through time for upstream per-step logit gradients.
void gru_baseline_backward(const GruBaselineParams& p, const Matrix& embedded,
                           std::span<const double> d_logits, GruBaselineParams& grad);

// ------------------------------------------------------------ persistence

struct DiscriminatorCheckpoint {
  DiscriminatorParams params;
  std::uint64_t backbone_hash = 0;
};

class HashMismatchError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::vector<std::uint8_t> serialize_discriminator(const DiscriminatorParams& p,
                                                  std::uint64_t backbone_hash);
DiscriminatorCheckpoint deserialize_discriminator(std::span<const std::uint8_t> bytes);
void save_discriminator(const std::string& path, const DiscriminatorParams& p,
                        std::uint64_t backbone_hash);
DiscriminatorCheckpoint load_discriminator(const std::string& path);
/// Loads and checks the stored backbone hash and dims against `backbone`.
DiscriminatorParams load_discriminator(const std::string& path, const BackboneModel& backbone);

}  // namespace ctrlgen
