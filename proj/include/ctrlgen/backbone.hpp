#pragma once

// Frozen autoregressive language model. The reference implementation is an
// embedding table feeding a single gated recurrent cell and an output affine
// to |V| logits. Every sequence is implicitly prefixed with <bos>; h_i is the
// hidden state after consuming the i-th real token, h_0 the state after <bos>.

#include <atomic>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ctrlgen/gated_cell.hpp"
#include "ctrlgen/numerics.hpp"
#include "ctrlgen/vocab.hpp"

namespace ctrlgen {

struct BackboneParams {
  Matrix embedding;  // |V| x d_e
  GatedCellParams cell;
  Matrix w_out;  // |V| x d_h
  Vector b_out;

  BackboneParams() = default;
  BackboneParams(std::size_t vocab, std::size_t d_h, std::size_t d_e);

  std::size_t vocab_size() const noexcept { return embedding.rows(); }
  std::size_t d_h() const noexcept { return cell.hidden_dim(); }
  std::size_t d_e() const noexcept { return embedding.cols(); }

  /// Named views, lexicographic by name.
  std::vector<TensorRef> tensors();
  bool operator==(const BackboneParams&) const = default;
};

/// Value-semantic decoding state: hidden vector and next-token log-probs
/// for the current prefix.
struct BackboneState {
  Vector h;
  Vector logprobs;
  std::size_t prefix_length = 0;  // counts <bos>

  bool operator==(const BackboneState&) const = default;
};

class BackboneModel {
 public:
  BackboneModel(Vocabulary vocab, BackboneParams params);

  /// All weights zero: every next-token distribution is uniform.
  static BackboneModel zeros(Vocabulary vocab, std::size_t d_h, std::size_t d_e);

  const Vocabulary& vocab() const noexcept { return vocab_; }
  const BackboneParams& params() const noexcept { return params_; }
  std::size_t d_h() const noexcept { return params_.d_h(); }
  std::size_t d_e() const noexcept { return params_.d_e(); }
  std::size_t vocab_size() const noexcept { return vocab_.size(); }

  /// State after consuming <bos>. Not counted as a forward.
  BackboneState init_state() const;
  /// Consumes one token. Counted.
  BackboneState step(const BackboneState& state, TokenId token) const;
  /// Iterated step from init_state; entry i-1 holds (h_i, log p(.|X_{1:i})).
  std::vector<BackboneState> full_hidden_states(std::span<const TokenId> tokens) const;

  std::span<const double> embed(TokenId token) const;
  const Matrix& embedding() const noexcept { return params_.embedding; }

  std::vector<std::uint8_t> serialize() const;
  static BackboneModel deserialize(std::span<const std::uint8_t> bytes);
  void save(const std::string& path) const;
  static BackboneModel load(const std::string& path);

  /// Content hash of the serialized checkpoint.
  std::uint64_t hash() const noexcept { return hash_; }

  /// Process-wide count of step() calls.
  static std::uint64_t forward_count() noexcept;
  static void reset_forward_count() noexcept;

 private:
  BackboneState from_hidden(Vector h, std::size_t prefix_length) const;

  Vocabulary vocab_;
  BackboneParams params_;
  std::uint64_t hash_ = 0;
};

struct BackboneTrainConfig {
  int epochs = 10;
  double lr = 0.2;
  std::uint64_t seed = 1;
  std::size_t d_h = 32;
  std::size_t d_e = 16;
  double init_scale = 0.08;
  double clip_norm = 5.0;  // global gradient-norm clip per update; <= 0 disables
};

/// Mean next-token NLL of <bos> x_1..x_T <eos>. When `grad` is non-null the
/// gradient is accumulated into it (same shapes as `params`).
double backbone_sequence_loss(const BackboneParams& params, std::span<const TokenId> tokens,
                              BackboneParams* grad);

BackboneParams init_backbone_params(std::size_t vocab, const BackboneTrainConfig& cfg);

/// Per-sequence SGD over shuffled sequences. Deterministic given cfg.seed.
BackboneModel train_backbone(const std::vector<std::vector<TokenId>>& corpus,
                             const Vocabulary& vocab, const BackboneTrainConfig& cfg,
                             std::vector<double>* epoch_losses = nullptr);

/// exp(mean_i -log p(x_i | X_{1:i-1})) over the real tokens (no <eos> term).
double perplexity(const BackboneModel& model, std::span<const TokenId> tokens);

}  // namespace ctrlgen
