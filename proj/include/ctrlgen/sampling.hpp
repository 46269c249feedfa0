#pragma once

// Decode-time steering of a frozen backbone by one or more attribute heads.
//
// Per emitted token, in gemini mode:
//   p_u       = p(. | X)                         backbone, one step per token
//   V_k       = nucleus(p_u, rho1)
//   s_w       = log p_u(w) + lambda * sum_j log p_f,j(a_j | X, w)
//   c_w       = softmax of s over V_k
//   U_m       = prefix of V_k ordered by p_f with c-mass >= rho2
//   x        ~ c renormalised over U_m
//
// no_ad mode replaces both filters by a single nucleus(0.7) on softmax(s);
// unconditional mode samples p_u directly.

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "ctrlgen/backbone.hpp"
#include "ctrlgen/discriminator.hpp"
#include "ctrlgen/numerics.hpp"
#include "ctrlgen/vocab.hpp"

namespace ctrlgen {

enum class DecodeMode { gemini, no_ad, unconditional };

std::string to_string(DecodeMode mode);
/// Accepts "gemini", "no-ad" / "no_ad", "uncond" / "unconditional".
DecodeMode parse_decode_mode(const std::string& text);

struct SamplerConfig {
  static constexpr double kNoAdRho = 0.7;

  double lambda = 5.0;
  double rho1 = 0.9;
  double rho2 = 0.3;
  std::size_t max_len = 40;
  std::uint64_t seed = 1;
  DecodeMode mode = DecodeMode::gemini;
  /// When false, <eos> is never sampled and every sample has max_len tokens.
  bool stop_at_eos = true;

  void validate() const;
};

struct WeightedToken {
  TokenId id = 0;
  double prob = 0.0;

  bool operator==(const WeightedToken&) const = default;
};
using TokenSet = std::vector<WeightedToken>;

/// s_w = logp_uncond_w + lambda * logp_f_w (unnormalised).
Vector weighted_log_scores(std::span<const double> logp_uncond, std::span<const double> logp_f,
                           double lambda);

/// exp(s - max) / sum over the whole vector; sums run in ascending index order.
Vector normalize_scores(std::span<const double> scores);

/// Descending by probability, ties by ascending id; the shortest prefix whose
/// cumulative mass reaches rho. Zero-probability tokens are never returned.
/// rho >= 1 (or a mass that never reaches rho) returns every nonzero token.
TokenSet nucleus_filter(std::span<const double> probs, double rho);

/// Re-weights the members of `set` by softmax of `scores` restricted to them.
TokenSet renormalize_over(const TokenSet& set, std::span<const double> scores);

/// `vk` carries conditional probs normalised over itself. Members are ordered
/// by `pf_key[id]` descending (ties by ascending id) and the shortest prefix
/// whose conditional mass reaches rho2 is returned. `pf_key` may be p_f or any
/// monotone transform of it (the multi-head sum of log p_f).
TokenSet attribute_filter(const TokenSet& vk, std::span<const double> pf_key, double rho2);

/// Sum over heads of log p_f,j; every row must have the same length.
Vector multi_attribute_log_pf(const std::vector<Vector>& per_head);

/// Inverse CDF over ascending token id with the set's weights renormalised.
/// Consumes exactly one uniform draw, including when |U| = 1.
TokenId sample_next(Rng& rng, const TokenSet& set);

// ------------------------------------------------------------------ guides

class GuideSession {
 public:
  virtual ~GuideSession() = default;
  /// log p(a | X, w) for every candidate w, where `state` is the backbone
  /// state after X.
  virtual Vector log_probs(const BackboneState& state) = 0;
  virtual void advance(TokenId token) = 0;
};

class Guide {
 public:
  virtual ~Guide() = default;
  virtual std::unique_ptr<GuideSession> start(std::span<const TokenId> prefix) const = 0;
  virtual std::uint64_t backbone_hash() const = 0;
  virtual const std::string& attribute() const = 0;
};

/// Faster head: one batched evaluation over all candidates from h_{i-1}.
class FasterGuide : public Guide {
 public:
  FasterGuide(const DiscriminatorParams& params, const BackboneModel& backbone);

  std::unique_ptr<GuideSession> start(std::span<const TokenId> prefix) const override;
  std::uint64_t backbone_hash() const override { return backbone_hash_; }
  const std::string& attribute() const override { return scorer_.params().attribute; }
  const FasterScorer& scorer() const noexcept { return scorer_; }

 private:
  FasterScorer scorer_;
  std::uint64_t backbone_hash_;
};

/// Recurrent baseline head: its own state over the emitted tokens, stepped
/// once per candidate to score it.
class GruGuide : public Guide {
 public:
  GruGuide(GruBaselineParams params, const BackboneModel& backbone);

  std::unique_ptr<GuideSession> start(std::span<const TokenId> prefix) const override;
  std::uint64_t backbone_hash() const override { return backbone_hash_; }
  const std::string& attribute() const override { return params_.attribute; }

  /// Process-wide count of recurrent cell steps taken while scoring and
  /// advancing, |V| + 1 per emitted token.
  static std::uint64_t step_count() noexcept;
  static void reset_step_count() noexcept;

 private:
  friend class GruSession;
  GruBaselineParams params_;
  std::vector<GatedInputProjection> projections_;
  std::uint64_t backbone_hash_;
};

// -------------------------------------------------------------- generation

struct StepRecord {
  TokenId token = 0;
  double p_uncond = 0.0;
  std::vector<double> p_f;  // one per head
  bool in_vk = false;
  bool in_um = false;
};

struct Generation {
  std::vector<TokenId> prefix;
  std::vector<TokenId> tokens;
  std::vector<StepRecord> steps;  // filled when recording
};

/// Outcome of one decode step given the backbone distribution and, for the
/// guided modes, the summed head log-probabilities.
struct StepChoice {
  TokenId token = 0;
  bool in_vk = false;
  bool in_um = false;
};

/// The filter-and-sample core shared by every generation path. `logp_f` is
/// ignored in unconditional mode. <bos> is never sampled; <eos> only when
/// cfg.stop_at_eos.
StepChoice decode_step(std::span<const double> logp_uncond, std::span<const double> logp_f,
                       const SamplerConfig& cfg, Rng& rng);

/// Consumes the prefix, then per emitted token: score from the current state,
/// sample, append, one backbone step. Stops at <eos> (not appended) or
/// max_len. The RNG is Rng(cfg.seed, stream).
Generation generate(const BackboneModel& backbone, const std::vector<const Guide*>& guides,
                    std::span<const TokenId> prefix, const SamplerConfig& cfg,
                    std::uint64_t stream = 0, bool record = false);

/// Sample k uses stream k.
std::vector<Generation> generate_many(const BackboneModel& backbone,
                                      const std::vector<const Guide*>& guides,
                                      std::span<const TokenId> prefix, const SamplerConfig& cfg,
                                      std::size_t count, bool record = false);

/// Reference decoder that scores every candidate with the normal head by
/// stepping the backbone once per candidate (|V| steps per emitted token).
Generation generate_naive_normal(const BackboneModel& backbone, const DiscriminatorParams& head,
                                 std::span<const TokenId> prefix, const SamplerConfig& cfg,
                                 std::uint64_t stream = 0);

/// JSON-lines with {prefix, tokens, text} and, if recorded, per_step.
std::string generations_jsonl(const std::vector<Generation>& gens, const Vocabulary& vocab);
/// Reads the token lists back; prefix and continuation are concatenated
/// unless `continuation_only`.
std::vector<std::vector<TokenId>> read_generations(const std::string& text, const Vocabulary& vocab,
                                                   bool continuation_only = true);

enum class TraceHead { faster, normal };

/// Entry i-2 is sigma(M_f(h_{i-1}, e_{x_i})) for i = 2..T, or sigma(M_n(h_i))
/// with TraceHead::normal. Requires T >= 2.
Vector stepwise_trace(const DiscriminatorParams& head, const BackboneModel& backbone,
                      std::span<const TokenId> tokens, TraceHead which = TraceHead::faster);

}  // namespace ctrlgen
