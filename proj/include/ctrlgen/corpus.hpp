#pragma once

// Labeled corpora and the synthetic attribute language.
//
// A SynthSpec partitions the non-reserved tokens into S1, S0 (each a quarter,
// disjoint) and a neutral remainder N. A class-y token is drawn uniformly from
// S_y with probability beta and uniformly from the complement of S_y
// (N together with S_{1-y}) otherwise. Emissions are i.i.d., so the exact
// class posterior factorises over tokens.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ctrlgen/numerics.hpp"
#include "ctrlgen/vocab.hpp"

namespace ctrlgen {

struct LabeledSequence {
  std::vector<TokenId> tokens;
  int label = 0;
  std::string attribute;

  bool operator==(const LabeledSequence&) const = default;
};

struct SynthSpec {
  std::size_t vocab_size = 64;
  /// Explicit attribute subsets. When both are empty they are derived from
  /// partition_seed by resolve().
  std::vector<TokenId> s1, s0;
  double beta = 0.7;
  std::size_t min_len = 8;
  std::size_t max_len = 32;
  std::uint64_t seed = 1;
  std::uint64_t partition_seed = 1;
  std::string attribute = "attr";

  /// Copy with s1/s0 filled in and sorted. Throws std::invalid_argument on an
  /// invalid spec (overlap, reserved ids, beta outside [0.5, 1], bad lengths).
  SynthSpec resolve() const;
  std::vector<TokenId> non_reserved() const;
  /// Non-reserved tokens outside S1 and S0.
  std::vector<TokenId> neutral() const;
  /// p(token | y) under the generator; resolved specs only.
  double emission_prob(int label, TokenId token) const;

  bool operator==(const SynthSpec&) const = default;
};

class CorpusError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// n_per_class class-1 sequences followed by n_per_class class-0 sequences.
/// Sample k draws from Rng(spec.seed, k).
std::vector<LabeledSequence> synth_corpus(const SynthSpec& spec, std::size_t n_per_class);

/// Sequences whose first half is emitted under class 0 and second half under
/// class 1. Labelled 1. Sample k draws from Rng(seed, k).
std::vector<LabeledSequence> synth_switch_corpus(const SynthSpec& spec, std::size_t n,
                                                 std::uint64_t seed);

/// Exact p(y = 1 | X) under the generator with equal priors. Reserved tokens
/// carry no evidence; an empty input yields 0.5.
double bayes_oracle_prob(const SynthSpec& spec, std::span<const TokenId> tokens);

std::vector<LabeledSequence> parse_jsonl(const std::string& text, const Vocabulary& vocab);
std::vector<LabeledSequence> load_jsonl(const std::string& path, const Vocabulary& vocab);
std::string to_jsonl(const std::vector<LabeledSequence>& data, const Vocabulary& vocab);
void save_jsonl(const std::string& path, const std::vector<LabeledSequence>& data,
                const Vocabulary& vocab);

/// Deterministic shuffle by seed, then the first round(frac * n) items go to
/// train; both halves keep the shuffled order.
std::pair<std::vector<LabeledSequence>, std::vector<LabeledSequence>> split(
    const std::vector<LabeledSequence>& data, double frac, std::uint64_t seed);

std::uint64_t corpus_hash(const std::vector<LabeledSequence>& data);

std::vector<std::vector<TokenId>> token_sequences(const std::vector<LabeledSequence>& data);

}  // namespace ctrlgen
