#pragma once

// Automatic evaluation of generated samples and the per-token speed bench.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ctrlgen/backbone.hpp"
#include "ctrlgen/corpus.hpp"
#include "ctrlgen/discriminator.hpp"
#include "ctrlgen/sampling.hpp"
#include "ctrlgen/training.hpp"

namespace ctrlgen {

using TokenSequences = std::vector<std::vector<TokenId>>;

/// Distinct n-grams over total n-grams, pooled over all samples. Samples
/// shorter than n contribute nothing; throws if none has n tokens.
double dist_n(const TokenSequences& samples, std::size_t n);

/// Attribute posterior p(a = 1 | X) for a finished sequence.
class Judge {
 public:
  virtual ~Judge() = default;
  virtual double posterior(std::span<const TokenId> tokens) const = 0;
};

/// Exact Bayes posterior under the generator that produced the corpus.
class OracleJudge : public Judge {
 public:
  explicit OracleJudge(SynthSpec spec) : spec_(spec.resolve()) {}
  double posterior(std::span<const TokenId> tokens) const override {
    return bayes_oracle_prob(spec_, tokens);
  }

 private:
  SynthSpec spec_;
};

/// Mean of the normal head's p_n over the sequence's positions; 0.5 when empty.
class HeadJudge : public Judge {
 public:
  HeadJudge(DiscriminatorParams head, const BackboneModel& backbone)
      : head_(std::move(head)), backbone_(backbone) {}
  double posterior(std::span<const TokenId> tokens) const override;

 private:
  DiscriminatorParams head_;
  const BackboneModel& backbone_;
};

struct Relevance {
  double ar = 0.0;              // fraction with posterior > 0.5
  double mean_posterior = 0.0;
};

Relevance attribute_relevance(const TokenSequences& samples, const Judge& judge);

/// Per-sample perplexity under the backbone; empty samples get +inf.
std::vector<double> sample_perplexities(const BackboneModel& backbone, const TokenSequences& samples);

/// Fraction of samples with posterior > tau_ar and perplexity < tau_ppl.
double excellent_rate(const std::vector<double>& posteriors, const std::vector<double>& ppls,
                      double tau_ar, double tau_ppl);
double excellent_rate(const TokenSequences& samples, const Judge& judge,
                      const BackboneModel& backbone, double tau_ar, double tau_ppl);

/// factor * median perplexity of `n` unconditional samples (seeded).
double relative_ppl_threshold(const BackboneModel& backbone, std::uint64_t seed,
                              std::size_t n = 200, double factor = 1.5);

struct ResemblanceConfig {
  double train_frac = 0.8;
  std::uint64_t seed = 1;
  TrainConfig train = [] {
    TrainConfig t;
    t.lr = 1e-2;
    t.epochs = 20;
    return t;
  }();
};

/// Trains a fresh normal head to tell generated (1) from corpus (0) text on
/// class-balanced data and returns its mean posterior on held-out generated
/// samples. Needs at least 100 non-empty sequences on each side.
double corpus_resemblance(const TokenSequences& generated, const TokenSequences& corpus,
                          const BackboneModel& backbone, const ResemblanceConfig& cfg = {});

enum class BenchMode { faster, naive_normal };

std::string to_string(BenchMode mode);
BenchMode parse_bench_mode(const std::string& text);

struct BenchConfig {
  std::size_t n_samples = 100;
  std::size_t tokens_per_sample = 40;
  std::size_t batch = 1;
  SamplerConfig sampler;  // stop_at_eos is forced off so lengths are fixed
};

struct BenchResult {
  BenchMode mode = BenchMode::faster;
  std::size_t n_samples = 0;
  double mean_s = 0.0;  // mean over samples of per-token seconds
  double std_s = 0.0;   // sample standard deviation of the same
  std::uint64_t forwards = 0;
  std::uint64_t tokens = 0;
};

BenchResult bench_time_per_token(const BackboneModel& backbone, const DiscriminatorParams& head,
                                 BenchMode mode, const BenchConfig& cfg = {});

/// "mode,n,mean_s,std_s,forwards" header and one row per result.
std::string bench_csv(const std::vector<BenchResult>& rows);

struct EvalReport {
  double ar = 0.0;
  double mean_posterior = 0.0;
  double ppl = 0.0;  // mean per-sample perplexity over non-empty samples
  double er = 0.0;
  double tau_ppl = 0.0;
  double dist1 = 0.0, dist2 = 0.0, dist3 = 0.0;
  std::optional<double> cr;
  std::optional<double> time_per_token_mean;
  std::optional<double> time_per_token_std;
  std::size_t n_samples = 0;
};

struct EvalOptions {
  double tau_ar = 0.9;
  double tau_ppl = 0.0;  // required, > 0
  const TokenSequences* corpus = nullptr;  // enables CR
  ResemblanceConfig resemblance;
};

EvalReport evaluate(const TokenSequences& samples, const Judge& judge,
                    const BackboneModel& backbone, const EvalOptions& opts);

/// Dist-n for n that no sample reaches is reported as 0.
std::string eval_report_json(const EvalReport& report, const std::string& config_json);

}  // namespace ctrlgen
