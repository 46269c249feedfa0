#pragma once

// Desk-scale experiment orchestration: per-seed fixtures (corpus, backbone,
// trained heads), the four-variant ablation table and the lambda sweep.

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ctrlgen/backbone.hpp"
#include "ctrlgen/corpus.hpp"
#include "ctrlgen/discriminator.hpp"
#include "ctrlgen/metrics.hpp"
#include "ctrlgen/sampling.hpp"
#include "ctrlgen/training.hpp"

namespace ctrlgen {

struct ExperimentConfig {
  SynthSpec spec;  // seed and partition_seed are replaced per run seed
  std::size_t n_per_class = 1000;
  double train_frac = 0.8;
  BackboneTrainConfig backbone;
  TrainConfig head = [] {
    TrainConfig t;
    t.lr = 1e-3;
    t.epochs = 50;
    return t;
  }();
  std::size_t gru_hidden = 32;
  SamplerConfig sampler;
  std::size_t n_samples = 200;
  double tau_ar = 0.9;
  double ppl_factor = 1.5;
  /// Attribute-filter mass used by the sweep; at 1, lambda = 0 is plain
  /// nucleus sampling.
  double sweep_rho2 = 1.0;
  /// Each sweep sample continues the first tokens of a held-out sequence.
  std::size_t sweep_prefix_len = 6;
  std::size_t switch_sequences = 100;
};

/// Everything derived from one seed; heads are trained on first use.
class SeedFixture {
 public:
  SeedFixture(const ExperimentConfig& cfg, std::uint64_t seed);

  std::uint64_t seed() const noexcept { return seed_; }
  const ExperimentConfig& config() const noexcept { return cfg_; }
  const SynthSpec& spec() const noexcept { return spec_; }
  const std::vector<LabeledSequence>& train() const noexcept { return train_; }
  const std::vector<LabeledSequence>& held_out() const noexcept { return held_; }
  const BackboneModel& backbone() const noexcept { return *backbone_; }
  const FeatureCache& train_cache();
  const FeatureCache& held_cache();

  const TrainResult& joint_head();
  const TrainResult& no_kd_head();
  const GruTrainResult& gru_head();
  double tau_ppl();

 private:
  ExperimentConfig cfg_;
  std::uint64_t seed_;
  SynthSpec spec_;
  std::vector<LabeledSequence> train_, held_;
  std::unique_ptr<BackboneModel> backbone_;
  std::optional<FeatureCache> train_cache_, held_cache_;
  std::optional<TrainResult> joint_, no_kd_;
  std::optional<GruTrainResult> gru_;
  std::optional<double> tau_ppl_;
};

enum class Variant { gemini, gemini_no_kd, gemini_no_ad, bclm_gru, unconditional };

std::string to_string(Variant v);
Variant parse_variant(const std::string& text);

struct VariantRow {
  Variant variant = Variant::gemini;
  double ar = 0.0;
  double ppl = 0.0;
  double er = 0.0;
  double dist1 = 0.0, dist2 = 0.0, dist3 = 0.0;
  double forwards_per_token = 0.0;  // backbone plus recurrent-head steps per emitted token
};

/// Samples n_samples sequences with the variant's guide and evaluates them
/// with the oracle judge.
VariantRow run_variant(SeedFixture& fx, Variant v);
/// The samples alone (continuations).
TokenSequences variant_samples(SeedFixture& fx, Variant v, const SamplerConfig& sampler);

struct AblationTable {
  std::vector<std::uint64_t> seeds;
  std::vector<Variant> variants;
  std::vector<std::vector<VariantRow>> per_seed;  // [seed][variant]
  std::vector<VariantRow> mean;                   // [variant]
};

inline const std::vector<Variant> kAblationVariants{Variant::gemini, Variant::gemini_no_kd,
                                                    Variant::gemini_no_ad, Variant::bclm_gru};

AblationTable run_ablation(const ExperimentConfig& cfg, const std::vector<std::uint64_t>& seeds,
                           const std::vector<Variant>& variants = kAblationVariants);
/// Same, over fixtures the caller already owns (and may reuse elsewhere).
AblationTable run_ablation(std::vector<SeedFixture*> fixtures,
                           const std::vector<Variant>& variants = kAblationVariants);

std::string ablation_markdown(const AblationTable& t);
std::string ablation_csv(const AblationTable& t);

struct SweepRow {
  double lambda = 0.0;
  double ar = 0.0;
  double ppl = 0.0;
  double dist1 = 0.0;
  double cr = 0.0;
};

struct SweepResult {
  std::vector<std::uint64_t> seeds;
  std::vector<std::vector<SweepRow>> per_seed;  // [seed][lambda]
  std::vector<SweepRow> mean;                   // [lambda]
  double spearman_ar = 0.0;     // on the seed-averaged rows
  double spearman_dist1 = 0.0;
};

/// One prompt per sample, cycling through the held-out split (both classes).
TokenSequences sweep_prompts(const SeedFixture& fx);

/// AR, PPL and CR are measured on prompt + continuation, Dist-1 on the
/// continuations alone.
inline const std::vector<double> kSweepLambdas{0.0, 1.0, 2.0, 5.0, 8.0};

SweepResult run_lambda_sweep(std::vector<SeedFixture*> fixtures,
                             const std::vector<double>& lambdas = kSweepLambdas,
                             bool with_cr = true);
SweepResult run_lambda_sweep(const ExperimentConfig& cfg, const std::vector<std::uint64_t>& seeds,
                             const std::vector<double>& lambdas = kSweepLambdas, bool with_cr = true);

std::string sweep_csv(const SweepResult& r);

/// Spearman rank correlation with average ranks for ties; 0 when either side
/// is constant.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

struct MultiAttributeReport {
  SynthSpec spec_a, spec_b;
  double joint_ar_guided = 0.0;  // both oracle posteriors > 0.5
  double joint_ar_uncond = 0.0;
  double ar_a_guided = 0.0, ar_b_guided = 0.0;
};

/// Two attributes over one vocabulary: the second spec uses a different
/// partition seed. The backbone is trained on both corpora together and one
/// joint head per attribute on its own corpus; generation composes both.
MultiAttributeReport run_multi_attribute(const ExperimentConfig& cfg, std::uint64_t seed);

struct TraceReport {
  std::size_t sequences = 0;
  double rising_fraction = 0.0;   // post-switch half mean > pre-switch half mean (joint head)
  double variance_gemini = 0.0;   // pooled variance of the joint head's trace values
  double variance_no_kd = 0.0;    // same for the head trained without distillation
};

TraceReport trace_report(SeedFixture& fx);

}  // namespace ctrlgen
