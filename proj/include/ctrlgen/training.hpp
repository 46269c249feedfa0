#pragma once

// Losses, AdamW and the joint training loop for the twin heads.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ctrlgen/corpus.hpp"
#include "ctrlgen/discriminator.hpp"
#include "ctrlgen/numerics.hpp"

namespace ctrlgen {

class BackboneModel;

struct TrainConfig {
  double lr = 5e-5;
  std::size_t batch_size = 64;
  int epochs = 200;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  std::uint64_t seed = 1;
  bool kd_enabled = true;
  /// Uniform init bound for the heads; unset means the Glorot bound per tensor.
  std::optional<double> init_scale;

  void validate() const;
};

/// Probabilities are clamped to [kProbClamp, 1 - kProbClamp] inside logs.
inline constexpr double kProbClamp = 1e-12;

/// Cross-entropy on the time-averaged probability p_avg = mean(probs):
///   -y ln p_avg - (1 - y) ln(1 - p_avg)
double xe_loss(std::span<const double> probs, int label);
/// As xe_loss, also writing dL/dprobs_i into `d_probs`.
double xe_loss(std::span<const double> probs, int label, std::span<double> d_probs);

/// mean_i (mn_i - mf_i)^2 over the logits (not the sigmoids).
double kd_loss(std::span<const double> mn, std::span<const double> mf);

double final_loss(double xe, double kd, bool kd_enabled);

struct AdamMoments {
  Vector m, v;
};

struct AdamState {
  std::vector<AdamMoments> moments;  // one per tensor
  std::int64_t t = 0;
};

/// Decoupled weight decay:
///   theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)
/// Increments state.t once, then updates every tensor.
void adamw_step(const std::vector<TensorRef>& params, const std::vector<TensorRef>& grads,
                AdamState& state, const TrainConfig& cfg);
/// Single-tensor convenience; `t` is the step count after increment (>= 1).
void adamw_update(std::span<double> theta, std::span<const double> grad, AdamMoments& mom,
                  std::int64_t t, const TrainConfig& cfg);

// ------------------------------------------------------------ feature cache

struct SequenceFeatures {
  Matrix h;  // T x d_h, rows h_1 .. h_T
  Matrix e;  // T x d_e, rows e_{x_1} .. e_{x_T}
  int label = 0;

  bool operator==(const SequenceFeatures&) const = default;
};

struct FeatureCache {
  std::vector<SequenceFeatures> items;
  std::uint64_t backbone_hash = 0;
  std::uint64_t corpus_hash = 0;

  bool operator==(const FeatureCache&) const = default;
};

FeatureCache build_feature_cache(const BackboneModel& backbone,
                                 const std::vector<LabeledSequence>& corpus);
std::vector<std::uint8_t> serialize_feature_cache(const FeatureCache& cache);
FeatureCache deserialize_feature_cache(std::span<const std::uint8_t> bytes);

class StaleCacheError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------- training

struct SequenceLoss {
  double xe = 0.0;
  double kd = 0.0;
  double total = 0.0;
};

/// Loss for one sequence; accumulates scale * gradient into `grad` if given.
/// With KD: XE over p_n at i = 1..T plus KD over i = 2..T, both heads trained.
/// Without KD: XE over p_f(h_{i-1}, e_{x_i}) at i = 2..T; the KD value is
/// still computed for logging but contributes no gradient.
SequenceLoss sequence_loss(const DiscriminatorParams& p, const SequenceFeatures& f,
                           bool kd_enabled, DiscriminatorParams* grad, double scale = 1.0);

/// XE on the averaged normal-head probability over i = 1..T only. Faster
/// tensors receive no gradient. Accepts T = 1.
SequenceLoss normal_only_loss(const DiscriminatorParams& p, const SequenceFeatures& f,
                              DiscriminatorParams* grad, double scale = 1.0);

struct EpochLog {
  int epoch = 0;
  double xe = 0.0;
  double kd = 0.0;
  double total = 0.0;
  double wall_ms = 0.0;
};

struct TrainResult {
  DiscriminatorParams params;
  std::vector<EpochLog> log;
};

/// Seeded shuffled minibatches, mean loss per batch, one AdamW step per batch.
/// A supplied cache must match the backbone and corpus hashes.
TrainResult train_discriminator(const std::vector<LabeledSequence>& corpus,
                                const BackboneModel& backbone, const TrainConfig& cfg,
                                const FeatureCache* cache = nullptr,
                                const std::string& attribute = {});

/// Trains only the normal head on precomputed features (used by judges that
/// need a fresh classifier).
TrainResult train_normal_head(const FeatureCache& cache, std::size_t d_h, std::size_t d_e,
                              const TrainConfig& cfg, const std::string& attribute = {});

/// JSON-lines, one {epoch, xe, kd, total, wall_ms} record per epoch.
std::string training_log_jsonl(const std::vector<EpochLog>& log);

/// Mean |sigmoid(M_n(h_i)) - sigmoid(M_f(h_{i-1}, e_{x_i}))| over i = 2..T of
/// every sequence.
double teacher_student_gap(const DiscriminatorParams& p, const FeatureCache& cache);
/// Mean per-sequence KD loss.
double mean_kd_loss(const DiscriminatorParams& p, const FeatureCache& cache);

// ------------------------------------------------------ GRU baseline head

struct GruTrainResult {
  GruBaselineParams params;
  std::vector<EpochLog> log;
};

/// XE on the time-averaged GRU probability, same optimiser and batching.
GruTrainResult train_gru_baseline(const std::vector<LabeledSequence>& corpus,
                                  const BackboneModel& backbone, const TrainConfig& cfg,
                                  std::size_t hidden, const std::string& attribute = {});

/// XE for one sequence (rows of `embedded` are e_{x_1}..e_{x_T}).
double gru_sequence_loss(const GruBaselineParams& p, const Matrix& embedded, int label,
                         GruBaselineParams* grad, double scale = 1.0);

}  // namespace ctrlgen
