#include "ctrlgen/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>

#include "json.hpp"

#include "ctrlgen/backbone.hpp"

namespace ctrlgen {

namespace {

constexpr std::string_view kCacheMagic = "GMFC";
constexpr std::uint32_t kCacheVersion = 1;

double clamp_prob(double p) { return std::clamp(p, kProbClamp, 1.0 - kProbClamp); }

std::string item_name(char kind, std::size_t k) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%c/%06zu", kind, k);
  return buf;
}

Tensor matrix_tensor(const Matrix& m) {
  Tensor t;
  t.dims = {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())};
  t.values.assign(m.flat().begin(), m.flat().end());
  return t;
}

Matrix tensor_matrix(const Tensor& t) {
  if (t.dims.size() != 2) throw FormatError("feature cache: expected a 2-d tensor");
  Matrix m(t.dims[0], t.dims[1]);
  if (t.values.size() != m.flat().size()) throw FormatError("feature cache: tensor size mismatch");
  std::copy(t.values.begin(), t.values.end(), m.flat().begin());
  return m;
}

// Mini-batch driver shared by both heads. `loss_fn(index, grad, scale)`
// returns the per-sequence losses and accumulates scale * gradient.
template <class Params, class LossFn>
std::vector<EpochLog> run_epochs(Params& params, std::size_t n, const TrainConfig& cfg,
                                 LossFn&& loss_fn) {
  std::vector<EpochLog> log;
  AdamState state;
  std::vector<std::size_t> order(n);
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(cfg.seed, static_cast<std::uint64_t>(epoch));
    rng.shuffle(order);

    EpochLog rec;
    rec.epoch = epoch;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t stop = std::min(n, start + cfg.batch_size);
      const double scale = 1.0 / static_cast<double>(stop - start);
      Params grad = zeros_like(params);
      for (std::size_t b = start; b < stop; ++b) {
        const SequenceLoss l = loss_fn(order[b], grad, scale);
        rec.xe += l.xe;
        rec.kd += l.kd;
        rec.total += l.total;
      }
      adamw_step(params.tensors(), grad.tensors(), state, cfg);
    }
    rec.xe /= static_cast<double>(n);
    rec.kd /= static_cast<double>(n);
    rec.total /= static_cast<double>(n);
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    log.push_back(rec);
  }
  return log;
}

}  // namespace

void TrainConfig::validate() const {
  // lr = 0 is accepted: it is the natural way to freeze a run.
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ContractError("train config: lr must be >= 0");
  if (epochs < 1) throw ContractError("train config: epochs must be >= 1");
  if (batch_size < 1) throw ContractError("train config: batch size must be >= 1");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ContractError("train config: betas must lie in [0, 1)");
  }
  if (!(eps > 0.0)) throw ContractError("train config: eps must be > 0");
  if (!(weight_decay >= 0.0)) throw ContractError("train config: weight decay must be >= 0");
}

double xe_loss(std::span<const double> probs, int label) {
  Vector scratch(probs.size());
  return xe_loss(probs, label, scratch);
}

double xe_loss(std::span<const double> probs, int label, std::span<double> d_probs) {
  if (probs.empty()) throw ContractError("xe_loss: empty input");
  if (label != 0 && label != 1) throw ContractError("xe_loss: label must be 0 or 1");
  if (d_probs.size() != probs.size()) throw ContractError("xe_loss: gradient size mismatch");
  double sum = 0.0;
  for (double p : probs) sum += p;
  const double n = static_cast<double>(probs.size());
  const double avg = clamp_prob(sum / n);
  const double loss = label == 1 ? -std::log(avg) : -std::log(1.0 - avg);
  const double d_avg = label == 1 ? -1.0 / avg : 1.0 / (1.0 - avg);
  std::fill(d_probs.begin(), d_probs.end(), d_avg / n);
  return loss;
}

double kd_loss(std::span<const double> mn, std::span<const double> mf) {
  if (mn.size() != mf.size()) throw ContractError("kd_loss: length mismatch");
  if (mn.empty()) throw ContractError("kd_loss: needs at least one step (T >= 2)");
  double s = 0.0;
  for (std::size_t i = 0; i < mn.size(); ++i) {
    const double d = mn[i] - mf[i];
    s += d * d;
  }
  return s / static_cast<double>(mn.size());
}

double final_loss(double xe, double kd, bool kd_enabled) { return kd_enabled ? xe + kd : xe; }

void adamw_update(std::span<double> theta, std::span<const double> grad, AdamMoments& mom,
                  std::int64_t t, const TrainConfig& cfg) {
  if (theta.size() != grad.size()) throw ContractError("adamw: shape mismatch");
  if (t < 1) throw ContractError("adamw: step count must be >= 1");
  if (mom.m.empty() && mom.v.empty()) {
    mom.m.assign(theta.size(), 0.0);
    mom.v.assign(theta.size(), 0.0);
  }
  if (mom.m.size() != theta.size() || mom.v.size() != theta.size()) {
    throw ContractError("adamw: moment shape mismatch");
  }
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < theta.size(); ++i) {
    mom.m[i] = cfg.beta1 * mom.m[i] + (1.0 - cfg.beta1) * grad[i];
    mom.v[i] = cfg.beta2 * mom.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
    const double m_hat = mom.m[i] / bc1;
    const double v_hat = mom.v[i] / bc2;
    theta[i] -= cfg.lr * (m_hat / (std::sqrt(v_hat) + cfg.eps) + cfg.weight_decay * theta[i]);
  }
}

void adamw_step(const std::vector<TensorRef>& params, const std::vector<TensorRef>& grads,
                AdamState& state, const TrainConfig& cfg) {
  if (params.size() != grads.size()) throw ContractError("adamw: tensor count mismatch");
  if (state.moments.empty()) state.moments.resize(params.size());
  if (state.moments.size() != params.size()) throw ContractError("adamw: state size mismatch");
  ++state.t;
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (params[k].name != grads[k].name || params[k].dims != grads[k].dims) {
      throw ContractError("adamw: shape mismatch for " + params[k].name);
    }
    adamw_update(params[k].values, grads[k].values, state.moments[k], state.t, cfg);
  }
}

FeatureCache build_feature_cache(const BackboneModel& backbone,
                                 const std::vector<LabeledSequence>& corpus) {
  FeatureCache cache;
  cache.backbone_hash = backbone.hash();
  cache.corpus_hash = corpus_hash(corpus);
  cache.items.reserve(corpus.size());
  for (const auto& s : corpus) {
    if (s.tokens.empty()) throw ContractError("feature cache: empty sequence");
    const auto states = backbone.full_hidden_states(s.tokens);
    SequenceFeatures f;
    f.label = s.label;
    f.h = Matrix(s.tokens.size(), backbone.d_h());
    f.e = Matrix(s.tokens.size(), backbone.d_e());
    for (std::size_t i = 0; i < s.tokens.size(); ++i) {
      std::copy(states[i].h.begin(), states[i].h.end(), f.h.row(i).begin());
      const auto e = backbone.embed(s.tokens[i]);
      std::copy(e.begin(), e.end(), f.e.row(i).begin());
    }
    cache.items.push_back(std::move(f));
  }
  return cache;
}

std::vector<std::uint8_t> serialize_feature_cache(const FeatureCache& cache) {
  TensorMap map;
  for (std::size_t k = 0; k < cache.items.size(); ++k) {
    map.emplace(item_name('e', k), matrix_tensor(cache.items[k].e));
    map.emplace(item_name('h', k), matrix_tensor(cache.items[k].h));
  }
  ByteWriter w;
  write_container(w, kCacheMagic, kCacheVersion, map);
  w.u64(cache.backbone_hash);
  w.u64(cache.corpus_hash);
  w.u32(static_cast<std::uint32_t>(cache.items.size()));
  for (const auto& item : cache.items) w.u8(static_cast<std::uint8_t>(item.label));
  return w.data();
}

FeatureCache deserialize_feature_cache(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  const TensorMap map = read_container(r, kCacheMagic, kCacheVersion);
  FeatureCache cache;
  cache.backbone_hash = r.u64();
  cache.corpus_hash = r.u64();
  const std::uint32_t n = r.u32();
  if (map.size() != 2 * static_cast<std::size_t>(n)) throw FormatError("feature cache: item count mismatch");
  for (std::uint32_t k = 0; k < n; ++k) {
    SequenceFeatures f;
    const auto h = map.find(item_name('h', k));
    const auto e = map.find(item_name('e', k));
    if (h == map.end() || e == map.end()) throw FormatError("feature cache: missing item");
    f.h = tensor_matrix(h->second);
    f.e = tensor_matrix(e->second);
    if (f.h.rows() != f.e.rows()) throw FormatError("feature cache: length mismatch");
    f.label = r.u8();
    if (f.label > 1) throw FormatError("feature cache: bad label");
    cache.items.push_back(std::move(f));
  }
  if (!r.at_end()) throw FormatError("feature cache: trailing bytes");
  return cache;
}

SequenceLoss sequence_loss(const DiscriminatorParams& p, const SequenceFeatures& f,
                           bool kd_enabled, DiscriminatorParams* grad, double scale) {
  const std::size_t T = f.h.rows();
  if (T < 2) throw ContractError("sequence_loss: sequences need at least two tokens");

  std::vector<NormalCache> nc(T);
  Vector mn(T);
  for (std::size_t i = 0; i < T; ++i) mn[i] = normal_forward(p, f.h.row(i), nc[i]);
  std::vector<FasterCache> fc(T - 1);
  Vector mf(T - 1);
  for (std::size_t i = 1; i < T; ++i) mf[i - 1] = faster_forward(p, f.h.row(i - 1), f.e.row(i), fc[i - 1]);

  SequenceLoss out;
  const std::span<const double> mn_tail(mn.data() + 1, T - 1);
  out.kd = kd_loss(mn_tail, mf);

  if (kd_enabled) {
    const Vector pn = sigmoid(mn);
    Vector d_pn(T);
    out.xe = xe_loss(pn, f.label, d_pn);
    out.total = final_loss(out.xe, out.kd, true);
    if (grad) {
      const double kd_scale = 2.0 / static_cast<double>(T - 1);
      for (std::size_t i = 0; i < T; ++i) {
        double up = d_pn[i] * pn[i] * (1.0 - pn[i]);
        if (i >= 1) up += kd_scale * (mn[i] - mf[i - 1]);
        normal_backward(p, nc[i], scale * up, *grad);
      }
      for (std::size_t i = 1; i < T; ++i) {
        const double up = -kd_scale * (mn[i] - mf[i - 1]);
        faster_backward(p, fc[i - 1], scale * up, *grad);
      }
    }
  } else {
    const Vector pf = sigmoid(mf);
    Vector d_pf(T - 1);
    out.xe = xe_loss(pf, f.label, d_pf);
    out.total = final_loss(out.xe, out.kd, false);
    if (grad) {
      for (std::size_t i = 0; i + 1 < T; ++i) {
        faster_backward(p, fc[i], scale * d_pf[i] * pf[i] * (1.0 - pf[i]), *grad);
      }
    }
  }
  return out;
}

SequenceLoss normal_only_loss(const DiscriminatorParams& p, const SequenceFeatures& f,
                              DiscriminatorParams* grad, double scale) {
  const std::size_t T = f.h.rows();
  if (T < 1) throw ContractError("normal_only_loss: empty sequence");
  std::vector<NormalCache> nc(T);
  Vector pn(T);
  for (std::size_t i = 0; i < T; ++i) pn[i] = sigmoid(normal_forward(p, f.h.row(i), nc[i]));
  Vector d_pn(T);
  SequenceLoss out;
  out.xe = xe_loss(pn, f.label, d_pn);
  out.total = out.xe;
  if (grad) {
    for (std::size_t i = 0; i < T; ++i) {
      normal_backward(p, nc[i], scale * d_pn[i] * pn[i] * (1.0 - pn[i]), *grad);
    }
  }
  return out;
}

TrainResult train_normal_head(const FeatureCache& cache, std::size_t d_h, std::size_t d_e,
                              const TrainConfig& cfg, const std::string& attribute) {
  cfg.validate();
  if (cache.items.empty()) throw ContractError("train_normal_head: empty feature set");
  TrainResult result;
  result.params = init_discriminator(d_h, d_e, attribute, cfg.seed, cfg.init_scale);
  result.log = run_epochs(result.params, cache.items.size(), cfg,
                          [&](std::size_t k, DiscriminatorParams& grad, double scale) {
                            return normal_only_loss(result.params, cache.items[k], &grad, scale);
                          });
  return result;
}

TrainResult train_discriminator(const std::vector<LabeledSequence>& corpus,
                                const BackboneModel& backbone, const TrainConfig& cfg,
                                const FeatureCache* cache, const std::string& attribute) {
  cfg.validate();
  if (corpus.empty()) throw ContractError("train_discriminator: empty corpus");
  FeatureCache built;
  if (cache) {
    if (cache->backbone_hash != backbone.hash()) {
      throw StaleCacheError("feature cache was built from a different backbone");
    }
    if (cache->corpus_hash != corpus_hash(corpus)) {
      throw StaleCacheError("feature cache was built from a different corpus");
    }
  } else {
    built = build_feature_cache(backbone, corpus);
    cache = &built;
  }
  const std::string attr = attribute.empty() ? corpus.front().attribute : attribute;

  TrainResult result;
  result.params = init_discriminator(backbone.d_h(), backbone.d_e(), attr, cfg.seed, cfg.init_scale);
  result.log = run_epochs(result.params, cache->items.size(), cfg,
                          [&](std::size_t k, DiscriminatorParams& grad, double scale) {
                            return sequence_loss(result.params, cache->items[k], cfg.kd_enabled,
                                                 &grad, scale);
                          });
  return result;
}

std::string training_log_jsonl(const std::vector<EpochLog>& log) {
  std::string out;
  for (const auto& e : log) {
    nlohmann::ordered_json j;
    j["epoch"] = e.epoch;
    j["xe"] = e.xe;
    j["kd"] = e.kd;
    j["total"] = e.total;
    j["wall_ms"] = e.wall_ms;
    out += j.dump();
    out += '\n';
  }
  return out;
}

double teacher_student_gap(const DiscriminatorParams& p, const FeatureCache& cache) {
  double sum = 0.0;
  std::size_t count = 0;
  for (const auto& f : cache.items) {
    for (std::size_t i = 1; i < f.h.rows(); ++i) {
      sum += std::abs(normal_prob(p, f.h.row(i)) - faster_prob(p, f.h.row(i - 1), f.e.row(i)));
      ++count;
    }
  }
  if (count == 0) throw ContractError("teacher_student_gap: no sequences with two or more tokens");
  return sum / static_cast<double>(count);
}

double mean_kd_loss(const DiscriminatorParams& p, const FeatureCache& cache) {
  if (cache.items.empty()) throw ContractError("mean_kd_loss: empty cache");
  double sum = 0.0;
  for (const auto& f : cache.items) sum += sequence_loss(p, f, true, nullptr).kd;
  return sum / static_cast<double>(cache.items.size());
}

double gru_sequence_loss(const GruBaselineParams& p, const Matrix& embedded, int label,
                         GruBaselineParams* grad, double scale) {
  const Vector logits = gru_baseline_logits(p, embedded);
  const Vector probs = sigmoid(logits);
  Vector d_probs(probs.size());
  const double loss = xe_loss(probs, label, d_probs);
  if (grad) {
    Vector d_logits(probs.size());
    for (std::size_t i = 0; i < probs.size(); ++i) {
      d_logits[i] = scale * d_probs[i] * probs[i] * (1.0 - probs[i]);
    }
    gru_baseline_backward(p, embedded, d_logits, *grad);
  }
  return loss;
}

GruTrainResult train_gru_baseline(const std::vector<LabeledSequence>& corpus,
                                  const BackboneModel& backbone, const TrainConfig& cfg,
                                  std::size_t hidden, const std::string& attribute) {
  cfg.validate();
  if (corpus.empty()) throw ContractError("train_gru_baseline: empty corpus");
  if (hidden < 1) throw ContractError("train_gru_baseline: hidden width must be >= 1");
  std::vector<Matrix> embedded;
  embedded.reserve(corpus.size());
  for (const auto& s : corpus) {
    if (s.tokens.empty()) throw ContractError("train_gru_baseline: empty sequence");
    Matrix m(s.tokens.size(), backbone.d_e());
    for (std::size_t i = 0; i < s.tokens.size(); ++i) {
      const auto e = backbone.embed(s.tokens[i]);
      std::copy(e.begin(), e.end(), m.row(i).begin());
    }
    embedded.push_back(std::move(m));
  }
  const std::string attr = attribute.empty() ? corpus.front().attribute : attribute;

  GruTrainResult result;
  result.params = init_gru_baseline(backbone.d_e(), hidden, attr, cfg.seed, cfg.init_scale);
  result.log = run_epochs(result.params, corpus.size(), cfg,
                          [&](std::size_t k, GruBaselineParams& grad, double scale) {
                            SequenceLoss l;
                            l.xe = gru_sequence_loss(result.params, embedded[k], corpus[k].label,
                                                     &grad, scale);
                            l.total = l.xe;
                            return l;
                          });
  return result;
}

}  // namespace ctrlgen
