#include "ctrlgen/metrics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <set>
#include <sstream>

#include "json.hpp"

namespace ctrlgen {

double dist_n(const TokenSequences& samples, std::size_t n) {
  if (n < 1) throw ContractError("dist_n: n must be >= 1");
  std::set<std::vector<TokenId>> distinct;
  std::size_t total = 0;
  for (const auto& s : samples) {
    for (std::size_t i = 0; i + n <= s.size(); ++i) {
      distinct.emplace(s.begin() + static_cast<std::ptrdiff_t>(i),
                       s.begin() + static_cast<std::ptrdiff_t>(i + n));
      ++total;
    }
  }
  if (total == 0) throw ContractError("dist_n: no sample has " + std::to_string(n) + " tokens");
  return static_cast<double>(distinct.size()) / static_cast<double>(total);
}

double HeadJudge::posterior(std::span<const TokenId> tokens) const {
  if (tokens.empty()) return 0.5;
  const auto states = backbone_.full_hidden_states(tokens);
  double sum = 0.0;
  for (const auto& s : states) sum += normal_prob(head_, s.h);
  return sum / static_cast<double>(states.size());
}

Relevance attribute_relevance(const TokenSequences& samples, const Judge& judge) {
  Relevance r;
  if (samples.empty()) return r;
  for (const auto& s : samples) {
    const double p = judge.posterior(s);
    r.ar += p > 0.5 ? 1.0 : 0.0;
    r.mean_posterior += p;
  }
  r.ar /= static_cast<double>(samples.size());
  r.mean_posterior /= static_cast<double>(samples.size());
  return r;
}

std::vector<double> sample_perplexities(const BackboneModel& backbone, const TokenSequences& samples) {
  std::vector<double> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    out.push_back(s.empty() ? std::numeric_limits<double>::infinity() : perplexity(backbone, s));
  }
  return out;
}

double excellent_rate(const std::vector<double>& posteriors, const std::vector<double>& ppls,
                      double tau_ar, double tau_ppl) {
  if (posteriors.size() != ppls.size()) throw ContractError("excellent_rate: size mismatch");
  if (posteriors.empty()) return 0.0;
  std::size_t pass = 0;
  for (std::size_t i = 0; i < posteriors.size(); ++i) {
    if (posteriors[i] > tau_ar && ppls[i] < tau_ppl) ++pass;
  }
  return static_cast<double>(pass) / static_cast<double>(posteriors.size());
}

double excellent_rate(const TokenSequences& samples, const Judge& judge,
                      const BackboneModel& backbone, double tau_ar, double tau_ppl) {
  std::vector<double> post;
  for (const auto& s : samples) post.push_back(judge.posterior(s));
  return excellent_rate(post, sample_perplexities(backbone, samples), tau_ar, tau_ppl);
}

double relative_ppl_threshold(const BackboneModel& backbone, std::uint64_t seed, std::size_t n,
                              double factor) {
  SamplerConfig cfg;
  cfg.mode = DecodeMode::unconditional;
  cfg.seed = seed;
  std::vector<double> ppls;
  for (const auto& g : generate_many(backbone, {}, {}, cfg, n)) {
    if (!g.tokens.empty()) ppls.push_back(perplexity(backbone, g.tokens));
  }
  if (ppls.empty()) throw ContractError("relative_ppl_threshold: every sample was empty");
  std::sort(ppls.begin(), ppls.end());
  const std::size_t m = ppls.size() / 2;
  const double median = ppls.size() % 2 ? ppls[m] : 0.5 * (ppls[m - 1] + ppls[m]);
  return factor * median;
}

double corpus_resemblance(const TokenSequences& generated, const TokenSequences& corpus,
                          const BackboneModel& backbone, const ResemblanceConfig& cfg) {
  auto non_empty = [](const TokenSequences& src) {
    TokenSequences out;
    for (const auto& s : src) {
      if (!s.empty()) out.push_back(s);
    }
    return out;
  };
  TokenSequences gen = non_empty(generated);
  TokenSequences ref = non_empty(corpus);
  if (gen.size() < 100 || ref.size() < 100) {
    throw ContractError("corpus_resemblance: needs at least 100 non-empty sequences on each side");
  }
  Rng rng_gen(cfg.seed, 0), rng_ref(cfg.seed, 1);
  rng_gen.shuffle(gen);
  rng_ref.shuffle(ref);
  const std::size_t m = std::min(gen.size(), ref.size());

  std::vector<LabeledSequence> data;
  for (std::size_t i = 0; i < m; ++i) data.push_back({gen[i], 1, "generated"});
  for (std::size_t i = 0; i < m; ++i) data.push_back({ref[i], 0, "generated"});
  const auto [train, held] = split(data, cfg.train_frac, cfg.seed);
  if (train.empty()) throw ContractError("corpus_resemblance: empty training split");

  const FeatureCache cache = build_feature_cache(backbone, train);
  const TrainResult head = train_normal_head(cache, backbone.d_h(), backbone.d_e(), cfg.train, "generated");
  const HeadJudge judge(head.params, backbone);
  double sum = 0.0;
  std::size_t count = 0;
  for (const auto& s : held) {
    if (s.label != 1) continue;
    sum += judge.posterior(s.tokens);
    ++count;
  }
  if (count == 0) throw ContractError("corpus_resemblance: no held-out generated samples");
  return sum / static_cast<double>(count);
}

std::string to_string(BenchMode mode) { return mode == BenchMode::faster ? "faster" : "naive"; }

BenchMode parse_bench_mode(const std::string& text) {
  if (text == "faster") return BenchMode::faster;
  if (text == "naive" || text == "naive_normal" || text == "naive-normal") return BenchMode::naive_normal;
  throw ContractError("unknown bench mode '" + text + "'");
}

BenchResult bench_time_per_token(const BackboneModel& backbone, const DiscriminatorParams& head,
                                 BenchMode mode, const BenchConfig& cfg) {
  if (cfg.batch != 1) throw ContractError("bench: only batch size 1 is supported");
  if (cfg.n_samples < 1 || cfg.tokens_per_sample < 1) throw ContractError("bench: empty workload");
  SamplerConfig sc = cfg.sampler;
  sc.stop_at_eos = false;
  sc.max_len = cfg.tokens_per_sample;
  sc.mode = DecodeMode::gemini;

  const FasterGuide guide(head, backbone);
  const std::vector<const Guide*> guides{&guide};
  BenchResult res;
  res.mode = mode;
  res.n_samples = cfg.n_samples;
  std::vector<double> per_token;
  for (std::size_t k = 0; k < cfg.n_samples; ++k) {
    const std::uint64_t before = BackboneModel::forward_count();
    const auto t0 = std::chrono::steady_clock::now();
    const Generation g = mode == BenchMode::faster ? generate(backbone, guides, {}, sc, k)
                                                   : generate_naive_normal(backbone, head, {}, sc, k);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.forwards += BackboneModel::forward_count() - before;
    res.tokens += g.tokens.size();
    per_token.push_back(secs / static_cast<double>(g.tokens.size()));
  }
  double sum = 0.0;
  for (double v : per_token) sum += v;
  res.mean_s = sum / static_cast<double>(per_token.size());
  double ss = 0.0;
  for (double v : per_token) ss += (v - res.mean_s) * (v - res.mean_s);
  res.std_s = per_token.size() > 1 ? std::sqrt(ss / static_cast<double>(per_token.size() - 1)) : 0.0;
  return res;
}

std::string bench_csv(const std::vector<BenchResult>& rows) {
  std::ostringstream out;
  out.precision(9);
  out << "mode,n,mean_s,std_s,forwards\n";
  for (const auto& r : rows) {
    out << to_string(r.mode) << ',' << r.n_samples << ',' << r.mean_s << ',' << r.std_s << ','
        << r.forwards << '\n';
  }
  return out.str();
}

EvalReport evaluate(const TokenSequences& samples, const Judge& judge,
                    const BackboneModel& backbone, const EvalOptions& opts) {
  if (!(opts.tau_ppl > 0.0)) throw ContractError("evaluate: tau_ppl must be > 0");
  EvalReport r;
  r.n_samples = samples.size();
  r.tau_ppl = opts.tau_ppl;
  std::vector<double> post;
  for (const auto& s : samples) post.push_back(judge.posterior(s));
  const std::vector<double> ppls = sample_perplexities(backbone, samples);
  if (!samples.empty()) {
    for (double p : post) {
      r.ar += p > 0.5 ? 1.0 : 0.0;
      r.mean_posterior += p;
    }
    r.ar /= static_cast<double>(samples.size());
    r.mean_posterior /= static_cast<double>(samples.size());
  }
  double ppl_sum = 0.0;
  std::size_t ppl_n = 0;
  for (double p : ppls) {
    if (std::isfinite(p)) {
      ppl_sum += p;
      ++ppl_n;
    }
  }
  r.ppl = ppl_n ? ppl_sum / static_cast<double>(ppl_n) : 0.0;
  r.er = excellent_rate(post, ppls, opts.tau_ar, opts.tau_ppl);
  double* dists[] = {&r.dist1, &r.dist2, &r.dist3};
  for (std::size_t n = 1; n <= 3; ++n) {
    try {
      *dists[n - 1] = dist_n(samples, n);
    } catch (const ContractError&) {
      *dists[n - 1] = 0.0;
    }
  }
  if (opts.corpus) r.cr = corpus_resemblance(samples, *opts.corpus, backbone, opts.resemblance);
  return r;
}

std::string eval_report_json(const EvalReport& r, const std::string& config_json) {
  nlohmann::ordered_json j;
  j["ar"] = r.ar;
  j["mean_posterior"] = r.mean_posterior;
  j["ppl"] = r.ppl;
  j["er"] = r.er;
  j["tau_ppl"] = r.tau_ppl;
  j["dist1"] = r.dist1;
  j["dist2"] = r.dist2;
  j["dist3"] = r.dist3;
  j["cr"] = r.cr ? nlohmann::ordered_json(*r.cr) : nlohmann::ordered_json(nullptr);
  if (r.time_per_token_mean) {
    j["time_per_token"] = {{"mean_s", *r.time_per_token_mean}, {"std_s", r.time_per_token_std.value_or(0.0)}};
  } else {
    j["time_per_token"] = nullptr;
  }
  j["n_samples"] = r.n_samples;
  j["config"] = config_json.empty() ? nlohmann::ordered_json::object()
                                    : nlohmann::ordered_json::parse(config_json);
  return j.dump(2) + "\n";
}

}  // namespace ctrlgen
