#include <algorithm>
#include <cmath>
#include <numeric>

#include "ctrlgen/ablation.hpp"
#include "ctrlgen/metrics.hpp"
#include "doctest.h"
#include "helpers.hpp"
#include "json.hpp"

using namespace ctrlgen;
using doctest::Approx;

namespace {

std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    double less = 0, equal = 0;
    for (double x : v) {
      less += x < v[i];
      equal += x == v[i];
    }
    r[i] = less + (equal + 1) / 2;
  }
  return r;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / a.size();
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / b.size();
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

TokenSequences pure(const std::vector<TokenId>& pool, std::size_t n, std::size_t len, std::uint64_t seed) {
  Rng rng(seed);
  TokenSequences out(n);
  for (auto& s : out) {
    for (std::size_t i = 0; i < len; ++i) s.push_back(pool[rng.below(pool.size())]);
  }
  return out;
}

}  // namespace

TEST_SUITE("metrics") {

TEST_CASE("dist-n examples") {
  CHECK(dist_n({{2, 3, 2, 3}}, 1) == 0.5);
  CHECK(dist_n({{2, 3, 4, 5, 6}}, 1) == 1.0);
  CHECK(dist_n({{2, 2}, {2, 2}}, 2) == 0.5);
  CHECK(dist_n({{2, 3, 4}, {9}}, 3) == 1.0);
  CHECK_THROWS(dist_n({{2, 3}, {4}}, 3));
  CHECK_THROWS(dist_n({}, 1));
}

TEST_CASE("dist-n is invariant to sample order") {
  auto data = token_sequences(synth_corpus(testutil::small_spec(), 30));
  const double d2 = dist_n(data, 2);
  Rng rng(1);
  rng.shuffle(data);
  CHECK(dist_n(data, 2) == d2);
}

TEST_CASE("attribute relevance with the oracle") {
  const SynthSpec spec = testutil::small_spec();
  const OracleJudge judge(spec);
  const TokenSequences s1 = pure(spec.s1, 50, 8, 1), s0 = pure(spec.s0, 50, 8, 2);
  CHECK(attribute_relevance(s1, judge).ar == 1.0);
  CHECK(attribute_relevance(s0, judge).ar == 0.0);
  TokenSequences mix = s1;
  mix.insert(mix.end(), s0.begin(), s0.end());
  CHECK(attribute_relevance(mix, judge).ar == 0.5);
  CHECK(attribute_relevance(mix, judge).mean_posterior == Approx(0.5).epsilon(1e-9));
}

TEST_CASE("unconditional samples over a symmetric spec are balanced") {
  SynthSpec spec;
  spec.vocab_size = 64;
  spec.seed = 8;
  spec.partition_seed = 8;
  spec = spec.resolve();
  REQUIRE(spec.s1.size() == spec.s0.size());
  std::vector<TokenId> all;
  for (TokenId t = 2; t < 64; ++t) all.push_back(t);
  const TokenSequences samples = pure(all, 2000, 20, 9);
  const OracleJudge judge(spec);
  const Relevance r = attribute_relevance(samples, judge);
  CHECK(std::abs(r.mean_posterior - 0.5) <= 0.05);
  int below = 0;
  for (const auto& s : samples) below += judge.posterior(s) < 0.5;
  CHECK(std::abs(r.ar - below / 2000.0) <= 0.05);
}

TEST_CASE("attribute relevance is deterministic with the oracle") {
  const SynthSpec spec = testutil::small_spec();
  const auto data = token_sequences(synth_corpus(spec, 40));
  const OracleJudge judge(spec);
  CHECK(attribute_relevance(data, judge).mean_posterior == attribute_relevance(data, judge).mean_posterior);
}

TEST_CASE("head judge") {
  const auto& bb = testutil::small_backbone();
  const HeadJudge zero(DiscriminatorParams(bb.d_h(), bb.d_e(), "a"), bb);
  CHECK(zero.posterior(std::vector<TokenId>{3, 4, 5}) == 0.5);
  CHECK(zero.posterior(std::vector<TokenId>{}) == 0.5);
  const auto h = testutil::random_disc(bb.d_h(), bb.d_e(), 4);
  const std::vector<TokenId> x{5, 9, 2};
  const auto states = bb.full_hidden_states(x);
  double mean = 0;
  for (const auto& s : states) mean += normal_prob(h, s.h) / 3;
  CHECK(HeadJudge(h, bb).posterior(x) == Approx(mean).epsilon(1e-12));
}

TEST_CASE("excellent rate examples") {
  CHECK(excellent_rate(std::vector<double>{0.1, 0.95}, std::vector<double>{2, 50}, 0.9, 10) == 0.0);
  CHECK(excellent_rate(std::vector<double>{0.91, 0.95}, std::vector<double>{2, 3}, 0.9, 10) == 1.0);
  CHECK(excellent_rate(std::vector<double>{0.95, 0.95, 0.2, 0.99}, std::vector<double>{2, 3, 2, 30}, 0.9, 10) == 0.5);

  const auto& bb = testutil::small_backbone();
  const SynthSpec spec = testutil::small_spec();
  const TokenSequences samples = pure(spec.s1, 10, 12, 5);
  std::vector<double> ppl = sample_perplexities(bb, samples);
  std::vector<double> sorted = ppl;
  std::sort(sorted.begin(), sorted.end());
  REQUIRE(sorted[4] < sorted[5]);
  const double tau = (sorted[4] + sorted[5]) / 2;
  CHECK(excellent_rate(samples, OracleJudge(spec), bb, 0.9, tau) == 0.5);
  for (std::size_t k = 0; k < samples.size(); ++k) CHECK(ppl[k] == perplexity(bb, samples[k]));
}

TEST_CASE("relative perplexity threshold") {
  const auto& bb = testutil::small_backbone();
  const double a = relative_ppl_threshold(bb, 3, 40);
  CHECK(a == relative_ppl_threshold(bb, 3, 40));
  SamplerConfig cfg;
  cfg.mode = DecodeMode::unconditional;
  cfg.seed = 3;
  std::vector<double> ppl;
  for (const auto& g : generate_many(bb, {}, {}, cfg, 40)) {
    if (!g.tokens.empty()) ppl.push_back(perplexity(bb, g.tokens));
  }
  std::nth_element(ppl.begin(), ppl.begin() + ppl.size() / 2, ppl.end());
  const double upper = ppl[ppl.size() / 2];
  CHECK(a <= 1.5 * upper + 1e-12);
  CHECK(a > 1.0);
  CHECK(relative_ppl_threshold(bb, 3, 40, 3.0) == Approx(2 * a).epsilon(1e-12));
}

TEST_CASE("corpus resemblance") {
  const std::vector<TokenId> low_pool{2, 3, 4, 5, 6, 7, 8}, high_pool{9, 10, 11, 12, 13, 14, 15};
  // A backbone that has learnt which pool a sequence draws from.
  TokenSequences lm_data = pure(low_pool, 100, 8, 3);
  const TokenSequences more = pure(high_pool, 100, 8, 4);
  lm_data.insert(lm_data.end(), more.begin(), more.end());
  BackboneTrainConfig bcfg;
  bcfg.epochs = 30;
  bcfg.d_h = 8;
  bcfg.d_e = 6;
  const BackboneModel bb = train_backbone(lm_data, Vocabulary::synthetic(16), bcfg);

  const TokenSequences subset(lm_data.begin(), lm_data.begin() + 150);
  CHECK(std::abs(corpus_resemblance(subset, lm_data, bb) - 0.5) <= 0.1);
  const TokenSequences one(100, lm_data[0]);
  CHECK(std::abs(corpus_resemblance(one, one, bb) - 0.5) <= 0.1);

  const TokenSequences low = pure(low_pool, 150, 8, 1);
  const TokenSequences high = pure(high_pool, 150, 8, 2);
  CHECK(corpus_resemblance(low, high, bb) > 0.9);
  CHECK_THROWS(corpus_resemblance(TokenSequences(low.begin(), low.begin() + 50), high, bb));
}

TEST_CASE("bench forward counts and csv") {
  const auto& bb = testutil::small_backbone();
  const auto head = testutil::random_disc(bb.d_h(), bb.d_e(), 5);
  BenchConfig cfg;
  cfg.n_samples = 4;
  cfg.tokens_per_sample = 10;
  const BenchResult f = bench_time_per_token(bb, head, BenchMode::faster, cfg);
  const BenchResult n = bench_time_per_token(bb, head, BenchMode::naive_normal, cfg);
  CHECK(f.tokens == 40);
  CHECK(f.forwards == 40);
  CHECK(n.tokens == 40);
  CHECK(n.forwards == 40 * bb.vocab_size());
  CHECK(f.n_samples == 4);
  CHECK(f.std_s >= 0);
  const std::string csv = bench_csv({f, n});
  CHECK(csv.rfind("mode,n,mean_s,std_s,forwards\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
  CHECK(parse_bench_mode("naive") == BenchMode::naive_normal);
}

TEST_CASE("evaluate and report json") {
  const auto& bb = testutil::small_backbone();
  const SynthSpec spec = testutil::small_spec();
  const auto samples = token_sequences(synth_corpus(spec, 20));
  EvalOptions opts;
  opts.tau_ppl = 100.0;
  const EvalReport r = evaluate(samples, OracleJudge(spec), bb, opts);
  CHECK(r.n_samples == samples.size());
  for (double f : {r.ar, r.er, r.dist1, r.dist2, r.dist3}) {
    CHECK(f >= 0.0);
    CHECK(f <= 1.0);
  }
  CHECK(r.ppl >= 1.0);
  CHECK(!r.cr);
  opts.tau_ppl = 0.0;
  CHECK_THROWS(evaluate(samples, OracleJudge(spec), bb, opts));

  const auto j = nlohmann::ordered_json::parse(eval_report_json(r, R"({"run":1})"));
  std::vector<std::string> keys;
  for (auto it = j.begin(); it != j.end(); ++it) keys.push_back(it.key());
  CHECK(keys == std::vector<std::string>{"ar", "mean_posterior", "ppl", "er", "tau_ppl", "dist1", "dist2",
                                         "dist3", "cr", "time_per_token", "n_samples", "config"});
  CHECK(j["config"]["run"] == 1);
  CHECK(j["cr"].is_null());
}

TEST_CASE("spearman") {
  CHECK(spearman({1, 2, 3, 4}, {10, 20, 30, 40}) == Approx(1.0));
  CHECK(spearman({1, 2, 3, 4}, {4, 3, 2, 1}) == Approx(-1.0));
  CHECK(spearman({1, 2, 3}, {5, 5, 5}) == 0.0);
  Rng rng(12);
  for (int k = 0; k < 50; ++k) {
    std::vector<double> x(6), y(6);
    for (auto& v : x) v = static_cast<double>(rng.below(4));
    for (auto& v : y) v = static_cast<double>(rng.below(4));
    const auto rx = average_ranks(x), ry = average_ranks(y);
    const bool flat = std::all_of(x.begin(), x.end(), [&](double v) { return v == x[0]; }) ||
                      std::all_of(y.begin(), y.end(), [&](double v) { return v == y[0]; });
    CHECK(spearman(x, y) == Approx(flat ? 0.0 : pearson(rx, ry)).epsilon(1e-12));
  }
}

}
