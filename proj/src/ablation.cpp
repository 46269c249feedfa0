#include "ctrlgen/ablation.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace ctrlgen {

namespace {

constexpr std::uint64_t kSwitchStream = 0x5157c4;
constexpr std::uint64_t kSecondAttribute = 0xb5ad4ece;

std::string fmt(double v, int precision = 4) {
  std::ostringstream o;
  o.setf(std::ios::fixed);
  o.precision(precision);
  o << v;
  return o.str();
}

VariantRow mean_rows(const std::vector<VariantRow>& rows) {
  VariantRow m;
  m.variant = rows.front().variant;
  for (const auto& r : rows) {
    m.ar += r.ar;
    m.ppl += r.ppl;
    m.er += r.er;
    m.dist1 += r.dist1;
    m.dist2 += r.dist2;
    m.dist3 += r.dist3;
    m.forwards_per_token += r.forwards_per_token;
  }
  const double n = static_cast<double>(rows.size());
  m.ar /= n;
  m.ppl /= n;
  m.er /= n;
  m.dist1 /= n;
  m.dist2 /= n;
  m.dist3 /= n;
  m.forwards_per_token /= n;
  return m;
}

std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  std::size_t i = 0;
  while (i < idx.size()) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
    i = j + 1;
  }
  return ranks;
}

double mean_of(const Vector& v, std::size_t begin, std::size_t end) {
  double s = 0.0;
  for (std::size_t i = begin; i < end; ++i) s += v[i];
  return s / static_cast<double>(end - begin);
}

void pooled_moments(const Vector& v, double& sum, double& sq, std::size_t& n) {
  for (double x : v) {
    sum += x;
    sq += x * x;
    ++n;
  }
}

}  // namespace

SeedFixture::SeedFixture(const ExperimentConfig& cfg, std::uint64_t seed) : cfg_(cfg), seed_(seed) {
  spec_ = cfg.spec;
  spec_.seed = seed;
  spec_.partition_seed = seed;
  spec_ = spec_.resolve();
  auto parts = split(synth_corpus(spec_, cfg.n_per_class), cfg.train_frac, seed);
  train_ = std::move(parts.first);
  held_ = std::move(parts.second);
  BackboneTrainConfig bc = cfg.backbone;
  bc.seed = seed;
  backbone_ = std::make_unique<BackboneModel>(
      train_backbone(token_sequences(train_), Vocabulary::synthetic(spec_.vocab_size), bc));
}

const FeatureCache& SeedFixture::train_cache() {
  if (!train_cache_) train_cache_ = build_feature_cache(*backbone_, train_);
  return *train_cache_;
}

const FeatureCache& SeedFixture::held_cache() {
  if (!held_cache_) held_cache_ = build_feature_cache(*backbone_, held_);
  return *held_cache_;
}

const TrainResult& SeedFixture::joint_head() {
  if (!joint_) {
    TrainConfig tc = cfg_.head;
    tc.seed = seed_;
    tc.kd_enabled = true;
    joint_ = train_discriminator(train_, *backbone_, tc, &train_cache(), spec_.attribute);
  }
  return *joint_;
}

const TrainResult& SeedFixture::no_kd_head() {
  if (!no_kd_) {
    TrainConfig tc = cfg_.head;
    tc.seed = seed_;
    tc.kd_enabled = false;
    no_kd_ = train_discriminator(train_, *backbone_, tc, &train_cache(), spec_.attribute);
  }
  return *no_kd_;
}

const GruTrainResult& SeedFixture::gru_head() {
  if (!gru_) {
    TrainConfig tc = cfg_.head;
    tc.seed = seed_;
    gru_ = train_gru_baseline(train_, *backbone_, tc, cfg_.gru_hidden, spec_.attribute);
  }
  return *gru_;
}

double SeedFixture::tau_ppl() {
  if (!tau_ppl_) tau_ppl_ = relative_ppl_threshold(*backbone_, seed_, cfg_.n_samples, cfg_.ppl_factor);
  return *tau_ppl_;
}

std::string to_string(Variant v) {
  switch (v) {
    case Variant::gemini: return "Gemini";
    case Variant::gemini_no_kd: return "Gemini-no-KD";
    case Variant::gemini_no_ad: return "Gemini-no-AD";
    case Variant::bclm_gru: return "BCLM-GRU";
    case Variant::unconditional: return "Unconditional";
  }
  return "?";
}

Variant parse_variant(const std::string& text) {
  for (Variant v : {Variant::gemini, Variant::gemini_no_kd, Variant::gemini_no_ad, Variant::bclm_gru,
                    Variant::unconditional}) {
    if (to_string(v) == text) return v;
  }
  throw ContractError("unknown variant '" + text + "'");
}

TokenSequences variant_samples(SeedFixture& fx, Variant v, const SamplerConfig& base) {
  SamplerConfig sc = base;
  std::unique_ptr<Guide> guide;
  switch (v) {
    case Variant::gemini:
      guide = std::make_unique<FasterGuide>(fx.joint_head().params, fx.backbone());
      break;
    case Variant::gemini_no_ad:
      guide = std::make_unique<FasterGuide>(fx.joint_head().params, fx.backbone());
      sc.mode = DecodeMode::no_ad;
      break;
    case Variant::gemini_no_kd:
      guide = std::make_unique<FasterGuide>(fx.no_kd_head().params, fx.backbone());
      break;
    case Variant::bclm_gru:
      guide = std::make_unique<GruGuide>(fx.gru_head().params, fx.backbone());
      break;
    case Variant::unconditional:
      sc.mode = DecodeMode::unconditional;
      break;
  }
  std::vector<const Guide*> guides;
  if (guide) guides.push_back(guide.get());
  TokenSequences out;
  for (auto& g : generate_many(fx.backbone(), guides, {}, sc, fx.config().n_samples)) {
    out.push_back(std::move(g.tokens));
  }
  return out;
}

VariantRow run_variant(SeedFixture& fx, Variant v) {
  SamplerConfig sc = fx.config().sampler;
  sc.seed = fx.seed();
  if (v != Variant::unconditional) sc.mode = DecodeMode::gemini;
  // Heads are trained before the counter is read.
  if (v == Variant::gemini || v == Variant::gemini_no_ad) fx.joint_head();
  if (v == Variant::gemini_no_kd) fx.no_kd_head();
  if (v == Variant::bclm_gru) fx.gru_head();
  const double tau = fx.tau_ppl();

  const std::uint64_t before = BackboneModel::forward_count() + GruGuide::step_count();
  const TokenSequences samples = variant_samples(fx, v, sc);
  const std::uint64_t forwards = BackboneModel::forward_count() + GruGuide::step_count() - before;
  std::size_t tokens = 0;
  for (const auto& s : samples) tokens += s.size();

  EvalOptions opts;
  opts.tau_ar = fx.config().tau_ar;
  opts.tau_ppl = tau;
  const EvalReport rep = evaluate(samples, OracleJudge(fx.spec()), fx.backbone(), opts);
  VariantRow row;
  row.variant = v;
  row.ar = rep.ar;
  row.ppl = rep.ppl;
  row.er = rep.er;
  row.dist1 = rep.dist1;
  row.dist2 = rep.dist2;
  row.dist3 = rep.dist3;
  row.forwards_per_token = tokens ? static_cast<double>(forwards) / static_cast<double>(tokens) : 0.0;
  return row;
}

AblationTable run_ablation(std::vector<SeedFixture*> fixtures, const std::vector<Variant>& variants) {
  if (fixtures.empty()) throw ContractError("run_ablation: no seeds");
  if (variants.empty()) throw ContractError("run_ablation: no variants");
  AblationTable t;
  t.variants = variants;
  for (SeedFixture* fx : fixtures) {
    t.seeds.push_back(fx->seed());
    std::vector<VariantRow> rows;
    for (Variant v : variants) rows.push_back(run_variant(*fx, v));
    t.per_seed.push_back(std::move(rows));
  }
  for (std::size_t j = 0; j < variants.size(); ++j) {
    std::vector<VariantRow> col;
    for (const auto& rows : t.per_seed) col.push_back(rows[j]);
    t.mean.push_back(mean_rows(col));
  }
  return t;
}

AblationTable run_ablation(const ExperimentConfig& cfg, const std::vector<std::uint64_t>& seeds,
                           const std::vector<Variant>& variants) {
  if (seeds.size() < 3) throw ContractError("run_ablation: needs at least three seeds");
  std::vector<std::unique_ptr<SeedFixture>> owned;
  std::vector<SeedFixture*> fixtures;
  for (auto s : seeds) {
    owned.push_back(std::make_unique<SeedFixture>(cfg, s));
    fixtures.push_back(owned.back().get());
  }
  return run_ablation(fixtures, variants);
}

std::string ablation_markdown(const AblationTable& t) {
  std::ostringstream o;
  o << "| Variant | AR | PPL | ER | Dist-1 | Dist-2 | Dist-3 | Fwd/token |\n";
  o << "|---|---|---|---|---|---|---|---|\n";
  for (const auto& r : t.mean) {
    o << "| " << to_string(r.variant) << " | " << fmt(r.ar) << " | " << fmt(r.ppl, 2) << " | "
      << fmt(r.er) << " | " << fmt(r.dist1) << " | " << fmt(r.dist2) << " | " << fmt(r.dist3)
      << " | " << fmt(r.forwards_per_token, 2) << " |\n";
  }
  return o.str();
}

std::string ablation_csv(const AblationTable& t) {
  std::ostringstream o;
  o << "seed,variant,ar,ppl,er,dist1,dist2,dist3,forwards_per_token\n";
  auto row = [&](const std::string& seed, const VariantRow& r) {
    o << seed << ',' << to_string(r.variant) << ',' << fmt(r.ar, 6) << ',' << fmt(r.ppl, 6) << ','
      << fmt(r.er, 6) << ',' << fmt(r.dist1, 6) << ',' << fmt(r.dist2, 6) << ',' << fmt(r.dist3, 6)
      << ',' << fmt(r.forwards_per_token, 6) << '\n';
  };
  for (std::size_t s = 0; s < t.per_seed.size(); ++s) {
    for (const auto& r : t.per_seed[s]) row(std::to_string(t.seeds[s]), r);
  }
  for (const auto& r : t.mean) row("mean", r);
  return o.str();
}

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw ContractError("spearman: need two equal-length series");
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    mx += rx[i];
    my += ry[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

TokenSequences sweep_prompts(const SeedFixture& fx) {
  const auto& held = fx.held_out();
  if (held.empty()) throw ContractError("sweep_prompts: empty held-out split");
  const std::size_t k = fx.config().sweep_prefix_len;
  TokenSequences out;
  for (std::size_t i = 0; i < fx.config().n_samples; ++i) {
    const auto& t = held[i % held.size()].tokens;
    out.emplace_back(t.begin(), t.begin() + static_cast<std::ptrdiff_t>(std::min(k, t.size())));
  }
  return out;
}

SweepResult run_lambda_sweep(std::vector<SeedFixture*> fixtures, const std::vector<double>& lambdas,
                             bool with_cr) {
  if (fixtures.empty()) throw ContractError("run_lambda_sweep: no seeds");
  if (lambdas.size() < 2) throw ContractError("run_lambda_sweep: needs at least two lambdas");
  SweepResult res;
  for (SeedFixture* fx : fixtures) {
    res.seeds.push_back(fx->seed());
    const TokenSequences corpus = token_sequences(fx->train());
    const TokenSequences prompts = sweep_prompts(*fx);
    const FasterGuide guide(fx->joint_head().params, fx->backbone());
    const std::vector<const Guide*> guides{&guide};
    std::vector<SweepRow> rows;
    for (double lambda : lambdas) {
      SamplerConfig sc = fx->config().sampler;
      sc.seed = fx->seed();
      sc.mode = DecodeMode::gemini;
      sc.lambda = lambda;
      sc.rho2 = fx->config().sweep_rho2;
      TokenSequences samples, continuations;
      for (std::size_t k = 0; k < prompts.size(); ++k) {
        Generation g = generate(fx->backbone(), guides, prompts[k], sc, k);
        std::vector<TokenId> full = prompts[k];
        full.insert(full.end(), g.tokens.begin(), g.tokens.end());
        samples.push_back(std::move(full));
        continuations.push_back(std::move(g.tokens));
      }
      SweepRow r;
      r.lambda = lambda;
      r.ar = attribute_relevance(samples, OracleJudge(fx->spec())).ar;
      double ppl = 0.0;
      std::size_t n = 0;
      for (double p : sample_perplexities(fx->backbone(), samples)) {
        if (std::isfinite(p)) {
          ppl += p;
          ++n;
        }
      }
      r.ppl = n ? ppl / static_cast<double>(n) : 0.0;
      r.dist1 = dist_n(continuations, 1);
      if (with_cr) {
        ResemblanceConfig rc;
        rc.seed = fx->seed();
        r.cr = corpus_resemblance(samples, corpus, fx->backbone(), rc);
      }
      rows.push_back(r);
    }
    res.per_seed.push_back(std::move(rows));
  }
  std::vector<double> ls, ar, d1;
  for (std::size_t j = 0; j < lambdas.size(); ++j) {
    SweepRow m;
    m.lambda = lambdas[j];
    for (const auto& rows : res.per_seed) {
      m.ar += rows[j].ar;
      m.ppl += rows[j].ppl;
      m.dist1 += rows[j].dist1;
      m.cr += rows[j].cr;
    }
    const double n = static_cast<double>(res.per_seed.size());
    m.ar /= n;
    m.ppl /= n;
    m.dist1 /= n;
    m.cr /= n;
    res.mean.push_back(m);
    ls.push_back(m.lambda);
    ar.push_back(m.ar);
    d1.push_back(m.dist1);
  }
  res.spearman_ar = spearman(ls, ar);
  res.spearman_dist1 = spearman(ls, d1);
  return res;
}

SweepResult run_lambda_sweep(const ExperimentConfig& cfg, const std::vector<std::uint64_t>& seeds,
                             const std::vector<double>& lambdas, bool with_cr) {
  std::vector<std::unique_ptr<SeedFixture>> owned;
  std::vector<SeedFixture*> fixtures;
  for (auto s : seeds) {
    owned.push_back(std::make_unique<SeedFixture>(cfg, s));
    fixtures.push_back(owned.back().get());
  }
  return run_lambda_sweep(fixtures, lambdas, with_cr);
}

std::string sweep_csv(const SweepResult& r) {
  std::ostringstream o;
  o << "seed,lambda,ar,ppl,dist1,cr\n";
  auto row = [&](const std::string& seed, const SweepRow& s) {
    o << seed << ',' << fmt(s.lambda, 2) << ',' << fmt(s.ar, 6) << ',' << fmt(s.ppl, 6) << ','
      << fmt(s.dist1, 6) << ',' << fmt(s.cr, 6) << '\n';
  };
  for (std::size_t k = 0; k < r.per_seed.size(); ++k) {
    for (const auto& s : r.per_seed[k]) row(std::to_string(r.seeds[k]), s);
  }
  for (const auto& s : r.mean) row("mean", s);
  return o.str();
}

MultiAttributeReport run_multi_attribute(const ExperimentConfig& cfg, std::uint64_t seed) {
  MultiAttributeReport rep;
  SynthSpec a = cfg.spec;
  a.seed = seed;
  a.partition_seed = seed;
  a.attribute = "attr_a";
  SynthSpec b = a;
  b.seed = seed ^ kSecondAttribute;
  b.partition_seed = seed ^ kSecondAttribute;
  b.attribute = "attr_b";
  rep.spec_a = a = a.resolve();
  rep.spec_b = b = b.resolve();

  auto [train_a, held_a] = split(synth_corpus(a, cfg.n_per_class), cfg.train_frac, seed);
  auto [train_b, held_b] = split(synth_corpus(b, cfg.n_per_class), cfg.train_frac, seed);
  std::vector<LabeledSequence> both = train_a;
  both.insert(both.end(), train_b.begin(), train_b.end());
  BackboneTrainConfig bc = cfg.backbone;
  bc.seed = seed;
  const BackboneModel backbone =
      train_backbone(token_sequences(both), Vocabulary::synthetic(a.vocab_size), bc);

  TrainConfig tc = cfg.head;
  tc.seed = seed;
  tc.kd_enabled = true;
  const TrainResult head_a = train_discriminator(train_a, backbone, tc, nullptr, a.attribute);
  const TrainResult head_b = train_discriminator(train_b, backbone, tc, nullptr, b.attribute);
  const FasterGuide guide_a(head_a.params, backbone), guide_b(head_b.params, backbone);

  const OracleJudge judge_a(a), judge_b(b);
  auto joint = [&](const std::vector<Generation>& gens, double* ar_a, double* ar_b) {
    double both_ok = 0.0, sa = 0.0, sb = 0.0;
    for (const auto& g : gens) {
      const bool pa = judge_a.posterior(g.tokens) > 0.5;
      const bool pb = judge_b.posterior(g.tokens) > 0.5;
      sa += pa;
      sb += pb;
      both_ok += pa && pb;
    }
    const double n = static_cast<double>(gens.size());
    if (ar_a) *ar_a = sa / n;
    if (ar_b) *ar_b = sb / n;
    return both_ok / n;
  };

  SamplerConfig sc = cfg.sampler;
  sc.seed = seed;
  sc.mode = DecodeMode::gemini;
  rep.joint_ar_guided = joint(generate_many(backbone, {&guide_a, &guide_b}, {}, sc, cfg.n_samples),
                              &rep.ar_a_guided, &rep.ar_b_guided);
  sc.mode = DecodeMode::unconditional;
  rep.joint_ar_uncond = joint(generate_many(backbone, {}, {}, sc, cfg.n_samples), nullptr, nullptr);
  return rep;
}

TraceReport trace_report(SeedFixture& fx) {
  const auto seqs = synth_switch_corpus(fx.spec(), fx.config().switch_sequences, fx.seed() ^ kSwitchStream);
  const DiscriminatorParams& joint = fx.joint_head().params;
  const DiscriminatorParams& no_kd = fx.no_kd_head().params;
  TraceReport rep;
  rep.sequences = seqs.size();
  double sum_g = 0.0, sq_g = 0.0, sum_n = 0.0, sq_n = 0.0;
  std::size_t n_g = 0, n_n = 0;
  std::size_t rising = 0;
  for (const auto& s : seqs) {
    const Vector t = stepwise_trace(joint, fx.backbone(), s.tokens);
    // t[j - 1] belongs to token j; the switch happens at token L / 2.
    const std::size_t half = s.tokens.size() / 2;
    if (mean_of(t, half - 1, t.size()) > mean_of(t, 0, half - 1)) ++rising;
    pooled_moments(t, sum_g, sq_g, n_g);
    pooled_moments(stepwise_trace(no_kd, fx.backbone(), s.tokens), sum_n, sq_n, n_n);
  }
  rep.rising_fraction = static_cast<double>(rising) / static_cast<double>(seqs.size());
  const auto var = [](double sum, double sq, std::size_t n) {
    const double m = sum / static_cast<double>(n);
    return sq / static_cast<double>(n) - m * m;
  };
  rep.variance_gemini = var(sum_g, sq_g, n_g);
  rep.variance_no_kd = var(sum_n, sq_n, n_n);
  return rep;
}

}  // namespace ctrlgen
