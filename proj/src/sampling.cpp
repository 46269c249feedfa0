#include "ctrlgen/sampling.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <sstream>

#include "json.hpp"

namespace ctrlgen {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

std::atomic<std::uint64_t> g_gru_steps{0};

// Descending by value, ties by ascending id.
template <class Key>
void rank_desc(std::vector<WeightedToken>& v, Key key) {
  std::sort(v.begin(), v.end(), [&](const WeightedToken& a, const WeightedToken& b) {
    const double ka = key(a), kb = key(b);
    if (ka != kb) return ka > kb;
    return a.id < b.id;
  });
}

TokenSet mass_prefix(const TokenSet& ranked, double rho) {
  if (rho >= 1.0) return ranked;
  TokenSet out;
  double cum = 0.0;
  for (const auto& t : ranked) {
    out.push_back(t);
    cum += t.prob;
    if (cum >= rho) return out;
  }
  return ranked;
}

TokenSet full_support(std::span<const double> probs) {
  TokenSet out;
  for (std::size_t w = 0; w < probs.size(); ++w) {
    if (probs[w] > 0.0) out.push_back({static_cast<TokenId>(w), probs[w]});
  }
  return out;
}

Vector masked(std::span<const double> logp, const SamplerConfig& cfg) {
  Vector out(logp.begin(), logp.end());
  if (!out.empty()) out[kBos] = kNegInf;
  if (!cfg.stop_at_eos && out.size() > kEos) out[kEos] = kNegInf;
  return out;
}

class FasterSession : public GuideSession {
 public:
  explicit FasterSession(const FasterScorer& scorer) : scorer_(scorer) {}
  Vector log_probs(const BackboneState& state) override { return scorer_.log_probs_all(state.h); }
  void advance(TokenId) override {}

 private:
  const FasterScorer& scorer_;
};

}  // namespace

class GruSession : public GuideSession {
 public:
  explicit GruSession(const GruGuide& guide)
      : guide_(guide), h_(guide.params_.hidden_dim(), 0.0) {}

  Vector log_probs(const BackboneState&) override {
    const auto& p = guide_.params_;
    const GatedHiddenProjection hid = project_hidden(p.cell, h_);
    Vector out(guide_.projections_.size());
    g_gru_steps.fetch_add(out.size(), std::memory_order_relaxed);
    for (std::size_t w = 0; w < out.size(); ++w) {
      gated_combine(p.cell, guide_.projections_[w], hid, h_, cache_);
      out[w] = log_sigmoid(dot(p.w_out, cache_.out) + p.b_out[0]);
    }
    return out;
  }

  void advance(TokenId token) override {
    if (token >= guide_.projections_.size()) throw std::out_of_range("gru guide: token out of range");
    g_gru_steps.fetch_add(1, std::memory_order_relaxed);
    const GatedHiddenProjection hid = project_hidden(guide_.params_.cell, h_);
    gated_combine(guide_.params_.cell, guide_.projections_[token], hid, h_, cache_);
    h_ = cache_.out;
  }

 private:
  const GruGuide& guide_;
  Vector h_;
  GatedCellCache cache_;
};

std::string to_string(DecodeMode mode) {
  switch (mode) {
    case DecodeMode::gemini: return "gemini";
    case DecodeMode::no_ad: return "no-ad";
    case DecodeMode::unconditional: return "uncond";
  }
  return "?";
}

DecodeMode parse_decode_mode(const std::string& text) {
  if (text == "gemini") return DecodeMode::gemini;
  if (text == "no-ad" || text == "no_ad") return DecodeMode::no_ad;
  if (text == "uncond" || text == "unconditional") return DecodeMode::unconditional;
  throw ContractError("unknown decode mode '" + text + "'");
}

void SamplerConfig::validate() const {
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ContractError("sampler: lambda must be >= 0");
  if (!(rho1 > 0.0 && rho1 <= 1.0)) throw ContractError("sampler: rho1 must lie in (0, 1]");
  if (!(rho2 > 0.0 && rho2 <= 1.0)) throw ContractError("sampler: rho2 must lie in (0, 1]");
}

Vector weighted_log_scores(std::span<const double> logp_uncond, std::span<const double> logp_f,
                           double lambda) {
  if (!(lambda >= 0.0)) throw ContractError("weighted_log_scores: lambda must be >= 0");
  if (logp_uncond.size() != logp_f.size()) throw ContractError("weighted_log_scores: size mismatch");
  Vector s(logp_uncond.size());
  for (std::size_t w = 0; w < s.size(); ++w) {
    // lambda = 0 must give back logp_uncond exactly, even where logp_f = -inf.
    s[w] = lambda == 0.0 ? logp_uncond[w] : logp_uncond[w] + lambda * logp_f[w];
  }
  return s;
}

Vector normalize_scores(std::span<const double> scores) {
  if (scores.empty()) throw ContractError("normalize_scores: empty input");
  const double mx = *std::max_element(scores.begin(), scores.end());
  if (!std::isfinite(mx)) throw ContractError("normalize_scores: no finite score");
  Vector p(scores.size());
  double total = 0.0;
  for (std::size_t w = 0; w < p.size(); ++w) {
    p[w] = std::exp(scores[w] - mx);
    total += p[w];
  }
  for (double& x : p) x /= total;
  return p;
}

TokenSet nucleus_filter(std::span<const double> probs, double rho) {
  TokenSet ranked = full_support(probs);
  if (ranked.empty()) throw ContractError("nucleus_filter: no token has positive probability");
  rank_desc(ranked, [](const WeightedToken& t) { return t.prob; });
  return mass_prefix(ranked, rho);
}

namespace {

// Position of each member keyed by token id (-1 when absent), so callers can
// walk the set in ascending id order without sorting it.
std::vector<int> id_index(const TokenSet& set) {
  TokenId max_id = 0;
  for (const auto& t : set) max_id = std::max(max_id, t.id);
  std::vector<int> index(static_cast<std::size_t>(max_id) + 1, -1);
  for (std::size_t k = 0; k < set.size(); ++k) index[set[k].id] = static_cast<int>(k);
  return index;
}

}  // namespace

TokenSet renormalize_over(const TokenSet& set, std::span<const double> scores) {
  if (set.empty()) throw ContractError("renormalize_over: empty set");
  double mx = kNegInf;
  for (const auto& t : set) mx = std::max(mx, scores[t.id]);
  if (!std::isfinite(mx)) throw ContractError("renormalize_over: no finite score in set");
  const std::vector<int> index = id_index(set);
  TokenSet out = set;
  double total = 0.0;
  for (int k : index) {
    if (k < 0) continue;
    out[k].prob = std::exp(scores[out[k].id] - mx);
    total += out[k].prob;
  }
  for (auto& t : out) t.prob /= total;
  return out;
}

TokenSet attribute_filter(const TokenSet& vk, std::span<const double> pf_key, double rho2) {
  if (vk.empty()) throw ContractError("attribute_filter: empty candidate set");
  TokenSet ranked = vk;
  rank_desc(ranked, [&](const WeightedToken& t) { return pf_key[t.id]; });
  return mass_prefix(ranked, rho2);
}

Vector multi_attribute_log_pf(const std::vector<Vector>& per_head) {
  if (per_head.empty()) throw ContractError("multi_attribute_log_pf: no heads");
  Vector sum = per_head.front();
  for (std::size_t j = 1; j < per_head.size(); ++j) {
    if (per_head[j].size() != sum.size()) throw ContractError("multi_attribute_log_pf: size mismatch");
    for (std::size_t w = 0; w < sum.size(); ++w) sum[w] += per_head[j][w];
  }
  return sum;
}

TokenId sample_next(Rng& rng, const TokenSet& set) {
  if (set.empty()) throw ContractError("sample_next: empty set");
  const double u = rng.uniform();
  const std::vector<int> index = id_index(set);
  double total = 0.0;
  for (int k : index) {
    if (k >= 0) total += set[k].prob;
  }
  const double target = u * total;
  double cum = 0.0;
  int last = -1;
  for (int k : index) {
    if (k < 0) continue;
    cum += set[k].prob;
    last = k;
    if (target < cum) return set[k].id;
  }
  return set[last].id;
}

FasterGuide::FasterGuide(const DiscriminatorParams& params, const BackboneModel& backbone)
    : scorer_(params, backbone.embedding()), backbone_hash_(backbone.hash()) {
  if (params.d_h() != backbone.d_h() || params.d_e() != backbone.d_e()) {
    throw ContractError("faster guide: head dims do not match the backbone");
  }
}

std::unique_ptr<GuideSession> FasterGuide::start(std::span<const TokenId>) const {
  return std::make_unique<FasterSession>(scorer_);
}

GruGuide::GruGuide(GruBaselineParams params, const BackboneModel& backbone)
    : params_(std::move(params)), backbone_hash_(backbone.hash()) {
  if (params_.cell.input_dim() != backbone.d_e()) {
    throw ContractError("gru guide: embedding width does not match the backbone");
  }
  const Matrix& e = backbone.embedding();
  projections_.reserve(e.rows());
  for (std::size_t w = 0; w < e.rows(); ++w) projections_.push_back(project_input(params_.cell, e.row(w)));
}

std::uint64_t GruGuide::step_count() noexcept { return g_gru_steps.load(std::memory_order_relaxed); }
void GruGuide::reset_step_count() noexcept { g_gru_steps.store(0, std::memory_order_relaxed); }

std::unique_ptr<GuideSession> GruGuide::start(std::span<const TokenId> prefix) const {
  auto s = std::make_unique<GruSession>(*this);
  for (TokenId t : prefix) s->advance(t);
  return s;
}

StepChoice decode_step(std::span<const double> logp_uncond_raw, std::span<const double> logp_f,
                       const SamplerConfig& cfg, Rng& rng) {
  const Vector logp = masked(logp_uncond_raw, cfg);
  StepChoice out;
  if (cfg.mode == DecodeMode::unconditional) {
    const TokenSet all = full_support(normalize_scores(logp));
    out.token = sample_next(rng, all);
    out.in_vk = out.in_um = true;
    return out;
  }
  if (logp_f.size() != logp.size()) throw ContractError("decode_step: head output size mismatch");
  const Vector s = weighted_log_scores(logp, logp_f, cfg.lambda);
  if (cfg.mode == DecodeMode::no_ad) {
    const TokenSet vk = nucleus_filter(normalize_scores(s), SamplerConfig::kNoAdRho);
    out.token = sample_next(rng, vk);
    out.in_vk = out.in_um = true;
    return out;
  }
  const TokenSet vk = renormalize_over(nucleus_filter(normalize_scores(logp), cfg.rho1), s);
  const TokenSet um = attribute_filter(vk, logp_f, cfg.rho2);
  out.token = sample_next(rng, um);
  out.in_vk = out.in_um = true;
  return out;
}

namespace {

void check_guides(const BackboneModel& backbone, const std::vector<const Guide*>& guides,
                  const SamplerConfig& cfg) {
  if (cfg.mode != DecodeMode::unconditional && guides.empty()) {
    throw ContractError("generate: guided modes need at least one attribute head");
  }
  for (const Guide* g : guides) {
    if (g->backbone_hash() != backbone.hash()) {
      throw HashMismatchError("attribute head '" + g->attribute() + "' was trained on a different backbone");
    }
  }
}

BackboneState consume_prefix(const BackboneModel& backbone, std::span<const TokenId> prefix) {
  BackboneState state = backbone.init_state();
  for (TokenId t : prefix) {
    if (!backbone.vocab().valid(t)) throw std::out_of_range("generate: prefix token out of range");
    state = backbone.step(state, t);
  }
  return state;
}

}  // namespace

Generation generate(const BackboneModel& backbone, const std::vector<const Guide*>& guides,
                    std::span<const TokenId> prefix, const SamplerConfig& cfg, std::uint64_t stream,
                    bool record) {
  cfg.validate();
  check_guides(backbone, guides, cfg);
  Generation gen;
  gen.prefix.assign(prefix.begin(), prefix.end());
  BackboneState state = consume_prefix(backbone, prefix);
  const bool guided = cfg.mode != DecodeMode::unconditional;
  std::vector<std::unique_ptr<GuideSession>> sessions;
  if (guided || record) {
    for (const Guide* g : guides) sessions.push_back(g->start(prefix));
  }
  Rng rng(cfg.seed, stream);
  std::vector<Vector> per_head(sessions.size());

  while (gen.tokens.size() < cfg.max_len) {
    for (std::size_t j = 0; j < sessions.size(); ++j) per_head[j] = sessions[j]->log_probs(state);
    const Vector logp_f = per_head.empty() ? Vector{} : multi_attribute_log_pf(per_head);
    const StepChoice choice = decode_step(state.logprobs, logp_f, cfg, rng);
    if (choice.token == kEos && cfg.stop_at_eos) break;
    if (record) {
      StepRecord r;
      r.token = choice.token;
      r.p_uncond = std::exp(state.logprobs[choice.token]);
      for (const auto& lp : per_head) r.p_f.push_back(std::exp(lp[choice.token]));
      r.in_vk = choice.in_vk;
      r.in_um = choice.in_um;
      gen.steps.push_back(std::move(r));
    }
    gen.tokens.push_back(choice.token);
    for (auto& s : sessions) s->advance(choice.token);
    state = backbone.step(state, choice.token);
  }
  return gen;
}

std::vector<Generation> generate_many(const BackboneModel& backbone,
                                      const std::vector<const Guide*>& guides,
                                      std::span<const TokenId> prefix, const SamplerConfig& cfg,
                                      std::size_t count, bool record) {
  std::vector<Generation> out;
  out.reserve(count);
  for (std::size_t k = 0; k < count; ++k) out.push_back(generate(backbone, guides, prefix, cfg, k, record));
  return out;
}

Generation generate_naive_normal(const BackboneModel& backbone, const DiscriminatorParams& head,
                                 std::span<const TokenId> prefix, const SamplerConfig& cfg,
                                 std::uint64_t stream) {
  cfg.validate();
  Generation gen;
  gen.prefix.assign(prefix.begin(), prefix.end());
  BackboneState state = consume_prefix(backbone, prefix);
  Rng rng(cfg.seed, stream);
  const std::size_t V = backbone.vocab_size();
  std::vector<BackboneState> next(V);
  Vector logp_f(V);
  while (gen.tokens.size() < cfg.max_len) {
    for (std::size_t w = 0; w < V; ++w) {
      next[w] = backbone.step(state, static_cast<TokenId>(w));
      logp_f[w] = normal_log_prob(head, next[w].h);
    }
    const StepChoice choice = decode_step(state.logprobs, logp_f, cfg, rng);
    if (choice.token == kEos && cfg.stop_at_eos) break;
    gen.tokens.push_back(choice.token);
    state = std::move(next[choice.token]);
  }
  return gen;
}

std::string generations_jsonl(const std::vector<Generation>& gens, const Vocabulary& vocab) {
  std::string out;
  for (const auto& g : gens) {
    nlohmann::ordered_json j;
    j["prefix"] = nlohmann::ordered_json::array();
    for (TokenId t : g.prefix) j["prefix"].push_back(vocab.token(t));
    j["tokens"] = nlohmann::ordered_json::array();
    for (TokenId t : g.tokens) j["tokens"].push_back(vocab.token(t));
    j["text"] = vocab.decode(g.tokens);
    if (!g.steps.empty()) {
      auto steps = nlohmann::ordered_json::array();
      for (const auto& s : g.steps) {
        nlohmann::ordered_json r;
        r["token"] = vocab.token(s.token);
        r["p_uncond"] = s.p_uncond;
        r["p_f"] = s.p_f;
        r["in_Vk"] = s.in_vk;
        r["in_Um"] = s.in_um;
        steps.push_back(r);
      }
      j["per_step"] = std::move(steps);
    }
    out += j.dump();
    out += '\n';
  }
  return out;
}

std::vector<std::vector<TokenId>> read_generations(const std::string& text, const Vocabulary& vocab,
                                                   bool continuation_only) {
  std::vector<std::vector<TokenId>> out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  auto ids = [&](const nlohmann::json& arr, std::vector<TokenId>& dst) {
    if (!arr.is_array()) throw FormatError("samples line " + std::to_string(lineno) + ": expected a token array");
    for (const auto& t : arr) {
      if (!t.is_string() || !vocab.contains(t.get<std::string>())) {
        throw FormatError("samples line " + std::to_string(lineno) + ": unknown token");
      }
      dst.push_back(vocab.id(t.get<std::string>()));
    }
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error&) {
      throw FormatError("samples line " + std::to_string(lineno) + ": malformed JSON");
    }
    if (!j.is_object() || !j.contains("tokens")) {
      throw FormatError("samples line " + std::to_string(lineno) + ": missing tokens");
    }
    std::vector<TokenId> seq;
    if (!continuation_only && j.contains("prefix")) ids(j["prefix"], seq);
    ids(j["tokens"], seq);
    out.push_back(std::move(seq));
  }
  return out;
}

Vector stepwise_trace(const DiscriminatorParams& head, const BackboneModel& backbone,
                      std::span<const TokenId> tokens, TraceHead which) {
  if (tokens.size() < 2) throw ContractError("stepwise_trace: needs at least two tokens");
  const auto states = backbone.full_hidden_states(tokens);
  Vector out;
  out.reserve(tokens.size() - 1);
  for (std::size_t i = 1; i < tokens.size(); ++i) {
    if (which == TraceHead::normal) {
      out.push_back(normal_prob(head, states[i].h));
    } else {
      out.push_back(faster_prob(head, states[i - 1].h, backbone.embed(tokens[i])));
    }
  }
  return out;
}

}  // namespace ctrlgen
