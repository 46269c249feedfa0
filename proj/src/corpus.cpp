#include "ctrlgen/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "json.hpp"

#include "ctrlgen/tensor_io.hpp"

namespace ctrlgen {

using nlohmann::json;

std::vector<TokenId> SynthSpec::non_reserved() const {
  std::vector<TokenId> ids;
  for (TokenId t = 2; t < vocab_size; ++t) ids.push_back(t);
  return ids;
}

SynthSpec SynthSpec::resolve() const {
  if (vocab_size < 6) throw std::invalid_argument("synth spec: vocab_size must be >= 6");
  if (!(beta >= 0.5 && beta <= 1.0)) throw std::invalid_argument("synth spec: beta must lie in [0.5, 1]");
  if (min_len < 2 || max_len < min_len) throw std::invalid_argument("synth spec: bad length range");
  SynthSpec out = *this;
  if (out.s1.empty() && out.s0.empty()) {
    auto ids = non_reserved();
    Rng rng(partition_seed, 0);
    rng.shuffle(ids);
    const std::size_t q = ids.size() / 4;
    out.s1.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(q));
    out.s0.assign(ids.begin() + static_cast<std::ptrdiff_t>(q),
                  ids.begin() + static_cast<std::ptrdiff_t>(2 * q));
  }
  std::sort(out.s1.begin(), out.s1.end());
  std::sort(out.s0.begin(), out.s0.end());
  if (out.s1.empty() || out.s0.empty()) throw std::invalid_argument("synth spec: empty attribute subset");
  for (const auto* s : {&out.s1, &out.s0}) {
    if (std::adjacent_find(s->begin(), s->end()) != s->end()) {
      throw std::invalid_argument("synth spec: duplicate token in subset");
    }
    for (TokenId t : *s) {
      if (t < 2 || t >= vocab_size) throw std::invalid_argument("synth spec: subset token out of range");
    }
  }
  std::vector<TokenId> both;
  std::set_intersection(out.s1.begin(), out.s1.end(), out.s0.begin(), out.s0.end(),
                        std::back_inserter(both));
  if (!both.empty()) throw std::invalid_argument("synth spec: S1 and S0 overlap");
  return out;
}

std::vector<TokenId> SynthSpec::neutral() const {
  std::vector<TokenId> out;
  for (TokenId t : non_reserved()) {
    if (!std::binary_search(s1.begin(), s1.end(), t) &&
        !std::binary_search(s0.begin(), s0.end(), t)) {
      out.push_back(t);
    }
  }
  return out;
}

double SynthSpec::emission_prob(int label, TokenId token) const {
  if (token < 2 || token >= vocab_size) return 0.0;
  const auto& own = label == 1 ? s1 : s0;
  const std::size_t rest = (vocab_size - 2) - own.size();
  if (std::binary_search(own.begin(), own.end(), token)) return beta / static_cast<double>(own.size());
  return rest == 0 ? 0.0 : (1.0 - beta) / static_cast<double>(rest);
}

namespace {

struct Emitter {
  std::vector<TokenId> own[2];
  std::vector<TokenId> rest[2];
  double beta;

  explicit Emitter(const SynthSpec& s) : beta(s.beta) {
    own[1] = s.s1;
    own[0] = s.s0;
    for (int y = 0; y < 2; ++y) {
      for (TokenId t : s.non_reserved()) {
        if (!std::binary_search(own[y].begin(), own[y].end(), t)) rest[y].push_back(t);
      }
    }
  }

  TokenId draw(int y, Rng& rng) const {
    const bool from_own = rng.uniform() < beta || rest[y].empty();
    const auto& pool = from_own ? own[y] : rest[y];
    return pool[rng.below(pool.size())];
  }
};

std::size_t draw_length(const SynthSpec& s, Rng& rng) {
  return s.min_len + static_cast<std::size_t>(rng.below(s.max_len - s.min_len + 1));
}

}  // namespace

std::vector<LabeledSequence> synth_corpus(const SynthSpec& spec_in, std::size_t n_per_class) {
  if (n_per_class < 1) throw std::invalid_argument("synth_corpus: n_per_class must be >= 1");
  const SynthSpec spec = spec_in.resolve();
  const Emitter em(spec);
  std::vector<LabeledSequence> out;
  out.reserve(2 * n_per_class);
  for (std::size_t k = 0; k < 2 * n_per_class; ++k) {
    Rng rng(spec.seed, k);
    LabeledSequence s;
    s.label = k < n_per_class ? 1 : 0;
    s.attribute = spec.attribute;
    const std::size_t len = draw_length(spec, rng);
    for (std::size_t i = 0; i < len; ++i) s.tokens.push_back(em.draw(s.label, rng));
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<LabeledSequence> synth_switch_corpus(const SynthSpec& spec_in, std::size_t n,
                                                 std::uint64_t seed) {
  const SynthSpec spec = spec_in.resolve();
  const Emitter em(spec);
  std::vector<LabeledSequence> out;
  for (std::size_t k = 0; k < n; ++k) {
    Rng rng(seed, k);
    LabeledSequence s;
    s.label = 1;
    s.attribute = spec.attribute;
    std::size_t len = draw_length(spec, rng);
    len += len % 2;  // even, so the halves are equal
    for (std::size_t i = 0; i < len; ++i) s.tokens.push_back(em.draw(i < len / 2 ? 0 : 1, rng));
    out.push_back(std::move(s));
  }
  return out;
}

double bayes_oracle_prob(const SynthSpec& spec, std::span<const TokenId> tokens) {
  double llr = 0.0;
  for (TokenId t : tokens) {
    const double p1 = spec.emission_prob(1, t);
    const double p0 = spec.emission_prob(0, t);
    if (p1 == 0.0 && p0 == 0.0) continue;
    if (p0 == 0.0) return 1.0;
    if (p1 == 0.0) return 0.0;
    llr += std::log(p1) - std::log(p0);
  }
  return sigmoid(llr);
}

std::vector<LabeledSequence> parse_jsonl(const std::string& text, const Vocabulary& vocab) {
  std::vector<LabeledSequence> out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = "line " + std::to_string(lineno) + ": ";
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw CorpusError(where + "malformed JSON");
    }
    if (!j.is_object() || !j.contains("tokens") || !j["tokens"].is_array() ||
        !j.contains("label") || !j["label"].is_number_integer()) {
      throw CorpusError(where + "expected {\"tokens\": [...], \"label\": 0|1, \"attribute\": str}");
    }
    LabeledSequence s;
    s.label = j["label"].get<int>();
    if (s.label != 0 && s.label != 1) throw CorpusError(where + "label must be 0 or 1");
    if (j.contains("attribute")) {
      if (!j["attribute"].is_string()) throw CorpusError(where + "attribute must be a string");
      s.attribute = j["attribute"].get<std::string>();
    }
    for (const auto& tok : j["tokens"]) {
      if (!tok.is_string()) throw CorpusError(where + "tokens must be strings");
      const auto str = tok.get<std::string>();
      if (!vocab.contains(str)) throw CorpusError(where + "unknown token '" + str + "'");
      s.tokens.push_back(vocab.id(str));
    }
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<LabeledSequence> load_jsonl(const std::string& path, const Vocabulary& vocab) {
  const auto bytes = read_file(path);
  return parse_jsonl(std::string(bytes.begin(), bytes.end()), vocab);
}

std::string to_jsonl(const std::vector<LabeledSequence>& data, const Vocabulary& vocab) {
  std::string out;
  for (const auto& s : data) {
    json j;
    j["tokens"] = json::array();
    for (TokenId t : s.tokens) j["tokens"].push_back(vocab.token(t));
    j["label"] = s.label;
    j["attribute"] = s.attribute;
    out += j.dump();
    out += '\n';
  }
  return out;
}

void save_jsonl(const std::string& path, const std::vector<LabeledSequence>& data,
                const Vocabulary& vocab) {
  const auto text = to_jsonl(data, vocab);
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::pair<std::vector<LabeledSequence>, std::vector<LabeledSequence>> split(
    const std::vector<LabeledSequence>& data, double frac, std::uint64_t seed) {
  if (!(frac >= 0.0 && frac <= 1.0)) throw std::invalid_argument("split: frac must lie in [0, 1]");
  std::vector<std::size_t> idx(data.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng(seed, 0);
  rng.shuffle(idx);
  const auto n_train = static_cast<std::size_t>(std::llround(frac * static_cast<double>(data.size())));
  std::pair<std::vector<LabeledSequence>, std::vector<LabeledSequence>> out;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    (i < n_train ? out.first : out.second).push_back(data[idx[i]]);
  }
  return out;
}

std::uint64_t corpus_hash(const std::vector<LabeledSequence>& data) {
  Fnv1a h;
  h.update_u64(data.size());
  for (const auto& s : data) {
    h.update_u64(s.tokens.size());
    for (TokenId t : s.tokens) h.update_u64(t);
    h.update_u64(static_cast<std::uint64_t>(s.label));
    h.update(s.attribute);
  }
  return h.digest();
}

std::vector<std::vector<TokenId>> token_sequences(const std::vector<LabeledSequence>& data) {
  std::vector<std::vector<TokenId>> out;
  out.reserve(data.size());
  for (const auto& s : data) out.push_back(s.tokens);
  return out;
}

}  // namespace ctrlgen
