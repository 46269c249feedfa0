#include "ctrlgen/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "ctrlgen/tensor_io.hpp"

namespace ctrlgen {

namespace {

constexpr std::string_view kMagic = "GMBK";
constexpr std::uint32_t kVersion = 1;
constexpr std::array<const char*, 10> kCellNames{"w_ir", "w_iz", "w_in", "w_hr", "w_hz",
                                                 "w_hn", "b_r",  "b_z",  "b_in", "b_hn"};

std::atomic<std::uint64_t> g_forward_count{0};

}  // namespace

BackboneParams::BackboneParams(std::size_t vocab, std::size_t d_h, std::size_t d_e)
    : embedding(vocab, d_e), cell(d_e, d_h), w_out(vocab, d_h), b_out(vocab, 0.0) {}

std::vector<TensorRef> BackboneParams::tensors() {
  auto refs = cell.tensors("cell.", kCellNames);
  refs.push_back(tensor_ref("embedding", embedding));
  refs.push_back(tensor_ref("out.b", b_out));
  refs.push_back(tensor_ref("out.w", w_out));
  std::sort(refs.begin(), refs.end(),
            [](const TensorRef& a, const TensorRef& b) { return a.name < b.name; });
  return refs;
}

BackboneModel::BackboneModel(Vocabulary vocab, BackboneParams params)
    : vocab_(std::move(vocab)), params_(std::move(params)) {
  if (params_.vocab_size() != vocab_.size() || params_.w_out.rows() != vocab_.size() ||
      params_.b_out.size() != vocab_.size()) {
    throw ContractError("backbone: vocabulary size does not match parameters");
  }
  if (params_.d_h() == 0 || params_.d_e() == 0 || params_.cell.input_dim() != params_.d_e() ||
      params_.w_out.cols() != params_.d_h()) {
    throw ContractError("backbone: inconsistent d_h / d_e");
  }
  hash_ = content_hash(serialize());
}

BackboneModel BackboneModel::zeros(Vocabulary vocab, std::size_t d_h, std::size_t d_e) {
  const std::size_t v = vocab.size();
  return BackboneModel(std::move(vocab), BackboneParams(v, d_h, d_e));
}

BackboneState BackboneModel::from_hidden(Vector h, std::size_t prefix_length) const {
  BackboneState s;
  s.logprobs = log_softmax(affine(params_.w_out, params_.b_out, h));
  s.h = std::move(h);
  s.prefix_length = prefix_length;
  return s;
}

BackboneState BackboneModel::init_state() const {
  const Vector zero(d_h(), 0.0);
  return from_hidden(gated_forward(params_.cell, params_.embedding.row(kBos), zero), 1);
}

BackboneState BackboneModel::step(const BackboneState& state, TokenId token) const {
  if (!vocab_.valid(token)) {
    throw std::out_of_range("backbone step: token id out of range: " + std::to_string(token));
  }
  if (state.h.size() != d_h()) throw ContractError("backbone step: state width mismatch");
  g_forward_count.fetch_add(1, std::memory_order_relaxed);
  return from_hidden(gated_forward(params_.cell, params_.embedding.row(token), state.h),
                     state.prefix_length + 1);
}

std::vector<BackboneState> BackboneModel::full_hidden_states(
    std::span<const TokenId> tokens) const {
  if (tokens.empty()) throw std::invalid_argument("full_hidden_states: empty sequence");
  std::vector<BackboneState> out;
  out.reserve(tokens.size());
  BackboneState s = init_state();
  for (TokenId t : tokens) {
    s = step(s, t);
    out.push_back(s);
  }
  return out;
}

std::span<const double> BackboneModel::embed(TokenId token) const {
  if (!vocab_.valid(token)) {
    throw std::out_of_range("embed: token id out of range: " + std::to_string(token));
  }
  return params_.embedding.row(token);
}

std::vector<std::uint8_t> BackboneModel::serialize() const {
  ByteWriter w;
  auto copy = params_;
  write_container(w, kMagic, kVersion, to_tensor_map(copy.tensors()));
  w.string32(vocab_.serialize());
  return w.data();
}

BackboneModel BackboneModel::deserialize(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  const TensorMap tensors = read_container(r, kMagic, kVersion);
  Vocabulary vocab = Vocabulary::parse(r.string32());
  if (!r.at_end()) throw FormatError("trailing bytes after backbone checkpoint");

  auto dims = [&](const char* name) -> const std::vector<std::uint32_t>& {
    auto it = tensors.find(name);
    if (it == tensors.end() || it->second.dims.size() != 2) {
      throw FormatError(std::string("backbone checkpoint: missing matrix ") + name);
    }
    return it->second.dims;
  };
  const auto& emb = dims("embedding");
  const auto& whr = dims("cell.w_hr");
  BackboneParams params(emb[0], whr[0], emb[1]);
  assign_from(params.tensors(), tensors);  // throws on any d_h / d_e disagreement
  return BackboneModel(std::move(vocab), std::move(params));
}

void BackboneModel::save(const std::string& path) const { write_file(path, serialize()); }

BackboneModel BackboneModel::load(const std::string& path) { return deserialize(read_file(path)); }

std::uint64_t BackboneModel::forward_count() noexcept {
  return g_forward_count.load(std::memory_order_relaxed);
}

void BackboneModel::reset_forward_count() noexcept { g_forward_count.store(0); }

double backbone_sequence_loss(const BackboneParams& p, std::span<const TokenId> tokens,
                              BackboneParams* grad) {
  const std::size_t L = tokens.size() + 1;
  std::vector<GatedCellCache> caches(L);
  std::vector<Vector> probs(L);
  std::vector<TokenId> inputs{kBos};
  inputs.insert(inputs.end(), tokens.begin(), tokens.end());
  std::vector<TokenId> targets(tokens.begin(), tokens.end());
  targets.push_back(kEos);

  double loss = 0.0;
  Vector h(p.d_h(), 0.0);
  for (std::size_t t = 0; t < L; ++t) {
    if (inputs[t] >= p.vocab_size() || targets[t] >= p.vocab_size()) {
      throw std::out_of_range("backbone_sequence_loss: token id out of range");
    }
    h = gated_forward(p.cell, p.embedding.row(inputs[t]), h, &caches[t]);
    const Vector lp = log_softmax(affine(p.w_out, p.b_out, h));
    loss -= lp[targets[t]];
    if (grad) {
      probs[t].resize(lp.size());
      std::transform(lp.begin(), lp.end(), probs[t].begin(), [](double v) { return std::exp(v); });
    }
  }
  loss /= static_cast<double>(L);
  if (!grad) return loss;

  const double scale = 1.0 / static_cast<double>(L);
  Vector dh_next(p.d_h(), 0.0);
  Vector dx(p.d_e());
  for (std::size_t t = L; t-- > 0;) {
    Vector dlogits = probs[t];
    dlogits[targets[t]] -= 1.0;
    for (double& v : dlogits) v *= scale;
    add_outer(grad->w_out, dlogits, caches[t].out);
    axpy(1.0, dlogits, grad->b_out);
    Vector dh = matvec_transposed(p.w_out, dlogits);
    axpy(1.0, dh_next, dh);
    std::fill(dx.begin(), dx.end(), 0.0);
    std::fill(dh_next.begin(), dh_next.end(), 0.0);
    gated_backward(p.cell, caches[t], dh, grad->cell, dx, dh_next);
    axpy(1.0, dx, grad->embedding.row(inputs[t]));
  }
  return loss;
}

BackboneParams init_backbone_params(std::size_t vocab, const BackboneTrainConfig& cfg) {
  if (cfg.d_h == 0 || cfg.d_e == 0) throw std::invalid_argument("backbone dims must be positive");
  BackboneParams p(vocab, cfg.d_h, cfg.d_e);
  Rng rng(cfg.seed, 0);
  for (auto& t : p.tensors()) fill_uniform(t.values, rng, -cfg.init_scale, cfg.init_scale);
  return p;
}

BackboneModel train_backbone(const std::vector<std::vector<TokenId>>& corpus,
                             const Vocabulary& vocab, const BackboneTrainConfig& cfg,
                             std::vector<double>* epoch_losses) {
  if (corpus.empty()) throw std::invalid_argument("train_backbone: empty corpus");
  if (cfg.epochs < 1) throw std::invalid_argument("train_backbone: epochs must be >= 1");
  BackboneParams params = init_backbone_params(vocab.size(), cfg);
  BackboneParams grad(vocab.size(), cfg.d_h, cfg.d_e);
  auto prefs = params.tensors();
  auto grefs = grad.tensors();

  std::vector<std::size_t> order(corpus.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng(cfg.seed, 1 + static_cast<std::uint64_t>(epoch));
    rng.shuffle(order);
    double total = 0.0;
    for (std::size_t idx : order) {
      for (auto& g : grefs) std::fill(g.values.begin(), g.values.end(), 0.0);
      total += backbone_sequence_loss(params, corpus[idx], &grad);
      double scale = cfg.lr;
      if (cfg.clip_norm > 0.0) {
        double sq = 0.0;
        for (const auto& g : grefs) {
          for (double v : g.values) sq += v * v;
        }
        const double norm = std::sqrt(sq);
        if (norm > cfg.clip_norm) scale *= cfg.clip_norm / norm;
      }
      for (std::size_t k = 0; k < prefs.size(); ++k) axpy(-scale, grefs[k].values, prefs[k].values);
    }
    if (epoch_losses) epoch_losses->push_back(total / static_cast<double>(corpus.size()));
  }
  return BackboneModel(vocab, std::move(params));
}

double perplexity(const BackboneModel& model, std::span<const TokenId> tokens) {
  if (tokens.empty()) throw std::invalid_argument("perplexity: empty sequence");
  BackboneState s = model.init_state();
  double nll = 0.0;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (!model.vocab().valid(tokens[i])) throw std::out_of_range("perplexity: bad token id");
    nll -= s.logprobs[tokens[i]];
    if (i + 1 < tokens.size()) s = model.step(s, tokens[i]);
  }
  return std::exp(nll / static_cast<double>(tokens.size()));
}

}  // namespace ctrlgen
