#include "ctrlgen/discriminator.hpp"

#include <algorithm>
#include <cmath>

#include "ctrlgen/backbone.hpp"
#include "faster_kernel.hpp"

namespace ctrlgen {

namespace {

constexpr std::string_view kMagic = "GMND";
constexpr std::uint32_t kVersion = 1;
constexpr std::array<const char*, 10> kFastNames{"w_1r", "w_1z", "w_1n", "w_2r", "w_2z",
                                                 "w_2n", "b_r",  "b_z",  "b_1n", "b_2n"};
constexpr std::array<const char*, 10> kGruNames{"w_ir", "w_iz", "w_in", "w_hr", "w_hz",
                                                "w_hn", "b_r",  "b_z",  "b_in", "b_hn"};

void sort_refs(std::vector<TensorRef>& refs) {
  std::sort(refs.begin(), refs.end(),
            [](const TensorRef& a, const TensorRef& b) { return a.name < b.name; });
}

void check_h(const DiscriminatorParams& p, std::span<const double> h) {
  if (h.size() != p.d_h()) throw ContractError("discriminator: hidden width mismatch");
}

Vector relu_of(std::span<const double> x) { return relu(x); }

// Glorot uniform, sqrt(6 / (fan_in + fan_out)), for weights; biases start at
// zero. A weight vector is a single output row (fan_out = 1).
bool is_bias(const TensorRef& t) {
  const std::string leaf = t.name.substr(t.name.rfind('.') + 1);
  return leaf == "b" || leaf.rfind("b_", 0) == 0;
}

double glorot_bound(const TensorRef& t) {
  if (is_bias(t)) return 0.0;
  const double fan_out = t.dims.size() == 2 ? t.dims[0] : 1.0;
  const double fan_in = t.dims.size() == 2 ? t.dims[1] : t.dims[0];
  return std::sqrt(6.0 / (fan_in + fan_out));
}

}  // namespace

DiscriminatorParams::DiscriminatorParams(std::size_t d_h, std::size_t d_e, std::string attr)
    : attribute(std::move(attr)), w_g(d_h, d_h), b_g(d_h, 0.0), w_0(d_h, 0.0), fast(d_e, d_h) {}

std::vector<TensorRef> DiscriminatorParams::tensors() {
  auto refs = fast.tensors("fast.", kFastNames);
  for (auto& r : shared_tensors()) refs.push_back(std::move(r));
  sort_refs(refs);
  return refs;
}

std::vector<TensorRef> DiscriminatorParams::shared_tensors() {
  return {tensor_ref("shared.b_g", b_g), tensor_ref("shared.w_0", w_0),
          tensor_ref("shared.w_g", w_g)};
}

DiscriminatorParams zeros_like(const DiscriminatorParams& p) {
  return DiscriminatorParams(p.d_h(), p.d_e(), p.attribute);
}

DiscriminatorParams init_discriminator(std::size_t d_h, std::size_t d_e, std::string attribute,
                                       std::uint64_t seed, std::optional<double> scale) {
  DiscriminatorParams p(d_h, d_e, std::move(attribute));
  Rng rng(seed, 0);
  for (auto& t : p.tensors()) {
    const double b = scale ? *scale : glorot_bound(t);
    fill_uniform(t.values, rng, -b, b);
  }
  return p;
}

double normal_forward(const DiscriminatorParams& p, std::span<const double> h, NormalCache& c) {
  check_h(p, h);
  c.h.assign(h.begin(), h.end());
  c.pre = affine(p.w_g, p.b_g, h);
  c.g = relu_of(c.pre);
  c.logit = dot(p.w_0, c.g);
  return c.logit;
}

double normal_logit(const DiscriminatorParams& p, std::span<const double> h) {
  NormalCache c;
  return normal_forward(p, h, c);
}

double normal_prob(const DiscriminatorParams& p, std::span<const double> h) {
  return sigmoid(normal_logit(p, h));
}

double normal_log_prob(const DiscriminatorParams& p, std::span<const double> h) {
  return log_sigmoid(normal_logit(p, h));
}

double faster_forward(const DiscriminatorParams& p, std::span<const double> h_prev,
                      std::span<const double> e, FasterCache& c) {
  check_h(p, h_prev);
  c.h_prev.assign(h_prev.begin(), h_prev.end());
  c.g = affine(p.w_g, p.b_g, h_prev);
  gated_forward(p.fast, e, c.g, &c.cell);
  c.o = relu_of(c.cell.out);
  c.logit = dot(p.w_0, c.o);
  return c.logit;
}

double faster_logit(const DiscriminatorParams& p, std::span<const double> h_prev,
                    std::span<const double> e) {
  FasterCache c;
  return faster_forward(p, h_prev, e, c);
}

double faster_prob(const DiscriminatorParams& p, std::span<const double> h_prev,
                   std::span<const double> e) {
  return sigmoid(faster_logit(p, h_prev, e));
}

namespace {

Vector score_rows(const DiscriminatorParams& p, std::span<const double> h_prev,
                  std::span<const GatedInputProjection> inputs) {
  check_h(p, h_prev);
  const Vector g = affine(p.w_g, p.b_g, h_prev);
  const GatedHiddenProjection hid = project_hidden(p.fast, g);
  Vector out(inputs.size());
  GatedCellCache c;
  for (std::size_t w = 0; w < inputs.size(); ++w) {
    gated_combine(p.fast, inputs[w], hid, g, c);
    // Same accumulation order as dot(w_0, ReLU(out)).
    double s = 0.0;
    for (std::size_t k = 0; k < c.out.size(); ++k) s += p.w_0[k] * relu(c.out[k]);
    out[w] = s;
  }
  return out;
}

}  // namespace

Vector faster_logits_all(const DiscriminatorParams& p, std::span<const double> h_prev,
                         const Matrix& embedding) {
  if (embedding.cols() != p.d_e()) throw ContractError("faster_logits_all: embedding width mismatch");
  std::vector<GatedInputProjection> inputs;
  inputs.reserve(embedding.rows());
  for (std::size_t w = 0; w < embedding.rows(); ++w) {
    inputs.push_back(project_input(p.fast, embedding.row(w)));
  }
  return score_rows(p, h_prev, inputs);
}

FasterScorer::FasterScorer(const DiscriminatorParams& params, const Matrix& embedding)
    : params_(params),
      exp_neg_r_(embedding.rows(), params.d_h()),
      exp_neg_z_(embedding.rows(), params.d_h()),
      pre_n_(embedding.rows(), params.d_h()),
      pre_r_(embedding.rows(), params.d_h()),
      pre_z_(embedding.rows(), params.d_h()) {
  if (embedding.cols() != params_.d_e()) throw ContractError("FasterScorer: embedding width mismatch");
  const std::size_t H = params_.d_h();
  for (std::size_t w = 0; w < embedding.rows(); ++w) {
    const GatedInputProjection in = project_input(params_.fast, embedding.row(w));
    for (std::size_t k = 0; k < H; ++k) {
      exp_neg_r_(w, k) = std::exp(-in.r[k]);
      exp_neg_z_(w, k) = std::exp(-in.z[k]);
      pre_n_(w, k) = in.n[k] + params_.fast.b_in[k];
      pre_r_(w, k) = in.r[k];
      pre_z_(w, k) = in.z[k];
    }
  }
  for (const Matrix* m : {&exp_neg_r_, &exp_neg_z_}) {
    for (double v : m->flat()) tables_finite_ = tables_finite_ && std::isnormal(v);
  }
  for (double v : exp_neg_z_.flat()) max_exp_neg_z_ = std::max(max_exp_neg_z_, v);
}

Vector FasterScorer::logits_all(std::span<const double> h_prev) const {
  const auto& p = params_;
  check_h(p, h_prev);
  const std::size_t H = p.d_h();
  const Vector g = affine(p.w_g, p.b_g, h_prev);
  const GatedHiddenProjection hid = project_hidden(p.fast, g);
  Vector xr(H), xz(H), hn(H);
  bool ok = tables_finite_;
  double max_xz = 0.0;
  for (std::size_t k = 0; k < H; ++k) {
    xr[k] = std::exp(-(hid.r[k] + p.fast.b_r[k]));
    xz[k] = std::exp(-(hid.z[k] + p.fast.b_z[k]));
    hn[k] = hid.n[k] + p.fast.b_hn[k];
    ok = ok && std::isnormal(xr[k]) && std::isnormal(xz[k]);
    max_xz = std::max(max_xz, xz[k]);
  }
  // Products of normal positives never form 0 * inf; a bounded e^-z factor
  // keeps the folded denominator finite.
  if (!ok || max_xz > 1e300 / max_exp_neg_z_) return logits_saturated(h_prev);
  const std::size_t V = exp_neg_r_.rows();
  thread_local std::vector<double> scratch;
  if (scratch.size() < 3 * V * H) scratch.resize(3 * V * H);
  Vector out(V);
  detail::faster_scores(exp_neg_r_.flat().data(), exp_neg_z_.flat().data(), pre_n_.flat().data(), V,
                        H, xr.data(), xz.data(), hn.data(), g.data(), p.w_0.data(), scratch.data(),
                        out.data());
  return out;
}

// sigmoid(a + b) = 1 / (1 + e^-a e^-b). The e^-a factors depend only on the
// candidate's frozen embedding, so each gate costs one multiply and a divide.
Vector FasterScorer::logits_saturated(std::span<const double> h_prev) const {
  const auto& p = params_;
  check_h(p, h_prev);
  const std::size_t H = p.d_h();
  const Vector g = affine(p.w_g, p.b_g, h_prev);
  const GatedHiddenProjection hid = project_hidden(p.fast, g);
  Vector xr(H), xz(H), hn(H);
  for (std::size_t k = 0; k < H; ++k) {
    xr[k] = std::exp(-(hid.r[k] + p.fast.b_r[k]));
    xz[k] = std::exp(-(hid.z[k] + p.fast.b_z[k]));
    hn[k] = hid.n[k] + p.fast.b_hn[k];
  }
  // Three passes over the |V| x d_h block keep the elementwise work in simple
  // loops and the transcendental calls in one tight loop.
  const std::size_t V = exp_neg_r_.rows();
  const std::size_t N = V * H;
  const double* er = exp_neg_r_.flat().data();
  const double* ez = exp_neg_z_.flat().data();
  const double* an = pre_n_.flat().data();
  std::vector<double> qz(N), u(N), e(N);
  bool saturated = false;
  for (std::size_t w = 0; w < V; ++w) {
    for (std::size_t k = 0; k < H; ++k) {
      const std::size_t i = w * H + k;
      const double qr = er[i] * xr[k];
      qz[i] = ez[i] * xz[k];
      u[i] = an[i] + hn[k] / (1.0 + qr);
      saturated |= std::isnan(qr) || std::isnan(qz[i]);
    }
  }
  if (saturated) {
    // 0 * inf: both factors of a gate saturated in opposite directions.
    for (std::size_t w = 0; w < V; ++w) {
      for (std::size_t k = 0; k < H; ++k) {
        const std::size_t i = w * H + k;
        const double qr = er[i] * xr[k];
        if (std::isnan(qr)) u[i] = an[i] + sigmoid(pre_r_(w, k) + hid.r[k] + p.fast.b_r[k]) * hn[k];
        if (std::isnan(qz[i])) qz[i] = std::exp(-(pre_z_(w, k) + hid.z[k] + p.fast.b_z[k]));
      }
    }
  }
  for (std::size_t i = 0; i < N; ++i) e[i] = -2.0 * std::abs(u[i]);
  for (std::size_t i = 0; i < N; ++i) e[i] = std::exp(e[i]);
  // n = tanh(u) = sgn(u) (1 - e) / (1 + e); (1 - z) n + z g is folded over the
  // common denominator (1 + qz)(1 + e).
  Vector out(V);
  for (std::size_t w = 0; w < V; ++w) {
    double s = 0.0;
    for (std::size_t k = 0; k < H; ++k) {
      const std::size_t i = w * H + k;
      const double n_num = std::copysign(1.0 - e[i], u[i]);
      const double o = qz[i] <= 1e300
                           ? (qz[i] * n_num + g[k] * (1.0 + e[i])) / ((1.0 + qz[i]) * (1.0 + e[i]))
                           : n_num / (1.0 + e[i]);
      if (o > 0.0) s += p.w_0[k] * o;
    }
    out[w] = s;
  }
  return out;
}

Vector FasterScorer::log_probs_all(std::span<const double> h_prev) const {
  Vector m = logits_all(h_prev);
  for (double& v : m) v = log_sigmoid(v);
  return m;
}

Vector normal_backward(const DiscriminatorParams& p, const NormalCache& c, double upstream,
                       DiscriminatorParams& grad) {
  const std::size_t H = p.d_h();
  axpy(upstream, c.g, grad.w_0);
  Vector da(H);
  for (std::size_t k = 0; k < H; ++k) da[k] = c.pre[k] > 0.0 ? upstream * p.w_0[k] : 0.0;
  add_outer(grad.w_g, da, c.h);
  axpy(1.0, da, grad.b_g);
  return matvec_transposed(p.w_g, da);
}

Vector normal_backward(const DiscriminatorParams& p, std::span<const double> h, double upstream,
                       DiscriminatorParams& grad) {
  NormalCache c;
  normal_forward(p, h, c);
  return normal_backward(p, c, upstream, grad);
}

void faster_backward(const DiscriminatorParams& p, const FasterCache& c, double upstream,
                     DiscriminatorParams& grad, Vector* d_h_prev, Vector* d_e) {
  const std::size_t H = p.d_h();
  axpy(upstream, c.o, grad.w_0);
  Vector d_cell(H);
  for (std::size_t k = 0; k < H; ++k) d_cell[k] = c.cell.out[k] > 0.0 ? upstream * p.w_0[k] : 0.0;
  Vector de(p.d_e(), 0.0);
  Vector dg(H, 0.0);
  gated_backward(p.fast, c.cell, d_cell, grad.fast, de, dg);
  add_outer(grad.w_g, dg, c.h_prev);
  axpy(1.0, dg, grad.b_g);
  if (d_h_prev) *d_h_prev = matvec_transposed(p.w_g, dg);
  if (d_e) *d_e = std::move(de);
}

void faster_backward(const DiscriminatorParams& p, std::span<const double> h_prev,
                     std::span<const double> e, double upstream, DiscriminatorParams& grad) {
  FasterCache c;
  faster_forward(p, h_prev, e, c);
  faster_backward(p, c, upstream, grad);
}

// ---------------------------------------------------------------- GRU head

GruBaselineParams::GruBaselineParams(std::size_t d_e, std::size_t hidden, std::string attr)
    : attribute(std::move(attr)), cell(d_e, hidden), w_out(hidden, 0.0), b_out(1, 0.0) {}

std::vector<TensorRef> GruBaselineParams::tensors() {
  auto refs = cell.tensors("cell.", kGruNames);
  refs.push_back(tensor_ref("out.b", b_out));
  refs.push_back(tensor_ref("out.w", w_out));
  sort_refs(refs);
  return refs;
}

GruBaselineParams zeros_like(const GruBaselineParams& p) {
  return GruBaselineParams(p.cell.input_dim(), p.hidden_dim(), p.attribute);
}

GruBaselineParams init_gru_baseline(std::size_t d_e, std::size_t hidden, std::string attribute,
                                    std::uint64_t seed, std::optional<double> scale) {
  GruBaselineParams p(d_e, hidden, std::move(attribute));
  Rng rng(seed, 0);
  for (auto& t : p.tensors()) {
    const double b = scale ? *scale : glorot_bound(t);
    fill_uniform(t.values, rng, -b, b);
  }
  return p;
}

double gru_baseline_step(const GruBaselineParams& p, std::span<const double> h_prev,
                         std::span<const double> e, Vector* h_next) {
  Vector h = gated_forward(p.cell, e, h_prev);
  const double logit = dot(p.w_out, h) + p.b_out[0];
  if (h_next) *h_next = std::move(h);
  return logit;
}

Vector gru_baseline_logits(const GruBaselineParams& p, const Matrix& embedded) {
  if (embedded.rows() == 0) throw std::invalid_argument("gru_baseline_logits: empty sequence");
  Vector h(p.hidden_dim(), 0.0);
  Vector out(embedded.rows());
  for (std::size_t t = 0; t < embedded.rows(); ++t) out[t] = gru_baseline_step(p, h, embedded.row(t), &h);
  return out;
}

void gru_baseline_backward(const GruBaselineParams& p, const Matrix& embedded,
                           std::span<const double> d_logits, GruBaselineParams& grad) {
  const std::size_t T = embedded.rows();
  if (T == 0 || d_logits.size() != T) throw ContractError("gru_baseline_backward: length mismatch");
  std::vector<GatedCellCache> caches(T);
  Vector h(p.hidden_dim(), 0.0);
  for (std::size_t t = 0; t < T; ++t) h = gated_forward(p.cell, embedded.row(t), h, &caches[t]);

  Vector dh_next(p.hidden_dim(), 0.0);
  Vector dx(p.cell.input_dim());
  for (std::size_t t = T; t-- > 0;) {
    grad.b_out[0] += d_logits[t];
    axpy(d_logits[t], caches[t].out, grad.w_out);
    Vector dh = dh_next;
    axpy(d_logits[t], p.w_out, dh);
    std::fill(dh_next.begin(), dh_next.end(), 0.0);
    std::fill(dx.begin(), dx.end(), 0.0);
    gated_backward(p.cell, caches[t], dh, grad.cell, dx, dh_next);
  }
}

// ------------------------------------------------------------- persistence

std::vector<std::uint8_t> serialize_discriminator(const DiscriminatorParams& p,
                                                  std::uint64_t backbone_hash) {
  ByteWriter w;
  auto copy = p;
  write_container(w, kMagic, kVersion, to_tensor_map(copy.tensors()));
  w.string32(p.attribute);
  w.u64(backbone_hash);
  return w.data();
}

DiscriminatorCheckpoint deserialize_discriminator(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  const TensorMap tensors = read_container(r, kMagic, kVersion);
  auto find = [&](const char* name) -> const Tensor& {
    auto it = tensors.find(name);
    if (it == tensors.end() || it->second.dims.size() != 2) {
      throw FormatError(std::string("discriminator checkpoint: missing matrix ") + name);
    }
    return it->second;
  };
  const auto& w1r = find("fast.w_1r");
  DiscriminatorCheckpoint ck;
  ck.params = DiscriminatorParams(w1r.dims[0], w1r.dims[1]);
  assign_from(ck.params.tensors(), tensors);
  ck.params.attribute = r.string32();
  ck.backbone_hash = r.u64();
  if (!r.at_end()) throw FormatError("trailing bytes after discriminator checkpoint");
  return ck;
}

void save_discriminator(const std::string& path, const DiscriminatorParams& p,
                        std::uint64_t backbone_hash) {
  write_file(path, serialize_discriminator(p, backbone_hash));
}

DiscriminatorCheckpoint load_discriminator(const std::string& path) {
  return deserialize_discriminator(read_file(path));
}

DiscriminatorParams load_discriminator(const std::string& path, const BackboneModel& backbone) {
  auto ck = load_discriminator(path);
  if (ck.backbone_hash != backbone.hash()) {
    throw HashMismatchError("discriminator " + path + " was trained on backbone " +
                            hex64(ck.backbone_hash) + ", got " + hex64(backbone.hash()));
  }
  if (ck.params.d_h() != backbone.d_h() || ck.params.d_e() != backbone.d_e()) {
    throw FormatError("discriminator dims do not match backbone");
  }
  return std::move(ck.params);
}

}  // namespace ctrlgen
