#include "ctrlgen/gated_cell.hpp"

namespace ctrlgen {

GatedCellParams::GatedCellParams(std::size_t input, std::size_t hidden)
    : w_ir(hidden, input),
      w_iz(hidden, input),
      w_in(hidden, input),
      w_hr(hidden, hidden),
      w_hz(hidden, hidden),
      w_hn(hidden, hidden),
      b_r(hidden, 0.0),
      b_z(hidden, 0.0),
      b_in(hidden, 0.0),
      b_hn(hidden, 0.0) {}

std::vector<TensorRef> GatedCellParams::tensors(const std::string& prefix,
                                                const std::array<const char*, 10>& names) {
  return {
      tensor_ref(prefix + names[0], w_ir), tensor_ref(prefix + names[1], w_iz),
      tensor_ref(prefix + names[2], w_in), tensor_ref(prefix + names[3], w_hr),
      tensor_ref(prefix + names[4], w_hz), tensor_ref(prefix + names[5], w_hn),
      tensor_ref(prefix + names[6], b_r),  tensor_ref(prefix + names[7], b_z),
      tensor_ref(prefix + names[8], b_in), tensor_ref(prefix + names[9], b_hn),
  };
}

GatedInputProjection project_input(const GatedCellParams& p, std::span<const double> x) {
  if (x.size() != p.input_dim()) throw ContractError("gated cell: input width mismatch");
  return {matvec(p.w_ir, x), matvec(p.w_iz, x), matvec(p.w_in, x)};
}

GatedHiddenProjection project_hidden(const GatedCellParams& p, std::span<const double> h) {
  if (h.size() != p.hidden_dim()) throw ContractError("gated cell: hidden width mismatch");
  return {matvec(p.w_hr, h), matvec(p.w_hz, h), matvec(p.w_hn, h)};
}

void gated_combine(const GatedCellParams& p, const GatedInputProjection& in,
                   const GatedHiddenProjection& hid, std::span<const double> h,
                   GatedCellCache& c) {
  const std::size_t H = p.hidden_dim();
  c.r.resize(H);
  c.z.resize(H);
  c.n.resize(H);
  c.hn.resize(H);
  c.out.resize(H);
  for (std::size_t k = 0; k < H; ++k) {
    c.r[k] = sigmoid(in.r[k] + hid.r[k] + p.b_r[k]);
    c.z[k] = sigmoid(in.z[k] + hid.z[k] + p.b_z[k]);
    c.hn[k] = hid.n[k] + p.b_hn[k];
    c.n[k] = tanh_act(in.n[k] + p.b_in[k] + c.r[k] * c.hn[k]);
    c.out[k] = (1.0 - c.z[k]) * c.n[k] + c.z[k] * h[k];
  }
}

Vector gated_forward(const GatedCellParams& p, std::span<const double> x,
                     std::span<const double> h, GatedCellCache* cache) {
  GatedCellCache local;
  GatedCellCache& c = cache ? *cache : local;
  const auto in = project_input(p, x);
  const auto hid = project_hidden(p, h);
  gated_combine(p, in, hid, h, c);
  c.x.assign(x.begin(), x.end());
  c.h.assign(h.begin(), h.end());
  return c.out;
}

void gated_backward(const GatedCellParams& p, const GatedCellCache& c,
                    std::span<const double> d_out, GatedCellParams& g, std::span<double> dx,
                    std::span<double> dh) {
  const std::size_t H = p.hidden_dim();
  if (d_out.size() != H || dh.size() != H || dx.size() != p.input_dim()) {
    throw ContractError("gated_backward: dimension mismatch");
  }
  Vector da_r(H), da_z(H), da_n(H), d_hn(H);
  for (std::size_t k = 0; k < H; ++k) {
    const double dz = d_out[k] * (c.h[k] - c.n[k]);
    const double dn = d_out[k] * (1.0 - c.z[k]);
    dh[k] += d_out[k] * c.z[k];
    da_n[k] = dn * (1.0 - c.n[k] * c.n[k]);
    d_hn[k] = da_n[k] * c.r[k];
    const double dr = da_n[k] * c.hn[k];
    da_z[k] = dz * c.z[k] * (1.0 - c.z[k]);
    da_r[k] = dr * c.r[k] * (1.0 - c.r[k]);
  }

  axpy(1.0, da_r, g.b_r);
  axpy(1.0, da_z, g.b_z);
  axpy(1.0, da_n, g.b_in);
  axpy(1.0, d_hn, g.b_hn);

  add_outer(g.w_ir, da_r, c.x);
  add_outer(g.w_iz, da_z, c.x);
  add_outer(g.w_in, da_n, c.x);
  add_outer(g.w_hr, da_r, c.h);
  add_outer(g.w_hz, da_z, c.h);
  add_outer(g.w_hn, d_hn, c.h);

  for (const auto& [w, d] : {std::pair{&p.w_ir, &da_r}, {&p.w_iz, &da_z}, {&p.w_in, &da_n}}) {
    const auto t = matvec_transposed(*w, *d);
    axpy(1.0, t, dx);
  }
  for (const auto& [w, d] : {std::pair{&p.w_hr, &da_r}, {&p.w_hz, &da_z}, {&p.w_hn, &d_hn}}) {
    const auto t = matvec_transposed(*w, *d);
    axpy(1.0, t, dh);
  }
}

}  // namespace ctrlgen
