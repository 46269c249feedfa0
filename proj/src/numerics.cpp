#include "ctrlgen/numerics.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <limits>

namespace ctrlgen {

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> values)
    : rows_(rows), cols_(cols), data_(std::move(values)) {
  if (data_.size() != rows * cols) {
    throw ContractError("Matrix: value count does not match dims");
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ContractError("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

Vector affine(const Matrix& w, std::span<const double> b, std::span<const double> x) {
  if (w.cols() != x.size() || w.rows() != b.size()) {
    throw ContractError("affine: dimension mismatch");
  }
  Vector y(w.rows());
  for (std::size_t r = 0; r < w.rows(); ++r) y[r] = dot(w.row(r), x) + b[r];
  return y;
}

Vector matvec(const Matrix& w, std::span<const double> x) {
  if (w.cols() != x.size()) throw ContractError("matvec: dimension mismatch");
  Vector y(w.rows());
  for (std::size_t r = 0; r < w.rows(); ++r) y[r] = dot(w.row(r), x);
  return y;
}

Vector matvec_transposed(const Matrix& w, std::span<const double> x) {
  if (w.rows() != x.size()) throw ContractError("matvec_transposed: dimension mismatch");
  Vector y(w.cols(), 0.0);
  for (std::size_t r = 0; r < w.rows(); ++r) {
    const double xr = x[r];
    if (xr == 0.0) continue;
    const auto row = w.row(r);
    for (std::size_t c = 0; c < w.cols(); ++c) y[c] += row[c] * xr;
  }
  return y;
}

void add_outer(Matrix& w, std::span<const double> u, std::span<const double> v, double alpha) {
  if (w.rows() != u.size() || w.cols() != v.size()) {
    throw ContractError("add_outer: dimension mismatch");
  }
  for (std::size_t r = 0; r < w.rows(); ++r) {
    const double ur = alpha * u[r];
    if (ur == 0.0) continue;
    auto row = w.row(r);
    for (std::size_t c = 0; c < w.cols(); ++c) row[c] += ur * v[c];
  }
}

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  if (x.size() != y.size()) throw ContractError("axpy: length mismatch");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

double sigmoid(double x) noexcept {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double tanh_act(double x) noexcept { return std::tanh(x); }

double relu(double x) noexcept { return x > 0.0 ? x : 0.0; }

double softplus(double x) noexcept {
  if (x > 30.0) return x;
  if (x < -30.0) return std::exp(x);
  return std::log1p(std::exp(x));
}

double log_sigmoid(double x) noexcept { return -softplus(-x); }

namespace {
template <typename F>
Vector map(std::span<const double> x, F f) {
  Vector y(x.size());
  std::transform(x.begin(), x.end(), y.begin(), f);
  return y;
}
}  // namespace

Vector sigmoid(std::span<const double> x) { return map(x, [](double v) { return sigmoid(v); }); }
Vector tanh_act(std::span<const double> x) { return map(x, [](double v) { return tanh_act(v); }); }
Vector relu(std::span<const double> x) { return map(x, [](double v) { return relu(v); }); }
Vector softplus(std::span<const double> x) { return map(x, [](double v) { return softplus(v); }); }

Vector log_softmax(std::span<const double> logits) {
  if (logits.empty()) throw ContractError("log_softmax: empty input");
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double v : logits) z += std::exp(v - mx);
  const double lz = mx + std::log(z);
  Vector out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lz;
  return out;
}

Vector finite_difference_gradient(const std::function<double(std::span<const double>)>& f,
                                  std::span<const double> theta, double eps) {
  if (!(eps > 0.0)) throw ContractError("finite_difference_gradient: eps must be positive");
  Vector probe(theta.begin(), theta.end());
  Vector grad(theta.size());
  for (std::size_t j = 0; j < theta.size(); ++j) {
    const double saved = probe[j];
    probe[j] = saved + eps;
    const double up = f(probe);
    probe[j] = saved - eps;
    const double down = f(probe);
    probe[j] = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw std::domain_error("finite_difference_gradient: non-finite objective");
    }
    grad[j] = (up - down) / (2.0 * eps);
  }
  return grad;
}

double relative_error(std::span<const double> analytic, std::span<const double> numeric) {
  if (analytic.size() != numeric.size()) throw ContractError("relative_error: length mismatch");
  double diff = 0.0;
  double scale = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
    scale = std::max(scale, std::abs(analytic[i]));
  }
  return diff / std::max(scale, 1e-8);
}

std::uint64_t mix64(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

Rng::Rng(std::uint64_t seed, std::uint64_t stream) noexcept
    : seed_(seed), stream_(stream), state_(mix64(seed ^ mix64(stream + 0x9E3779B97F4A7C15ULL))) {}

std::uint64_t Rng::next_u64() noexcept {
  state_ += 0x9E3779B97F4A7C15ULL;
  return mix64(state_);
}

double Rng::uniform() noexcept {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

std::uint64_t Rng::below(std::uint64_t n) noexcept {
  // Reject the top partial bucket so every residue is equally likely.
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return x % n;
}

void fill_uniform(std::span<double> out, Rng& rng, double lo, double hi) {
  for (double& v : out) v = rng.uniform(lo, hi);
}

void Fnv1a::update(std::span<const std::uint8_t> bytes) noexcept {
  for (std::uint8_t b : bytes) {
    h_ ^= b;
    h_ *= 0x100000001b3ULL;
  }
}

void Fnv1a::update(std::string_view s) noexcept {
  update(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

void Fnv1a::update_u64(std::uint64_t v) noexcept {
  std::uint8_t b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<std::uint8_t>(v >> (8 * i));
  update(b);
}

void Fnv1a::update_f64(double v) noexcept { update_u64(std::bit_cast<std::uint64_t>(v)); }

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace ctrlgen
