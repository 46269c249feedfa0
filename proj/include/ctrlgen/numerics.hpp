#pragma once

// Dense kernels, activations, the deterministic RNG and the finite-difference
// oracle shared by every other module. Everything is f64.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace ctrlgen {

using Vector = std::vector<double>;

/// Raised when operand shapes do not conform.
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Row-major dense matrix. Dimensions are fixed at construction.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> values);

  static Matrix identity(std::size_t n);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }

  std::span<double> flat() noexcept { return data_; }
  std::span<const double> flat() const noexcept { return data_; }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// ---------------------------------------------------------------- kernels

/// Left-to-right dot product. Every matrix-vector product in the project goes
/// through this so scalar and batched paths round identically.
double dot(std::span<const double> a, std::span<const double> b);

/// y = W x + b, each row summed left to right and the bias added last.
Vector affine(const Matrix& w, std::span<const double> b, std::span<const double> x);

/// y = W x.
Vector matvec(const Matrix& w, std::span<const double> x);

/// y = W^T x (accumulated row by row).
Vector matvec_transposed(const Matrix& w, std::span<const double> x);

/// W += alpha * u v^T
void add_outer(Matrix& w, std::span<const double> u, std::span<const double> v, double alpha = 1.0);

/// y += alpha * x
void axpy(double alpha, std::span<const double> x, std::span<double> y);

// ------------------------------------------------------------ activations

double sigmoid(double x) noexcept;
double tanh_act(double x) noexcept;
double relu(double x) noexcept;
/// ln(1 + e^x); returns x for x > 30.
double softplus(double x) noexcept;
/// log sigmoid(x) = -softplus(-x); finite for every finite x.
double log_sigmoid(double x) noexcept;

Vector sigmoid(std::span<const double> x);
Vector tanh_act(std::span<const double> x);
Vector relu(std::span<const double> x);
Vector softplus(std::span<const double> x);

/// Max-subtracted log-softmax. Requires a non-empty input.
Vector log_softmax(std::span<const double> logits);

// ------------------------------------------------------------ grad oracle

/// Central differences (f(x + eps e_j) - f(x - eps e_j)) / (2 eps) per coordinate.
/// Throws std::domain_error if f is non-finite at any probe.
Vector finite_difference_gradient(const std::function<double(std::span<const double>)>& f,
                                  std::span<const double> theta, double eps = 1e-4);

/// max_j |a_j - b_j| / max(max_j |a_j|, 1e-8)
double relative_error(std::span<const double> analytic, std::span<const double> numeric);

// -------------------------------------------------------------------- RNG

/// SplitMix64 generator. The initial state for (seed, stream) is
///   mix64(seed ^ mix64(stream + 0x9E3779B97F4A7C15))
/// where mix64 is the SplitMix64 finaliser, so streams are decorrelated
/// even for adjacent seeds. All derived draws are implemented here rather
/// than through <random> distributions, whose algorithms vary by library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0) noexcept;

  std::uint64_t next_u64() noexcept;
  /// Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept;
  double uniform(double lo, double hi) noexcept;
  /// Uniform integer in [0, n); n must be positive. Rejection-sampled, unbiased.
  std::uint64_t below(std::uint64_t n) noexcept;
  /// Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::vector<T>& v) noexcept {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream() const noexcept { return stream_; }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t state_;
};

std::uint64_t mix64(std::uint64_t z) noexcept;

/// Fill with i.i.d. uniform(lo, hi) draws.
void fill_uniform(std::span<double> out, Rng& rng, double lo, double hi);

// ----------------------------------------------------------------- hashing

/// 64-bit FNV-1a, used for content hashes of checkpoints and corpora.
class Fnv1a {
 public:
  void update(std::span<const std::uint8_t> bytes) noexcept;
  void update(std::string_view s) noexcept;
  void update_u64(std::uint64_t v) noexcept;
  void update_f64(double v) noexcept;
  std::uint64_t digest() const noexcept { return h_; }

 private:
  std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

std::string hex64(std::uint64_t v);

}  // namespace ctrlgen
