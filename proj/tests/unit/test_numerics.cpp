#include <cmath>
#include <numeric>

#include "doctest.h"
#include "helpers.hpp"

using namespace ctrlgen;
using doctest::Approx;

TEST_SUITE("numerics") {

TEST_CASE("affine examples") {
  CHECK(affine(Matrix::identity(2), Vector{0, 0}, Vector{1, -2}) == Vector{1, -2});
  CHECK(affine(Matrix(1, 2, {1, 1}), Vector{0.5}, Vector{2, 3}) == Vector{5.5});
  CHECK(affine(Matrix(1, 3), Vector{7}, Vector{4, -9, 1e6}) == Vector{7});
}

TEST_CASE("affine rejects mismatched dims") {
  CHECK_THROWS_AS(affine(Matrix(2, 3), Vector{0, 0}, Vector{1, 2}), ContractError);
  CHECK_THROWS_AS(affine(Matrix(2, 2), Vector{0}, Vector{1, 2}), ContractError);
}

TEST_CASE("affine sums each row left to right and adds the bias last") {
  Rng rng(3);
  Matrix w(5, 7);
  fill_uniform(w.flat(), rng, -1, 1);
  const Vector b = testutil::random_vector(rng, 5), x = testutil::random_vector(rng, 7);
  const Vector y = affine(w, b, x);
  for (std::size_t r = 0; r < 5; ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < 7; ++c) acc += w(r, c) * x[c];
    CHECK(y[r] == acc + b[r]);
  }
}

TEST_CASE("activation examples") {
  CHECK(sigmoid(0.0) == 0.5);
  CHECK(relu(Vector{1, -2}) == Vector{1, 0});
  CHECK(softplus(0.0) == Approx(0.6931471805599453).epsilon(1e-15));
  CHECK(softplus(31.0) == 31.0);
  CHECK(softplus(-800.0) >= 0.0);
  CHECK(tanh_act(0.0) == 0.0);
  for (double x : {-700.0, -30.0, -1.0, 0.0, 2.0, 40.0, 700.0}) {
    const double s = sigmoid(x);
    CHECK(std::isfinite(s));
    CHECK(s >= 0.0);
    CHECK(s <= 1.0);
    CHECK(std::isfinite(log_sigmoid(x)));
  }
  CHECK(log_sigmoid(-1000.0) == Approx(-1000.0));
}

TEST_CASE("log_softmax examples") {
  const Vector a = log_softmax(Vector{0, 0});
  CHECK(a[0] == Approx(std::log(0.5)).epsilon(1e-15));
  CHECK(a[1] == Approx(std::log(0.5)).epsilon(1e-15));
  const Vector b = log_softmax(Vector{std::log(2.0), 0});
  CHECK(b[0] == Approx(std::log(2.0 / 3.0)).epsilon(1e-14));
  CHECK(b[1] == Approx(std::log(1.0 / 3.0)).epsilon(1e-14));
  // log(1 + e^-1000) is far below double resolution at 1000.
  const Vector c = log_softmax(Vector{1000, 0});
  const long double tail = std::log1p(std::exp(-1000.0L));
  CHECK(c[0] == Approx(static_cast<double>(-tail)));
  CHECK(c[1] == Approx(static_cast<double>(-1000.0L - tail)));
}

TEST_CASE("exp(log_softmax) sums to one") {
  Rng rng(11);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = 1 + rng.below(80);
    Vector v = testutil::random_vector(rng, n, -50, 50);
    if (trial % 3 == 0) v[rng.below(n)] = 1000.0;
    double s = 0.0;
    for (double lp : log_softmax(v)) s += std::exp(lp);
    CHECK(std::abs(s - 1.0) <= 1e-12);
  }
}

TEST_CASE("finite-difference oracle examples") {
  auto sq = [](std::span<const double> t) { return t[0] * t[0]; };
  CHECK(std::abs(finite_difference_gradient(sq, Vector{3.0})[0] - 6.0) < 1e-6);
  auto constant = [](std::span<const double>) { return 4.2; };
  CHECK(finite_difference_gradient(constant, Vector{1, 2, 3}) == Vector{0, 0, 0});
  auto sig = [](std::span<const double> t) { return sigmoid(t[0]); };
  CHECK(finite_difference_gradient(sig, Vector{0.0})[0] == Approx(0.25).epsilon(1e-8));
  auto bad = [](std::span<const double> t) { return t[0] > 0 ? INFINITY : 0.0; };
  CHECK_THROWS_AS(finite_difference_gradient(bad, Vector{0.0}), std::domain_error);
}

TEST_CASE("rng determinism and streams") {
  Rng a(42, 3), b(42, 3), c(42, 4), d(43, 3);
  int same_c = 0, same_d = 0;
  for (int i = 0; i < 10000; ++i) {
    const auto x = a.next_u64();
    REQUIRE(x == b.next_u64());
    same_c += x == c.next_u64();
    same_d += x == d.next_u64();
  }
  CHECK(same_c == 0);
  CHECK(same_d == 0);
}

TEST_CASE("rng draws") {
  Rng rng(9);
  double sum = 0.0;
  std::vector<int> counts(5, 0);
  for (int i = 0; i < 20000; ++i) {
    const double u = rng.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    sum += u;
    ++counts[rng.below(5)];
  }
  CHECK(sum / 20000 == Approx(0.5).epsilon(0.02));
  for (int c : counts) CHECK(std::abs(c - 4000) < 4 * std::sqrt(20000 * 0.2 * 0.8));
  std::vector<int> v(50);
  std::iota(v.begin(), v.end(), 0);
  auto w = v;
  Rng(1).shuffle(w);
  CHECK(w != v);
  std::sort(w.begin(), w.end());
  CHECK(w == v);
}

TEST_CASE("splitmix reference values") {
  // First outputs of the published SplitMix64 for state 0 after one advance.
  std::uint64_t z = 0x9E3779B97F4A7C15ULL;
  CHECK(mix64(z) == 0xE220A8397B1DCDAFULL);
}

TEST_CASE("fnv1a reference values") {
  Fnv1a h;
  CHECK(h.digest() == 0xcbf29ce484222325ULL);
  h.update(std::string_view("a"));
  CHECK(h.digest() == 0xaf63dc4c8601ec8cULL);
  Fnv1a g;
  g.update(std::string_view("foobar"));
  CHECK(g.digest() == 0x85944171f73967e8ULL);
}

TEST_CASE("matrix dims are fixed") {
  CHECK_THROWS_AS(Matrix(2, 2, Vector{1, 2, 3}), ContractError);
  Matrix m(2, 3);
  CHECK(m.rows() == 2);
  CHECK(m.cols() == 3);
}

}
