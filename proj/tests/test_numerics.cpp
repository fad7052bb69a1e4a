#include <algorithm>
#include <cmath>

#include "biomoe/numerics.hpp"
#include "biomoe/rng.hpp"
#include "doctest.h"

using namespace biomoe;

namespace {

// Independent oracle for singular values: cyclic two-sided Jacobi eigensolver
// on the Gram matrix M^T M. Deliberately a different algorithm (and a
// different matrix) than the library's one-sided Jacobi on M itself.
Vec singular_values_oracle(const Matrix& m) {
  const std::size_t n = m.cols;
  Matrix g(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < m.rows; ++k) acc += m.at(k, i) * m.at(k, j);
      g.at(i, j) = acc;
    }

  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += g.at(p, q) * g.at(p, q);
    if (off < 1e-28) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = g.at(p, q);
        if (std::abs(apq) < 1e-300) continue;
        const double theta = (g.at(q, q) - g.at(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double gkp = g.at(k, p), gkq = g.at(k, q);
          g.at(k, p) = c * gkp - s * gkq;
          g.at(k, q) = s * gkp + c * gkq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double gpk = g.at(p, k), gqk = g.at(q, k);
          g.at(p, k) = c * gpk - s * gqk;
          g.at(q, k) = s * gpk + c * gqk;
        }
      }
    }
  }

  Vec sv(n);
  for (std::size_t i = 0; i < n; ++i) sv[i] = std::sqrt(std::max(0.0, g.at(i, i)));
  std::sort(sv.begin(), sv.end(), std::greater<double>());
  sv.resize(std::min(m.rows, m.cols));
  return sv;
}

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng) {
  Matrix m(r, c);
  for (double& v : m.data) v = rng.normal();
  return m;
}

void check_svd_against_oracle(const Matrix& m) {
  const SvdResult res = svd(m);
  const Vec expect = singular_values_oracle(m);
  REQUIRE(res.s.size() == expect.size());
  const double scale = std::max(1.0, expect.empty() ? 0.0 : expect[0]);
  for (std::size_t i = 0; i < expect.size(); ++i)
    CHECK(std::abs(res.s[i] - expect[i]) < 1e-9 * scale);

  // Reconstruction: u diag(s) vt == m
  const std::size_t k = res.s.size();
  for (std::size_t r = 0; r < m.rows; ++r)
    for (std::size_t c = 0; c < m.cols; ++c) {
      double acc = 0.0;
      for (std::size_t i = 0; i < k; ++i)
        acc += res.u.at(r, i) * res.s[i] * res.vt.at(i, c);
      CHECK(std::abs(acc - m.at(r, c)) < 1e-9 * scale);
    }
}

}  // namespace

TEST_CASE("softmax on frozen examples") {
  const Vec p = softmax({0.0, std::log(3.0)});
  CHECK(p[0] == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(p[1] == doctest::Approx(0.75).epsilon(1e-12));

  // shift invariance
  const Vec q = softmax({1000.0, 1000.0 + std::log(3.0)});
  CHECK(q[0] == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(q[1] == doctest::Approx(0.75).epsilon(1e-12));

  const Vec u = softmax({5.0, 5.0, 5.0, 5.0});
  for (double v : u) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));

  CHECK_THROWS_AS(softmax({}), InvalidInputError);
  CHECK_THROWS_AS(softmax({1.0, std::nan("")}), InvalidInputError);
  CHECK_THROWS_AS(softmax({1.0, std::numeric_limits<double>::infinity()}),
                  InvalidInputError);
}

TEST_CASE("softmax sums to one") {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    Vec logits(1 + static_cast<std::size_t>(rng.uniform() * 8));
    for (double& v : logits) v = rng.gaussian(5.0);
    const Vec p = softmax(logits);
    double sum = 0.0;
    for (double v : p) {
      CHECK(v > 0.0);
      sum += v;
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("top-k mask keeps raw values and breaks ties low") {
  const Vec a = top_k_mask({0.2, 0.5, 0.3}, 1);
  CHECK(a == Vec{0.0, 0.5, 0.0});

  const Vec b = top_k_mask({0.2, 0.5, 0.3}, 2);
  CHECK(b == Vec{0.0, 0.5, 0.3});

  // exact tie: the earlier index wins
  const Vec c = top_k_mask({0.4, 0.4, 0.2}, 1);
  CHECK(c == Vec{0.4, 0.0, 0.0});

  const Vec d = top_k_mask({0.1, 0.2}, 2);
  CHECK(d == Vec{0.1, 0.2});

  CHECK_THROWS_AS(top_k_mask({1.0, 2.0}, 0), InvalidInputError);
  CHECK_THROWS_AS(top_k_mask({1.0, 2.0}, 3), InvalidInputError);
}

TEST_CASE("svd of fixed matrices") {
  SUBCASE("diagonal") {
    Matrix m(3, 3);
    m.at(0, 0) = 3.0;
    m.at(1, 1) = 2.0;
    const SvdResult res = svd(m);
    CHECK(res.s[0] == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(res.s[1] == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(res.s[2] == doctest::Approx(0.0).epsilon(1e-12));
  }
  SUBCASE("identity") {
    const SvdResult res = svd(Matrix::identity(4));
    for (double s : res.s) CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("zero matrix") {
    const SvdResult res = svd(Matrix(3, 2));
    for (double s : res.s) CHECK(s == 0.0);
  }
  SUBCASE("known 2x2") {
    // [[3, 0], [4, 5]] has singular values sqrt(45) and sqrt(5).
    Matrix m(2, 2);
    m.at(0, 0) = 3.0;
    m.at(1, 0) = 4.0;
    m.at(1, 1) = 5.0;
    const SvdResult res = svd(m);
    CHECK(res.s[0] == doctest::Approx(std::sqrt(45.0)).epsilon(1e-12));
    CHECK(res.s[1] == doctest::Approx(std::sqrt(5.0)).epsilon(1e-12));
  }
}

TEST_CASE("svd matches the independent Gram eigensolver") {
  Rng rng(21);
  for (int trial = 0; trial < 8; ++trial) {
    check_svd_against_oracle(random_matrix(5, 5, rng));
    check_svd_against_oracle(random_matrix(8, 3, rng));
    check_svd_against_oracle(random_matrix(3, 8, rng));
    check_svd_against_oracle(random_matrix(1, 6, rng));
    check_svd_against_oracle(random_matrix(6, 1, rng));
  }
}

TEST_CASE("svd orthonormality on full-rank input") {
  Rng rng(33);
  const Matrix m = random_matrix(6, 4, rng);
  const SvdResult res = svd(m);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      double uu = 0.0, vv = 0.0;
      for (std::size_t r = 0; r < 6; ++r) uu += res.u.at(r, i) * res.u.at(r, j);
      for (std::size_t c = 0; c < 4; ++c) vv += res.vt.at(i, c) * res.vt.at(j, c);
      const double expect = i == j ? 1.0 : 0.0;
      CHECK(std::abs(uu - expect) < 1e-10);
      CHECK(std::abs(vv - expect) < 1e-10);
    }
}

TEST_CASE("gelu and its derivative") {
  CHECK(gelu(0.0) == 0.0);
  CHECK(gelu(10.0) == doctest::Approx(10.0).epsilon(1e-12));
  CHECK(std::abs(gelu(-10.0)) < 1e-12);
  CHECK(gelu(1.0) == doctest::Approx(0.8413447460685429).epsilon(1e-12));

  // derivative vs central differences
  const double h = 1e-6;
  for (double x : {-3.0, -1.0, -0.1, 0.0, 0.5, 2.0, 4.0}) {
    const double fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
    CHECK(gelu_grad(x) == doctest::Approx(fd).epsilon(1e-6));
  }
}

TEST_CASE("rng streams are deterministic and independent") {
  Rng a = Rng::derive(42, 7);
  Rng b = Rng::derive(42, 7);
  Rng c = Rng::derive(42, 8);
  bool all_equal = true, any_diff = false;
  for (int i = 0; i < 100; ++i) {
    const double va = a.uniform(), vb = b.uniform(), vc = c.uniform();
    all_equal = all_equal && va == vb;
    any_diff = any_diff || va != vc;
    CHECK(va >= 0.0);
    CHECK(va < 1.0);
  }
  CHECK(all_equal);
  CHECK(any_diff);
}

TEST_CASE("rng normal moments") {
  Rng rng(5);
  double sum = 0.0, sum2 = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double v = rng.normal();
    sum += v;
    sum2 += v * v;
  }
  CHECK(std::abs(sum / n) < 0.05);
  CHECK(std::abs(sum2 / n - 1.0) < 0.05);
}
