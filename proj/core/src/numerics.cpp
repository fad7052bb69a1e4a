#include "biomoe/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace biomoe {

namespace {

// One-sided Jacobi on a tall (rows >= cols) matrix: orthogonalizes column
// pairs until convergence, then reads singular values off column norms.
SvdResult svd_tall(const Matrix& m) {
  const std::size_t rows = m.rows;
  const std::size_t cols = m.cols;
  Matrix b = m;
  Matrix v = Matrix::identity(cols);

  const double eps = 1e-14;
  const int max_sweeps = 60;
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < cols; ++p) {
      for (std::size_t q = p + 1; q < cols; ++q) {
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < rows; ++i) {
          const double bp = b.at(i, p), bq = b.at(i, q);
          alpha += bp * bp;
          beta += bq * bq;
          gamma += bp * bq;
        }
        if (std::abs(gamma) <= eps * std::sqrt(alpha * beta) || gamma == 0.0) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < rows; ++i) {
          const double bp = b.at(i, p), bq = b.at(i, q);
          b.at(i, p) = c * bp - s * bq;
          b.at(i, q) = s * bp + c * bq;
        }
        for (std::size_t i = 0; i < cols; ++i) {
          const double vp = v.at(i, p), vq = v.at(i, q);
          v.at(i, p) = c * vp - s * vq;
          v.at(i, q) = s * vp + c * vq;
        }
      }
    }
    if (!rotated) break;
  }

  Vec sigma(cols, 0.0);
  for (std::size_t j = 0; j < cols; ++j) {
    double n = 0.0;
    for (std::size_t i = 0; i < rows; ++i) n += b.at(i, j) * b.at(i, j);
    sigma[j] = std::sqrt(n);
  }

  std::vector<std::size_t> order(cols);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t c) { return sigma[a] > sigma[c]; });

  SvdResult out;
  out.s.resize(cols);
  out.u = Matrix(rows, cols);
  out.vt = Matrix(cols, cols);
  for (std::size_t j = 0; j < cols; ++j) {
    const std::size_t src = order[j];
    out.s[j] = sigma[src];
    if (sigma[src] > 0.0) {
      for (std::size_t i = 0; i < rows; ++i) out.u.at(i, j) = b.at(i, src) / sigma[src];
    }
    for (std::size_t i = 0; i < cols; ++i) out.vt.at(j, i) = v.at(i, src);
  }
  return out;
}

}  // namespace

SvdResult svd(const Matrix& m) {
  if (m.rows == 0 || m.cols == 0) throw InvalidInputError("svd: empty matrix");
  if (!m.all_finite()) throw InvalidInputError("svd: non-finite entries");
  if (m.rows >= m.cols) return svd_tall(m);
  // Wide input: factor the transpose and swap the roles of u and v.
  SvdResult t = svd_tall(transpose(m));
  SvdResult out;
  out.s = t.s;
  out.u = transpose(t.vt);
  out.vt = transpose(t.u);
  return out;
}

Vec softmax(const Vec& logits) {
  if (logits.empty()) throw InvalidInputError("softmax: empty input");
  if (!all_finite(logits)) throw InvalidInputError("softmax: non-finite input");
  const double m = *std::max_element(logits.begin(), logits.end());
  Vec out(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - m);
    sum += out[i];
  }
  for (double& v : out) v /= sum;
  return out;
}

Vec top_k_mask(const Vec& v, std::size_t k) {
  if (k < 1 || k > v.size()) throw InvalidInputError("top_k_mask: k out of range");
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return v[a] > v[b]; });
  Vec out(v.size(), 0.0);
  for (std::size_t i = 0; i < k; ++i) out[order[i]] = v[order[i]];
  return out;
}

double gelu(double x) {
  return 0.5 * x * (1.0 + std::erf(x * 0.70710678118654752440));
}

double gelu_grad(double x) {
  const double phi = std::exp(-0.5 * x * x) * 0.39894228040143267794;  // N(0,1) pdf
  return 0.5 * (1.0 + std::erf(x * 0.70710678118654752440)) + x * phi;
}

}  // namespace biomoe
