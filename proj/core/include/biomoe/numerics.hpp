#pragma once

#include <cstddef>

#include "biomoe/matrix.hpp"

namespace biomoe {

/// Thin SVD m = u * diag(s) * vt with s sorted descending.
/// u is (rows x k), vt is (k x cols), k = min(rows, cols).
struct SvdResult {
  Matrix u;
  Vec s;
  Matrix vt;
};

/// Deterministic one-sided Jacobi SVD. Accepts any m x n with m, n >= 1;
/// an all-zero input yields all-zero singular values.
SvdResult svd(const Matrix& m);

/// Numerically-stable softmax (max subtraction). Throws on empty input.
Vec softmax(const Vec& logits);

/// Keeps the k largest entries at their input values and zeroes the rest.
/// Ties break toward the lower index. Requires 1 <= k <= v.size().
Vec top_k_mask(const Vec& v, std::size_t k);

/// x * Phi(x), the exact Gaussian-CDF form.
double gelu(double x);
double gelu_grad(double x);

}  // namespace biomoe
