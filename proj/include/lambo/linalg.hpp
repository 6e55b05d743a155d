#pragma once

#include <algorithm>
#include <cmath>

#include "lambo/tensor.hpp"

namespace lambo::linalg {

// C = A (n x k) * B (k x m). ikj loop order so the inner loop vectorizes.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (b.rank() == 1) {
    // matrix-vector product, returns rank 1
    if (a.rank() != 2 || a.dim(1) != b.dim(0))
      throw ShapeMismatch("matmul: " + shape_str(a) + " x " + shape_str(b));
    Tensor c({a.dim(0)});
    for (std::size_t i = 0; i < a.dim(0); ++i) {
      double acc = 0.0;
      for (std::size_t l = 0; l < b.dim(0); ++l) acc += a.at2(i, l) * b[l];
      c[i] = acc;
    }
    return c;
  }
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeMismatch("matmul: " + shape_str(a) + " x " + shape_str(b));
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(0) ? b.dim(1) : 0;
  Tensor c({n, m});
  const double* ap = a.data();
  const double* bp = b.data();
  double* cp = c.data();
#pragma omp parallel for schedule(static) if (n * k * m > 1u << 16)
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t l = 0; l < k; ++l) {
      const double av = ap[i * k + l];
      if (av == 0.0) continue;
      const double* brow = bp + l * m;
      double* crow = cp + i * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeMismatch("transpose: rank != 2");
  Tensor t({a.dim(1), a.dim(0)});
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t j = 0; j < a.dim(1); ++j) t.at2(j, i) = a.at2(i, j);
  return t;
}

// Lower Cholesky factor of a symmetric positive definite matrix.
// Throws NotPositiveDefinite when a pivot is not strictly positive.
inline Tensor cholesky(const Tensor& a) {
  if (a.rank() != 2 || a.dim(0) != a.dim(1)) throw ShapeMismatch("cholesky: not square");
  const std::size_t n = a.dim(0);
  Tensor l({n, n});
  for (std::size_t j = 0; j < n; ++j) {
    double d = a.at2(j, j);
    for (std::size_t k = 0; k < j; ++k) d -= l.at2(j, k) * l.at2(j, k);
    if (!(d > 0.0)) throw NotPositiveDefinite("cholesky: pivot " + std::to_string(j));
    const double ljj = std::sqrt(d);
    l.at2(j, j) = ljj;
#pragma omp parallel for schedule(static) if (n > 256)
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a.at2(i, j);
      const double* li = l.data() + i * n;
      const double* lj = l.data() + j * n;
      for (std::size_t k = 0; k < j; ++k) s -= li[k] * lj[k];
      l.at2(i, j) = s / ljj;
    }
  }
  return l;
}

// PSD-tolerant Cholesky: zero (or slightly negative) pivots produce a zero
// column instead of failing. Used for sampling from possibly-degenerate
// covariances so that zero covariance yields exactly zero factor.
inline Tensor cholesky_psd(const Tensor& a, double tol = 1e-12) {
  if (a.rank() != 2 || a.dim(0) != a.dim(1)) throw ShapeMismatch("cholesky_psd: not square");
  const std::size_t n = a.dim(0);
  double max_diag = 0.0;
  for (std::size_t i = 0; i < n; ++i) max_diag = std::max(max_diag, std::abs(a.at2(i, i)));
  const double cutoff = tol * std::max(max_diag, 1.0);
  Tensor l({n, n});
  for (std::size_t j = 0; j < n; ++j) {
    double d = a.at2(j, j);
    for (std::size_t k = 0; k < j; ++k) d -= l.at2(j, k) * l.at2(j, k);
    if (d <= cutoff) {
      if (d < -1e-6 * std::max(max_diag, 1.0))
        throw NotPositiveDefinite("cholesky_psd: strongly negative pivot");
      continue;  // column stays zero
    }
    const double ljj = std::sqrt(d);
    l.at2(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a.at2(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= l.at2(i, k) * l.at2(j, k);
      l.at2(i, j) = s / ljj;
    }
  }
  return l;
}

// Solve L X = B (lower triangular) or L^T X = B when trans.
inline Tensor solve_tri(const Tensor& l, const Tensor& b, bool trans) {
  if (l.rank() != 2 || l.dim(0) != l.dim(1)) throw ShapeMismatch("solve_tri: L not square");
  const std::size_t n = l.dim(0);
  Tensor x = b;
  const bool vec = (b.rank() == 1);
  const std::size_t m = vec ? 1 : b.dim(1);
  if ((vec ? b.dim(0) : b.dim(0)) != n) throw ShapeMismatch("solve_tri: size mismatch");
  double* xp = x.data();
  const double* lp = l.data();
  if (!trans) {
    for (std::size_t i = 0; i < n; ++i) {
      const double* li = lp + i * n;
#pragma omp parallel for schedule(static) if (n * m > 1u << 18)
      for (std::size_t c = 0; c < m; ++c) {
        double s = xp[i * m + c];
        for (std::size_t k = 0; k < i; ++k) s -= li[k] * xp[k * m + c];
        xp[i * m + c] = s / li[i];
      }
    }
  } else {
    for (std::size_t ii = n; ii-- > 0;) {
#pragma omp parallel for schedule(static) if (n * m > 1u << 18)
      for (std::size_t c = 0; c < m; ++c) {
        double s = xp[ii * m + c];
        for (std::size_t k = ii + 1; k < n; ++k) s -= lp[k * n + ii] * xp[k * m + c];
        xp[ii * m + c] = s / lp[ii * n + ii];
      }
    }
  }
  return x;
}

// Solve (L L^T) X = B given the lower factor L.
inline Tensor cho_solve(const Tensor& l, const Tensor& b) {
  return solve_tri(l, solve_tri(l, b, false), true);
}

inline double dot(const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel()) throw ShapeMismatch("dot: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += a[i] * b[i];
  return s;
}

inline Tensor add_diag(const Tensor& a, double jitter) {
  Tensor out = a;
  const std::size_t n = a.dim(0);
  for (std::size_t i = 0; i < n; ++i) out.at2(i, i) += jitter;
  return out;
}

// Cholesky with escalating jitter, 1e-8 up to 1e-4 in x10 steps.
inline Tensor cholesky_jittered(const Tensor& a, double* used_jitter = nullptr,
                                double first = 1e-8, double last = 1e-4) {
  try {
    Tensor l = linalg::cholesky(a);
    if (used_jitter) *used_jitter = 0.0;
    return l;
  } catch (const NotPositiveDefinite&) {
  }
  for (double j = first; j <= last * (1.0 + 1e-12); j *= 10.0) {
    try {
      Tensor l = linalg::cholesky(add_diag(a, j));
      if (used_jitter) *used_jitter = j;
      return l;
    } catch (const NotPositiveDefinite&) {
    }
  }
  throw NotPositiveDefinite("cholesky_jittered: failed at max jitter");
}

}  // namespace lambo::linalg
