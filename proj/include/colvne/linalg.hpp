#pragma once

#include <cmath>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "colvne/tensor.hpp"

namespace colvne {

// a[m×k] · b[k×n]
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k)
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  Tensor c({m, n});
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* pc = c.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = pc + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = pa[i * k + p];
      if (aip == 0.0) continue;
      const double* bp = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
  return c;
}

// aᵀ[k×m]ᵀ · b[k×n] -> [m×n]
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_tn");
  require_matrix(b, "matmul_tn");
  const std::size_t k = a.shape()[0], m = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k)
    throw ShapeError("matmul_tn: leading dimensions differ, " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  Tensor c({m, n});
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* pc = c.data().data();
  for (std::size_t p = 0; p < k; ++p) {
    const double* ap = pa + p * m;
    const double* bp = pb + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double api = ap[i];
      if (api == 0.0) continue;
      double* ci = pc + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += api * bp[j];
    }
  }
  return c;
}

// a[m×k] · b[n×k]ᵀ -> [m×n]
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
  if (b.shape()[1] != k)
    throw ShapeError("matmul_nt: trailing dimensions differ, " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  Tensor c({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    auto ai = a.row(i);
    for (std::size_t j = 0; j < n; ++j) {
      auto bj = b.row(j);
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      c(i, j) = s;
    }
  }
  return c;
}

inline Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  Tensor t({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) t(j, i) = a(i, j);
  return t;
}

struct RowNormalization {
  Tensor rows;
  std::vector<double> norms;  // original norms; 0 marks a substituted row
  std::size_t zero_rows = 0;
};

// Zero rows become e₁ and are counted instead of failing.
inline RowNormalization l2_normalize_rows_counted(const Tensor& h) {
  require_matrix(h, "l2_normalize_rows");
  RowNormalization out{Tensor(h.shape()), std::vector<double>(h.rows()), 0};
  for (std::size_t i = 0; i < h.rows(); ++i) {
    auto src = h.row(i);
    auto dst = out.rows.row(i);
    double ss = 0.0;
    for (double v : src) ss += v * v;
    const double norm = std::sqrt(ss);
    out.norms[i] = norm;
    if (norm == 0.0) {
      dst[0] = 1.0;
      ++out.zero_rows;
      continue;
    }
    for (std::size_t j = 0; j < src.size(); ++j) dst[j] = src[j] / norm;
  }
  return out;
}

inline Tensor l2_normalize_rows(const Tensor& h) { return l2_normalize_rows_counted(h).rows; }

struct EigenDecomposition {
  std::vector<double> eigenvalues;  // descending
  Tensor eigenvectors;              // column j pairs with eigenvalues[j]
  int sweeps = 0;
};

inline constexpr int kJacobiMaxSweeps = 100;
inline constexpr double kJacobiTolerance = 1e-12;

// Cyclic Jacobi. Converged when the largest off-diagonal entry is at most
// 1e-12·max(1, max|Z|).
inline EigenDecomposition eigh_symmetric(const Tensor& z) {
  require_matrix(z, "eigh_symmetric");
  const std::size_t n = z.shape()[0];
  if (z.shape()[1] != n) throw ShapeError("eigh_symmetric: matrix not square " + shape_str(z.shape()));
  if (!z.all_finite()) throw NumericalError("eigh_symmetric: non-finite input");

  const double scale = std::max(1.0, max_abs(z));
  Tensor a({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (std::abs(z(i, j) - z(j, i)) > 1e-9 * scale)
        throw ContractError("eigh_symmetric: input not symmetric at (" + std::to_string(i) + "," +
                            std::to_string(j) + ")");
      a(i, j) = 0.5 * (z(i, j) + z(j, i));
    }
  Tensor v = Tensor::identity(n);
  const double tol = kJacobiTolerance * scale;

  auto off_max = [&] {
    double m = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) m = std::max(m, std::abs(a(p, q)));
    return m;
  };

  int sweep = 0;
  double residual = off_max();
  while (residual > tol) {
    if (sweep == kJacobiMaxSweeps)
      throw NumericalError("eigh_symmetric: no convergence after " +
                           std::to_string(kJacobiMaxSweeps) +
                           " sweeps, residual " + std::to_string(residual));
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (std::abs(apq) <= 0.01 * tol) {
          a(p, q) = a(q, p) = 0.0;
          continue;
        }
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        a(p, q) = a(q, p) = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
    ++sweep;
    residual = off_max();
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t i, std::size_t j) { return a(i, i) > a(j, j); });

  EigenDecomposition out{std::vector<double>(n), Tensor({n, n}), sweep};
  for (std::size_t j = 0; j < n; ++j) {
    out.eigenvalues[j] = a(order[j], order[j]);
    for (std::size_t k = 0; k < n; ++k) out.eigenvectors(k, j) = v(k, order[j]);
  }
  return out;
}

// U·diag(w)·Uᵀ
inline Tensor spectral_compose(const Tensor& u, const std::vector<double>& w) {
  const std::size_t n = u.shape()[0];
  Tensor uw = u;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < w.size(); ++j) uw(i, j) *= w[j];
  return matmul_nt(uw, u);
}

}  // namespace colvne
