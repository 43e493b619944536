#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <vector>

#include "tta/errors.hpp"
#include "tta/matrix.hpp"

namespace tta {

// Symmetric matrix stored dense row-major; construction symmetrizes.
struct SpdMatrix {
  std::size_t dim = 0;
  std::vector<double> data;

  SpdMatrix() = default;
  explicit SpdMatrix(std::size_t n) : dim(n), data(n * n, 0.0) {}

  static SpdMatrix from_matrix(const Matrix& m) {
    if (m.rows != m.cols) throw ShapeMismatch("SpdMatrix: not square");
    SpdMatrix s(m.rows);
    for (std::size_t i = 0; i < m.rows; ++i)
      for (std::size_t j = 0; j < m.cols; ++j)
        s.at(i, j) = 0.5 * (m(i, j) + m(j, i));
    return s;
  }

  static SpdMatrix identity(std::size_t n) {
    SpdMatrix s(n);
    for (std::size_t i = 0; i < n; ++i) s.at(i, i) = 1.0;
    return s;
  }

  double& at(std::size_t i, std::size_t j) { return data[i * dim + j]; }
  double at(std::size_t i, std::size_t j) const { return data[i * dim + j]; }

  Matrix as_matrix() const {
    Matrix m(dim, dim);
    m.data = data;
    return m;
  }
};

struct EigenPair {
  Matrix vectors;              // columns are eigenvectors
  std::vector<double> values;  // descending
};

// Channel-wise covariance of a C x T trial with the T-1 denominator.
inline SpdMatrix covariance(const Matrix& trial) {
  const std::size_t c = trial.rows, t = trial.cols;
  if (t < 2) throw DegenerateInput("covariance: needs T >= 2");
  if (!all_finite(trial)) throw DegenerateInput("covariance: non-finite entries");
  std::vector<double> mean(c, 0.0);
  for (std::size_t i = 0; i < c; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < t; ++j) s += trial(i, j);
    mean[i] = s / static_cast<double>(t);
  }
  SpdMatrix out(c);
  const double inv = 1.0 / static_cast<double>(t - 1);
  for (std::size_t i = 0; i < c; ++i) {
    for (std::size_t j = i; j < c; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < t; ++k)
        s += (trial(i, k) - mean[i]) * (trial(j, k) - mean[j]);
      out.at(i, j) = out.at(j, i) = s * inv;
    }
  }
  return out;
}

// Cyclic Jacobi eigensolver for symmetric matrices. Eigenvalues descending;
// each eigenvector's largest-magnitude component is made positive.
inline EigenPair sym_eig(const SpdMatrix& m, std::size_t max_sweeps = 100) {
  const std::size_t n = m.dim;
  Matrix a = m.as_matrix();
  Matrix v = Matrix::identity(n);

  auto off_norm = [&]() {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) s += a(i, j) * a(i, j);
    return std::sqrt(2.0 * s);
  };

  double scale = 0.0;
  for (double x : a.data) scale = std::max(scale, std::abs(x));
  const double tol = (scale > 0.0 ? scale : 1.0) * 1e-15 * static_cast<double>(n);

  std::size_t sweep = 0;
  while (off_norm() > tol) {
    if (sweep++ >= max_sweeps)
      throw NoConvergence("sym_eig: Jacobi sweep budget exceeded");
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (std::abs(apq) <= tol * 1e-3) continue;
        const double app = a(p, p), aqq = a(q, q);
        const double theta = (aqq - app) / (2.0 * apq);
        const double t_ = (theta >= 0.0 ? 1.0 : -1.0) /
                          (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double cs = 1.0 / std::sqrt(t_ * t_ + 1.0);
        const double sn = t_ * cs;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = cs * akp - sn * akq;
          a(k, q) = sn * akp + cs * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = cs * apk - sn * aqk;
          a(q, k) = sn * apk + cs * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = cs * vkp - sn * vkq;
          v(k, q) = sn * vkp + cs * vkq;
        }
      }
    }
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t i, std::size_t j) { return a(i, i) > a(j, j); });

  EigenPair out;
  out.values.resize(n);
  out.vectors = Matrix(n, n);
  for (std::size_t c = 0; c < n; ++c) {
    const std::size_t src = order[c];
    out.values[c] = a(src, src);
    std::size_t imax = 0;
    double vmax = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
      if (std::abs(v(r, src)) > vmax) {
        vmax = std::abs(v(r, src));
        imax = r;
      }
    }
    const double sign = v(imax, src) < 0.0 ? -1.0 : 1.0;
    for (std::size_t r = 0; r < n; ++r) out.vectors(r, c) = sign * v(r, src);
  }
  return out;
}

// U diag(max(lambda, floor))^{-1/2} U^T. eig_floor <= 0 selects the relative
// default 1e-10 * max(lambda). Flooring events are counted, not fatal.
inline Matrix inv_sqrt(const SpdMatrix& m, double eig_floor = 0.0,
                       std::size_t* floor_events = nullptr) {
  const EigenPair e = sym_eig(m);
  const std::size_t n = m.dim;
  double lmax = 0.0;
  for (double l : e.values) lmax = std::max(lmax, l);
  const double floor = eig_floor > 0.0 ? eig_floor : 1e-10 * std::max(lmax, 1e-300);
  Matrix out(n, n);
  for (std::size_t c = 0; c < n; ++c) {
    double l = e.values[c];
    if (l < floor) {
      l = floor;
      if (floor_events) ++*floor_events;
    }
    const double w = 1.0 / std::sqrt(l);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i; j < n; ++j) {
        const double add = w * e.vectors(i, c) * e.vectors(j, c);
        out(i, j) += add;
        if (i != j) out(j, i) += add;
      }
  }
  return out;
}

}  // namespace tta
