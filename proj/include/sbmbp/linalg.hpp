#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <utility>
#include <vector>

#include "sbmbp/error.hpp"

namespace sbmbp {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

struct SymmetricEigen {
  Vector values;   // unsorted, in Jacobi order
  Matrix vectors;  // column k pairs with values(k); orthonormal
  int sweeps = 0;
};

inline double off_diagonal_frobenius(const Matrix& a) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j)
      if (i != j) s += a(i, j) * a(i, j);
  return std::sqrt(s);
}

/// Cyclic Jacobi eigensolver for small dense symmetric matrices. Sweeps until
/// the off-diagonal Frobenius norm drops below `tol`.
inline SymmetricEigen jacobi_eigen(const Matrix& sym, double tol = 1e-12, int max_sweeps = 100) {
  const Eigen::Index n = sym.rows();
  if (sym.cols() != n) throw Error(ErrorCode::InvalidArgument, "jacobi_eigen: matrix not square");
  Matrix a = 0.5 * (sym + sym.transpose());
  Matrix v = Matrix::Identity(n, n);
  int sweep = 0;
  for (; sweep < max_sweeps && off_diagonal_frobenius(a) >= tol; ++sweep) {
    for (Eigen::Index p = 0; p < n - 1; ++p) {
      for (Eigen::Index q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (Eigen::Index k = 0; k < n; ++k) {
          const double akp = a(k, p);
          const double akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (Eigen::Index k = 0; k < n; ++k) {
          const double apk = a(p, k);
          const double aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        for (Eigen::Index k = 0; k < n; ++k) {
          const double vkp = v(k, p);
          const double vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }
  return {a.diagonal(), v, sweep};
}

/// Orthonormal basis (q x (q-1)) of the complement of the unit vector `u`,
/// taken from the columns of the Householder reflector mapping e_0 to u.
inline Matrix orthonormal_complement(const Vector& u) {
  const Eigen::Index n = u.size();
  Vector w = -u;
  w(0) += 1.0;  // w = e_0 - u
  Matrix h = Matrix::Identity(n, n);
  const double wn = w.squaredNorm();
  if (wn > 1e-30) h -= 2.0 * w * w.transpose() / wn;
  return h.rightCols(n - 1);
}

/// Euclidean projection of `v` onto the probability simplex.
inline Vector project_to_simplex(const Vector& v) {
  const auto n = static_cast<std::size_t>(v.size());
  std::vector<double> sorted(v.data(), v.data() + n);
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  double cumulative = 0.0;
  double shift = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    cumulative += sorted[k];
    const double candidate = (cumulative - 1.0) / static_cast<double>(k + 1);
    if (sorted[k] - candidate > 0.0) shift = candidate;
  }
  Vector out(v.size());
  for (Eigen::Index i = 0; i < v.size(); ++i) out(i) = std::max(v(i) - shift, 0.0);
  return out;
}

inline bool is_row_stochastic(const Matrix& m, double tol = 1e-12) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    if (std::fabs(m.row(i).sum() - 1.0) > tol) return false;
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      if (m(i, j) < -tol || m(i, j) > 1.0 + tol) return false;
  }
  return true;
}

inline int argmax(const Vector& v) {
  int best = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i)
    if (v(i) > v(best)) best = static_cast<int>(i);
  return best;
}

}  // namespace sbmbp
