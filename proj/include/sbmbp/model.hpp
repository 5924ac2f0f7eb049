#pragma once

// Block-model parameters, the broadcast transition matrix they induce, its
// spectrum in the pi-weighted normalization, and the model conditions.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "sbmbp/error.hpp"
#include "sbmbp/linalg.hpp"

namespace sbmbp {

/// Community prior pi and degree-scale edge intensities Q_scaled = n * Q.
struct ModelSpec {
  int q = 0;
  Vector pi;
  Matrix Q_scaled;
  std::uint64_t n = 0;

  /// Throws InvalidArgument / NonSymmetricQ when an invariant is violated.
  void validate() const {
    if (q < 2) throw Error(ErrorCode::InvalidArgument, "q must be >= 2");
    if (pi.size() != q || Q_scaled.rows() != q || Q_scaled.cols() != q)
      throw Error(ErrorCode::InvalidArgument, "pi / Q_scaled dimensions do not match q");
    if (n == 0) throw Error(ErrorCode::InvalidArgument, "n must be positive");
    for (int i = 0; i < q; ++i)
      if (!(pi(i) > 0.0)) throw Error(ErrorCode::InvalidArgument, "pi entries must be positive");
    if (std::fabs(pi.sum() - 1.0) > 1e-12)
      throw Error(ErrorCode::InvalidArgument, "pi must sum to 1");
    for (int i = 0; i < q; ++i) {
      for (int j = 0; j < q; ++j) {
        if (!(Q_scaled(i, j) >= 0.0))
          throw Error(ErrorCode::InvalidArgument, "Q_scaled entries must be nonnegative");
        if (std::fabs(Q_scaled(i, j) - Q_scaled(j, i)) > 1e-12)
          throw Error(ErrorCode::NonSymmetricQ, "Q_scaled is not symmetric");
      }
    }
  }
};

/// Broadcast transition P = Q D_pi / d_pi with uniform degree d.
struct TransitionSpec {
  Matrix P;
  double d = 0.0;
  double d_pi = 0.0;
};

/// Eigenpairs of P. Column i of `xi` is the right eigenvector for
/// eigenvalues(i), normalized xi_i(j) = pi_j^{-1/2} u_i(j) with {u_i}
/// orthonormal (columns of `u`). Index 0 is the trivial pair (1, ones).
struct Spectrum {
  Vector eigenvalues;
  Matrix xi;
  Matrix u;
  double ks_quantity = 0.0;  // lambda_2^2 d
  double ks_min = 0.0;       // lambda_q^2 d

  int q() const { return static_cast<int>(eigenvalues.size()); }
  double lambda(int i) const { return eigenvalues(i); }
  Vector eigenvector(int i) const { return xi.col(i); }
};

struct ConditionReport {
  double delta = 0.0;            // sharpest Condition-1 constant
  bool delta_infinite = false;   // lambda_2 == 0: no signal, Condition 1 fails vacuously
  double xi_floor = 0.0;         // min_ij P_ij
  double degree_uniformity_error = 0.0;
  bool noise_invertible = true;  // absent noise matrix counts as identity
  bool noise_supplied = false;
  double taylor_lhs = 0.0;
  double taylor_rhs = 0.0;
  bool taylor_constraint_ok = false;
  double degree_tolerance = 0.0;

  bool condition1() const { return !delta_infinite && delta > 0.0; }
  bool condition2() const { return degree_uniformity_error <= degree_tolerance; }
  bool condition3() const { return xi_floor > 0.0; }
  bool condition4() const { return noise_invertible; }
  bool all_conditions() const { return condition1() && condition2() && condition3() && condition4(); }
};

/// Row-stochastic noise matrix Delta(i, j) = P(tau = j | sigma = i).
class NoiseMatrix {
 public:
  NoiseMatrix() = default;
  explicit NoiseMatrix(Matrix delta) : delta_(std::move(delta)) {
    if (delta_.rows() != delta_.cols() || delta_.rows() < 1)
      throw Error(ErrorCode::InvalidArgument, "noise matrix must be square");
    if (!is_row_stochastic(delta_, 1e-12))
      throw Error(ErrorCode::InvalidArgument, "noise matrix must be row-stochastic");
  }

  static NoiseMatrix identity(int q) { return NoiseMatrix(Matrix::Identity(q, q)); }

  /// (1 - eps) I + eps / q * 11^T.
  static NoiseMatrix uniform_mixing(int q, double eps) {
    Matrix m = (1.0 - eps) * Matrix::Identity(q, q) + Matrix::Constant(q, q, eps / q);
    return NoiseMatrix(std::move(m));
  }

  const Matrix& matrix() const { return delta_; }
  int q() const { return static_cast<int>(delta_.rows()); }
  double operator()(int i, int j) const { return delta_(i, j); }
  double determinant() const { return delta_.determinant(); }
  bool invertible() const { return std::fabs(determinant()) > 1e-9; }

  /// Weights w with E[w(tau) | sigma = b] = xi(b), i.e. w = Delta^{-1} xi
  /// under the row convention above.
  Vector debias(const Vector& xi) const {
    if (!invertible()) throw Error(ErrorCode::SingularNoise, "|det Delta| <= 1e-9");
    return delta_.partialPivLu().solve(xi);
  }

 private:
  Matrix delta_;
};

struct TransitionOptions {
  double degree_rel_tol = 1e-9;
};

/// P_ij = Q_scaled_ij pi_j / d where d = sum_j Q_scaled_ij pi_j is row-independent.
inline TransitionSpec derive_transition(const ModelSpec& spec, TransitionOptions opts = {}) {
  spec.validate();
  const int q = spec.q;
  const Vector row_degree = spec.Q_scaled * spec.pi;
  const double d = row_degree.mean();
  if (!(d > 0.0)) throw Error(ErrorCode::DegreeNotUniform, "average degree is zero");
  for (int i = 0; i < q; ++i) {
    if (std::fabs(row_degree(i) - d) > opts.degree_rel_tol * d)
      throw Error(ErrorCode::DegreeNotUniform,
                  "row " + std::to_string(i) + " of Q_scaled*pi differs from the mean degree");
  }
  TransitionSpec t;
  t.d = d;
  t.d_pi = d / static_cast<double>(spec.n);
  t.P.resize(q, q);
  for (int i = 0; i < q; ++i)
    for (int j = 0; j < q; ++j) t.P(i, j) = spec.Q_scaled(i, j) * spec.pi(j) / d;
  return t;
}

namespace detail {

// Canonical sign: the entry of largest magnitude (first one on ties) is positive.
inline double canonical_sign(const Vector& v) {
  const double peak = v.cwiseAbs().maxCoeff();
  for (Eigen::Index k = 0; k < v.size(); ++k)
    if (std::fabs(v(k)) >= peak - 1e-12) return v(k) < 0.0 ? -1.0 : 1.0;
  return 1.0;
}

}  // namespace detail

/// Diagonalizes P through the symmetric matrix D^{1/2} P D^{-1/2}. The
/// trivial eigenvector sqrt(pi) is split off exactly and Jacobi runs on its
/// orthogonal complement, so xi_1 is the all-ones vector even when lambda = 1
/// is degenerate.
inline Spectrum eigendecompose(const TransitionSpec& t, const Vector& pi) {
  const auto q = static_cast<int>(t.P.rows());
  if (pi.size() != q) throw Error(ErrorCode::InvalidArgument, "pi dimension mismatch");
  for (int i = 0; i < q; ++i)
    for (int j = 0; j < q; ++j)
      if (std::fabs(pi(i) * t.P(i, j) - pi(j) * t.P(j, i)) > 1e-12)
        throw Error(ErrorCode::NotReversible, "detailed balance fails");

  const Vector sqrt_pi = pi.cwiseSqrt();
  const Matrix sym = sqrt_pi.asDiagonal() * t.P * sqrt_pi.cwiseInverse().asDiagonal();
  const Matrix basis = orthonormal_complement(sqrt_pi);
  const SymmetricEigen reduced = jacobi_eigen(basis.transpose() * sym * basis);

  std::vector<int> order(static_cast<std::size_t>(q - 1));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    const double la = reduced.values(a), lb = reduced.values(b);
    if (std::fabs(la) != std::fabs(lb)) return std::fabs(la) > std::fabs(lb);
    return la > lb;
  });

  Spectrum s;
  s.eigenvalues.resize(q);
  s.u.resize(q, q);
  s.xi.resize(q, q);
  s.eigenvalues(0) = 1.0;
  s.u.col(0) = sqrt_pi;
  for (int k = 0; k < q - 1; ++k) {
    s.eigenvalues(k + 1) = reduced.values(order[static_cast<std::size_t>(k)]);
    s.u.col(k + 1) = basis * reduced.vectors.col(order[static_cast<std::size_t>(k)]);
  }
  for (int k = 0; k < q; ++k) {
    Vector xi = s.u.col(k).cwiseQuotient(sqrt_pi);
    const double sign = detail::canonical_sign(xi);
    s.xi.col(k) = sign * xi;
    s.u.col(k) *= sign;
  }
  const double l2 = s.eigenvalues(1);
  const double lq = s.eigenvalues(q - 1);
  s.ks_quantity = l2 * l2 * t.d;
  s.ks_min = lq * lq * t.d;
  return s;
}

/// (lambda_2^2 d, lambda_q^2 d).
inline std::pair<double, double> kesten_stigum(const Spectrum& s, double d) {
  const double l2 = s.q() > 1 ? s.eigenvalues(1) : 0.0;
  const double lq = s.eigenvalues(s.q() - 1);
  return {l2 * l2 * d, lq * lq * d};
}

/// Evaluates Conditions 1-4 and the Taylor constraint. Failures are reported,
/// never thrown.
inline ConditionReport check_conditions(const ModelSpec& spec, const TransitionSpec& t,
                                        const Spectrum& s,
                                        const std::optional<NoiseMatrix>& delta = std::nullopt,
                                        TransitionOptions opts = {}) {
  const int q = spec.q;
  ConditionReport r;
  const double lambda2 = std::fabs(s.eigenvalues(1));

  double min_row_gap = std::numeric_limits<double>::infinity();
  for (int i = 0; i < q; ++i)
    for (int j = i + 1; j < q; ++j)
      min_row_gap = std::min(min_row_gap, (t.P.row(i) - t.P.row(j)).cwiseAbs().sum());
  if (lambda2 < 1e-14) {
    r.delta_infinite = true;
    r.delta = std::numeric_limits<double>::infinity();
  } else {
    r.delta = min_row_gap / (q * lambda2);
  }

  r.xi_floor = t.P.minCoeff();
  const Vector row_degree = spec.Q_scaled * spec.pi;
  for (int i = 0; i < q; ++i)
    r.degree_uniformity_error = std::max(r.degree_uniformity_error, std::fabs(row_degree(i) - t.d));
  r.degree_tolerance = opts.degree_rel_tol * t.d;

  if (delta) {
    r.noise_supplied = true;
    r.noise_invertible = delta->invertible();
  }

  const double pi_max = spec.pi.maxCoeff();
  const double pi_min = spec.pi.minCoeff();
  r.taylor_rhs = r.delta_infinite ? std::numeric_limits<double>::infinity()
                                  : r.delta * r.delta * q * q / 8.0;
  if (r.xi_floor > 0.0) {
    r.taylor_lhs = 2.0 * std::sqrt(2.0) * std::pow(pi_max, 1.5) * std::pow(pi_min, -1.5) /
                   std::pow(r.xi_floor, 3) * lambda2;
    r.taylor_constraint_ok = r.taylor_lhs < r.taylor_rhs;
  } else {
    r.taylor_lhs = std::numeric_limits<double>::infinity();
    r.taylor_constraint_ok = false;
  }
  return r;
}

/// Model family P = 1 pi^T + scale * M, returned with the Q_scaled that
/// induces it at average degree d (Q_scaled = d 11^T + d * scale * M D_pi^{-1}).
inline std::pair<ModelSpec, TransitionSpec> perturbation_family(const Vector& pi, const Matrix& M,
                                                                double scale, double d,
                                                                std::uint64_t n = 1000000) {
  const auto q = static_cast<int>(pi.size());
  if (M.rows() != q || M.cols() != q)
    throw Error(ErrorCode::InvalidArgument, "M dimension mismatch");
  if (!(scale > 0.0) || !(d > 0.0))
    throw Error(ErrorCode::InvalidArgument, "scale and d must be positive");
  for (int i = 0; i < q; ++i)
    if (std::fabs(M.row(i).sum()) > 1e-12)
      throw Error(ErrorCode::InvalidArgument, "rows of M must sum to 0");

  Matrix P = Vector::Ones(q) * pi.transpose() + scale * M;
  for (int i = 0; i < q; ++i)
    for (int j = 0; j < q; ++j)
      if (!(P(i, j) > 0.0 && P(i, j) < 1.0))
        throw Error(ErrorCode::EntriesOutOfRange, "perturbed P has an entry outside (0, 1)");

  ModelSpec spec;
  spec.q = q;
  spec.pi = pi;
  spec.n = n;
  spec.Q_scaled.resize(q, q);
  for (int i = 0; i < q; ++i)
    for (int j = 0; j < q; ++j) spec.Q_scaled(i, j) = d + d * scale * M(i, j) / pi(j);
  for (int i = 0; i < q; ++i)
    for (int j = i + 1; j < q; ++j) {
      if (std::fabs(spec.Q_scaled(i, j) - spec.Q_scaled(j, i)) > 1e-12 * std::max(1.0, d))
        throw Error(ErrorCode::NonSymmetricQ, "M D_pi^{-1} is not symmetric");
      const double avg = 0.5 * (spec.Q_scaled(i, j) + spec.Q_scaled(j, i));
      spec.Q_scaled(i, j) = spec.Q_scaled(j, i) = avg;
    }

  TransitionSpec t;
  t.P = std::move(P);
  t.d = d;
  t.d_pi = d / static_cast<double>(n);
  return {std::move(spec), std::move(t)};
}

/// Symmetric q-community model with intensities a (within) and b (across).
inline ModelSpec symmetric_model(int q, double a, double b, std::uint64_t n) {
  ModelSpec spec;
  spec.q = q;
  spec.pi = Vector::Constant(q, 1.0 / q);
  spec.Q_scaled = Matrix::Constant(q, q, b);
  spec.Q_scaled.diagonal().setConstant(a);
  spec.n = n;
  return spec;
}

}  // namespace sbmbp
