#include <gtest/gtest.h>

#include <cmath>

#include "sbmbp/model.hpp"
#include "sbmbp/model_io.hpp"
#include "support.hpp"

using namespace sbmbp;

namespace {

Matrix mat2(double a, double b, double c, double d) {
  Matrix m(2, 2);
  m << a, b, c, d;
  return m;
}

void expect_spectrum_invariants(const TransitionSpec& t, const Vector& pi, const Spectrum& s) {
  const int q = static_cast<int>(pi.size());
  for (int i = 0; i < q; ++i) {
    const Vector r = t.P * s.xi.col(i) - s.eigenvalues(i) * s.xi.col(i);
    EXPECT_LT(r.cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_LE(s.xi.col(i).norm(), pi.cwiseInverse().cwiseSqrt().maxCoeff() + 1e-10);
  }
  EXPECT_NEAR(s.eigenvalues(0), 1.0, 1e-12);
  EXPECT_LT((s.xi.col(0) - Vector::Ones(q)).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_LT((s.u.transpose() * s.u - Matrix::Identity(q, q)).cwiseAbs().maxCoeff(), 1e-10);
}

}  // namespace

TEST(DeriveTransition, SymmetricTwoCommunity) {
  ModelSpec spec{2, Vector::Constant(2, 0.5), mat2(4, 2, 2, 4), 100};
  const auto t = derive_transition(spec);
  EXPECT_NEAR(t.d, 3.0, 1e-14);
  EXPECT_LT((t.P - mat2(2.0 / 3, 1.0 / 3, 1.0 / 3, 2.0 / 3)).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_NEAR(t.d_pi, 0.03, 1e-15);
}

TEST(DeriveTransition, IdentityCase) {
  ModelSpec spec{3, Vector::Constant(3, 1.0 / 3), 9.0 * Matrix::Identity(3, 3), 10};
  const auto t = derive_transition(spec);
  EXPECT_NEAR(t.d, 3.0, 1e-12);
  EXPECT_LT((t.P - Matrix::Identity(3, 3)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(DeriveTransition, ElementwiseOracle) {
  // Condition-2 Q for pi = (0.5, 0.3, 0.2): Q = c (11^T + S) with S symmetric, S pi = 0.
  Vector pi(3);
  pi << 0.5, 0.3, 0.2;
  Matrix S(3, 3);
  S << 0.2, -0.1, -0.25, -0.1, 0.3, -0.2, -0.25, -0.2, 0.925;
  const Matrix A = Matrix::Identity(3, 3) - Vector::Ones(3) * pi.transpose();
  S = A * S * A.transpose();
  S = 0.5 * (S + S.transpose());
  ModelSpec spec{3, pi, 4.0 * (Matrix::Ones(3, 3) + 0.5 * S), 100};
  const auto t = derive_transition(spec);
  for (int i = 0; i < 3; ++i) {
    double d = 0.0;
    for (int j = 0; j < 3; ++j) d += spec.Q_scaled(i, j) * pi(j);
    EXPECT_NEAR(d, t.d, 1e-12);
    for (int j = 0; j < 3; ++j) EXPECT_NEAR(t.P(i, j), spec.Q_scaled(i, j) * pi(j) / d, 1e-12);
  }
}

TEST(DeriveTransition, Errors) {
  ModelSpec bad{2, Vector::Constant(2, 0.5), mat2(4, 2, 2, 8), 100};
  try {
    derive_transition(bad);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DegreeNotUniform);
  }
  ModelSpec asym{2, Vector::Constant(2, 0.5), mat2(4, 2, 3, 4), 100};
  try {
    derive_transition(asym);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NonSymmetricQ);
  }
}

TEST(Eigendecompose, IdentityMatrix) {
  TransitionSpec t{Matrix::Identity(3, 3), 3.0, 0.1};
  const Vector pi = Vector::Constant(3, 1.0 / 3);
  const auto s = eigendecompose(t, pi);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(s.eigenvalues(i), 1.0, 1e-12);
  expect_spectrum_invariants(t, pi, s);
}

TEST(Eigendecompose, SymmetricTwoByTwo) {
  TransitionSpec t{mat2(2.0 / 3, 1.0 / 3, 1.0 / 3, 2.0 / 3), 3.0, 0.03};
  const Vector pi = Vector::Constant(2, 0.5);
  const auto s = eigendecompose(t, pi);
  EXPECT_NEAR(s.eigenvalues(1), 1.0 / 3, 1e-12);
  EXPECT_NEAR(std::fabs(s.xi(0, 1)), 1.0, 1e-12);
  EXPECT_NEAR(s.xi(0, 1), -s.xi(1, 1), 1e-12);
  EXPECT_GT(s.xi.col(1).cwiseAbs().maxCoeff(), 0.0);
  expect_spectrum_invariants(t, pi, s);
  EXPECT_NEAR(s.ks_quantity, 1.0 / 3, 1e-12);
}

TEST(Eigendecompose, PowerIterationOracle) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const auto [spec, t] = oracle::random_reversible(4, 6.0, seed);
    const auto s = eigendecompose(t, spec.pi);
    expect_spectrum_invariants(t, spec.pi, s);
    const auto oracle = oracle::power_iteration_eigenvalues(t.P, spec.pi);
    for (int i = 0; i < 4; ++i) EXPECT_NEAR(s.eigenvalues(i), oracle[static_cast<std::size_t>(i)], 1e-9);
  }
}

TEST(Eigendecompose, CanonicalSign) {
  const auto [spec, t] = oracle::random_reversible(3, 4.0, 99);
  const auto s = eigendecompose(t, spec.pi);
  for (int i = 0; i < 3; ++i) {
    Eigen::Index arg;
    s.xi.col(i).cwiseAbs().maxCoeff(&arg);
    EXPECT_GT(s.xi(arg, i), 0.0);
  }
}

TEST(Eigendecompose, NotReversible) {
  TransitionSpec t;
  t.P = mat2(0.5, 0.5, 0.1, 0.9);
  t.d = 2;
  try {
    eigendecompose(t, Vector::Constant(2, 0.5));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NotReversible);
  }
}

TEST(CheckConditions, EqualRowsFailCondition1) {
  // P = 1 pi^T: all rows equal, lambda_2 = 0.
  Matrix M = Matrix::Zero(2, 2);
  const auto [spec, t] = perturbation_family(Vector::Constant(2, 0.5), M, 1.0, 4.0);
  const auto s = eigendecompose(t, spec.pi);
  const auto r = check_conditions(spec, t, s);
  EXPECT_FALSE(r.condition1());
  EXPECT_TRUE(r.delta_infinite);
}

TEST(CheckConditions, ZeroEntryFailsCondition3) {
  ModelSpec spec{2, Vector::Constant(2, 0.5), mat2(4, 0, 0, 4), 100};
  const auto t = derive_transition(spec);
  const auto s = eigendecompose(t, spec.pi);
  const auto r = check_conditions(spec, t, s);
  EXPECT_EQ(r.xi_floor, 0.0);
  EXPECT_FALSE(r.condition3());
}

TEST(CheckConditions, HandEvaluation) {
  ModelSpec spec{2, Vector::Constant(2, 0.5), mat2(16, 4, 4, 16), 1000};
  const auto t = derive_transition(spec);
  const auto s = eigendecompose(t, spec.pi);
  const auto r = check_conditions(spec, t, s, NoiseMatrix::uniform_mixing(2, 0.1));
  // P = [[0.8, 0.2], [0.2, 0.8]], lambda_2 = 0.6, ||P_1 - P_2||_1 = 1.2.
  const double delta = 1.2 / (2 * 0.6);
  EXPECT_NEAR(r.delta, delta, 1e-12);
  EXPECT_NEAR(r.xi_floor, 0.2, 1e-12);
  const double lhs = 2.0 * std::sqrt(2.0) * 1.0 / std::pow(0.2, 3) * 0.6;
  EXPECT_NEAR(r.taylor_lhs, lhs, 1e-9);
  EXPECT_NEAR(r.taylor_rhs, delta * delta * 4 / 8.0, 1e-12);
  EXPECT_EQ(r.taylor_constraint_ok, lhs < delta * delta * 0.5);
  EXPECT_TRUE(r.all_conditions());
}

TEST(CheckConditions, SingularNoiseFailsCondition4) {
  ModelSpec spec{2, Vector::Constant(2, 0.5), mat2(16, 4, 4, 16), 1000};
  const auto t = derive_transition(spec);
  const auto s = eigendecompose(t, spec.pi);
  EXPECT_FALSE(check_conditions(spec, t, s, NoiseMatrix(Matrix::Constant(2, 2, 0.5))).condition4());
}

TEST(PerturbationFamily, NoSignal) {
  const auto [spec, t] = perturbation_family(Vector::Constant(3, 1.0 / 3), Matrix::Zero(3, 3), 1.0, 5.0);
  const auto s = eigendecompose(t, spec.pi);
  EXPECT_NEAR(s.eigenvalues(1), 0.0, 1e-12);
  const auto [ks, ksq] = kesten_stigum(s, t.d);
  EXPECT_NEAR(ks, 0.0, 1e-20);
  (void)ksq;
}

TEST(PerturbationFamily, RecoversSymmetricModel) {
  const int q = 3;
  const double d = 9.0, a = 0.1;
  const Matrix M = a * (Matrix::Ones(q, q) - q * Matrix::Identity(q, q));
  const auto [spec, t] = perturbation_family(Vector::Constant(q, 1.0 / q), M, 1.0 / std::sqrt(d), d);
  const double off = spec.Q_scaled(0, 1);
  const double diag = spec.Q_scaled(0, 0);
  for (int i = 0; i < q; ++i)
    for (int j = 0; j < q; ++j) EXPECT_NEAR(spec.Q_scaled(i, j), i == j ? diag : off, 1e-12);
  EXPECT_LT(diag, off);  // a > 0 pushes mass off the diagonal
}

TEST(PerturbationFamily, RoundTrip) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const auto [spec, t] = oracle::random_reversible(4, 7.0, seed * 31);
    const auto back = derive_transition(spec);
    EXPECT_LT((back.P - t.P).cwiseAbs().maxCoeff(), 1e-10);
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) EXPECT_NEAR(back.d * back.P(i, j) / spec.pi(j), spec.Q_scaled(i, j), 1e-10);
  }
}

TEST(PerturbationFamily, EntriesOutOfRange) {
  const Matrix M = 2.0 * (Matrix::Ones(2, 2) - 2 * Matrix::Identity(2, 2));
  try {
    perturbation_family(Vector::Constant(2, 0.5), M, 1.0, 4.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::EntriesOutOfRange);
  }
}

TEST(KestenStigum, ClosedForms) {
  ModelSpec spec = symmetric_model(2, 16, 4, 1000);
  const auto t = derive_transition(spec);
  const auto s = eigendecompose(t, spec.pi);
  EXPECT_NEAR(s.eigenvalues(1), 0.6, 1e-12);
  EXPECT_NEAR(kesten_stigum(s, t.d).first, 3.6, 1e-12);
  TransitionSpec t3{mat2(2.0 / 3, 1.0 / 3, 1.0 / 3, 2.0 / 3), 3.0, 0.03};
  EXPECT_NEAR(kesten_stigum(eigendecompose(t3, Vector::Constant(2, 0.5)), 3.0).first, 1.0 / 3, 1e-12);
}

TEST(NoiseMatrix, DebiasIsUnbiasedUnderRowConvention) {
  Matrix D(3, 3);
  D << 0.8, 0.15, 0.05, 0.1, 0.7, 0.2, 0.3, 0.1, 0.6;
  const NoiseMatrix delta(D);
  Vector xi(3);
  xi << 1.3, -0.4, 2.0;
  const Vector w = delta.debias(xi);
  // E[w(tau) | sigma = b] = sum_c Delta(b, c) w(c)
  for (int b = 0; b < 3; ++b) EXPECT_NEAR(D.row(b).dot(w), xi(b), 1e-12);
}

TEST(NoiseMatrix, Validation) {
  EXPECT_THROW(NoiseMatrix(mat2(0.5, 0.6, 0.5, 0.5)), Error);
  EXPECT_TRUE(NoiseMatrix::identity(3).invertible());
  EXPECT_FALSE(NoiseMatrix(Matrix::Constant(2, 2, 0.5)).invertible());
  const auto u = NoiseMatrix::uniform_mixing(3, 0.3);
  EXPECT_NEAR(u(0, 0), 0.7 + 0.1, 1e-15);
  EXPECT_NEAR(u(0, 1), 0.1, 1e-15);
}

TEST(ModelIo, RoundTrip) {
  const auto spec = symmetric_model(3, 10, 2, 500);
  const auto j = to_json(spec);
  EXPECT_EQ(j.begin().key(), "q");
  const auto back = model_from_json(nlohmann::json::parse(j.dump()));
  EXPECT_EQ(back.q, 3);
  EXPECT_EQ(back.n, 500u);
  EXPECT_LT((back.Q_scaled - spec.Q_scaled).cwiseAbs().maxCoeff(), 1e-15);
}
