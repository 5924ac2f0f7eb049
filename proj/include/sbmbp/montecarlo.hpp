#pragma once

// Monte Carlo drivers over broadcast trees: reconstruction probabilities E_m
// (exact and noisy) and the error matrix between the exact and noisy root
// posteriors, with the second-moment identities it satisfies.

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "sbmbp/estimators.hpp"
#include "sbmbp/parallel.hpp"
#include "sbmbp/rng.hpp"
#include "sbmbp/tree.hpp"

namespace sbmbp {

/// Seeds of trial t: tree structure and labels, then noise.
inline std::uint64_t tree_seed(std::uint64_t seed, std::uint64_t trial) { return derive_seed(seed, trial, 0); }
inline std::uint64_t noise_seed(std::uint64_t seed, std::uint64_t trial) { return derive_seed(seed, trial, 1); }

struct EmEstimate {
  int m = 0;
  std::size_t trials = 0;
  double max_posterior = 0.0;  // mean of max_i X(i)
  double max_posterior_se = 0.0;
  double indicator = 0.0;      // mean of 1{argmax X = sigma_root}
  double indicator_se = 0.0;
  double form_gap_se = 0.0;    // SE of the paired difference of the two forms
};

/// Exact (sigma) and noisy (tau) reconstruction probabilities at depth m on
/// the same trees, plus the paired difference exact - noisy.
struct EmPair {
  EmEstimate exact;
  EmEstimate noisy;
  double diff = 0.0;
  double diff_se = 0.0;
};

namespace detail {

struct EmAcc {
  Moments max_post, indicator, gap;
  void merge(const EmAcc& o) {
    max_post.merge(o.max_post);
    indicator.merge(o.indicator);
    gap.merge(o.gap);
  }
  void add(const PosteriorVector& x, int truth) {
    const int guess = argmax(x);
    const double ind = guess == truth ? 1.0 : 0.0;
    max_post.add(x(guess));
    indicator.add(ind);
    gap.add(x(guess) - ind);
  }
  EmEstimate finish(int m) const {
    return {m, max_post.n, max_post.mean, max_post.se(), indicator.mean, indicator.se(), gap.se()};
  }
};

struct EmCurveAcc {
  std::vector<EmAcc> exact, noisy;
  std::vector<Moments> diff;
  void merge(const EmCurveAcc& o) {
    for (std::size_t i = 0; i < exact.size(); ++i) {
      exact[i].merge(o.exact[i]);
      noisy[i].merge(o.noisy[i]);
      diff[i].merge(o.diff[i]);
    }
  }
};

}  // namespace detail

/// E_m (delta == nullptr) or the noisy analogue, by both estimator forms.
inline EmEstimate estimate_E_m(std::shared_ptr<const BroadcastParams> params, int m, std::size_t trials,
                               std::uint64_t seed, const NoiseMatrix* delta = nullptr) {
  if (m < 0) throw Error(ErrorCode::InvalidRange, "m must be >= 0");
  if (trials < 1) throw Error(ErrorCode::InvalidArgument, "trials must be >= 1");
  auto acc = parallel_reduce(trials, detail::EmAcc{}, [&](detail::EmAcc& a, std::size_t t) {
    BroadcastTree tree = sample_tree(params, m, tree_seed(seed, t));
    if (delta) {
      tree = apply_noise(tree, *delta, noise_seed(seed, t));
      a.add(bp_posterior_noisy(tree, m, *delta), tree.node(0).sigma);
    } else {
      a.add(bp_posterior(tree, m), tree.node(0).sigma);
    }
  });
  return acc.finish(m);
}

/// Paired exact/noisy E_m for m = 0..max_m, all depths evaluated on the same
/// depth-max_m tree per trial.
inline std::vector<EmPair> estimate_E_curve(std::shared_ptr<const BroadcastParams> params, int max_m,
                                            std::size_t trials, std::uint64_t seed, const NoiseMatrix& delta) {
  if (max_m < 0) throw Error(ErrorCode::InvalidRange, "max_m must be >= 0");
  const auto depths = static_cast<std::size_t>(max_m) + 1;
  detail::EmCurveAcc init{std::vector<detail::EmAcc>(depths), std::vector<detail::EmAcc>(depths),
                          std::vector<Moments>(depths)};
  auto acc = parallel_reduce(trials, init, [&](detail::EmCurveAcc& a, std::size_t t) {
    const BroadcastTree tree = apply_noise(sample_tree(params, max_m, tree_seed(seed, t)), delta, noise_seed(seed, t));
    const int truth = tree.node(0).sigma;
    for (int m = 0; m <= max_m; ++m) {
      const auto x = bp_posterior(tree, m);
      const auto y = bp_posterior_noisy(tree, m, delta);
      const auto mi = static_cast<std::size_t>(m);
      a.exact[mi].add(x, truth);
      a.noisy[mi].add(y, truth);
      a.diff[mi].add(x.maxCoeff() - y.maxCoeff());
    }
  });
  std::vector<EmPair> out;
  for (int m = 0; m <= max_m; ++m) {
    const auto mi = static_cast<std::size_t>(m);
    out.push_back({acc.exact[mi].finish(m), acc.noisy[mi].finish(m), acc.diff[mi].mean, acc.diff[mi].se()});
  }
  return out;
}

/// E(i, j) = E[X(j) - X~(j) | sigma_root = i]; epsilon = max |E(i, j)|.
struct ErrorMatrix {
  int n = 0;
  std::size_t trials = 0;
  Matrix E;
  Matrix se;
  Vector label_fraction;  // empirical P(sigma_root = i)
  double epsilon = 0.0;
  double epsilon_se = 0.0;  // SE of the maximizing entry
};

/// One second-moment identity, tested as mean(Z) = 0 for a paired per-trial
/// statistic Z = lhs_sample - rhs_sample.
struct IdentityCheck {
  std::string name;  // diagonal | covariance | martingale
  int i = 0;
  int j = 0;
  double lhs = 0.0;
  double rhs = 0.0;
  double diff = 0.0;
  double diff_se = 0.0;
  bool within(double z) const { return std::fabs(diff) <= z * diff_se; }
};

struct ContractionLevel {
  ErrorMatrix matrix;
  std::vector<IdentityCheck> checks;
};

namespace detail {

struct LevelAcc {
  int q = 0;
  std::vector<Moments> cond;      // [label * q + coord] : D_coord given sigma = label
  std::vector<std::size_t> label_count;
  std::vector<Moments> diag_l, diag_r, diag_z;  // per i
  std::vector<Moments> cov_l, cov_r, cov_z;     // per (i, j)
  std::vector<Moments> mart_l, mart_r, mart_z;  // per i

  explicit LevelAcc(int q_ = 0) : q(q_) {
    const auto qs = static_cast<std::size_t>(q);
    cond.resize(qs * qs);
    label_count.assign(qs, 0);
    diag_l.resize(qs), diag_r.resize(qs), diag_z.resize(qs);
    cov_l.resize(qs * qs), cov_r.resize(qs * qs), cov_z.resize(qs * qs);
    mart_l.resize(qs), mart_r.resize(qs), mart_z.resize(qs);
  }
  void merge(const LevelAcc& o) {
    auto mv = [](std::vector<Moments>& a, const std::vector<Moments>& b) {
      for (std::size_t k = 0; k < a.size(); ++k) a[k].merge(b[k]);
    };
    mv(cond, o.cond);
    for (std::size_t k = 0; k < label_count.size(); ++k) label_count[k] += o.label_count[k];
    mv(diag_l, o.diag_l), mv(diag_r, o.diag_r), mv(diag_z, o.diag_z);
    mv(cov_l, o.cov_l), mv(cov_r, o.cov_r), mv(cov_z, o.cov_z);
    mv(mart_l, o.mart_l), mv(mart_r, o.mart_r), mv(mart_z, o.mart_z);
  }
  void add(const PosteriorVector& x, const PosteriorVector& y, int truth) {
    const auto qs = static_cast<std::size_t>(q);
    const auto t = static_cast<std::size_t>(truth);
    ++label_count[t];
    for (std::size_t j = 0; j < qs; ++j) {
      const auto jj = static_cast<Eigen::Index>(j);
      cond[t * qs + j].add(x(jj) - y(jj));
    }
    for (std::size_t i = 0; i < qs; ++i) {
      const auto ii = static_cast<Eigen::Index>(i);
      const double di = x(ii) - y(ii);
      const double hit_i = i == t ? di : 0.0;
      diag_l[i].add(di * di);
      diag_r[i].add(hit_i);
      diag_z[i].add(di * di - hit_i);
      const double sq = x(ii) * x(ii) - y(ii) * y(ii);
      mart_l[i].add(di * di);
      mart_r[i].add(sq);
      mart_z[i].add(di * di - sq);
      for (std::size_t j = 0; j < qs; ++j) {
        if (j == i) continue;
        const auto jj = static_cast<Eigen::Index>(j);
        const double dj = x(jj) - y(jj);
        const double hit_j = j == t ? di : 0.0;
        cov_l[i * qs + j].add(di * dj);
        cov_r[i * qs + j].add(hit_j);
        cov_z[i * qs + j].add(di * dj - hit_j);
      }
    }
  }
  ContractionLevel finish(int n) const {
    const auto qs = static_cast<std::size_t>(q);
    ContractionLevel out;
    ErrorMatrix& em = out.matrix;
    em.n = n;
    em.E = Matrix::Zero(q, q);
    em.se = Matrix::Zero(q, q);
    em.label_fraction = Vector::Zero(q);
    std::size_t total = 0;
    for (auto c : label_count) total += c;
    em.trials = total;
    for (std::size_t i = 0; i < qs; ++i) {
      em.label_fraction(static_cast<Eigen::Index>(i)) =
          total ? static_cast<double>(label_count[i]) / static_cast<double>(total) : 0.0;
      for (std::size_t j = 0; j < qs; ++j) {
        em.E(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = cond[i * qs + j].mean;
        em.se(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = cond[i * qs + j].se();
      }
    }
    Eigen::Index bi = 0, bj = 0;
    em.epsilon = em.E.cwiseAbs().maxCoeff(&bi, &bj);
    em.epsilon_se = em.se(bi, bj);
    for (std::size_t i = 0; i < qs; ++i) {
      out.checks.push_back({"diagonal", static_cast<int>(i), static_cast<int>(i), diag_l[i].mean, diag_r[i].mean,
                            diag_z[i].mean, diag_z[i].se()});
    }
    for (std::size_t i = 0; i < qs; ++i)
      for (std::size_t j = 0; j < qs; ++j)
        if (i != j)
          out.checks.push_back({"covariance", static_cast<int>(i), static_cast<int>(j), cov_l[i * qs + j].mean,
                                cov_r[i * qs + j].mean, cov_z[i * qs + j].mean, cov_z[i * qs + j].se()});
    for (std::size_t i = 0; i < qs; ++i) {
      out.checks.push_back({"martingale", static_cast<int>(i), static_cast<int>(i), mart_l[i].mean, mart_r[i].mean,
                            mart_z[i].mean, mart_z[i].se()});
    }
    return out;
  }
};

struct SweepAcc {
  std::vector<LevelAcc> levels;
  void merge(const SweepAcc& o) {
    for (std::size_t k = 0; k < levels.size(); ++k) levels[k].merge(o.levels[k]);
  }
};

}  // namespace detail

/// Error matrices and identity checks for n = 1..n_max, every depth
/// evaluated on the same depth-n_max tree per trial (X and X~ share the tree
/// and the noise draw).
///
/// Identities, with D = X - X~ and rows indexed by the true root label:
///   diagonal:   E[D_i^2]      = E[1{sigma=i} D_i] = pi_i E(i, i)
///   covariance: E[D_i D_j]    = E[1{sigma=j} D_i] = pi_j E(j, i)
///   martingale: E[D_i^2]      = E[X_i^2 - X~_i^2]
inline std::vector<ContractionLevel> error_matrix_sweep(std::shared_ptr<const BroadcastParams> params,
                                                        const NoiseMatrix& delta, int n_max, std::size_t trials,
                                                        std::uint64_t seed) {
  if (n_max < 1) throw Error(ErrorCode::InvalidRange, "n_max must be >= 1");
  if (trials < 1) throw Error(ErrorCode::InvalidArgument, "trials must be >= 1");
  const int q = params->q();
  detail::SweepAcc init{std::vector<detail::LevelAcc>(static_cast<std::size_t>(n_max), detail::LevelAcc(q))};
  auto acc = parallel_reduce(trials, init, [&](detail::SweepAcc& a, std::size_t t) {
    const BroadcastTree tree = apply_noise(sample_tree(params, n_max, tree_seed(seed, t)), delta, noise_seed(seed, t));
    const int truth = tree.node(0).sigma;
    for (int n = 1; n <= n_max; ++n)
      a.levels[static_cast<std::size_t>(n - 1)].add(bp_posterior(tree, n), bp_posterior_noisy(tree, n, delta), truth);
  });
  std::vector<ContractionLevel> out;
  for (int n = 1; n <= n_max; ++n) out.push_back(acc.levels[static_cast<std::size_t>(n - 1)].finish(n));
  return out;
}

/// Error matrix at a single depth n.
inline ErrorMatrix error_matrix_mc(std::shared_ptr<const BroadcastParams> params, const NoiseMatrix& delta, int n,
                                   std::size_t trials, std::uint64_t seed) {
  if (n < 1) throw Error(ErrorCode::InvalidRange, "n must be >= 1");
  const int q = params->q();
  detail::LevelAcc init(q);
  auto acc = parallel_reduce(trials, init, [&](detail::LevelAcc& a, std::size_t t) {
    const BroadcastTree tree = apply_noise(sample_tree(params, n, tree_seed(seed, t)), delta, noise_seed(seed, t));
    a.add(bp_posterior(tree, n), bp_posterior_noisy(tree, n, delta), tree.node(0).sigma);
  });
  return acc.finish(n).matrix;
}

}  // namespace sbmbp
