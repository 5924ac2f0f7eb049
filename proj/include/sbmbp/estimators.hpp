#pragma once

// Root-label estimators on broadcast trees: eigenvector-weighted majority,
// iterated majority, and the exact Bayes recursion (noisy and non-noisy),
// plus a brute-force enumeration oracle for the recursion.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string_view>
#include <vector>

#include "sbmbp/error.hpp"
#include "sbmbp/linalg.hpp"
#include "sbmbp/model.hpp"
#include "sbmbp/rng.hpp"
#include "sbmbp/tree.hpp"

namespace sbmbp {

/// A posterior over root labels; entries sum to 1.
using PosteriorVector = Vector;

enum class Method { WeightedMajority, IteratedMajority, Bp, BpNoisy };

constexpr std::string_view to_string(Method m) {
  switch (m) {
    case Method::WeightedMajority: return "weighted-majority";
    case Method::IteratedMajority: return "iterated-majority";
    case Method::Bp: return "bp";
    case Method::BpNoisy: return "bp-noisy";
  }
  return "unknown";
}

struct EstimatorOutcome {
  int guess = 0;
  std::vector<double> scores;  // per-label decision statistic
  Method method = Method::WeightedMajority;
  bool fallback = false;       // level was empty; guess is argmax pi
};

namespace detail {

inline void require_depth(const BroadcastTree& tree, int k) {
  if (k < 0 || k > tree.max_depth()) throw Error(ErrorCode::DepthExceeded, "depth exceeds tree depth");
}

inline void require_noise(const BroadcastTree& tree, const NoiseMatrix* delta) {
  if (delta == nullptr) throw Error(ErrorCode::InvalidArgument, "noisy mode needs a noise matrix");
  if (!delta->invertible()) throw Error(ErrorCode::SingularNoise, "|det Delta| <= 1e-9");
  if (!tree.has_noise()) throw Error(ErrorCode::MissingNoisyLabels, "tree carries no tau labels");
}

inline int prior_guess(const BroadcastParams& p) { return argmax(p.pi); }

/// Per-label counts on level k, read from sigma or tau.
inline Vector level_counts(const BroadcastTree& tree, int k, bool noisy) {
  Vector counts = Vector::Zero(tree.q());
  const auto [first, last] = tree.level_range(k);
  for (auto i = first; i < last; ++i) {
    const auto& n = tree.node(i);
    counts(noisy ? n.tau : n.sigma) += 1.0;
  }
  return counts;
}

/// Weight vectors for eigen-indices 1..q-1 (xi_i, or their noise-debiased form).
inline std::vector<Vector> eigen_weights(const Spectrum& s, bool noisy, const NoiseMatrix* delta) {
  std::vector<Vector> w;
  for (int i = 1; i < s.q(); ++i) w.push_back(noisy ? delta->debias(s.eigenvector(i)) : s.eigenvector(i));
  return w;
}

/// Squared normalized distance of the weighted sums to each root label's
/// expected center lambda_i^k d^k xi_i(l). Eigen-indices whose center scale
/// |lambda_i|^k d^k falls below 1e-6 d^k carry no signal and are skipped.
inline std::vector<double> center_distances(const std::vector<double>& sums, const Spectrum& s,
                                            double d, int k) {
  const int q = s.q();
  std::vector<double> dist(static_cast<std::size_t>(q), 0.0);
  const double dk = std::pow(d, k);
  for (int i = 1; i < q; ++i) {
    const double scale = std::pow(s.eigenvalues(i), k) * dk;
    if (std::fabs(scale) < 1e-6 * dk) continue;
    for (int l = 0; l < q; ++l) {
      const double z = (sums[static_cast<std::size_t>(i - 1)] - scale * s.xi(l, i)) / scale;
      dist[static_cast<std::size_t>(l)] += z * z;
    }
  }
  return dist;
}

inline int argmin_first(const std::vector<double>& v) {
  return static_cast<int>(std::min_element(v.begin(), v.end()) - v.begin());
}

}  // namespace detail

/// Sum over level-k nodes of w^T one_hot(label), with w = xi (sigma labels) or
/// w = Delta^{-1} xi (tau labels).
inline double weighted_sum(const BroadcastTree& tree, int k, const Vector& xi, bool noisy,
                           const NoiseMatrix* delta = nullptr) {
  detail::require_depth(tree, k);
  if (xi.size() != tree.q()) throw Error(ErrorCode::InvalidArgument, "weight dimension mismatch");
  if (noisy) {
    detail::require_noise(tree, delta);
    return delta->debias(xi).dot(detail::level_counts(tree, k, true));
  }
  return xi.dot(detail::level_counts(tree, k, false));
}

/// Classifies the root by the nearest expected center of the eigenvector
/// weighted level-k sums, aggregated over eigen-indices 2..q. Ties go to the
/// smaller label; an empty level falls back to argmax pi.
inline EstimatorOutcome majority_classify(const BroadcastTree& tree, const Spectrum& spectrum, int k,
                                          bool noisy = false, const NoiseMatrix* delta = nullptr) {
  detail::require_depth(tree, k);
  if (k < 1) throw Error(ErrorCode::InvalidRange, "majority needs k >= 1");
  if (noisy) detail::require_noise(tree, delta);
  EstimatorOutcome out;
  out.method = Method::WeightedMajority;
  if (tree.level_size(k) == 0) {
    out.fallback = true;
    out.guess = detail::prior_guess(tree.params());
    out.scores.assign(static_cast<std::size_t>(tree.q()), 0.0);
    return out;
  }
  const Vector counts = detail::level_counts(tree, k, noisy);
  const auto weights = detail::eigen_weights(spectrum, noisy, delta);
  std::vector<double> sums;
  for (const auto& w : weights) sums.push_back(w.dot(counts));
  out.scores = detail::center_distances(sums, spectrum, tree.params().d, k);
  out.guess = detail::argmin_first(out.scores);
  return out;
}

enum class ChildGuessRule { Argmax, Sample };

struct IteratedOptions {
  ChildGuessRule rule = ChildGuessRule::Argmax;
  std::uint64_t seed = 0;  // used by ChildGuessRule::Sample
  bool noisy = false;
  const NoiseMatrix* delta = nullptr;
};

/// Guesses each child's label by weighted majority on its depth-(k-1)
/// subtree, then picks the root label whose expected child histogram D * P_i
/// is nearest in L1 to the guessed histogram.
inline EstimatorOutcome iterated_majority_classify(const BroadcastTree& tree, const Spectrum& spectrum,
                                                   int k, const IteratedOptions& opts = {}) {
  detail::require_depth(tree, k);
  if (k < 2) throw Error(ErrorCode::InvalidRange, "iterated majority needs k >= 2");
  if (opts.noisy) detail::require_noise(tree, opts.delta);
  const BroadcastParams& params = tree.params();
  const int q = tree.q();
  EstimatorOutcome out;
  out.method = Method::IteratedMajority;

  const auto& root = tree.node(0);
  const std::uint32_t children = root.num_children;
  if (children == 0) {
    out.fallback = true;
    out.guess = detail::prior_guess(params);
    out.scores.assign(static_cast<std::size_t>(q), 0.0);
    return out;
  }

  // Level-k label counts grouped by depth-1 ancestor.
  std::vector<std::uint32_t> ancestor(tree.size(), 0);
  std::vector<double> counts(static_cast<std::size_t>(children) * static_cast<std::size_t>(q), 0.0);
  for (std::size_t i = 1; i < tree.size(); ++i) {
    const auto& n = tree.node(i);
    if (n.depth > static_cast<std::uint32_t>(k)) break;
    ancestor[i] = n.depth == 1 ? static_cast<std::uint32_t>(i) - root.first_child : ancestor[n.parent];
    if (n.depth == static_cast<std::uint32_t>(k)) {
      const int label = opts.noisy ? n.tau : n.sigma;
      counts[ancestor[i] * static_cast<std::size_t>(q) + static_cast<std::size_t>(label)] += 1.0;
    }
  }

  const auto weights = detail::eigen_weights(spectrum, opts.noisy, opts.delta);
  std::vector<double> histogram(static_cast<std::size_t>(q), 0.0);
  for (std::uint32_t c = 0; c < children; ++c) {
    const Eigen::Map<const Vector> child_counts(counts.data() + static_cast<std::size_t>(c) * q, q);
    int child_guess;
    if (child_counts.sum() == 0.0) {
      child_guess = detail::prior_guess(params);
    } else {
      std::vector<double> sums;
      for (const auto& w : weights) sums.push_back(w.dot(child_counts));
      const auto dist = detail::center_distances(sums, spectrum, params.d, k - 1);
      if (opts.rule == ChildGuessRule::Argmax) {
        child_guess = detail::argmin_first(dist);
      } else {
        std::vector<double> prob(static_cast<std::size_t>(q));
        const double lo = *std::min_element(dist.begin(), dist.end());
        for (int l = 0; l < q; ++l)
          prob[static_cast<std::size_t>(l)] = params.pi(l) * std::exp(-0.5 * (dist[static_cast<std::size_t>(l)] - lo));
        SplitMix64 eng(derive_seed(opts.seed, c));
        child_guess = sample_categorical(eng, prob);
      }
    }
    histogram[static_cast<std::size_t>(child_guess)] += 1.0;
  }

  out.scores.assign(static_cast<std::size_t>(q), 0.0);
  for (int i = 0; i < q; ++i) {
    double l1 = 0.0;
    for (int j = 0; j < q; ++j) l1 += std::fabs(histogram[static_cast<std::size_t>(j)] - children * params.P(i, j));
    out.scores[static_cast<std::size_t>(i)] = l1;
  }
  out.guess = detail::argmin_first(out.scores);
  return out;
}

namespace detail {

/// Upward Bayes recursion. Depth-m nodes take `leaf(node, x)`; every other
/// node combines its children with
///   X(i) ∝ pi_i * prod_children (P D_pi^{-1} X_child)_i.
/// Each child message and each running product is divided by its max entry;
/// the recursion is invariant to per-child positive scaling, so this only
/// prevents underflow.
template <class LeafInit>
PosteriorVector bayes_recursion(const BroadcastTree& tree, int m, LeafInit&& leaf) {
  require_depth(tree, m);
  const BroadcastParams& params = tree.params();
  const int q = params.q();
  const auto qs = static_cast<std::size_t>(q);

  std::vector<double> kernel(qs * qs);  // P D_pi^{-1}, row-major
  for (int a = 0; a < q; ++a)
    for (int b = 0; b < q; ++b) kernel[static_cast<std::size_t>(a) * qs + static_cast<std::size_t>(b)] = params.P(a, b) / params.pi(b);

  const std::size_t count = tree.level_range(m).second;  // nodes with depth <= m
  std::vector<double> acc(count * qs, 1.0);
  std::vector<double> x(qs), msg(qs);

  for (std::size_t i = count; i-- > 0;) {
    const auto& node = tree.node(i);
    if (node.depth > static_cast<std::uint32_t>(m)) continue;
    if (node.depth == static_cast<std::uint32_t>(m)) {
      leaf(node, x);
    } else {
      double total = 0.0;
      for (std::size_t l = 0; l < qs; ++l) {
        x[l] = params.pi(static_cast<Eigen::Index>(l)) * acc[i * qs + l];
        total += x[l];
      }
      if (!(total > 0.0)) throw Error(ErrorCode::ZeroMass, "posterior mass vanished");
      for (auto& v : x) v /= total;
    }
    if (i == 0) break;

    double peak = 0.0;
    for (std::size_t a = 0; a < qs; ++a) {
      double s = 0.0;
      for (std::size_t b = 0; b < qs; ++b) s += kernel[a * qs + b] * x[b];
      msg[a] = s;
      peak = std::max(peak, s);
    }
    if (!(peak > 0.0)) throw Error(ErrorCode::ZeroMass, "child message vanished");
    double* parent = acc.data() + static_cast<std::size_t>(node.parent) * qs;
    double parent_peak = 0.0;
    for (std::size_t a = 0; a < qs; ++a) {
      parent[a] *= msg[a] / peak;
      parent_peak = std::max(parent_peak, parent[a]);
    }
    if (parent_peak > 0.0)
      for (std::size_t a = 0; a < qs; ++a) parent[a] /= parent_peak;
  }
  return Eigen::Map<Vector>(x.data(), q);
}

}  // namespace detail

/// Exact posterior P(sigma_root = . | sigma on level m).
inline PosteriorVector bp_posterior(const BroadcastTree& tree, int m) {
  return detail::bayes_recursion(tree, m, [](const TreeNode& n, std::vector<double>& x) {
    std::fill(x.begin(), x.end(), 0.0);
    x[static_cast<std::size_t>(n.sigma)] = 1.0;
  });
}

/// Exact posterior P(sigma_root = . | tau on level m). Level-m nodes start
/// from the Bayes prior X(i) ∝ pi_i Delta(i, tau).
inline PosteriorVector bp_posterior_noisy(const BroadcastTree& tree, int m, const NoiseMatrix& delta) {
  if (!tree.has_noise()) throw Error(ErrorCode::MissingNoisyLabels, "tree carries no tau labels");
  if (delta.q() != tree.q()) throw Error(ErrorCode::InvalidArgument, "noise matrix dimension mismatch");
  const Vector& pi = tree.params().pi;
  return detail::bayes_recursion(tree, m, [&](const TreeNode& n, std::vector<double>& x) {
    double total = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      x[i] = pi(static_cast<Eigen::Index>(i)) * delta(static_cast<int>(i), n.tau);
      total += x[i];
    }
    if (!(total > 0.0)) throw Error(ErrorCode::DegenerateLeafPrior, "tau unreachable under Delta and pi");
    for (auto& v : x) v /= total;
  });
}

/// Enumeration oracle: sums pi(sigma_root) * prod_edges P over every labeling
/// of the nodes above level m (and of level m itself in noisy mode, weighted
/// by Delta(sigma, tau)). Guarded at q^(enumerated nodes) <= 1e7.
inline PosteriorVector exact_posterior_bruteforce(const BroadcastTree& tree, int m, bool noisy,
                                                  const NoiseMatrix* delta = nullptr) {
  detail::require_depth(tree, m);
  if (noisy) {
    if (delta == nullptr) throw Error(ErrorCode::InvalidArgument, "noisy mode needs a noise matrix");
    if (!tree.has_noise()) throw Error(ErrorCode::MissingNoisyLabels, "tree carries no tau labels");
  }
  const BroadcastParams& params = tree.params();
  const int q = params.q();
  const auto mm = static_cast<std::uint32_t>(m);

  std::vector<std::size_t> free_nodes, used_nodes;
  for (std::size_t i = 0; i < tree.size(); ++i) {
    const auto depth = tree.node(i).depth;
    if (depth > mm) continue;
    used_nodes.push_back(i);
    if (depth < mm || noisy) free_nodes.push_back(i);
  }
  double space = 1.0;
  for (std::size_t i = 0; i < free_nodes.size(); ++i) {
    space *= q;
    if (space > 1e7) throw Error(ErrorCode::TooLarge, "enumeration exceeds 1e7 assignments");
  }

  std::vector<int> label(tree.size(), 0);
  for (auto i : used_nodes) label[i] = tree.node(i).sigma;
  std::vector<int> odometer(free_nodes.size(), 0);
  Vector mass = Vector::Zero(q);
  for (;;) {
    for (std::size_t f = 0; f < free_nodes.size(); ++f) label[free_nodes[f]] = odometer[f];
    double w = params.pi(label[0]);
    for (auto i : used_nodes) {
      const auto& n = tree.node(i);
      if (i != 0) w *= params.P(label[n.parent], label[i]);
      if (noisy && n.depth == mm) w *= (*delta)(label[i], n.tau);
    }
    mass(label[0]) += w;
    std::size_t f = 0;
    for (; f < odometer.size(); ++f) {
      if (++odometer[f] < q) break;
      odometer[f] = 0;
    }
    if (f == odometer.size()) break;
  }
  const double total = mass.sum();
  if (!(total > 0.0)) throw Error(ErrorCode::ZeroMass, "observed labels have zero probability");
  return mass / total;
}

}  // namespace sbmbp
