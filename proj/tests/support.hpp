#pragma once

// Independent oracles and generators shared by the unit and acceptance tests.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <queue>
#include <vector>

#include "sbmbp/estimators.hpp"
#include "sbmbp/model.hpp"
#include "sbmbp/rng.hpp"
#include "sbmbp/tree.hpp"

namespace sbmbp::oracle {

/// Random reversible model with stationary pi: P = 1 pi^T + S D_pi with S
/// symmetric and S pi = 0, shrunk until every entry of P lies in (0, 1).
inline std::pair<ModelSpec, TransitionSpec> random_reversible(int q, double d, std::uint64_t seed) {
  SplitMix64 eng(seed);
  Vector pi(q);
  for (int i = 0; i < q; ++i) pi(i) = 0.2 + uniform01(eng);
  pi /= pi.sum();
  Matrix S(q, q);
  for (int i = 0; i < q; ++i)
    for (int j = i; j < q; ++j) S(i, j) = S(j, i) = 2.0 * uniform01(eng) - 1.0;
  const Matrix A = Matrix::Identity(q, q) - Vector::Ones(q) * pi.transpose();
  S = A * S * A.transpose();
  S = 0.5 * (S + S.transpose());
  Matrix M = S * pi.asDiagonal();
  double scale = 1.0;
  for (;;) {
    const Matrix P = Vector::Ones(q) * pi.transpose() + scale * M;
    if (P.minCoeff() > 0.01 && P.maxCoeff() < 0.99) break;
    scale *= 0.8;
  }
  return perturbation_family(pi, M, scale, d);
}

/// Eigenvalues of a reversible P by power iteration with orthogonal deflation
/// on the symmetrized matrix, sorted by |lambda| descending.
inline std::vector<double> power_iteration_eigenvalues(const Matrix& P, const Vector& pi) {
  const int q = static_cast<int>(P.rows());
  const Vector s = pi.cwiseSqrt();
  Matrix A = s.asDiagonal() * P * s.cwiseInverse().asDiagonal();
  A = 0.5 * (A + A.transpose());
  // Shift to make the spectrum positive so the dominant pair is unique in sign.
  const double shift = 2.0;
  const Matrix B = A + shift * Matrix::Identity(q, q);
  SplitMix64 eng(0x5eed);
  std::vector<Vector> found;
  std::vector<double> shifted;
  auto orthogonalize = [&](Vector& v) {
    for (const auto& f : found) v -= f.dot(v) * f;
  };
  for (int k = 0; k < q; ++k) {
    Vector v(q);
    for (int i = 0; i < q; ++i) v(i) = uniform01(eng) - 0.5;
    orthogonalize(v);
    v.normalize();
    double lambda = 0.0;
    for (int it = 0; it < 20000; ++it) {
      Vector w = B * v;
      orthogonalize(w);
      const double nl = v.dot(w);
      w.normalize();
      const bool done = (w - v).norm() < 1e-15;
      v = w;
      lambda = nl;
      if (done) break;
    }
    shifted.push_back(lambda);
    found.push_back(v);
  }
  std::vector<double> out;
  for (double x : shifted) out.push_back(x - shift);
  std::sort(out.begin(), out.end(), [](double a, double b) {
    if (std::fabs(std::fabs(a) - std::fabs(b)) > 1e-9) return std::fabs(a) > std::fabs(b);
    return a > b;
  });
  return out;
}

/// Ordered pairs of depth-k nodes at tree distance 2*ell, by BFS from every
/// depth-k node over the undirected tree.
inline std::uint64_t leaf_paths_bfs(const BroadcastTree& tree, int ell, int k) {
  const std::size_t n = tree.size();
  std::vector<std::vector<std::size_t>> adj(n);
  for (std::size_t i = 1; i < n; ++i) {
    adj[i].push_back(tree.node(i).parent);
    adj[tree.node(i).parent].push_back(i);
  }
  std::uint64_t count = 0;
  for (std::size_t s = 0; s < n; ++s) {
    if (tree.node(s).depth != static_cast<std::uint32_t>(k)) continue;
    std::vector<int> dist(n, -1);
    std::queue<std::size_t> bfs;
    dist[s] = 0;
    bfs.push(s);
    while (!bfs.empty()) {
      const auto u = bfs.front();
      bfs.pop();
      for (auto w : adj[u])
        if (dist[w] < 0) {
          dist[w] = dist[u] + 1;
          bfs.push(w);
        }
    }
    for (std::size_t t = 0; t < n; ++t)
      if (t != s && tree.node(t).depth == static_cast<std::uint32_t>(k) && dist[t] == 2 * ell) ++count;
  }
  return count;
}

/// Builds a tree from a parent list in BFS order (parents[0] ignored).
inline BroadcastTree tree_from_parents(std::shared_ptr<const BroadcastParams> params,
                                       const std::vector<int>& parents, const std::vector<int>& sigma,
                                       const std::vector<int>& tau = {}) {
  std::vector<TreeNode> nodes(parents.size());
  int max_depth = 0;
  for (std::size_t i = 0; i < parents.size(); ++i) {
    auto& nd = nodes[i];
    if (i == 0) {
      nd.parent = kNoParent;
      nd.depth = 0;
    } else {
      nd.parent = static_cast<std::uint32_t>(parents[i]);
      nd.depth = nodes[nd.parent].depth + 1;
    }
    nd.sigma = sigma[i];
    nd.tau = tau.empty() ? kNoLabel : tau[i];
    max_depth = std::max<int>(max_depth, static_cast<int>(nd.depth));
  }
  return BroadcastTree::from_nodes(std::move(params), max_depth, std::move(nodes));
}

/// Every rooted tree shape (BFS layout, children contiguous) with at most
/// max_nodes nodes and depth at most max_depth, as parent lists. Shapes are
/// generated level by level as compositions of the next level's size over
/// the current level's nodes.
inline std::vector<std::vector<int>> enumerate_shapes(int max_nodes, int max_depth) {
  std::vector<std::vector<int>> out;
  struct State {
    std::vector<int> parents;
    int level_begin;
    int level_end;
    int depth;
  };
  std::vector<State> stack{{{-1}, 0, 1, 0}};
  while (!stack.empty()) {
    State s = stack.back();
    stack.pop_back();
    out.push_back(s.parents);
    if (s.depth == max_depth) continue;
    const int room = max_nodes - static_cast<int>(s.parents.size());
    const int width = s.level_end - s.level_begin;
    // Distribute c >= 1 children over `width` parents.
    std::vector<int> counts(static_cast<std::size_t>(width), 0);
    for (;;) {
      int idx = 0;
      while (idx < width) {
        int total = 0;
        for (int c : counts) total += c;
        if (total < room) {
          ++counts[static_cast<std::size_t>(idx)];
          break;
        }
        counts[static_cast<std::size_t>(idx)] = 0;
        ++idx;
      }
      if (idx == width) break;
      State next{s.parents, s.level_end, 0, s.depth + 1};
      for (int p = 0; p < width; ++p)
        for (int c = 0; c < counts[static_cast<std::size_t>(p)]; ++c) next.parents.push_back(s.level_begin + p);
      next.level_end = static_cast<int>(next.parents.size());
      stack.push_back(std::move(next));
    }
  }
  return out;
}

}  // namespace sbmbp::oracle
