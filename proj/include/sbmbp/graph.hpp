#pragma once

// Sparse stochastic block model: sampling, BFS balls, a spectral stand-in for
// the initial partitioner, partition alignment, noise-matrix estimation from
// high-degree vertices, and the local amplification pass that runs the noisy
// Bayes recursion on every vertex's ball.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "sbmbp/error.hpp"
#include "sbmbp/estimators.hpp"
#include "sbmbp/linalg.hpp"
#include "sbmbp/model.hpp"
#include "sbmbp/parallel.hpp"
#include "sbmbp/rng.hpp"
#include "sbmbp/tree.hpp"

namespace sbmbp {

using Vertex = std::uint32_t;

/// Undirected simple graph in CSR form with ground-truth labels.
class SbmInstance {
 public:
  SbmInstance() = default;

  /// Builds from an edge list; duplicates are merged, self-loops rejected.
  static SbmInstance from_edges(std::size_t n, int q, std::vector<std::pair<Vertex, Vertex>> edges,
                                std::vector<int> truth, std::uint64_t seed = 0) {
    if (q < 1) throw Error(ErrorCode::InvalidArgument, "q must be >= 1");
    if (truth.empty()) truth.assign(n, 0);
    if (truth.size() != n) throw Error(ErrorCode::InvalidArgument, "truth length must equal n");
    for (int l : truth)
      if (l < 0 || l >= q) throw Error(ErrorCode::OutOfRange, "truth label out of range");
    for (auto& [u, v] : edges) {
      if (u >= n || v >= n) throw Error(ErrorCode::OutOfRange, "edge endpoint out of range");
      if (u == v) throw Error(ErrorCode::InvalidArgument, "self-loops are not allowed");
      if (u > v) std::swap(u, v);
    }
    std::sort(edges.begin(), edges.end());
    edges.erase(std::unique(edges.begin(), edges.end()), edges.end());

    SbmInstance g;
    g.n_ = n;
    g.q_ = q;
    g.seed_ = seed;
    g.truth_ = std::move(truth);
    g.offsets_.assign(n + 1, 0);
    for (const auto& [u, v] : edges) {
      ++g.offsets_[u + 1];
      ++g.offsets_[v + 1];
    }
    for (std::size_t i = 0; i < n; ++i) g.offsets_[i + 1] += g.offsets_[i];
    g.adjacency_.resize(g.offsets_[n]);
    std::vector<std::size_t> fill(g.offsets_.begin(), g.offsets_.end() - 1);
    for (const auto& [u, v] : edges) {
      g.adjacency_[fill[u]++] = v;
      g.adjacency_[fill[v]++] = u;
    }
    for (std::size_t i = 0; i < n; ++i)
      std::sort(g.adjacency_.begin() + static_cast<std::ptrdiff_t>(g.offsets_[i]),
                g.adjacency_.begin() + static_cast<std::ptrdiff_t>(g.offsets_[i + 1]));
    return g;
  }

  std::size_t n() const { return n_; }
  int q() const { return q_; }
  std::uint64_t seed() const { return seed_; }
  const std::vector<int>& truth() const { return truth_; }
  std::size_t edge_count() const { return adjacency_.size() / 2; }
  std::size_t degree(Vertex v) const { return offsets_[v + 1] - offsets_[v]; }
  std::span<const Vertex> neighbors(Vertex v) const {
    return {adjacency_.data() + offsets_[v], offsets_[v + 1] - offsets_[v]};
  }
  bool has_edge(Vertex u, Vertex v) const {
    const auto nb = neighbors(u);
    return std::binary_search(nb.begin(), nb.end(), v);
  }

 private:
  std::size_t n_ = 0;
  int q_ = 1;
  std::uint64_t seed_ = 0;
  std::vector<std::size_t> offsets_{0};
  std::vector<Vertex> adjacency_;
  std::vector<int> truth_;
};

/// Community assignment; label kNoLabel marks a vertex excluded from a
/// masked partitioner call.
struct Partition {
  std::vector<int> labels;
  std::string source;  // black-box | algorithm1 | truth | planted
};

/// Labels i.i.d. from pi, then each unordered pair {u, v} is an edge with
/// probability Q_scaled(sigma_u, sigma_v) / n. Pairs inside each block pair
/// are visited by geometric skips, so the cost is O(n + edges).
inline SbmInstance sample_sbm(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  const std::size_t n = spec.n;
  const int q = spec.q;
  const double nd = static_cast<double>(n);
  for (int a = 0; a < q; ++a)
    for (int b = 0; b < q; ++b)
      if (spec.Q_scaled(a, b) / nd > 1.0) throw Error(ErrorCode::ProbabilityOverflow, "Q_scaled / n exceeds 1");

  std::vector<int> truth(n);
  std::vector<std::vector<Vertex>> block(static_cast<std::size_t>(q));
  {
    SplitMix64 eng(derive_seed(seed, hash_tag("labels")));
    const std::vector<double> pi(spec.pi.data(), spec.pi.data() + q);
    for (std::size_t v = 0; v < n; ++v) {
      truth[v] = sample_categorical(eng, pi);
      block[static_cast<std::size_t>(truth[v])].push_back(static_cast<Vertex>(v));
    }
  }

  std::vector<std::pair<Vertex, Vertex>> edges;
  for (int a = 0; a < q; ++a) {
    for (int b = a; b < q; ++b) {
      const double p = spec.Q_scaled(a, b) / nd;
      if (p <= 0.0) continue;
      const auto& A = block[static_cast<std::size_t>(a)];
      const auto& B = block[static_cast<std::size_t>(b)];
      const std::uint64_t na = A.size(), nb = B.size();
      const std::uint64_t total = a == b ? na * (na - (na > 0 ? 1 : 0)) / 2 : na * nb;
      if (total == 0) continue;
      SplitMix64 eng(derive_seed(seed, hash_tag("edges"), static_cast<std::uint64_t>(a * q + b)));
      const double log1m_p = p >= 1.0 ? -std::numeric_limits<double>::infinity() : std::log1p(-p);
      std::uint64_t idx = 0;
      bool first = true;
      for (;;) {
        const std::uint64_t skip = sample_geometric_skip(eng, log1m_p);
        if (skip >= total) break;
        const std::uint64_t step = first ? skip : skip + 1;
        if (idx + step >= total || idx + step < idx) break;
        idx += step;
        first = false;
        if (a == b) {
          // Pair index idx -> (r, c) with 0 <= c < r, idx = r(r-1)/2 + c.
          auto r = static_cast<std::uint64_t>((1.0 + std::sqrt(1.0 + 8.0 * static_cast<double>(idx))) / 2.0);
          while (r * (r - 1) / 2 > idx) --r;
          while ((r + 1) * r / 2 <= idx) ++r;
          const std::uint64_t c = idx - r * (r - 1) / 2;
          edges.emplace_back(A[r], A[c]);
        } else {
          edges.emplace_back(A[idx / nb], B[idx % nb]);
        }
      }
    }
  }
  return SbmInstance::from_edges(n, q, std::move(edges), std::move(truth), seed);
}

/// floor(ln n / (10 ln(2 max Q_scaled))), reading max Q at degree scale.
inline int coupling_radius(double n, const Matrix& Q_scaled) {
  if (!(n >= 2.0)) throw Error(ErrorCode::InvalidArgument, "n must be >= 2");
  const double qmax = Q_scaled.maxCoeff();
  if (!(qmax > 0.5)) throw Error(ErrorCode::InvalidArgument, "max Q_scaled must exceed 1/2");
  const double r = std::floor(std::log(n) / (10.0 * std::log(2.0 * qmax)));
  if (r < 1.0) throw Error(ErrorCode::DegenerateRadius, "coupling radius below 1; supply R explicitly");
  return static_cast<int>(r);
}

/// BFS ball B(v, R). members are in BFS order (center first); parent holds
/// the index (into members) of the first-visit parent, -1 for the center.
struct Ball {
  Vertex center = 0;
  int radius = 0;
  std::vector<Vertex> members;
  std::vector<int> distance;
  std::vector<int> parent;
  std::vector<Vertex> boundary;  // members at distance exactly R, empty when R = 0
  std::size_t internal_edges = 0;
  bool is_tree_like = true;      // internal_edges == |members| - 1
};

inline Ball ball(const SbmInstance& g, Vertex v, int R) {
  if (R < 0) throw Error(ErrorCode::InvalidArgument, "R must be >= 0");
  if (v >= g.n()) throw Error(ErrorCode::OutOfRange, "vertex out of range");
  Ball b;
  b.center = v;
  b.radius = R;
  std::unordered_map<Vertex, int> index;
  b.members.push_back(v);
  b.distance.push_back(0);
  b.parent.push_back(-1);
  index.emplace(v, 0);
  for (std::size_t head = 0; head < b.members.size(); ++head) {
    const int dist = b.distance[head];
    if (dist == R) continue;
    for (Vertex w : g.neighbors(b.members[head])) {
      if (index.contains(w)) continue;
      index.emplace(w, static_cast<int>(b.members.size()));
      b.members.push_back(w);
      b.distance.push_back(dist + 1);
      b.parent.push_back(static_cast<int>(head));
    }
  }
  std::size_t degree_sum = 0;
  for (std::size_t i = 0; i < b.members.size(); ++i) {
    if (R > 0 && b.distance[i] == R) b.boundary.push_back(b.members[i]);
    for (Vertex w : g.neighbors(b.members[i]))
      if (index.contains(w)) ++degree_sum;
  }
  b.internal_edges = degree_sum / 2;
  b.is_tree_like = b.internal_edges + 1 == b.members.size();
  return b;
}

/// The ball as a broadcast tree rooted at the center, keeping only
/// first-visit BFS parent edges (other edges are dropped). sigma comes from
/// `sigma`, tau from `tau`; negative tau entries become 0 (they are never read
/// at depths below R).
inline BroadcastTree ball_to_tree(const Ball& b, std::shared_ptr<const BroadcastParams> params,
                                  const std::vector<int>& sigma, const std::vector<int>& tau) {
  std::vector<TreeNode> nodes(b.members.size());
  for (std::size_t i = 0; i < b.members.size(); ++i) {
    auto& n = nodes[i];
    n.parent = b.parent[i] < 0 ? kNoParent : static_cast<std::uint32_t>(b.parent[i]);
    n.depth = static_cast<std::uint32_t>(b.distance[i]);
    n.sigma = sigma[b.members[i]];
    n.tau = std::max(0, tau[b.members[i]]);
  }
  return BroadcastTree::from_nodes(std::move(params), b.radius, std::move(nodes));
}

/// Fraction of sampled vertices whose radius-R ball is tree-like.
inline double tree_like_rate(const SbmInstance& g, int R, std::size_t samples, std::uint64_t seed) {
  if (g.n() == 0 || samples == 0) return 1.0;
  SplitMix64 eng(derive_seed(seed, hash_tag("tree-like")));
  std::size_t hits = 0;
  for (std::size_t s = 0; s < samples; ++s) {
    const auto v = static_cast<Vertex>(uniform_index(eng, g.n()));
    if (ball(g, v, R).is_tree_like) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(samples);
}

// ---------------------------------------------------------------------------
// Alignment and accuracy

/// Minimum-cost assignment on a square matrix; returns col[row].
inline std::vector<int> hungarian_min(const Matrix& cost) {
  const int n = static_cast<int>(cost.rows());
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<std::size_t>(n + 1), 0.0), v(static_cast<std::size_t>(n + 1), 0.0);
  std::vector<int> p(static_cast<std::size_t>(n + 1), 0), way(static_cast<std::size_t>(n + 1), 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<std::size_t>(n + 1), inf);
    std::vector<char> used(static_cast<std::size_t>(n + 1), 0);
    do {
      used[static_cast<std::size_t>(j0)] = 1;
      const int i0 = p[static_cast<std::size_t>(j0)];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        const auto js = static_cast<std::size_t>(j);
        if (used[js]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[static_cast<std::size_t>(i0)] - v[js];
        if (cur < minv[js]) {
          minv[js] = cur;
          way[js] = j0;
        }
        if (minv[js] < delta) {
          delta = minv[js];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        const auto js = static_cast<std::size_t>(j);
        if (used[js]) {
          u[static_cast<std::size_t>(p[js])] += delta;
          v[js] -= delta;
        } else {
          minv[js] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<std::size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<std::size_t>(j0)];
      p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> col(static_cast<std::size_t>(n), 0);
  for (int j = 1; j <= n; ++j) col[static_cast<std::size_t>(p[static_cast<std::size_t>(j)] - 1)] = j - 1;
  return col;
}

/// confusion(c, r) = #{v : candidate(v) = c, reference(v) = r} over vertices
/// with both labels set and not excluded.
inline Matrix confusion_matrix(const Partition& reference, const Partition& candidate, int q,
                               const std::vector<char>* exclude = nullptr) {
  if (reference.labels.size() != candidate.labels.size())
    throw Error(ErrorCode::InvalidArgument, "partitions differ in length");
  Matrix c = Matrix::Zero(q, q);
  for (std::size_t v = 0; v < reference.labels.size(); ++v) {
    if (exclude && (*exclude)[v]) continue;
    const int r = reference.labels[v], k = candidate.labels[v];
    if (r < 0 || k < 0) continue;
    if (r >= q || k >= q) throw Error(ErrorCode::OutOfRange, "label out of range");
    c(k, r) += 1.0;
  }
  return c;
}

inline double permutation_score(const Matrix& confusion, const std::vector<int>& perm) {
  double s = 0.0;
  for (std::size_t c = 0; c < perm.size(); ++c) s += confusion(static_cast<Eigen::Index>(c), perm[c]);
  return s;
}

/// Permutation perm (perm[candidate label] = reference label) maximizing
/// agreement. Exhaustive in lexicographic order for q <= 8 (first maximum
/// wins), Hungarian assignment above.
inline std::vector<int> align_confusion(const Matrix& confusion) {
  const int q = static_cast<int>(confusion.rows());
  std::vector<int> perm(static_cast<std::size_t>(q));
  std::iota(perm.begin(), perm.end(), 0);
  if (q <= 8) {
    std::vector<int> best = perm;
    double best_score = permutation_score(confusion, perm);
    while (std::next_permutation(perm.begin(), perm.end())) {
      const double s = permutation_score(confusion, perm);
      if (s > best_score) {
        best_score = s;
        best = perm;
      }
    }
    return best;
  }
  return hungarian_min(Matrix::Constant(q, q, confusion.maxCoeff()) - confusion);
}

inline std::vector<int> align_partitions(const Partition& reference, const Partition& candidate, int q,
                                         const std::vector<char>* exclude = nullptr) {
  return align_confusion(confusion_matrix(reference, candidate, q, exclude));
}

inline Partition relabel(const Partition& p, const std::vector<int>& perm) {
  Partition out{p.labels, p.source};
  for (auto& l : out.labels)
    if (l >= 0) l = perm[static_cast<std::size_t>(l)];
  return out;
}

/// Fraction of vertices labeled correctly under the best label permutation.
inline double overlap_accuracy(const Partition& est, const Partition& truth, int q) {
  const auto n = truth.labels.size();
  if (n == 0) return 1.0;
  const Matrix c = confusion_matrix(truth, est, q);
  return permutation_score(c, align_confusion(c)) / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Spectral stand-in partitioner

struct BlackBoxOptions {
  int restarts = 20;            // k-means restarts
  int extra_vectors = 4;        // block size = q + extra_vectors
  int max_iterations = 400;     // cold start
  int warm_iterations = 30;     // warm start
  double tol = 1e-6;            // relative Ritz residual
  const Vector* pi = nullptr;   // rebalance target; none = no rebalancing
  const std::vector<char>* exclude = nullptr;  // masked vertices
  const Matrix* warm_start = nullptr;          // n x block basis
};

struct BlackBoxResult {
  Partition partition;
  Matrix basis;       // n x block Ritz vectors, sorted by |value|
  Vector ritz_values;
  int iterations = 0;
};

namespace detail {

inline void masked_adjacency_times(const SbmInstance& g, const std::vector<char>* exclude, const Matrix& x,
                                   Matrix& y) {
  y.setZero(x.rows(), x.cols());
  const auto n = static_cast<Vertex>(g.n());
  for (Vertex v = 0; v < n; ++v) {
    if (exclude && (*exclude)[v]) continue;
    for (Vertex w : g.neighbors(v)) {
      if (exclude && (*exclude)[w]) continue;
      y.row(v) += x.row(w);
    }
  }
}

/// Lloyd iterations from k-means++ seeds; returns (labels, inertia).
inline std::pair<std::vector<int>, double> kmeans_once(const Matrix& pts, int k, SplitMix64& eng,
                                                       Matrix& centers) {
  const Eigen::Index n = pts.rows(), dim = pts.cols();
  centers.setZero(k, dim);
  std::vector<double> d2(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
  centers.row(0) = pts.row(static_cast<Eigen::Index>(uniform_index(eng, static_cast<std::uint64_t>(n))));
  for (int c = 1; c < k; ++c) {
    for (Eigen::Index i = 0; i < n; ++i)
      d2[static_cast<std::size_t>(i)] = std::min(d2[static_cast<std::size_t>(i)], (pts.row(i) - centers.row(c - 1)).squaredNorm());
    double total = 0.0;
    for (double v : d2) total += v;
    Eigen::Index pick = static_cast<Eigen::Index>(uniform_index(eng, static_cast<std::uint64_t>(n)));
    if (total > 0.0) pick = sample_categorical(eng, std::span<const double>(d2));
    centers.row(c) = pts.row(pick);
  }
  std::vector<int> label(static_cast<std::size_t>(n), -1);
  double inertia = 0.0;
  for (int iter = 0; iter < 100; ++iter) {
    bool changed = false;
    inertia = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      int best = 0;
      double bd = std::numeric_limits<double>::infinity();
      for (int c = 0; c < k; ++c) {
        const double dd = (pts.row(i) - centers.row(c)).squaredNorm();
        if (dd < bd) {
          bd = dd;
          best = c;
        }
      }
      inertia += bd;
      if (label[static_cast<std::size_t>(i)] != best) {
        label[static_cast<std::size_t>(i)] = best;
        changed = true;
      }
    }
    if (!changed) break;
    Matrix sum = Matrix::Zero(k, dim);
    std::vector<std::size_t> count(static_cast<std::size_t>(k), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      sum.row(label[static_cast<std::size_t>(i)]) += pts.row(i);
      ++count[static_cast<std::size_t>(label[static_cast<std::size_t>(i)])];
    }
    for (int c = 0; c < k; ++c)
      if (count[static_cast<std::size_t>(c)] > 0) centers.row(c) = sum.row(c) / static_cast<double>(count[static_cast<std::size_t>(c)]);
  }
  return {label, inertia};
}

/// Largest-remainder integer targets summing to total.
inline std::vector<std::size_t> proportional_targets(const Vector& pi, std::size_t total) {
  const auto q = static_cast<std::size_t>(pi.size());
  std::vector<std::size_t> t(q);
  std::vector<std::pair<double, std::size_t>> rem;
  std::size_t used = 0;
  for (std::size_t i = 0; i < q; ++i) {
    const double exact = pi(static_cast<Eigen::Index>(i)) * static_cast<double>(total);
    t[i] = static_cast<std::size_t>(std::floor(exact));
    used += t[i];
    rem.emplace_back(-(exact - std::floor(exact)), i);
  }
  std::sort(rem.begin(), rem.end());
  for (std::size_t k = 0; used < total; ++k, ++used) ++t[rem[k % q].second];
  return t;
}

/// Maps clusters to communities by size order (largest cluster to largest
/// pi), then moves vertices from over-full to under-full communities,
/// smallest distance increase first, until sizes match the pi targets.
inline void rebalance(std::vector<int>& label, const Matrix& pts, const Matrix& centers, const Vector& pi) {
  const int q = static_cast<int>(pi.size());
  const auto qs = static_cast<std::size_t>(q);
  std::vector<std::size_t> size(qs, 0);
  for (int l : label) ++size[static_cast<std::size_t>(l)];
  std::vector<int> by_size(qs), by_pi(qs);
  std::iota(by_size.begin(), by_size.end(), 0);
  std::iota(by_pi.begin(), by_pi.end(), 0);
  std::stable_sort(by_size.begin(), by_size.end(), [&](int a, int b) { return size[static_cast<std::size_t>(a)] > size[static_cast<std::size_t>(b)]; });
  std::stable_sort(by_pi.begin(), by_pi.end(), [&](int a, int b) { return pi(a) > pi(b); });
  std::vector<int> to_comm(qs);
  Matrix comm_center(q, centers.cols());
  for (std::size_t r = 0; r < qs; ++r) {
    to_comm[static_cast<std::size_t>(by_size[r])] = by_pi[r];
    comm_center.row(by_pi[r]) = centers.row(by_size[r]);
  }
  for (auto& l : label) l = to_comm[static_cast<std::size_t>(l)];

  const auto target = proportional_targets(pi, label.size());
  std::vector<std::size_t> count(qs, 0);
  for (int l : label) ++count[static_cast<std::size_t>(l)];
  for (int round = 0; round < q; ++round) {
    struct Move {
      double margin;
      std::size_t v;
      int to;
    };
    std::vector<Move> moves;
    for (std::size_t v = 0; v < label.size(); ++v) {
      const int from = label[v];
      if (count[static_cast<std::size_t>(from)] <= target[static_cast<std::size_t>(from)]) continue;
      const double base = (pts.row(static_cast<Eigen::Index>(v)) - comm_center.row(from)).squaredNorm();
      for (int to = 0; to < q; ++to) {
        if (count[static_cast<std::size_t>(to)] >= target[static_cast<std::size_t>(to)]) continue;
        moves.push_back({(pts.row(static_cast<Eigen::Index>(v)) - comm_center.row(to)).squaredNorm() - base, v, to});
      }
    }
    if (moves.empty()) break;
    std::sort(moves.begin(), moves.end(), [](const Move& a, const Move& b) {
      if (a.margin != b.margin) return a.margin < b.margin;
      if (a.v != b.v) return a.v < b.v;
      return a.to < b.to;
    });
    std::vector<char> moved(label.size(), 0);
    for (const auto& m : moves) {
      const auto from = static_cast<std::size_t>(label[m.v]);
      const auto to = static_cast<std::size_t>(m.to);
      if (moved[m.v] || count[from] <= target[from] || count[to] >= target[to]) continue;
      label[m.v] = m.to;
      --count[from];
      ++count[to];
      moved[m.v] = 1;
    }
  }
}

}  // namespace detail

/// Top-q adjacency eigenvectors (by |eigenvalue|) by block power iteration
/// with Rayleigh-Ritz, k-means on their rows, then rebalancing toward pi.
/// Excluded vertices are removed from the graph and labeled kNoLabel.
inline BlackBoxResult black_box_partition(const SbmInstance& g, int q, std::uint64_t seed,
                                          const BlackBoxOptions& opts = {}) {
  if (q < 2) throw Error(ErrorCode::InvalidArgument, "q must be >= 2");
  const auto n = static_cast<Eigen::Index>(g.n());
  const auto& ex = opts.exclude;
  auto excluded = [&](Eigen::Index v) { return ex && (*ex)[static_cast<std::size_t>(v)]; };
  BlackBoxResult out;
  out.partition.source = "black-box";
  out.partition.labels.assign(g.n(), kNoLabel);

  std::vector<Eigen::Index> active;
  for (Eigen::Index v = 0; v < n; ++v)
    if (!excluded(v)) active.push_back(v);
  const auto na = static_cast<Eigen::Index>(active.size());
  if (na == 0) return out;
  const Eigen::Index block = std::min<Eigen::Index>(q + opts.extra_vectors, na);

  SplitMix64 eng(derive_seed(seed, hash_tag("black-box")));
  Matrix x(n, block);
  int budget = opts.max_iterations;
  if (opts.warm_start && opts.warm_start->rows() == n && opts.warm_start->cols() == block) {
    x = *opts.warm_start;
    budget = opts.warm_iterations;
  } else {
    for (Eigen::Index j = 0; j < block; ++j)
      for (Eigen::Index v = 0; v < n; ++v) x(v, j) = uniform01(eng) - 0.5;
  }
  for (Eigen::Index v = 0; v < n; ++v)
    if (excluded(v)) x.row(v).setZero();

  Matrix y, qmat;
  Vector theta = Vector::Zero(block);
  int iter = 0;
  for (; iter < budget; ++iter) {
    detail::masked_adjacency_times(g, ex, x, y);
    Eigen::HouseholderQR<Matrix> qr(y);
    qmat = qr.householderQ() * Matrix::Identity(n, block);
    detail::masked_adjacency_times(g, ex, qmat, y);
    const Matrix h = qmat.transpose() * y;
    Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (h + h.transpose()));
    std::vector<Eigen::Index> order(static_cast<std::size_t>(block));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
      return std::fabs(es.eigenvalues()(a)) > std::fabs(es.eigenvalues()(b));
    });
    Matrix vecs(block, block);
    for (Eigen::Index k = 0; k < block; ++k) {
      vecs.col(k) = es.eigenvectors().col(order[static_cast<std::size_t>(k)]);
      theta(k) = es.eigenvalues()(order[static_cast<std::size_t>(k)]);
    }
    x = qmat * vecs;
    const Matrix ax = y * vecs;
    double worst = 0.0;
    const double scale = std::max(std::fabs(theta(0)), 1e-300);
    for (Eigen::Index k = 0; k < std::min<Eigen::Index>(q, block); ++k)
      worst = std::max(worst, (ax.col(k) - theta(k) * x.col(k)).norm() / scale);
    if (worst < opts.tol) {
      ++iter;
      break;
    }
  }
  out.basis = x;
  out.ritz_values = theta;
  out.iterations = iter;

  const Eigen::Index dims = std::min<Eigen::Index>(q, block);
  Matrix pts(na, dims);
  for (Eigen::Index i = 0; i < na; ++i) pts.row(i) = x.row(active[static_cast<std::size_t>(i)]).head(dims);
  pts *= std::sqrt(static_cast<double>(na));  // unit-scale coordinates

  std::vector<int> best_label;
  Matrix best_centers, centers;
  double best_inertia = std::numeric_limits<double>::infinity();
  const int k = static_cast<int>(std::min<Eigen::Index>(q, na));
  for (int r = 0; r < std::max(1, opts.restarts); ++r) {
    auto [label, inertia] = detail::kmeans_once(pts, k, eng, centers);
    if (inertia < best_inertia) {
      best_inertia = inertia;
      best_label = std::move(label);
      best_centers = centers;
    }
  }
  if (opts.pi && k == q) detail::rebalance(best_label, pts, best_centers, *opts.pi);
  for (Eigen::Index i = 0; i < na; ++i)
    out.partition.labels[static_cast<std::size_t>(active[static_cast<std::size_t>(i)])] = best_label[static_cast<std::size_t>(i)];
  return out;
}

// ---------------------------------------------------------------------------
// Noise-matrix estimation

/// Uniform random subset of size floor(sqrt(n)), returned sorted.
inline std::vector<Vertex> random_subset(std::size_t n, std::size_t size, std::uint64_t seed) {
  std::vector<Vertex> all(n);
  std::iota(all.begin(), all.end(), 0);
  SplitMix64 eng(derive_seed(seed, hash_tag("subset")));
  size = std::min(size, n);
  for (std::size_t i = 0; i < size; ++i) std::swap(all[i], all[i + uniform_index(eng, n - i)]);
  all.resize(size);
  std::sort(all.begin(), all.end());
  return all;
}

struct NoiseEstimateOptions {
  std::vector<Vertex> subset;      // candidate pool U
  std::size_t per_community = 1;   // representatives pooled per community
};

struct NoiseEstimate {
  NoiseMatrix delta;
  Matrix F;                        // neighbour label frequencies per community
  std::vector<std::vector<Vertex>> representatives;
  double degree_target = 0.0;
  bool used_fallback_pool = false; // nobody met the degree target
  bool missing_representative = false;
};

/// Most likely community of a vertex from its neighbours' black-box labels:
/// argmax_i sum_j c_j log P(i, j).
inline int infer_community(const Matrix& P, const std::vector<double>& counts) {
  const int q = static_cast<int>(P.rows());
  int best = 0;
  double best_ll = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < q; ++i) {
    double ll = 0.0;
    for (int j = 0; j < q; ++j) {
      const double c = counts[static_cast<std::size_t>(j)];
      if (c == 0.0) continue;
      ll += P(i, j) > 0.0 ? c * std::log(P(i, j)) : -std::numeric_limits<double>::infinity();
    }
    if (ll > best_ll) {
      best_ll = ll;
      best = i;
    }
  }
  return best;
}

/// Neighbour label frequencies F of high-degree representatives satisfy
/// F ≈ P Delta, so Delta = rows of P^{-1} F projected onto the simplex.
/// A community with no representative yields Delta = I and a flag.
inline NoiseEstimate estimate_noise_matrix(const SbmInstance& g, const Partition& blackbox, const TransitionSpec& t,
                                           const NoiseEstimateOptions& opts) {
  const Matrix& P = t.P;
  const int q = static_cast<int>(P.rows());
  const auto qs = static_cast<std::size_t>(q);
  if (std::fabs(P.determinant()) <= 1e-9) throw Error(ErrorCode::SingularP, "|det P| <= 1e-9");
  if (blackbox.labels.size() != g.n()) throw Error(ErrorCode::InvalidArgument, "partition length mismatch");

  NoiseEstimate est{NoiseMatrix::identity(q), Matrix::Identity(q, q), std::vector<std::vector<Vertex>>(qs)};
  const double ln = std::log(static_cast<double>(std::max<std::size_t>(g.n(), 3)));
  est.degree_target = 0.25 * ln / std::log(ln);

  std::vector<Vertex> pool = opts.subset;
  std::stable_sort(pool.begin(), pool.end(), [&](Vertex a, Vertex b) { return g.degree(a) > g.degree(b); });
  std::vector<Vertex> candidates;
  for (Vertex v : pool)
    if (static_cast<double>(g.degree(v)) >= est.degree_target) candidates.push_back(v);
  if (candidates.empty()) {
    est.used_fallback_pool = true;
    candidates.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(std::min(pool.size(), 3 * qs)));
  }

  auto neighbour_counts = [&](Vertex v) {
    std::vector<double> c(qs, 0.0);
    for (Vertex w : g.neighbors(v)) {
      const int l = blackbox.labels[w];
      if (l >= 0) c[static_cast<std::size_t>(l)] += 1.0;
    }
    return c;
  };

  Matrix counts = Matrix::Zero(q, q);
  for (Vertex v : candidates) {
    const auto c = neighbour_counts(v);
    const double total = std::accumulate(c.begin(), c.end(), 0.0);
    int community = blackbox.labels[v];
    if (static_cast<double>(g.degree(v)) >= est.degree_target && total > 0.0) community = infer_community(P, c);
    if (community < 0) continue;
    auto& reps = est.representatives[static_cast<std::size_t>(community)];
    if (reps.size() >= opts.per_community || total == 0.0) continue;
    reps.push_back(v);
    for (std::size_t j = 0; j < qs; ++j) counts(community, static_cast<Eigen::Index>(j)) += c[j];
  }
  for (const auto& reps : est.representatives)
    if (reps.empty()) est.missing_representative = true;
  if (est.missing_representative) return est;

  for (int i = 0; i < q; ++i) est.F.row(i) = counts.row(i) / counts.row(i).sum();
  const Matrix raw = P.partialPivLu().solve(est.F);
  Matrix delta(q, q);
  for (int i = 0; i < q; ++i) delta.row(i) = project_to_simplex(raw.row(i).transpose()).transpose();
  for (int i = 0; i < q; ++i) delta.row(i) /= delta.row(i).sum();
  est.delta = NoiseMatrix(delta);
  return est;
}

// ---------------------------------------------------------------------------
// Local amplification

struct Algorithm1Config {
  std::optional<int> radius;       // default: coupling_radius
  std::uint64_t seed = 0;
  bool approx_blackbox = false;    // reuse the reference partition for every vertex
  bool require_conditions = false; // throw instead of warning when a condition fails
  BlackBoxOptions blackbox;
  std::size_t per_community = 1;
};

struct Algorithm1Result {
  Partition partition;
  Partition reference;             // global black-box call
  NoiseEstimate noise;
  int radius = 0;
  std::vector<Vertex> subset;      // U
  std::size_t balls = 0;
  std::size_t tree_like_balls = 0;
  std::vector<std::string> warnings;
};

/// For every vertex v outside a random set U of size floor(sqrt n): partition
/// G with B(v, R-1) removed, align it to a reference partition, read the
/// labels on the boundary of B(v, R), and take the argmax of the noisy Bayes
/// recursion on the ball (BFS-parent tree). Vertices in U get uniform labels.
inline Algorithm1Result reconstruct_algorithm1(const SbmInstance& g, const ModelSpec& spec, const TransitionSpec& t,
                                               const Spectrum& s, const Algorithm1Config& cfg) {
  const int q = spec.q;
  if (g.q() != q) throw Error(ErrorCode::InvalidArgument, "graph and model disagree on q");
  Algorithm1Result res;
  const auto report = check_conditions(spec, t, s, std::nullopt);
  if (!report.all_conditions()) {
    if (cfg.require_conditions) throw Error(ErrorCode::InvalidArgument, "model fails a reconstruction condition");
    res.warnings.emplace_back("model fails a reconstruction condition");
  }
  res.radius = cfg.radius ? *cfg.radius : coupling_radius(static_cast<double>(g.n()), spec.Q_scaled);
  if (res.radius < 1) throw Error(ErrorCode::RadiusTooSmall, "R must be >= 1");
  const int R = res.radius;
  const std::size_t n = g.n();

  res.subset = random_subset(n, static_cast<std::size_t>(std::floor(std::sqrt(static_cast<double>(n)))), cfg.seed);
  std::vector<char> in_subset(n, 0);
  for (Vertex v : res.subset) in_subset[v] = 1;

  BlackBoxOptions bb = cfg.blackbox;
  bb.pi = &spec.pi;
  bb.exclude = nullptr;
  bb.warm_start = nullptr;
  const BlackBoxResult ref = black_box_partition(g, q, derive_seed(cfg.seed, hash_tag("reference")), bb);
  res.reference = ref.partition;
  res.noise = estimate_noise_matrix(g, res.reference, t, {res.subset, cfg.per_community});
  if (res.noise.missing_representative) res.warnings.emplace_back("missing community representative; Delta = I");
  const NoiseMatrix& delta = res.noise.delta;

  auto params = std::make_shared<const BroadcastParams>(BroadcastParams::from(spec, t));
  std::vector<int> out(n, 0);
  std::vector<char> tree_like(n, 0), counted(n, 0);
  parallel_for(n, [&](std::size_t vi) {
    const auto v = static_cast<Vertex>(vi);
    if (in_subset[v]) {
      SplitMix64 eng(derive_seed(cfg.seed, hash_tag("subset-label"), v));
      out[v] = static_cast<int>(uniform_index(eng, static_cast<std::uint64_t>(q)));
      return;
    }
    const Ball b = ball(g, v, R);
    counted[v] = 1;
    tree_like[v] = b.is_tree_like ? 1 : 0;
    std::vector<int> tau;
    if (cfg.approx_blackbox) {
      tau = res.reference.labels;
    } else {
      std::vector<char> mask(n, 0);
      for (std::size_t i = 0; i < b.members.size(); ++i)
        if (b.distance[i] <= R - 1) mask[b.members[i]] = 1;
      BlackBoxOptions local = bb;
      local.exclude = &mask;
      local.warm_start = &ref.basis;
      const auto part = black_box_partition(g, q, derive_seed(cfg.seed, hash_tag("vertex"), v), local).partition;
      tau = relabel(part, align_partitions(res.reference, part, q, &mask)).labels;
    }
    const BroadcastTree tree = ball_to_tree(b, params, g.truth(), tau);
    out[v] = argmax(bp_posterior_noisy(tree, R, delta));
  });
  for (std::size_t v = 0; v < n; ++v) {
    res.balls += counted[v];
    res.tree_like_balls += tree_like[v];
  }
  res.partition = {std::move(out), "algorithm1"};
  return res;
}

/// Truth relabeled through a planted noise matrix, i.i.d. per vertex.
inline Partition planted_partition(const std::vector<int>& truth, const NoiseMatrix& delta, std::uint64_t seed) {
  Partition p{std::vector<int>(truth.size()), "planted"};
  const int q = delta.q();
  std::vector<double> row(static_cast<std::size_t>(q));
  for (std::size_t v = 0; v < truth.size(); ++v) {
    SplitMix64 eng(derive_seed(seed, hash_tag("planted"), v));
    for (int j = 0; j < q; ++j) row[static_cast<std::size_t>(j)] = delta(truth[v], j);
    p.labels[v] = sample_categorical(eng, row);
  }
  return p;
}

// ---------------------------------------------------------------------------
// I/O: edge list "n q" header then "u v" lines (0-indexed); labels one per line.

inline void write_edge_list(std::ostream& os, const SbmInstance& g) {
  os << g.n() << ' ' << g.q() << '\n';
  for (Vertex u = 0; u < g.n(); ++u)
    for (Vertex v : g.neighbors(u))
      if (u < v) os << u << ' ' << v << '\n';
}

inline void write_labels(std::ostream& os, const std::vector<int>& labels) {
  for (int l : labels) os << l << '\n';
}

inline std::vector<int> read_labels(std::istream& is) {
  std::vector<int> labels;
  long long l;
  while (is >> l) labels.push_back(static_cast<int>(l));
  if (!is.eof()) throw Error(ErrorCode::ConfigInvalid, "malformed labels file");
  return labels;
}

/// Reads an edge list; truth labels (may be empty) are attached as given.
inline SbmInstance read_edge_list(std::istream& is, std::vector<int> truth = {}) {
  std::size_t n = 0;
  int q = 0;
  if (!(is >> n >> q)) throw Error(ErrorCode::ConfigInvalid, "edge list needs an 'n q' header");
  std::vector<std::pair<Vertex, Vertex>> edges;
  long long u, v;
  while (is >> u >> v) {
    if (u < 0 || v < 0) throw Error(ErrorCode::ConfigInvalid, "negative vertex id");
    edges.emplace_back(static_cast<Vertex>(u), static_cast<Vertex>(v));
  }
  if (!is.eof()) throw Error(ErrorCode::ConfigInvalid, "malformed edge list");
  return SbmInstance::from_edges(n, q, std::move(edges), std::move(truth));
}

}  // namespace sbmbp
