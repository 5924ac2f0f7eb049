#pragma once

// Poisson Galton-Watson broadcast trees: sampling, label noise, and the
// structural statistics (level sizes, leaf-pair path counts).

#include <algorithm>
#include <cstdint>
#include <memory>
#include <ostream>
#include <span>
#include <vector>

#include "sbmbp/error.hpp"
#include "sbmbp/linalg.hpp"
#include "sbmbp/model.hpp"
#include "sbmbp/rng.hpp"

namespace sbmbp {

/// (pi, P, d) for the broadcast process, with P rows cached for sampling.
struct BroadcastParams {
  Vector pi;
  Matrix P;
  double d = 0.0;

  BroadcastParams() = default;
  BroadcastParams(Vector pi_, Matrix P_, double d_) : pi(std::move(pi_)), P(std::move(P_)), d(d_) {
    if (P.rows() != pi.size() || P.cols() != pi.size())
      throw Error(ErrorCode::InvalidArgument, "BroadcastParams: dimension mismatch");
    if (!is_row_stochastic(P, 1e-10))
      throw Error(ErrorCode::InvalidArgument, "BroadcastParams: P must be row-stochastic");
    if (!(d > 0.0)) throw Error(ErrorCode::InvalidArgument, "BroadcastParams: d must be positive");
    rows_.resize(static_cast<std::size_t>(q() * q()));
    for (int i = 0; i < q(); ++i)
      for (int j = 0; j < q(); ++j) rows_[static_cast<std::size_t>(i * q() + j)] = P(i, j);
    prior_.assign(pi.data(), pi.data() + pi.size());
  }

  static BroadcastParams from(const ModelSpec& spec, const TransitionSpec& t) {
    return BroadcastParams(spec.pi, t.P, t.d);
  }

  int q() const { return static_cast<int>(pi.size()); }
  std::span<const double> row(int i) const {
    return {rows_.data() + static_cast<std::size_t>(i * q()), static_cast<std::size_t>(q())};
  }
  std::span<const double> prior() const { return prior_; }

 private:
  std::vector<double> rows_;
  std::vector<double> prior_;
};

inline constexpr std::uint32_t kNoParent = 0xffffffffu;
inline constexpr std::int32_t kNoLabel = -1;

struct TreeNode {
  std::uint32_t parent = kNoParent;
  std::uint32_t depth = 0;
  std::uint32_t first_child = 0;
  std::uint32_t num_children = 0;
  std::int32_t sigma = 0;
  std::int32_t tau = kNoLabel;
};

/// Flat arena in breadth-first order: node 0 is the root, children of a node
/// are contiguous, and each level occupies a contiguous index range.
class BroadcastTree {
 public:
  BroadcastTree() = default;

  /// Builds a tree from externally produced nodes (parent and depth set;
  /// children fields are recomputed). Nodes must already be in BFS layout.
  static BroadcastTree from_nodes(std::shared_ptr<const BroadcastParams> params, int max_depth,
                                  std::vector<TreeNode> nodes, std::uint64_t seed = 0) {
    if (nodes.empty()) throw Error(ErrorCode::InvalidArgument, "tree needs a root");
    if (nodes[0].parent != kNoParent || nodes[0].depth != 0)
      throw Error(ErrorCode::InvalidArgument, "node 0 must be the root at depth 0");
    const bool noisy = nodes[0].tau != kNoLabel;
    for (auto& n : nodes) {
      n.first_child = 0;
      n.num_children = 0;
    }
    for (std::size_t i = 1; i < nodes.size(); ++i) {
      const auto p = nodes[i].parent;
      if (p >= i) throw Error(ErrorCode::InvalidArgument, "parents must precede children");
      if (nodes[i].depth != nodes[p].depth + 1)
        throw Error(ErrorCode::InvalidArgument, "depth must be parent depth + 1");
      if (nodes[i].depth < nodes[i - 1].depth)
        throw Error(ErrorCode::InvalidArgument, "nodes must be in BFS order");
      if ((nodes[i].tau != kNoLabel) != noisy)
        throw Error(ErrorCode::InvalidArgument, "tau must be present on all nodes or none");
      auto& parent = nodes[p];
      if (parent.num_children == 0) {
        parent.first_child = static_cast<std::uint32_t>(i);
      } else if (parent.first_child + parent.num_children != i) {
        throw Error(ErrorCode::InvalidArgument, "children of a node must be contiguous");
      }
      ++parent.num_children;
    }
    if (nodes.back().depth > static_cast<std::uint32_t>(max_depth))
      throw Error(ErrorCode::InvalidArgument, "node deeper than max_depth");
    BroadcastTree t;
    t.params_ = std::move(params);
    t.max_depth_ = max_depth;
    t.seed_ = seed;
    t.nodes_ = std::move(nodes);
    t.noisy_ = noisy;
    t.index_levels();
    return t;
  }

  std::span<const TreeNode> nodes() const { return nodes_; }
  const TreeNode& node(std::size_t i) const { return nodes_[i]; }
  std::size_t size() const { return nodes_.size(); }
  int max_depth() const { return max_depth_; }
  std::uint64_t seed() const { return seed_; }
  bool has_noise() const { return noisy_; }
  const BroadcastParams& params() const { return *params_; }
  std::shared_ptr<const BroadcastParams> params_ptr() const { return params_; }
  int q() const { return params_->q(); }

  /// Index range [first, last) of level k; empty beyond max_depth.
  std::pair<std::uint32_t, std::uint32_t> level_range(int k) const {
    if (k < 0 || k > max_depth_) return {0, 0};
    return {level_offsets_[static_cast<std::size_t>(k)], level_offsets_[static_cast<std::size_t>(k) + 1]};
  }
  std::size_t level_size(int k) const {
    const auto [a, b] = level_range(k);
    return b - a;
  }

  bool operator==(const BroadcastTree& other) const {
    if (max_depth_ != other.max_depth_ || nodes_.size() != other.nodes_.size()) return false;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      const auto& a = nodes_[i];
      const auto& b = other.nodes_[i];
      if (a.parent != b.parent || a.depth != b.depth || a.sigma != b.sigma || a.tau != b.tau ||
          a.first_child != b.first_child || a.num_children != b.num_children)
        return false;
    }
    return true;
  }

 private:
  friend BroadcastTree sample_tree(std::shared_ptr<const BroadcastParams>, int, std::uint64_t);
  friend BroadcastTree apply_noise(const BroadcastTree&, const NoiseMatrix&, std::uint64_t);

  void index_levels() {
    level_offsets_.assign(static_cast<std::size_t>(max_depth_) + 2, static_cast<std::uint32_t>(nodes_.size()));
    level_offsets_[0] = 0;
    for (std::size_t i = nodes_.size(); i-- > 0;) level_offsets_[nodes_[i].depth] = static_cast<std::uint32_t>(i);
    // Extinct levels collapse onto the end of the arena.
    for (std::size_t k = level_offsets_.size() - 1; k-- > 0;)
      level_offsets_[k] = std::min(level_offsets_[k], level_offsets_[k + 1]);
    level_offsets_[0] = 0;
  }

  std::shared_ptr<const BroadcastParams> params_;
  std::vector<TreeNode> nodes_;
  std::vector<std::uint32_t> level_offsets_;
  int max_depth_ = 0;
  std::uint64_t seed_ = 0;
  bool noisy_ = false;
};

/// Samples the broadcast process to depth `max_depth`. Node i draws its label
/// and its Poisson(d) child count from its own stream derive_seed(seed, i).
inline BroadcastTree sample_tree(std::shared_ptr<const BroadcastParams> params, int max_depth,
                                 std::uint64_t seed) {
  if (max_depth < 0) throw Error(ErrorCode::InvalidArgument, "max_depth must be >= 0");
  const BroadcastParams& p = *params;
  BroadcastTree t;
  t.params_ = std::move(params);
  t.max_depth_ = max_depth;
  t.seed_ = seed;

  auto spawn = [&](std::uint32_t parent, std::uint32_t depth, std::span<const double> row) {
    const auto index = static_cast<std::uint64_t>(t.nodes_.size());
    SplitMix64 eng(derive_seed(seed, index));
    TreeNode n;
    n.parent = parent;
    n.depth = depth;
    n.sigma = sample_categorical(eng, row);
    n.num_children = depth < static_cast<std::uint32_t>(max_depth) ? sample_poisson(eng, p.d) : 0;
    t.nodes_.push_back(n);
  };

  spawn(kNoParent, 0, p.prior());
  for (std::size_t i = 0; i < t.nodes_.size(); ++i) {
    const std::uint32_t count = t.nodes_[i].num_children;
    t.nodes_[i].first_child = static_cast<std::uint32_t>(t.nodes_.size());
    const std::uint32_t depth = t.nodes_[i].depth + 1;
    const int label = t.nodes_[i].sigma;
    for (std::uint32_t c = 0; c < count; ++c) spawn(static_cast<std::uint32_t>(i), depth, p.row(label));
  }
  t.index_levels();
  return t;
}

inline BroadcastTree sample_tree(const BroadcastParams& params, int max_depth, std::uint64_t seed) {
  return sample_tree(std::make_shared<const BroadcastParams>(params), max_depth, seed);
}

/// Draws tau_u ~ Delta(sigma_u, .) independently per node; sigma is untouched.
inline BroadcastTree apply_noise(const BroadcastTree& tree, const NoiseMatrix& delta, std::uint64_t seed) {
  if (delta.q() != tree.q()) throw Error(ErrorCode::InvalidArgument, "noise matrix dimension mismatch");
  const int q = delta.q();
  std::vector<double> rows(static_cast<std::size_t>(q * q));
  for (int i = 0; i < q; ++i)
    for (int j = 0; j < q; ++j) rows[static_cast<std::size_t>(i * q + j)] = delta(i, j);
  BroadcastTree out = tree;
  for (std::size_t i = 0; i < out.nodes_.size(); ++i) {
    SplitMix64 eng(derive_seed(seed, i));
    const auto sigma = static_cast<std::size_t>(out.nodes_[i].sigma);
    out.nodes_[i].tau = sample_categorical(
        eng, std::span<const double>(rows.data() + sigma * static_cast<std::size_t>(q), static_cast<std::size_t>(q)));
  }
  out.noisy_ = true;
  return out;
}

struct LevelSummary {
  double mean = 0.0;
  double variance = 0.0;  // unbiased
  std::size_t count = 0;
};

/// Sample mean and unbiased variance of |L_k| over a collection of trees.
inline LevelSummary level_statistics(std::span<const BroadcastTree> trees, int k) {
  if (trees.empty()) throw Error(ErrorCode::EmptyCollection, "no trees");
  LevelSummary s;
  double m2 = 0.0;
  for (const auto& t : trees) {
    if (k < 0 || k > t.max_depth()) throw Error(ErrorCode::InvalidRange, "k exceeds tree depth");
    const double x = static_cast<double>(t.level_size(k));
    ++s.count;
    const double delta = x - s.mean;
    s.mean += delta / static_cast<double>(s.count);
    m2 += delta * (x - s.mean);
  }
  s.variance = s.count > 1 ? m2 / static_cast<double>(s.count - 1) : 0.0;
  return s;
}

/// Number of leaf-to-leaf paths of length 2*ell between depth-k nodes,
/// counting each pair in both directions (ordered pairs). Pairs are grouped
/// under their depth-(k-ell) common ancestor; pairs whose branches meet below
/// it are removed by subtracting squared per-child counts.
inline std::uint64_t count_leaf_paths(const BroadcastTree& tree, int ell, int k) {
  if (ell < 1 || ell > k) throw Error(ErrorCode::InvalidRange, "need 1 <= ell <= k");
  if (k > tree.max_depth()) throw Error(ErrorCode::DepthExceeded, "k exceeds tree depth");
  std::vector<std::uint64_t> below(tree.size(), 0);
  const auto [first, last] = tree.level_range(k);
  for (auto i = first; i < last; ++i) below[i] = 1;
  for (std::size_t i = tree.size(); i-- > 1;) {
    if (tree.node(i).depth <= static_cast<std::uint32_t>(k)) below[tree.node(i).parent] += below[i];
  }
  std::uint64_t paths = 0;
  const auto [a0, a1] = tree.level_range(k - ell);
  for (auto a = a0; a < a1; ++a) {
    const auto& n = tree.node(a);
    std::uint64_t s = 0, s2 = 0;
    for (std::uint32_t c = n.first_child; c < n.first_child + n.num_children; ++c) {
      s += below[c];
      s2 += below[c] * below[c];
    }
    paths += s * s - s2;
  }
  return paths;
}

inline Vector one_hot(int label, int q) {
  if (q < 1 || label < 0 || label >= q) throw Error(ErrorCode::OutOfRange, "label out of range");
  Vector v = Vector::Zero(q);
  v(label) = 1.0;
  return v;
}

/// One JSON object per node: {"index","parent","depth","sigma","tau"}.
inline void write_tree_jsonl(std::ostream& os, const BroadcastTree& tree) {
  for (std::size_t i = 0; i < tree.size(); ++i) {
    const auto& n = tree.node(i);
    os << "{\"index\":" << i << ",\"parent\":";
    if (n.parent == kNoParent) os << -1; else os << n.parent;
    os << ",\"depth\":" << n.depth << ",\"sigma\":" << n.sigma << ",\"tau\":";
    if (n.tau == kNoLabel) os << "null"; else os << n.tau;
    os << "}\n";
  }
}

}  // namespace sbmbp
