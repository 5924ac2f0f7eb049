#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "sbmbp/graph.hpp"
#include "sbmbp/model.hpp"
#include "sbmbp/parallel.hpp"

using namespace sbmbp;

namespace {

SbmInstance path_graph() { return SbmInstance::from_edges(3, 2, {{0, 1}, {1, 2}}, {0, 0, 1}); }

SbmInstance two_cliques(std::size_t size) {
  std::vector<std::pair<Vertex, Vertex>> edges;
  std::vector<int> truth(2 * size);
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t i = 0; i < size; ++i) {
      truth[c * size + i] = static_cast<int>(c);
      for (std::size_t j = i + 1; j < size; ++j) edges.emplace_back(c * size + i, c * size + j);
    }
  return SbmInstance::from_edges(2 * size, 2, edges, truth);
}

}  // namespace

TEST(SbmInstance, Construction) {
  const auto g = SbmInstance::from_edges(4, 2, {{1, 0}, {0, 1}, {2, 3}}, {0, 0, 1, 1});
  EXPECT_EQ(g.edge_count(), 2u);
  EXPECT_TRUE(g.has_edge(0, 1));
  EXPECT_TRUE(g.has_edge(1, 0));
  EXPECT_FALSE(g.has_edge(0, 2));
  EXPECT_THROW(SbmInstance::from_edges(3, 2, {{1, 1}}, {}), Error);
  EXPECT_THROW(SbmInstance::from_edges(3, 2, {{0, 5}}, {}), Error);
}

TEST(SampleSbm, ZeroIntensityIsEmpty) {
  ModelSpec spec{2, Vector::Constant(2, 0.5), Matrix::Zero(2, 2), 500};
  EXPECT_EQ(sample_sbm(spec, 1).edge_count(), 0u);
}

TEST(SampleSbm, ProbabilityOverflow) {
  const auto spec = symmetric_model(2, 20, 4, 10);
  try {
    sample_sbm(spec, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ProbabilityOverflow);
  }
}

TEST(SampleSbm, ErdosRenyiMeanDegree) {
  // Equal intensities collapse the model to a single community.
  const double d = 5.0;
  const auto spec = symmetric_model(2, d, d, 10000);
  Moments deg;
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto g = sample_sbm(spec, s);
    deg.add(2.0 * static_cast<double>(g.edge_count()) / static_cast<double>(g.n()));
  }
  // Mean degree is (n - 1) p = d (1 - 1/n).
  EXPECT_NEAR(deg.mean, d * (1.0 - 1e-4), 4.0 * deg.se());
}

TEST(SampleSbm, BlockFrequencies) {
  const auto spec = symmetric_model(2, 16, 4, 10000);
  for (std::uint64_t s = 0; s < 3; ++s) {
    const auto g = sample_sbm(spec, s);
    std::size_t size[2] = {0, 0};
    for (int l : g.truth()) ++size[l];
    double edges[2][2] = {{0, 0}, {0, 0}};
    for (Vertex u = 0; u < g.n(); ++u)
      for (Vertex v : g.neighbors(u))
        if (u < v) edges[g.truth()[u]][g.truth()[v]] += 1.0;
    const double n = 10000.0;
    const double s0 = static_cast<double>(size[0]), s1 = static_cast<double>(size[1]);
    const double pairs[3] = {s0 * (s0 - 1) / 2, s1 * (s1 - 1) / 2, s0 * s1};
    const double counts[3] = {edges[0][0], edges[1][1], edges[0][1] + edges[1][0]};
    const double probs[3] = {16 / n, 16 / n, 4 / n};
    for (int b = 0; b < 3; ++b) {
      const double freq = counts[b] / pairs[b];
      EXPECT_NEAR(freq, probs[b], 4.0 * std::sqrt(probs[b] * (1 - probs[b]) / pairs[b]));
    }
  }
}

TEST(SampleSbm, Deterministic) {
  const auto spec = symmetric_model(3, 9, 2, 2000);
  std::ostringstream a, b;
  write_edge_list(a, sample_sbm(spec, 4));
  write_edge_list(b, sample_sbm(spec, 4));
  EXPECT_EQ(a.str(), b.str());
}

TEST(CouplingRadius, Formula) {
  Matrix Q = Matrix::Constant(2, 2, 3.0);
  EXPECT_EQ(coupling_radius(std::exp(30.0), Q), 1);
  int prev = 1;
  for (double n = std::exp(30.0); n < 1e300; n *= 1e10) {
    const int r = coupling_radius(n, Q);
    EXPECT_GE(r, prev);
    prev = r;
  }
  try {
    coupling_radius(1e6, Matrix::Constant(2, 2, 0.5));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::InvalidArgument);
  }
  try {
    coupling_radius(4000, Q);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DegenerateRadius);
  }
}

TEST(Ball, HandCases) {
  const auto g = path_graph();
  const auto b0 = ball(g, 1, 0);
  EXPECT_EQ(b0.members, std::vector<Vertex>{1});
  EXPECT_TRUE(b0.boundary.empty());
  EXPECT_TRUE(b0.is_tree_like);
  const auto b1 = ball(g, 1, 1);
  EXPECT_EQ(b1.members.size(), 3u);
  auto boundary = b1.boundary;
  std::sort(boundary.begin(), boundary.end());
  EXPECT_EQ(boundary, (std::vector<Vertex>{0, 2}));
  EXPECT_TRUE(b1.is_tree_like);
  const auto tri = SbmInstance::from_edges(3, 2, {{0, 1}, {1, 2}, {0, 2}}, {});
  for (Vertex v = 0; v < 3; ++v) EXPECT_FALSE(ball(tri, v, 1).is_tree_like);
}

TEST(Ball, DistancesAreConsistent) {
  const auto g = sample_sbm(symmetric_model(2, 6, 2, 3000), 2);
  for (Vertex v = 0; v < 50; ++v) {
    const auto b = ball(g, v, 3);
    std::unordered_map<Vertex, int> dist;
    for (std::size_t i = 0; i < b.members.size(); ++i) dist[b.members[i]] = b.distance[i];
    for (std::size_t i = 0; i < b.members.size(); ++i) {
      if (i > 0) EXPECT_EQ(b.distance[static_cast<std::size_t>(b.parent[i])] + 1, b.distance[i]);
      for (Vertex w : g.neighbors(b.members[i])) {
        const auto it = dist.find(w);
        if (it != dist.end()) {
          EXPECT_LE(std::abs(it->second - b.distance[i]), 1);
        } else {
          EXPECT_EQ(b.distance[i], 3);
        }
      }
    }
    for (Vertex u : b.boundary) EXPECT_EQ(dist[u], 3);
    EXPECT_EQ(b.is_tree_like, b.internal_edges + 1 == b.members.size());
  }
}

TEST(Ball, TreeConversionMatchesTreeBp) {
  const auto spec = symmetric_model(2, 6, 2, 3000);
  const auto t = derive_transition(spec);
  auto params = std::make_shared<const BroadcastParams>(BroadcastParams::from(spec, t));
  const auto g = sample_sbm(spec, 3);
  const auto delta = NoiseMatrix::uniform_mixing(2, 0.2);
  const auto tau = planted_partition(g.truth(), delta, 4).labels;
  int tree_like = 0;
  for (Vertex v = 0; v < 200 && tree_like < 30; ++v) {
    const auto b = ball(g, v, 2);
    if (!b.is_tree_like) continue;
    ++tree_like;
    const auto tree = ball_to_tree(b, params, g.truth(), tau);
    EXPECT_EQ(tree.size(), b.members.size());
    EXPECT_EQ(tree.level_size(2), b.boundary.size());
    // Level-2 nodes carry the boundary labels.
    const auto [lo, hi] = tree.level_range(2);
    for (auto i = lo; i < hi; ++i) EXPECT_EQ(tree.node(i).tau, tau[b.members[i]]);
    const Vector x = bp_posterior_noisy(tree, 2, delta);
    if (tree.size() <= 14) {
      EXPECT_LT((x - exact_posterior_bruteforce(tree, 2, true, &delta)).cwiseAbs().maxCoeff(), 1e-10);
    }
  }
  EXPECT_GT(tree_like, 0);
}

TEST(Align, IdentityAndSwap) {
  Partition ref{{0, 1, 2, 0, 1, 2, 2}, "truth"};
  EXPECT_EQ(align_partitions(ref, ref, 3), (std::vector<int>{0, 1, 2}));
  Partition swapped = ref;
  for (auto& l : swapped.labels) l = l == 0 ? 1 : (l == 1 ? 0 : l);
  EXPECT_EQ(align_partitions(ref, swapped, 3), (std::vector<int>{1, 0, 2}));
  EXPECT_EQ(relabel(swapped, align_partitions(ref, swapped, 3)).labels, ref.labels);
}

TEST(Align, ExhaustiveMatchesHungarian) {
  SplitMix64 eng(17);
  for (int c = 0; c < 200; ++c) {
    Matrix conf(3, 3);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) conf(i, j) = static_cast<double>(uniform_index(eng, 50));
    const auto ex = align_confusion(conf);
    const auto hu = hungarian_min(Matrix::Constant(3, 3, conf.maxCoeff()) - conf);
    EXPECT_EQ(permutation_score(conf, ex), permutation_score(conf, hu));
    std::vector<int> sorted = hu;
    std::sort(sorted.begin(), sorted.end());
    EXPECT_EQ(sorted, (std::vector<int>{0, 1, 2}));
  }
}

TEST(Align, LexicographicTieBreak) {
  const Matrix flat = Matrix::Constant(3, 3, 2.0);
  EXPECT_EQ(align_confusion(flat), (std::vector<int>{0, 1, 2}));
}

TEST(Align, LargeQUsesAssignment) {
  const int q = 10;
  std::vector<int> perm(q);
  std::iota(perm.begin(), perm.end(), 0);
  std::reverse(perm.begin(), perm.end());
  Partition ref{{}, "truth"}, cand{{}, "candidate"};
  for (int r = 0; r < 5; ++r)
    for (int l = 0; l < q; ++l) {
      ref.labels.push_back(l);
      cand.labels.push_back(perm[static_cast<std::size_t>(l)]);
    }
  const auto p = align_partitions(ref, cand, q);
  EXPECT_EQ(relabel(cand, p).labels, ref.labels);
}

TEST(OverlapAccuracy, Invariance) {
  SplitMix64 eng(2);
  Partition truth{std::vector<int>(300), "truth"}, est{std::vector<int>(300), "est"};
  for (std::size_t v = 0; v < 300; ++v) {
    truth.labels[v] = static_cast<int>(uniform_index(eng, 3));
    est.labels[v] = uniform01(eng) < 0.7 ? truth.labels[v] : static_cast<int>(uniform_index(eng, 3));
  }
  EXPECT_EQ(overlap_accuracy(truth, truth, 3), 1.0);
  const double base = overlap_accuracy(est, truth, 3);
  std::vector<int> perm{0, 1, 2};
  do {
    EXPECT_EQ(overlap_accuracy(relabel(est, perm), truth, 3), base);
    EXPECT_EQ(overlap_accuracy(relabel(truth, perm), truth, 3), 1.0);
  } while (std::next_permutation(perm.begin(), perm.end()));
}

TEST(OverlapAccuracy, RandomBaseline) {
  SplitMix64 eng(3);
  const std::size_t n = 10000;
  Partition truth{std::vector<int>(n), "truth"}, est{std::vector<int>(n), "est"};
  for (std::size_t v = 0; v < n; ++v) {
    truth.labels[v] = static_cast<int>(v % 2);
    est.labels[v] = static_cast<int>(uniform_index(eng, 2));
  }
  // The max over two permutations biases upward by about E|Z| sqrt(n)/2n.
  EXPECT_NEAR(overlap_accuracy(est, truth, 2), 0.5 + 0.4 / std::sqrt(static_cast<double>(n)),
              4.0 * 0.5 / std::sqrt(static_cast<double>(n)));
}

TEST(BlackBox, TwoCliques) {
  const auto g = two_cliques(50);
  const auto res = black_box_partition(g, 2, 1);
  EXPECT_EQ(overlap_accuracy(res.partition, {g.truth(), "truth"}, 2), 1.0);
}

TEST(BlackBox, IndistinguishableCommunities) {
  const auto spec = symmetric_model(2, 8, 8, 2000);
  Moments acc;
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto g = sample_sbm(spec, s);
    acc.add(overlap_accuracy(black_box_partition(g, 2, s, {.pi = &spec.pi}).partition, {g.truth(), "truth"}, 2));
  }
  // Chance level for a balanced split is 0.5 plus the max-over-permutations bias.
  EXPECT_LT(acc.mean, 0.5 + 4.0 * 0.5 / std::sqrt(2000.0) + 4.0 * acc.se());
}

TEST(BlackBox, AboveThreshold) {
  const auto spec = symmetric_model(2, 16, 4, 4000);
  Moments acc;
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto g = sample_sbm(spec, s);
    acc.add(overlap_accuracy(black_box_partition(g, 2, s, {.pi = &spec.pi}).partition, {g.truth(), "truth"}, 2));
  }
  EXPECT_GT(acc.mean, 0.6);
}

TEST(BlackBox, MaskedVerticesUnlabeled) {
  const auto g = two_cliques(30);
  std::vector<char> mask(60, 0);
  mask[3] = mask[40] = 1;
  BlackBoxOptions opts;
  opts.exclude = &mask;
  const auto res = black_box_partition(g, 2, 5, opts);
  EXPECT_EQ(res.partition.labels[3], kNoLabel);
  EXPECT_EQ(res.partition.labels[40], kNoLabel);
  EXPECT_EQ(overlap_accuracy(res.partition, {g.truth(), "truth"}, 2), 58.0 / 60.0);
}

TEST(NoiseEstimate, PerfectBlackBox) {
  const auto spec = symmetric_model(2, 16, 4, 10000);
  const auto t = derive_transition(spec);
  const auto g = sample_sbm(spec, 1);
  const auto est = estimate_noise_matrix(g, {g.truth(), "truth"}, t, {random_subset(g.n(), 100, 2), 5});
  EXPECT_FALSE(est.missing_representative);
  EXPECT_LT((est.delta.matrix() - Matrix::Identity(2, 2)).cwiseAbs().maxCoeff(), 0.25);
}

TEST(NoiseEstimate, PlantedRecovery) {
  const auto spec = symmetric_model(2, 16, 4, 10000);
  const auto t = derive_transition(spec);
  Matrix D0(2, 2);
  D0 << 0.85, 0.15, 0.15, 0.85;
  std::vector<Moments> entries(4);
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto g = sample_sbm(spec, 100 + s);
    const auto noisy = planted_partition(g.truth(), NoiseMatrix(D0), s);
    const auto est = estimate_noise_matrix(g, noisy, t, {random_subset(g.n(), 100, s), 1});
    for (int i = 0; i < 4; ++i) entries[static_cast<std::size_t>(i)].add(est.delta(i / 2, i % 2));
  }
  for (int i = 0; i < 4; ++i) {
    const auto& e = entries[static_cast<std::size_t>(i)];
    EXPECT_NEAR(e.mean, D0(i / 2, i % 2), 4.0 * e.se()) << "entry " << i;
  }
}

TEST(NoiseEstimate, SingularP) {
  const auto [spec, t] = perturbation_family(Vector::Constant(2, 0.5), Matrix::Zero(2, 2), 1.0, 4.0);
  const auto g = sample_sbm(spec, 1);
  try {
    estimate_noise_matrix(g, {g.truth(), "truth"}, t, {random_subset(g.n(), 30, 1), 1});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::SingularP);
  }
}

TEST(Algorithm1, EdgelessGraphIsPriorOnly) {
  auto spec = symmetric_model(2, 9, 3, 400);
  const auto t = derive_transition(spec);
  const auto s = eigendecompose(t, spec.pi);
  const auto g = SbmInstance::from_edges(400, 2, {}, sample_sbm(spec, 1).truth());
  Algorithm1Config cfg;
  cfg.radius = 2;
  cfg.seed = 3;
  const auto res = reconstruct_algorithm1(g, spec, t, s, cfg);
  const double acc = overlap_accuracy(res.partition, {g.truth(), "truth"}, 2);
  EXPECT_NEAR(acc, 0.5, 4.0 * 0.5 / std::sqrt(400.0) + 0.02);
}

TEST(Algorithm1, StrongSignalConsistency) {
  const auto spec = symmetric_model(2, 30, 2, 800);
  const auto t = derive_transition(spec);
  const auto s = eigendecompose(t, spec.pi);
  for (bool approx : {true, false}) {
    Moments gain;
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      const auto g = sample_sbm(spec, seed);
      Algorithm1Config cfg;
      cfg.radius = 2;
      cfg.seed = seed;
      cfg.approx_blackbox = approx;
      const auto res = reconstruct_algorithm1(g, spec, t, s, cfg);
      const Partition truth{g.truth(), "truth"};
      gain.add(overlap_accuracy(res.partition, truth, 2) - overlap_accuracy(res.reference, truth, 2));
      EXPECT_EQ(res.balls + res.subset.size(), g.n());
    }
    EXPECT_GE(gain.mean, -4.0 * gain.se() - 0.01) << (approx ? "approx" : "faithful");
  }
}

TEST(Algorithm1, Deterministic) {
  const auto spec = symmetric_model(2, 12, 3, 500);
  const auto t = derive_transition(spec);
  const auto s = eigendecompose(t, spec.pi);
  const auto g = sample_sbm(spec, 9);
  Algorithm1Config cfg;
  cfg.radius = 2;
  cfg.seed = 9;
  EXPECT_EQ(reconstruct_algorithm1(g, spec, t, s, cfg).partition.labels,
            reconstruct_algorithm1(g, spec, t, s, cfg).partition.labels);
  cfg.radius = 0;
  EXPECT_THROW(reconstruct_algorithm1(g, spec, t, s, cfg), Error);
}

TEST(GraphIo, RoundTrip) {
  const auto g = sample_sbm(symmetric_model(2, 6, 2, 300), 5);
  std::stringstream edges, labels;
  write_edge_list(edges, g);
  write_labels(labels, g.truth());
  const auto truth = read_labels(labels);
  const auto back = read_edge_list(edges, truth);
  EXPECT_EQ(back.n(), g.n());
  EXPECT_EQ(back.edge_count(), g.edge_count());
  EXPECT_EQ(back.truth(), g.truth());
  for (Vertex v = 0; v < g.n(); ++v) EXPECT_EQ(back.degree(v), g.degree(v));
  std::istringstream bad("3 2\n0 x\n");
  EXPECT_THROW(read_edge_list(bad), Error);
}
