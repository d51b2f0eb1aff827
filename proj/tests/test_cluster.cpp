#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "ravl/cluster.hpp"
#include "ravl/rng.hpp"

using namespace ravl;

namespace {

std::vector<Embedding> random_points(Rng& rng, int n, int dim) {
  std::vector<Embedding> pts(n, Embedding(dim));
  for (auto& p : pts) {
    for (double& v : p) v = rng.next_gaussian();
    if (l2_norm(p) == 0.0) p[0] = 1.0;
  }
  return pts;
}

// Exhaustive optimum over all k-subsets of medoids.
double exhaustive_cost(const std::vector<Embedding>& pts, int k) {
  const int n = static_cast<int>(pts.size());
  const std::vector<double> dist = cosine_distance_matrix(pts);
  std::vector<int> pick(k);
  double best = std::numeric_limits<double>::infinity();
  std::vector<int> stack;
  std::function<void(int, int)> recurse = [&](int start, int depth) {
    if (depth == k) {
      double cost = 0.0;
      for (int j = 0; j < n; ++j) {
        double d = std::numeric_limits<double>::infinity();
        for (int m : stack) d = std::min(d, dist[static_cast<std::size_t>(m) * n + j]);
        cost += d;
      }
      best = std::min(best, cost);
      return;
    }
    for (int i = start; i < n; ++i) {
      stack.push_back(i);
      recurse(i + 1, depth + 1);
      stack.pop_back();
    }
  };
  recurse(0, 0);
  return best;
}

std::vector<Embedding> gaussian_blobs(Rng& rng, const std::vector<Embedding>& centers,
                                      int per_center, double sigma) {
  std::vector<Embedding> pts;
  for (const auto& c : centers) {
    for (int i = 0; i < per_center; ++i) {
      Embedding p = c;
      for (double& v : p) v += sigma * rng.next_gaussian();
      pts.push_back(p);
    }
  }
  return pts;
}

}  // namespace

TEST_CASE("two tight pairs give one medoid per pair", "[cluster]") {
  const std::vector<Embedding> pts = {{1.0, 0.01}, {1.0, -0.01}, {0.01, 1.0}, {-0.01, 1.0}};
  const Clustering c = kmedoids_fit(pts, 2, 0);
  CHECK(c.assignment[0] == c.assignment[1]);
  CHECK(c.assignment[2] == c.assignment[3]);
  CHECK(c.assignment[0] != c.assignment[2]);
  // Verified optimal by enumerating all C(4,2) medoid pairs.
  CHECK(c.total_cost == Catch::Approx(exhaustive_cost(pts, 2)).margin(1e-12));
}

TEST_CASE("identical points collapse to a zero-cost single cluster", "[cluster]") {
  const std::vector<Embedding> pts(6, Embedding{1.0, 2.0});
  const Clustering c = kmedoids_fit(pts, 1, 0);
  CHECK(c.medoid_indices[0] == 0);
  CHECK(c.total_cost == Catch::Approx(0.0).margin(1e-15));
  for (int a : c.assignment) CHECK(a == 0);
}

TEST_CASE("fit cost equals the exhaustive optimum on small instances", "[cluster]") {
  Rng rng(101);
  for (int trial = 0; trial < 40; ++trial) {
    const int n = rng.next_int(4, 10);
    const int k = rng.next_int(1, 3);
    const std::vector<Embedding> pts = random_points(rng, n, rng.next_int(2, 4));
    const Clustering c = kmedoids_fit(pts, k, trial);
    const double oracle = exhaustive_cost(pts, k);
    CHECK(c.total_cost == Catch::Approx(oracle).margin(1e-12));
  }
}

TEST_CASE("fit rejects invalid k", "[cluster]") {
  const std::vector<Embedding> pts = {{1.0, 0.0}, {0.0, 1.0}};
  CHECK_THROWS_AS(kmedoids_fit(pts, 0, 0), std::invalid_argument);
  CHECK_THROWS_AS(kmedoids_fit(pts, 3, 0), std::invalid_argument);
}

TEST_CASE("swap passes never increase the cost", "[cluster]") {
  Rng rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    const std::vector<Embedding> pts = random_points(rng, 24, 3);
    const Clustering c = kmedoids_fit(pts, 4, trial);
    for (std::size_t i = 1; i < c.cost_trace.size(); ++i) {
      CHECK(c.cost_trace[i] <= c.cost_trace[i - 1] + 1e-12);
    }
  }
}

TEST_CASE("refitting with the same seed reproduces the clustering exactly", "[cluster]") {
  Rng rng(23);
  const std::vector<Embedding> pts = random_points(rng, 40, 5);
  const Clustering a = kmedoids_fit(pts, 5, 99);
  const Clustering b = kmedoids_fit(pts, 5, 99);
  CHECK(a.medoid_indices == b.medoid_indices);
  CHECK(a.assignment == b.assignment);
  CHECK(a.total_cost == b.total_cost);
}

TEST_CASE("silhouette of well separated clusters approaches 1", "[cluster]") {
  // Two directions with tiny within-cluster spread.
  std::vector<Embedding> pts = {{1.0, 0.0}, {1.0, 0.0}, {0.0, 1.0}, {0.0, 1.0}};
  const Clustering c = kmedoids_fit(pts, 2, 0);
  CHECK(silhouette(pts, c) == Catch::Approx(1.0));
}

TEST_CASE("silhouette uses the zero-over-zero convention for identical points", "[cluster]") {
  const std::vector<Embedding> pts(4, Embedding{1.0, 1.0});
  Clustering c;
  c.k = 2;
  c.medoid_indices = {0, 1};
  c.medoid_embeddings = {pts[0], pts[1]};
  c.assignment = {0, 0, 1, 1};
  CHECK(silhouette(pts, c) == Catch::Approx(0.0).margin(1e-15));
}

TEST_CASE("silhouette matches a hand-computed value on four points", "[cluster]") {
  // Angles 0 and 15 degrees vs 80 and 95 degrees.
  auto at_angle = [](double deg) {
    const double rad = deg * M_PI / 180.0;
    return Embedding{std::cos(rad), std::sin(rad)};
  };
  const std::vector<Embedding> pts = {at_angle(0), at_angle(15), at_angle(80), at_angle(95)};
  Clustering c;
  c.k = 2;
  c.medoid_indices = {0, 2};
  c.medoid_embeddings = {pts[0], pts[2]};
  c.assignment = {0, 0, 1, 1};

  auto d = [&](int i, int j) { return 1.0 - cosine_similarity(pts[i], pts[j]); };
  double expected = 0.0;
  {
    // Point 0: a = d(0,1), b = mean(d(0,2), d(0,3)).
    const double pairs[4][3] = {
        {d(0, 1), (d(0, 2) + d(0, 3)) / 2.0, 0.0},
        {d(0, 1), (d(1, 2) + d(1, 3)) / 2.0, 0.0},
        {d(2, 3), (d(0, 2) + d(1, 2)) / 2.0, 0.0},
        {d(2, 3), (d(0, 3) + d(1, 3)) / 2.0, 0.0},
    };
    for (const auto& row : pairs) {
      const double a = row[0];
      const double b = row[1];
      expected += (b - a) / std::max(a, b);
    }
    expected /= 4.0;
  }
  CHECK(silhouette(pts, c) == Catch::Approx(expected).margin(1e-12));
  CHECK_THROWS_AS(silhouette(pts, kmedoids_fit(pts, 1, 0)), std::invalid_argument);
}

TEST_CASE("select_k finds planted concept groups", "[cluster]") {
  Rng rng(31);
  std::vector<Embedding> centers;
  for (int i = 0; i < 4; ++i) {
    Embedding c(6, 0.0);
    c[i] = 1.0;
    centers.push_back(c);
  }
  const std::vector<Embedding> pts = gaussian_blobs(rng, centers, 12, 0.03);
  const Clustering best = select_k(pts, 2, 0);  // sweep covers [4, 10]
  CHECK(best.k == 4);
}

TEST_CASE("select_k clamps the sweep to the point count", "[cluster]") {
  Rng rng(37);
  const std::vector<Embedding> pts = random_points(rng, 7, 3);
  const Clustering best = select_k(pts, 2, 0);  // upper bound 10 clamps to 7
  CHECK(best.k >= 4);
  CHECK(best.k <= 7);
}

TEST_CASE("select_k reports when the sweep cannot start", "[cluster]") {
  Rng rng(41);
  const std::vector<Embedding> pts = random_points(rng, 3, 3);
  CHECK_THROWS_WITH(select_k(pts, 2, 0), Catch::Matchers::ContainsSubstring("override"));
  ClusterSweepOptions opts;
  opts.sweep_min = 2;
  opts.sweep_max = 3;
  CHECK_NOTHROW(select_k(pts, 2, 0, opts));
}

TEST_CASE("silhouette ties prefer the smaller k", "[cluster]") {
  // All points identical: every k gives silhouette 0, so the sweep floor wins.
  const std::vector<Embedding> pts(12, Embedding{1.0, 0.5});
  ClusterSweepOptions opts;
  opts.sweep_min = 2;
  opts.sweep_max = 5;
  const Clustering best = select_k(pts, 1, 0, opts);
  CHECK(best.k == 2);
}

TEST_CASE("assign matches fit-time clusters and breaks ties low", "[cluster]") {
  Rng rng(43);
  const std::vector<Embedding> pts = random_points(rng, 30, 4);
  const Clustering c = kmedoids_fit(pts, 3, 0);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    CHECK(assign(pts[i], c) == c.assignment[i]);
  }
  CHECK(assign(c.medoid_embeddings[2], c) == 2);

  Clustering tie;
  tie.k = 2;
  tie.medoid_indices = {0, 1};
  tie.medoid_embeddings = {{1.0, 0.0}, {0.0, 1.0}};
  CHECK(assign(l2_normalized({1.0, 1.0}), tie) == 0);
}

TEST_CASE("sampled fitting handles large inputs deterministically", "[cluster]") {
  Rng rng(47);
  std::vector<Embedding> centers;
  for (int i = 0; i < 3; ++i) {
    Embedding c(5, 0.0);
    c[i] = 1.0;
    centers.push_back(c);
  }
  const std::vector<Embedding> pts = gaussian_blobs(rng, centers, 80, 0.05);
  KMedoidsOptions opts;
  opts.exact_cap = 50;  // force the sampled path
  const Clustering a = kmedoids_fit(pts, 3, 7, opts);
  const Clustering b = kmedoids_fit(pts, 3, 7, opts);
  CHECK(a.medoid_indices == b.medoid_indices);
  CHECK(a.assignment == b.assignment);
  // Each planted blob ends up in one cluster.
  for (int blob = 0; blob < 3; ++blob) {
    const int first = a.assignment[blob * 80];
    for (int i = 1; i < 80; ++i) CHECK(a.assignment[blob * 80 + i] == first);
  }
}
