#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ravl/core.hpp"
#include "ravl/rng.hpp"

namespace ravl {

struct KMedoidsOptions {
  std::size_t exact_cap = 20000;      // above this, sampled (CLARA-style) fitting kicks in
  int clara_samples = 5;
  std::size_t clara_sample_base = 40; // sample size = base + 2k, clamped to n
  int restarts = 16;                  // swap descents: BUILD plus seeded random inits
};

/// A fitted K-Medoids model. Medoids are members of the fitted point set;
/// every point is assigned to its nearest medoid under cosine distance with
/// ties broken toward the lowest cluster id.
struct Clustering {
  int k = 0;
  std::vector<int> medoid_indices;
  std::vector<Embedding> medoid_embeddings;
  std::vector<int> assignment;
  double total_cost = 0.0;
  std::vector<double> cost_trace;  // cost after BUILD and after each accepted swap
};

/// Flat row-major pairwise cosine distance matrix.
inline std::vector<double> cosine_distance_matrix(const std::vector<Embedding>& points) {
  const std::size_t n = points.size();
  std::vector<Embedding> unit(n);
  for (std::size_t i = 0; i < n; ++i) unit[i] = l2_normalized(points[i]);
  std::vector<double> d(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double dist = 1.0 - dot(unit[i], unit[j]);
      d[i * n + j] = dist;
      d[j * n + i] = dist;
    }
  }
  return d;
}

namespace detail {

// BUILD initialization: the first medoid minimizes total distance; each
// further medoid is the candidate with the largest cost reduction.
// Candidates at distance zero from an existing medoid are skipped while any
// other candidate remains.
inline std::vector<int> pam_build(const std::vector<double>& dist, std::size_t n, int k) {
  auto d = [&](std::size_t i, std::size_t j) { return dist[i * n + j]; };
  std::vector<char> is_medoid(n, 0);
  std::vector<int> medoids;
  medoids.reserve(k);
  std::vector<double> dnear(n, std::numeric_limits<double>::infinity());
  {
    std::size_t best = 0;
    double best_cost = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
      double c = 0.0;
      for (std::size_t j = 0; j < n; ++j) c += d(i, j);
      if (c < best_cost) {
        best_cost = c;
        best = i;
      }
    }
    medoids.push_back(static_cast<int>(best));
    is_medoid[best] = 1;
    for (std::size_t j = 0; j < n; ++j) dnear[j] = d(best, j);
  }
  while (static_cast<int>(medoids.size()) < k) {
    std::ptrdiff_t best = -1;
    double best_gain = -1.0;
    bool best_is_duplicate = true;
    for (std::size_t h = 0; h < n; ++h) {
      if (is_medoid[h]) continue;
      const bool duplicate = dnear[h] == 0.0;
      if (duplicate && !best_is_duplicate) continue;
      double gain = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double diff = dnear[j] - d(h, j);
        if (diff > 0.0) gain += diff;
      }
      const bool better = (best < 0) || (!duplicate && best_is_duplicate) ||
                          (duplicate == best_is_duplicate && gain > best_gain);
      if (better) {
        best = static_cast<std::ptrdiff_t>(h);
        best_gain = gain;
        best_is_duplicate = duplicate;
      }
    }
    medoids.push_back(static_cast<int>(best));
    is_medoid[best] = 1;
    for (std::size_t j = 0; j < n; ++j) dnear[j] = std::min(dnear[j], d(best, j));
  }
  return medoids;
}

// Best-improvement swap descent from a given medoid set. Each pass evaluates
// every (removed medoid, candidate) pair in O(n^2 + n k) by accumulating the
// candidate's unconditional gain and a per-cluster removal correction.
// Returns the cost after initialization and after each accepted swap.
inline std::vector<double> pam_swap_descent(const std::vector<double>& dist, std::size_t n, int k,
                                            std::vector<int>& medoids) {
  auto d = [&](std::size_t i, std::size_t j) { return dist[i * n + j]; };
  std::vector<char> is_medoid(n, 0);
  for (int m : medoids) is_medoid[m] = 1;

  std::vector<int> near1(n, 0);
  std::vector<double> d1(n, 0.0), d2(n, 0.0);
  auto refresh = [&]() {
    for (std::size_t j = 0; j < n; ++j) {
      double b1 = std::numeric_limits<double>::infinity();
      double b2 = std::numeric_limits<double>::infinity();
      int c1 = 0;
      for (int c = 0; c < k; ++c) {
        const double dist_cj = d(medoids[c], j);
        if (dist_cj < b1) {
          b2 = b1;
          b1 = dist_cj;
          c1 = c;
        } else if (dist_cj < b2) {
          b2 = dist_cj;
        }
      }
      near1[j] = c1;
      d1[j] = b1;
      d2[j] = b2;
    }
  };
  refresh();
  std::vector<double> trace;
  double cost = 0.0;
  for (std::size_t j = 0; j < n; ++j) cost += d1[j];
  trace.push_back(cost);

  const double kImprovementEps = 1e-12;
  std::vector<double> removal_delta(k);
  for (;;) {
    double best_delta = -kImprovementEps;
    int best_c = -1, best_h = -1;
    for (std::size_t h = 0; h < n; ++h) {
      if (is_medoid[h]) continue;
      double shared_gain = 0.0;
      std::fill(removal_delta.begin(), removal_delta.end(), 0.0);
      for (std::size_t j = 0; j < n; ++j) {
        const double dhj = d(h, j);
        const double gain = dhj < d1[j] ? dhj - d1[j] : 0.0;
        shared_gain += gain;
        // Removing j's nearest medoid reassigns j to the better of the
        // candidate and the second-nearest medoid.
        removal_delta[near1[j]] += std::min(d2[j], dhj) - d1[j] - gain;
      }
      for (int c = 0; c < k; ++c) {
        const double delta = shared_gain + removal_delta[c];
        if (delta < best_delta) {
          best_delta = delta;
          best_c = c;
          best_h = static_cast<int>(h);
        }
      }
    }
    if (best_c < 0) break;
    is_medoid[medoids[best_c]] = 0;
    medoids[best_c] = best_h;
    is_medoid[best_h] = 1;
    refresh();
    cost = 0.0;
    for (std::size_t j = 0; j < n; ++j) cost += d1[j];
    trace.push_back(cost);
  }
  return trace;
}

// PAM over a precomputed distance matrix: a BUILD-initialized swap descent
// plus seeded random restarts, keeping the lowest-cost result (ties keep the
// earliest descent). Single-swap descent alone strands a few percent of
// small instances in local optima; the restarts close that gap.
inline Clustering pam_fit(const std::vector<double>& dist, std::size_t n, int k,
                          std::uint64_t seed, int restarts) {
  auto d = [&](std::size_t i, std::size_t j) { return dist[i * n + j]; };
  Clustering out;
  out.k = k;

  std::vector<int> best_medoids;
  std::vector<double> best_trace;
  double best_cost = std::numeric_limits<double>::infinity();
  Rng rng(seed);
  std::vector<std::size_t> pool(n);
  for (std::size_t i = 0; i < n; ++i) pool[i] = i;
  for (int r = 0; r < std::max(1, restarts); ++r) {
    std::vector<int> medoids;
    if (r == 0) {
      medoids = pam_build(dist, n, k);
    } else {
      for (std::size_t i = 0; i < static_cast<std::size_t>(k); ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng.next_below(n - i));
        std::swap(pool[i], pool[j]);
      }
      medoids.assign(pool.begin(), pool.begin() + k);
      std::sort(medoids.begin(), medoids.end());
    }
    std::vector<double> trace = pam_swap_descent(dist, n, k, medoids);
    if (trace.back() < best_cost - 1e-15) {
      best_cost = trace.back();
      best_medoids = std::move(medoids);
      best_trace = std::move(trace);
    }
  }

  out.medoid_indices = best_medoids;
  out.cost_trace = best_trace;
  out.assignment.resize(n);
  out.total_cost = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    int best_c = 0;
    double best_d = d(best_medoids[0], j);
    for (int c = 1; c < k; ++c) {
      const double dist_cj = d(best_medoids[c], j);
      if (dist_cj < best_d) {
        best_d = dist_cj;
        best_c = c;
      }
    }
    out.assignment[j] = best_c;
    out.total_cost += best_d;
  }
  return out;
}

inline double silhouette_from_matrix(const std::vector<double>& dist, std::size_t n,
                                     const std::vector<int>& assignment, int k) {
  if (k < 2) throw std::invalid_argument("silhouette: needs at least 2 clusters");
  std::vector<int> sizes(k, 0);
  for (std::size_t j = 0; j < n; ++j) sizes[assignment[j]] += 1;
  double total = 0.0;
  std::vector<double> cluster_sum(k, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const int ci = assignment[i];
    if (sizes[ci] <= 1) continue;  // singleton contributes 0
    std::fill(cluster_sum.begin(), cluster_sum.end(), 0.0);
    for (std::size_t j = 0; j < n; ++j) cluster_sum[assignment[j]] += dist[i * n + j];
    const double a = cluster_sum[ci] / (sizes[ci] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (int c = 0; c < k; ++c) {
      if (c == ci || sizes[c] == 0) continue;
      b = std::min(b, cluster_sum[c] / sizes[c]);
    }
    const double denom = std::max(a, b);
    total += denom > 0.0 ? (b - a) / denom : 0.0;  // 0/0 -> 0
  }
  return n > 0 ? total / static_cast<double>(n) : 0.0;
}

}  // namespace detail

/// PAM (BUILD + SWAP) K-Medoids under cosine distance. Above
/// opts.exact_cap points, fits on random subsamples and keeps the
/// candidate medoid set with the lowest full-data cost; the seed drives
/// only that sampling.
inline Clustering kmedoids_fit(const std::vector<Embedding>& points, int k, std::uint64_t seed,
                               const KMedoidsOptions& opts = {}) {
  const std::size_t n = points.size();
  if (k < 1) throw std::invalid_argument("kmedoids_fit: k must be at least 1");
  if (static_cast<std::size_t>(k) > n) throw std::invalid_argument("kmedoids_fit: k exceeds point count");

  std::vector<Embedding> unit(n);
  for (std::size_t i = 0; i < n; ++i) unit[i] = l2_normalized(points[i]);

  Clustering result;
  if (n <= opts.exact_cap) {
    const std::vector<double> dist = cosine_distance_matrix(points);
    result = detail::pam_fit(dist, n, k, seed, opts.restarts);
  } else {
    Rng rng(seed);
    const std::size_t sample_size =
        std::min(n, opts.clara_sample_base + 2 * static_cast<std::size_t>(k));
    std::vector<int> best_medoids;
    double best_cost = std::numeric_limits<double>::infinity();
    std::vector<std::size_t> pool(n);
    for (std::size_t i = 0; i < n; ++i) pool[i] = i;
    for (int s = 0; s < opts.clara_samples; ++s) {
      for (std::size_t i = 0; i < sample_size; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng.next_below(n - i));
        std::swap(pool[i], pool[j]);
      }
      std::vector<std::size_t> sample(pool.begin(), pool.begin() + sample_size);
      std::sort(sample.begin(), sample.end());
      std::vector<Embedding> sub;
      sub.reserve(sample_size);
      for (std::size_t idx : sample) sub.push_back(points[idx]);
      const std::vector<double> dist = cosine_distance_matrix(sub);
      const Clustering local =
          detail::pam_fit(dist, sample_size, k, mix_seed(seed, 500 + s), opts.restarts);
      std::vector<int> medoids(k);
      for (int c = 0; c < k; ++c) medoids[c] = static_cast<int>(sample[local.medoid_indices[c]]);
      double cost = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        double best = std::numeric_limits<double>::infinity();
        for (int c = 0; c < k; ++c) best = std::min(best, 1.0 - dot(unit[medoids[c]], unit[j]));
        cost += best;
      }
      if (cost < best_cost) {
        best_cost = cost;
        best_medoids = medoids;
      }
    }
    result.k = k;
    result.medoid_indices = best_medoids;
    result.assignment.resize(n);
    result.total_cost = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      int best_c = 0;
      double best_d = 1.0 - dot(unit[best_medoids[0]], unit[j]);
      for (int c = 1; c < k; ++c) {
        const double dist_cj = 1.0 - dot(unit[best_medoids[c]], unit[j]);
        if (dist_cj < best_d) {
          best_d = dist_cj;
          best_c = c;
        }
      }
      result.assignment[j] = best_c;
      result.total_cost += best_d;
    }
    result.cost_trace.push_back(result.total_cost);
  }

  result.medoid_embeddings.resize(k);
  for (int c = 0; c < k; ++c) result.medoid_embeddings[c] = points[result.medoid_indices[c]];
  return result;
}

/// Mean silhouette over all points under cosine distance. Singleton clusters
/// contribute 0 for their point, as does the all-identical 0/0 case.
inline double silhouette(const std::vector<Embedding>& points, const Clustering& clustering) {
  if (clustering.k < 2) throw std::invalid_argument("silhouette: needs at least 2 clusters");
  const std::vector<double> dist = cosine_distance_matrix(points);
  return detail::silhouette_from_matrix(dist, points.size(), clustering.assignment, clustering.k);
}

struct ClusterSweepOptions {
  std::optional<int> sweep_min;  // overrides the 2*|labels| lower bound
  std::optional<int> sweep_max;  // overrides the 5*|labels| upper bound
  std::optional<int> fixed_k;    // skips the sweep entirely
  KMedoidsOptions kmedoids;
};

/// Fits every cluster count in [2*label_count, 5*label_count] (clamped to the
/// point count) and returns the clustering with the best silhouette; ties go
/// to the smallest k.
inline Clustering select_k(const std::vector<Embedding>& points, int label_count, std::uint64_t seed,
                           const ClusterSweepOptions& opts = {}) {
  const std::size_t n = points.size();
  if (opts.fixed_k) return kmedoids_fit(points, *opts.fixed_k, seed, opts.kmedoids);
  if (n > opts.kmedoids.exact_cap) {
    throw std::invalid_argument(
        "select_k: point count exceeds the exact-fit cap; configure a fixed cluster count");
  }
  if (label_count < 1) throw std::invalid_argument("select_k: label count must be positive");
  int lo = opts.sweep_min ? *opts.sweep_min : 2 * label_count;
  int hi = opts.sweep_max ? *opts.sweep_max : 5 * label_count;
  lo = std::max(lo, 2);
  hi = std::min<int>(hi, static_cast<int>(n));
  if (lo > hi) {
    throw std::invalid_argument(
        "select_k: fewer points (" + std::to_string(n) + ") than the sweep lower bound (" +
        std::to_string(lo) + "); override the sweep bounds in the configuration");
  }
  const std::vector<double> dist = cosine_distance_matrix(points);
  Clustering best;
  double best_score = -std::numeric_limits<double>::infinity();
  for (int k = lo; k <= hi; ++k) {
    Clustering c = detail::pam_fit(dist, n, k, mix_seed(seed, k), opts.kmedoids.restarts);
    const double score = detail::silhouette_from_matrix(dist, n, c.assignment, k);
    if (score > best_score) {
      best_score = score;
      best = std::move(c);
    }
  }
  best.medoid_embeddings.resize(best.k);
  for (int c = 0; c < best.k; ++c) best.medoid_embeddings[c] = points[best.medoid_indices[c]];
  return best;
}

/// Cluster id of the nearest medoid; ties break toward the lowest id.
inline int assign(const Embedding& embedding, const Clustering& clustering) {
  if (clustering.medoid_embeddings.empty()) throw std::invalid_argument("assign: empty clustering");
  int best = 0;
  double best_d = cosine_distance(embedding, clustering.medoid_embeddings[0]);
  for (int c = 1; c < clustering.k; ++c) {
    const double dist = cosine_distance(embedding, clustering.medoid_embeddings[c]);
    if (dist < best_d) {
      best_d = dist;
      best = c;
    }
  }
  return best;
}

}  // namespace ravl
