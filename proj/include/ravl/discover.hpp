#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ravl/cluster.hpp"
#include "ravl/core.hpp"
#include "ravl/dataset.hpp"
#include "ravl/rng.hpp"
#include "ravl/zeroshot.hpp"

namespace ravl {

/// Per-label accuracy cell of a feature cluster, with the weighted gap
/// contribution. Labels with an empty cell contribute weight 0 and gap 0.
struct ClusterLabelCell {
  int label = -1;
  int n_in = 0;
  double p_in = 0.0;
  int n_out = 0;
  double p_out = 0.0;
  double weight = 0.0;
  double gap = 0.0;  // weight * (p_in - p_out)
};

/// A cluster of visually similar regions with the statistics that score its
/// spuriousness: the influence score (fraction of eligible mispredicted
/// member images whose strongest wrong-class region lies in the cluster) and
/// the performance gap (summed weighted |in vs out| accuracy differences).
struct FeatureCluster {
  int cluster_id = -1;
  std::vector<int> region_indices;
  std::vector<int> image_indices;
  std::vector<ClusterLabelCell> cells;
  double influence = 0.0;
  double gap_total = 0.0;
  int gap_attribute = -1;  // label with the largest |gap|
};

struct RankedRegion {
  int region_index = -1;
  double medoid_similarity = 0.0;
};

enum class DiscoveryVariant { full, gap_only, unweighted_gap, random };

inline std::string to_string(DiscoveryVariant v) {
  switch (v) {
    case DiscoveryVariant::full: return "full";
    case DiscoveryVariant::gap_only: return "gap_only";
    case DiscoveryVariant::unweighted_gap: return "unweighted_gap";
    case DiscoveryVariant::random: return "random";
  }
  return "unknown";
}

inline DiscoveryVariant variant_from_string(const std::string& s) {
  if (s == "full") return DiscoveryVariant::full;
  if (s == "gap_only") return DiscoveryVariant::gap_only;
  if (s == "unweighted_gap") return DiscoveryVariant::unweighted_gap;
  if (s == "random") return DiscoveryVariant::random;
  throw std::invalid_argument("unknown discovery variant: " + s);
}

struct DiscoverOptions {
  double tau_l = 0.25;
  DiscoveryVariant variant = DiscoveryVariant::full;
  ClusterSweepOptions sweep;
};

struct SpuriousReport {
  std::vector<FeatureCluster> ranked;     // surviving clusters, highest gap first
  int pruned_count = 0;
  int total_clusters = 0;
  std::vector<RankedRegion> top_regions;  // top cluster's regions by medoid similarity
  int correlated_label = -1;
  std::string status;                     // "ok" or an explicit empty-report reason
  Clustering clustering;
  DiscoveryVariant variant = DiscoveryVariant::full;
  double tau_l = 0.25;

  bool empty() const { return ranked.empty(); }
  const FeatureCluster* top() const { return ranked.empty() ? nullptr : &ranked.front(); }
};

namespace detail {

struct ScoreContext {
  std::vector<int> predictions;          // per image
  std::vector<ScoreVector> region_scores;  // per region, label order
};

inline ScoreContext score_dataset(const EvalDataset& ds, const LabelEmbeddings& labels) {
  ScoreContext ctx;
  ctx.predictions = predict_images(ds, labels);
  ctx.region_scores.reserve(ds.regions.size());
  for (const auto& reg : ds.regions) ctx.region_scores.push_back(score_image(reg.embedding, labels));
  return ctx;
}

inline std::vector<FeatureCluster> collect_clusters(const EvalDataset& ds,
                                                    const Clustering& clustering) {
  std::vector<FeatureCluster> clusters(clustering.k);
  for (int c = 0; c < clustering.k; ++c) clusters[c].cluster_id = c;
  for (std::size_t r = 0; r < ds.regions.size(); ++r) {
    clusters[clustering.assignment[r]].region_indices.push_back(static_cast<int>(r));
  }
  std::vector<char> seen(ds.images.size());
  for (auto& fc : clusters) {
    std::fill(seen.begin(), seen.end(), 0);
    for (int r : fc.region_indices) seen[ds.regions[r].image] = 1;
    for (std::size_t i = 0; i < seen.size(); ++i) {
      if (seen[i]) fc.image_indices.push_back(static_cast<int>(i));
    }
  }
  return clusters;
}

// Fills the per-label in/out accuracy cells of one cluster.
inline void fill_cells(FeatureCluster& fc, const EvalDataset& ds, std::size_t label_count,
                       const std::vector<int>& predictions) {
  std::vector<char> member(ds.images.size(), 0);
  for (int i : fc.image_indices) member[i] = 1;
  std::vector<int> n_in(label_count, 0), c_in(label_count, 0);
  std::vector<int> n_out(label_count, 0), c_out(label_count, 0);
  for (std::size_t i = 0; i < ds.images.size(); ++i) {
    const int y = ds.images[i].label;
    const bool hit = predictions[i] == y;
    if (member[i]) {
      n_in[y] += 1;
      if (hit) c_in[y] += 1;
    } else {
      n_out[y] += 1;
      if (hit) c_out[y] += 1;
    }
  }
  fc.cells.clear();
  for (std::size_t y = 0; y < label_count; ++y) {
    if (n_in[y] == 0) continue;  // label set of the cluster: labels of member images
    ClusterLabelCell cell;
    cell.label = static_cast<int>(y);
    cell.n_in = n_in[y];
    cell.p_in = static_cast<double>(c_in[y]) / n_in[y];
    cell.n_out = n_out[y];
    cell.p_out = n_out[y] > 0 ? static_cast<double>(c_out[y]) / n_out[y] : 0.0;
    fc.cells.push_back(cell);
  }
}

// Influence score from precomputed predictions and region scores.
inline double influence_from_context(const FeatureCluster& fc, const EvalDataset& ds,
                                     const ScoreContext& ctx) {
  std::vector<char> in_cluster_region(ds.regions.size(), 0);
  for (int r : fc.region_indices) in_cluster_region[r] = 1;

  double best = 0.0;
  for (const auto& cell : fc.cells) {
    if (cell.n_out == 0 || !(cell.p_in < cell.p_out)) continue;
    int eligible = 0;
    int hits = 0;
    for (int i : fc.image_indices) {
      const auto& img = ds.images[i];
      if (img.label != cell.label) continue;
      const int predicted = ctx.predictions[i];
      if (predicted == img.label) continue;  // only mispredicted images count
      if (img.regions.empty()) continue;
      int r_max = img.regions.front();
      double best_score = ctx.region_scores[r_max][predicted];
      for (int r : img.regions) {
        const double s = ctx.region_scores[r][predicted];
        if (s > best_score) {
          best_score = s;
          r_max = r;
        }
      }
      eligible += 1;
      if (in_cluster_region[r_max]) hits += 1;
    }
    if (eligible > 0) best = std::max(best, static_cast<double>(hits) / eligible);
  }
  return best;
}

}  // namespace detail

/// Weighted per-label gap G^y = w_y * (p_in - p_out) with
/// w_y = 2 * min(n_in, n_out) / (n_in + n_out), summed as G = sum |G^y|.
/// Unweighted mode forces w_y = 1 for every label with both cells populated.
inline double performance_gap(FeatureCluster& fc, bool unweighted = false) {
  fc.gap_total = 0.0;
  fc.gap_attribute = -1;
  double best_abs = -1.0;
  for (auto& cell : fc.cells) {
    if (cell.n_in == 0 || cell.n_out == 0) {
      cell.weight = 0.0;
      cell.gap = 0.0;
      continue;
    }
    cell.weight = unweighted
                      ? 1.0
                      : 2.0 * std::min(cell.n_in, cell.n_out) / static_cast<double>(cell.n_in + cell.n_out);
    cell.gap = cell.weight * (cell.p_in - cell.p_out);
    fc.gap_total += std::abs(cell.gap);
    if (std::abs(cell.gap) > best_abs) {
      best_abs = std::abs(cell.gap);
      fc.gap_attribute = cell.label;
    }
  }
  return fc.gap_total;
}

/// Statistics for one cluster of an existing clustering, computed from
/// scratch: accuracy cells, influence score, and performance gap.
inline FeatureCluster cluster_statistics(const EvalDataset& ds, const LabelEmbeddings& labels,
                                         const Clustering& clustering, int cluster_id,
                                         bool unweighted = false) {
  if (cluster_id < 0 || cluster_id >= clustering.k) {
    throw std::invalid_argument("cluster_statistics: cluster id out of range");
  }
  const detail::ScoreContext ctx = detail::score_dataset(ds, labels);
  std::vector<FeatureCluster> clusters = detail::collect_clusters(ds, clustering);
  FeatureCluster fc = std::move(clusters[cluster_id]);
  detail::fill_cells(fc, ds, labels.size(), ctx.predictions);
  fc.influence = detail::influence_from_context(fc, ds, ctx);
  performance_gap(fc, unweighted);
  return fc;
}

/// Influence score H of one cluster: over mispredicted member images whose
/// label satisfies p_in < p_out, the fraction whose highest-scoring region
/// for the predicted class lies in the cluster; maximum over labels.
inline double influence_score(const EvalDataset& ds, const LabelEmbeddings& labels,
                              const Clustering& clustering, int cluster_id) {
  return cluster_statistics(ds, labels, clustering, cluster_id).influence;
}

/// Discovery on a precomputed clustering. Region ranking inside the top
/// cluster is by similarity to the medoid; the random variant instead emits
/// a seeded shuffle of every region in the dataset.
inline SpuriousReport discover_with_clustering(const EvalDataset& ds, const LabelEmbeddings& labels,
                                               const Clustering& clustering, std::uint64_t seed,
                                               const DiscoverOptions& opts = {}) {
  labels.validate();
  ds.validate(labels.size());
  SpuriousReport report;
  report.clustering = clustering;
  report.variant = opts.variant;
  report.tau_l = opts.tau_l;
  report.total_clusters = clustering.k;

  const detail::ScoreContext ctx = detail::score_dataset(ds, labels);
  std::vector<FeatureCluster> clusters = detail::collect_clusters(ds, clustering);
  for (auto& fc : clusters) {
    detail::fill_cells(fc, ds, labels.size(), ctx.predictions);
    fc.influence = detail::influence_from_context(fc, ds, ctx);
  }

  const bool prune = opts.variant == DiscoveryVariant::full;
  const bool unweighted = opts.variant == DiscoveryVariant::unweighted_gap;
  for (auto& fc : clusters) {
    if (prune && fc.influence < opts.tau_l) {
      report.pruned_count += 1;
      continue;
    }
    performance_gap(fc, unweighted);
    report.ranked.push_back(std::move(fc));
  }
  std::stable_sort(report.ranked.begin(), report.ranked.end(),
                   [](const FeatureCluster& a, const FeatureCluster& b) {
                     if (a.gap_total != b.gap_total) return a.gap_total > b.gap_total;
                     return a.cluster_id < b.cluster_id;
                   });

  if (opts.variant == DiscoveryVariant::random) {
    std::vector<int> order(ds.regions.size());
    for (std::size_t r = 0; r < order.size(); ++r) order[r] = static_cast<int>(r);
    Rng rng(seed);
    rng.shuffle(order);
    report.top_regions.reserve(order.size());
    for (int r : order) report.top_regions.push_back({r, 0.0});
  } else if (!report.ranked.empty()) {
    const FeatureCluster& top = report.ranked.front();
    const Embedding& medoid = clustering.medoid_embeddings[top.cluster_id];
    for (int r : top.region_indices) {
      report.top_regions.push_back({r, cosine_similarity(ds.regions[r].embedding, medoid)});
    }
    std::stable_sort(report.top_regions.begin(), report.top_regions.end(),
                     [](const RankedRegion& a, const RankedRegion& b) {
                       if (a.medoid_similarity != b.medoid_similarity) {
                         return a.medoid_similarity > b.medoid_similarity;
                       }
                       return a.region_index < b.region_index;
                     });
  }

  if (report.ranked.empty()) {
    report.status = "no spurious cluster above tau_l";
  } else {
    report.status = "ok";
    report.correlated_label = report.ranked.front().gap_attribute;
  }
  return report;
}

/// The full discovery pipeline: cluster-count selection, influence pruning at
/// tau_l, gap ranking, and region ranking for the top cluster.
inline SpuriousReport discover(const EvalDataset& ds, const LabelEmbeddings& labels,
                               std::uint64_t seed, const DiscoverOptions& opts = {}) {
  labels.validate();
  ds.validate(labels.size());
  std::vector<Embedding> region_embeddings;
  region_embeddings.reserve(ds.regions.size());
  for (const auto& reg : ds.regions) region_embeddings.push_back(reg.embedding);
  const Clustering clustering =
      select_k(region_embeddings, static_cast<int>(labels.size()), seed, opts.sweep);
  return discover_with_clustering(ds, labels, clustering, seed, opts);
}

inline SpuriousReport discover_variant(const EvalDataset& ds, const LabelEmbeddings& labels,
                                       std::uint64_t seed, DiscoveryVariant variant,
                                       DiscoverOptions opts = {}) {
  opts.variant = variant;
  return discover(ds, labels, seed, opts);
}

}  // namespace ravl
