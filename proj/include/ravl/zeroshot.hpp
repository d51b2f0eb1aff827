#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ravl/core.hpp"
#include "ravl/dataset.hpp"

namespace ravl {

/// Zero-shot score distribution for one embedding: softmax over cosine
/// similarities to each class-label embedding, in label order.
inline ScoreVector score_image(const Embedding& image_embedding, const LabelEmbeddings& labels) {
  labels.validate();
  std::vector<double> sims(labels.size());
  for (std::size_t y = 0; y < labels.size(); ++y) {
    sims[y] = cosine_similarity(image_embedding, labels.embeddings[y]);
  }
  return softmax(sims);
}

inline ScoreMatrix score_regions(const std::vector<Embedding>& region_embeddings,
                                 const LabelEmbeddings& labels) {
  if (region_embeddings.empty()) throw std::invalid_argument("score_regions: empty region list");
  ScoreMatrix rows;
  rows.reserve(region_embeddings.size());
  for (const auto& e : region_embeddings) rows.push_back(score_image(e, labels));
  return rows;
}

inline int predict_label(const Embedding& embedding, const LabelEmbeddings& labels) {
  return static_cast<int>(argmax_stable(score_image(embedding, labels)));
}

/// Predicted label per image, in dataset order.
inline std::vector<int> predict_images(const EvalDataset& ds, const LabelEmbeddings& labels) {
  std::vector<int> out;
  out.reserve(ds.images.size());
  for (const auto& img : ds.images) out.push_back(predict_label(img.embedding, labels));
  return out;
}

/// Accuracy cells for one label: counts and accuracy over member ("in") and
/// non-member ("out") images. Accuracy is NaN when the count is zero.
struct GroupCell {
  int n_in = 0;
  double p_in = std::numeric_limits<double>::quiet_NaN();
  int n_out = 0;
  double p_out = std::numeric_limits<double>::quiet_NaN();
};

using GroupAccuracyTable = std::vector<GroupCell>;

/// Per-label accuracy split by a boolean image membership (aligned with
/// ds.images). Prediction is the stable argmax of the zero-shot scores.
inline GroupAccuracyTable group_accuracies(const EvalDataset& ds, const LabelEmbeddings& labels,
                                           const std::vector<std::uint8_t>& membership) {
  if (membership.size() != ds.images.size()) {
    throw std::invalid_argument("group_accuracies: membership must cover every image");
  }
  const std::vector<int> predicted = predict_images(ds, labels);
  GroupAccuracyTable table(labels.size());
  std::vector<int> correct_in(labels.size(), 0), correct_out(labels.size(), 0);
  for (std::size_t i = 0; i < ds.images.size(); ++i) {
    const int y = ds.images[i].label;
    const bool hit = predicted[i] == y;
    if (membership[i]) {
      table[y].n_in += 1;
      if (hit) correct_in[y] += 1;
    } else {
      table[y].n_out += 1;
      if (hit) correct_out[y] += 1;
    }
  }
  for (std::size_t y = 0; y < table.size(); ++y) {
    if (table[y].n_in > 0) table[y].p_in = static_cast<double>(correct_in[y]) / table[y].n_in;
    if (table[y].n_out > 0) table[y].p_out = static_cast<double>(correct_out[y]) / table[y].n_out;
  }
  return table;
}

struct GroupScore {
  int count = 0;
  int correct = 0;
  double accuracy() const { return count > 0 ? static_cast<double>(correct) / count : 0.0; }
};

/// Overall and worst-group accuracy for images (groups given by the caller)
/// and for regions (grouped by their ground-truth concept tag; only regions
/// whose tag is a class label are scoreable).
struct WorstGroupMetrics {
  double image_overall = 0.0;
  double image_worst_group = 0.0;
  std::map<int, GroupScore> image_groups;
  std::optional<double> region_overall;
  std::optional<double> region_worst_group;
  std::map<std::string, GroupScore> region_groups;
};

inline WorstGroupMetrics worst_group_metrics(const EvalDataset& ds, const LabelEmbeddings& labels,
                                             const std::vector<int>& image_group) {
  if (image_group.size() != ds.images.size()) {
    throw std::invalid_argument("worst_group_metrics: every image needs a group id");
  }
  WorstGroupMetrics m;
  const std::vector<int> predicted = predict_images(ds, labels);
  int total_correct = 0;
  for (std::size_t i = 0; i < ds.images.size(); ++i) {
    auto& g = m.image_groups[image_group[i]];
    g.count += 1;
    if (predicted[i] == ds.images[i].label) {
      g.correct += 1;
      total_correct += 1;
    }
  }
  m.image_overall = ds.images.empty() ? 0.0 : static_cast<double>(total_correct) / ds.images.size();
  double worst = 1.0;
  for (const auto& [id, g] : m.image_groups) {
    if (g.count > 0) worst = std::min(worst, g.accuracy());
  }
  m.image_worst_group = m.image_groups.empty() ? 0.0 : worst;

  int region_total = 0, region_correct = 0;
  for (const auto& reg : ds.regions) {
    if (reg.concept_tag.empty()) continue;
    const int tag_label = labels.find(reg.concept_tag);
    if (tag_label < 0) continue;
    const int pred = predict_label(reg.embedding, labels);
    auto& g = m.region_groups[reg.concept_tag];
    g.count += 1;
    region_total += 1;
    if (pred == tag_label) {
      g.correct += 1;
      region_correct += 1;
    }
  }
  if (region_total > 0) {
    m.region_overall = static_cast<double>(region_correct) / region_total;
    double region_worst = 1.0;
    for (const auto& [tag, g] : m.region_groups) region_worst = std::min(region_worst, g.accuracy());
    m.region_worst_group = region_worst;
  }
  return m;
}

}  // namespace ravl
