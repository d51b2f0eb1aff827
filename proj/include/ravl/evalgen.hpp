#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ravl/core.hpp"
#include "ravl/dataset.hpp"
#include "ravl/discover.hpp"
#include "ravl/encoder.hpp"
#include "ravl/rng.hpp"

namespace ravl {

/// 2x2 contingency counts. Rows split on the correlated label, columns on
/// feature presence: a = (label, feature), b = (label, no feature),
/// c = (other, feature), d = (other, no feature).
struct ContingencyTable2x2 {
  long long a = 0;
  long long b = 0;
  long long c = 0;
  long long d = 0;

  long long total() const { return a + b + c + d; }
};

/// Cramer's V via the Pearson chi-square statistic; any zero marginal yields 0.
inline double cramers_v(const ContingencyTable2x2& t) {
  if (t.a < 0 || t.b < 0 || t.c < 0 || t.d < 0) {
    throw std::invalid_argument("cramers_v: counts must be nonnegative");
  }
  const double n = static_cast<double>(t.total());
  if (n <= 0.0) throw std::invalid_argument("cramers_v: empty table");
  const double row1 = static_cast<double>(t.a + t.b);
  const double row2 = static_cast<double>(t.c + t.d);
  const double col1 = static_cast<double>(t.a + t.c);
  const double col2 = static_cast<double>(t.b + t.d);
  if (row1 == 0.0 || row2 == 0.0 || col1 == 0.0 || col2 == 0.0) return 0.0;
  const double observed[2][2] = {{static_cast<double>(t.a), static_cast<double>(t.b)},
                                 {static_cast<double>(t.c), static_cast<double>(t.d)}};
  const double rows[2] = {row1, row2};
  const double cols[2] = {col1, col2};
  double chi2 = 0.0;
  for (int r = 0; r < 2; ++r) {
    for (int c = 0; c < 2; ++c) {
      const double expected = rows[r] * cols[c] / n;
      const double diff = observed[r][c] - expected;
      chi2 += diff * diff / expected;
    }
  }
  return std::sqrt(chi2 / n);  // min(rows, cols) - 1 == 1 for a 2x2 table
}

/// Parameters of one synthetic embedding world: labels with per-label core
/// concepts, background concepts, and a planted spurious concept correlated
/// with one label in the fine-tuning split at a target Cramer's V.
struct WorldSpec {
  std::vector<std::string> labels;
  int background_concepts = 6;
  std::string spurious_concept = "spurious_marker";
  std::string spurious_label;  // the correlated textual attribute
  double cramers_v_target = 0.95;
  int raw_dim = 24;
  int embed_dim = 8;
  double noise_std = 0.08;
  double core_similarity = 0.5;   // shared variance across core concepts
  double core_noise_mult = 2.0;   // extra noise on core regions
  int regions_min = 2;
  int regions_max = 4;
  int finetune_images = 400;
  int eval_images = 320;
  double eval_feature_rate = 0.5;
  std::vector<std::string> caption_templates = {
      "the image shows a {}",
      "the item appears to be a {}",
      "there is an image showing a {}",
      "this one is a {}",
  };
  double caption_jitter = 0.2;
  std::uint64_t seed = 0;

  int label_index(const std::string& name) const {
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == name) return static_cast<int>(i);
    }
    return -1;
  }

  void validate() const {
    if (labels.empty()) throw std::invalid_argument("WorldSpec: label set is empty");
    for (std::size_t i = 0; i < labels.size(); ++i) {
      for (std::size_t j = i + 1; j < labels.size(); ++j) {
        if (labels[i] == labels[j]) throw std::invalid_argument("WorldSpec: duplicate label");
      }
    }
    if (label_index(spurious_label) < 0) {
      throw std::invalid_argument("WorldSpec: spurious_label must be one of the class labels");
    }
    if (label_index(spurious_concept) >= 0) {
      throw std::invalid_argument("WorldSpec: the spurious concept cannot be a class core concept");
    }
    if (cramers_v_target < 0.0 || cramers_v_target > 1.0) {
      throw std::invalid_argument("WorldSpec: Cramer's V target must be in [0, 1]");
    }
    if (raw_dim < 1 || embed_dim < 1) throw std::invalid_argument("WorldSpec: dimensions must be positive");
    if (noise_std <= 0.0) throw std::invalid_argument("WorldSpec: noise_std must be positive");
    if (core_similarity < 0.0 || core_similarity >= 1.0) {
      throw std::invalid_argument("WorldSpec: core_similarity must be in [0, 1)");
    }
    if (core_noise_mult <= 0.0) throw std::invalid_argument("WorldSpec: core_noise_mult must be positive");
    if (regions_min < 1 || regions_max < regions_min) {
      throw std::invalid_argument("WorldSpec: bad regions-per-image range");
    }
    if (background_concepts < 1) throw std::invalid_argument("WorldSpec: needs background concepts");
    const int label_count = static_cast<int>(labels.size());
    if (finetune_images < 2 * label_count) {
      throw std::invalid_argument("WorldSpec: finetune_images too small for the label set");
    }
    if (eval_images < 2 * label_count || eval_images % label_count != 0) {
      throw std::invalid_argument(
          "WorldSpec: eval_images must be a positive multiple of the label count");
    }
    if (eval_feature_rate <= 0.0 || eval_feature_rate >= 1.0) {
      throw std::invalid_argument("WorldSpec: eval_feature_rate must be in (0, 1)");
    }
    if (caption_templates.empty()) throw std::invalid_argument("WorldSpec: no caption templates");
    for (const auto& t : caption_templates) {
      if (t.find("{}") == std::string::npos) {
        throw std::invalid_argument("WorldSpec: caption template lacks a {} placeholder: " + t);
      }
    }
    if (caption_jitter < 0.0) throw std::invalid_argument("WorldSpec: caption_jitter must be nonnegative");
  }
};

struct RawRegion {
  int id = -1;
  int image = -1;
  std::array<double, 4> box{0.0, 0.0, 0.0, 0.0};
  std::vector<double> raw;
  std::string concept_tag;
};

struct RawImage {
  int id = -1;
  std::vector<double> raw;
  int label = -1;
  bool has_feature = false;
  std::string caption;
  Embedding caption_embedding;
  std::vector<int> regions;
};

/// Raw-feature dataset; embeddings come from an encoder at use time.
struct RawSet {
  std::vector<RawImage> images;
  std::vector<RawRegion> regions;
};

struct ValidityReport {
  double eps1 = 0.0;  // percentage points
  double eps2 = 0.0;  // percentage points
  double tau_eval = 0.0;
  bool eps1_defined = false;
  bool eps2_defined = false;
  bool valid = false;
  std::string reason;
};

/// One controlled experiment: a fine-tuning split carrying the planted
/// correlation and an evaluation split where feature and label are
/// independent by construction.
struct EvalSetting {
  WorldSpec spec;
  LabelEmbeddings labels;
  RawSet finetune;
  RawSet eval;
  int spurious_label_index = -1;
  ContingencyTable2x2 finetune_counts;
  double achieved_v = 0.0;
  std::vector<std::vector<double>> core_prototypes;
  std::vector<double> spurious_prototype;
  std::vector<std::vector<double>> background_prototypes;
};

namespace detail {

inline std::vector<double> random_unit(Rng& rng, int dim) {
  std::vector<double> v(dim);
  double norm2 = 0.0;
  do {
    norm2 = 0.0;
    for (double& x : v) {
      x = rng.next_gaussian();
      norm2 += x * x;
    }
  } while (norm2 == 0.0);
  const double inv = 1.0 / std::sqrt(norm2);
  for (double& x : v) x *= inv;
  return v;
}

inline std::vector<double> noisy_copy(Rng& rng, const std::vector<double>& prototype, double sigma) {
  std::vector<double> v(prototype.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = prototype[i] + sigma * rng.next_gaussian();
  return v;
}

// Orthonormal label embeddings when the dimension allows, plain unit vectors
// otherwise.
inline std::vector<Embedding> label_directions(Rng& rng, int count, int dim) {
  std::vector<Embedding> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) {
    Embedding v = random_unit(rng, dim);
    if (i < dim) {
      for (const auto& prev : out) {
        const double proj = dot(v, prev);
        for (int c = 0; c < dim; ++c) v[c] -= proj * prev[c];
      }
    }
    out.push_back(l2_normalized(v));
  }
  return out;
}

struct CooccurrenceSolution {
  long long with_label = 0;   // feature-present count among correlated-label images
  long long with_other = 0;   // feature-present count among remaining images
  double achieved_v = 0.0;
  double min_v = 0.0;
  double max_v = 0.0;
  bool feasible = false;
};

// Integer search for feature counts hitting the Cramer's V target. The
// feature is constrained to be at least as frequent with the correlated
// label as elsewhere; ties on |V - target| prefer a balanced overall rate.
inline CooccurrenceSolution solve_cooccurrence(long long n_label, long long n_other, double target,
                                               double tolerance) {
  CooccurrenceSolution best;
  best.min_v = std::numeric_limits<double>::infinity();
  best.max_v = -std::numeric_limits<double>::infinity();
  double best_err = std::numeric_limits<double>::infinity();
  double best_balance = std::numeric_limits<double>::infinity();
  for (long long a = 0; a <= n_label; ++a) {
    for (long long c = 0; c <= n_other; ++c) {
      const double q1 = static_cast<double>(a) / n_label;
      const double q0 = static_cast<double>(c) / n_other;
      if (q1 < q0) continue;
      ContingencyTable2x2 t{a, n_label - a, c, n_other - c};
      const double v = cramers_v(t);
      best.min_v = std::min(best.min_v, v);
      best.max_v = std::max(best.max_v, v);
      const double err = std::abs(v - target);
      const double balance = std::abs(0.5 * (q1 + q0) - 0.5);
      if (err < best_err - 1e-15 || (std::abs(err - best_err) <= 1e-15 && balance < best_balance - 1e-15)) {
        best_err = err;
        best_balance = balance;
        best.with_label = a;
        best.with_other = c;
        best.achieved_v = v;
      }
    }
  }
  best.feasible = best_err <= tolerance;
  return best;
}

}  // namespace detail

/// Per-setting derived-seed streams.
enum class SeedStream : std::uint64_t {
  prototypes = 1,
  labels = 2,
  finetune = 3,
  eval = 4,
  encoder_init = 5,
  train_standard = 6,
  train_upsampled = 7,
  train_ravl = 8,
  clustering = 9,
  discovery = 10,
};

inline std::uint64_t setting_seed(std::uint64_t seed, SeedStream stream) {
  return mix_seed(seed, static_cast<std::uint64_t>(stream));
}

/// Builds the synthetic world for one spec: prototypes, frozen label and
/// caption embeddings, a fine-tuning split whose feature/label co-occurrence
/// hits the Cramer's V target within 0.02, and an evaluation split where the
/// feature appears at the same rate under every label.
inline EvalSetting generate_setting(const WorldSpec& spec) {
  spec.validate();
  EvalSetting setting;
  setting.spec = spec;
  const int label_count = static_cast<int>(spec.labels.size());
  setting.spurious_label_index = spec.label_index(spec.spurious_label);

  Rng proto_rng(setting_seed(spec.seed, SeedStream::prototypes));
  const std::vector<double> shared_core = detail::random_unit(proto_rng, spec.raw_dim);
  const double shared_w = std::sqrt(spec.core_similarity);
  const double indiv_w = std::sqrt(1.0 - spec.core_similarity);
  setting.core_prototypes.reserve(label_count);
  for (int y = 0; y < label_count; ++y) {
    std::vector<double> indiv = detail::random_unit(proto_rng, spec.raw_dim);
    std::vector<double> proto(spec.raw_dim);
    for (int i = 0; i < spec.raw_dim; ++i) proto[i] = shared_w * shared_core[i] + indiv_w * indiv[i];
    setting.core_prototypes.push_back(l2_normalized(proto));
  }
  setting.spurious_prototype = detail::random_unit(proto_rng, spec.raw_dim);
  setting.background_prototypes.reserve(spec.background_concepts);
  for (int b = 0; b < spec.background_concepts; ++b) {
    setting.background_prototypes.push_back(detail::random_unit(proto_rng, spec.raw_dim));
  }

  Rng label_rng(setting_seed(spec.seed, SeedStream::labels));
  setting.labels.names = spec.labels;
  setting.labels.embeddings = detail::label_directions(label_rng, label_count, spec.embed_dim);
  std::vector<Embedding> template_directions;
  template_directions.reserve(spec.caption_templates.size());
  for (std::size_t t = 0; t < spec.caption_templates.size(); ++t) {
    template_directions.push_back(detail::random_unit(label_rng, spec.embed_dim));
  }

  // Fine-tuning split with the planted co-occurrence.
  const long long n_label = [&] {
    long long base = spec.finetune_images / label_count;
    return base + (setting.spurious_label_index < spec.finetune_images % label_count ? 1 : 0);
  }();
  const long long n_other = spec.finetune_images - n_label;
  const detail::CooccurrenceSolution sol =
      detail::solve_cooccurrence(n_label, n_other, spec.cramers_v_target, 0.02);
  if (!sol.feasible) {
    throw std::invalid_argument(
        "generate_setting: Cramer's V target " + std::to_string(spec.cramers_v_target) +
        " is not achievable within 0.02 for this split; feasible range is [" +
        std::to_string(sol.min_v) + ", " + std::to_string(sol.max_v) + "]");
  }
  setting.finetune_counts = {sol.with_label, n_label - sol.with_label, sol.with_other,
                             n_other - sol.with_other};
  setting.achieved_v = sol.achieved_v;

  Rng ft_rng(setting_seed(spec.seed, SeedStream::finetune));
  struct PlannedImage {
    int label;
    bool feature;
  };
  std::vector<PlannedImage> planned;
  planned.reserve(spec.finetune_images);
  {
    // Per-label feature quotas: the full solved count for the correlated
    // label, the remainder spread evenly across the others.
    std::vector<long long> count_by_label(label_count);
    std::vector<long long> feature_by_label(label_count, 0);
    for (int y = 0; y < label_count; ++y) {
      count_by_label[y] = spec.finetune_images / label_count +
                          (y < spec.finetune_images % label_count ? 1 : 0);
    }
    feature_by_label[setting.spurious_label_index] = sol.with_label;
    const int others = label_count - 1;
    if (others > 0) {
      long long base = sol.with_other / others;
      long long extra = sol.with_other % others;
      for (int y = 0; y < label_count; ++y) {
        if (y == setting.spurious_label_index) continue;
        long long quota = base + (extra > 0 ? 1 : 0);
        if (extra > 0) extra -= 1;
        feature_by_label[y] = std::min(quota, count_by_label[y]);
      }
      // Any clamped remainder goes back to the correlated label.
      long long assigned = 0;
      for (int y = 0; y < label_count; ++y) {
        if (y != setting.spurious_label_index) assigned += feature_by_label[y];
      }
      feature_by_label[setting.spurious_label_index] += sol.with_other - assigned;
    }
    for (int y = 0; y < label_count; ++y) {
      for (long long i = 0; i < count_by_label[y]; ++i) {
        planned.push_back({y, i < feature_by_label[y]});
      }
    }
    ft_rng.shuffle(planned);
  }

  auto emit_image = [&](RawSet& set, Rng& rng, int label, bool feature, bool with_caption) {
    RawImage img;
    img.id = static_cast<int>(set.images.size());
    img.label = label;
    img.has_feature = feature;
    const int target_regions = rng.next_int(spec.regions_min, spec.regions_max);
    const int backgrounds = std::max(0, target_regions - 1 - (feature ? 1 : 0));

    auto add_region = [&](const std::vector<double>& prototype, double sigma, const std::string& tag) {
      RawRegion reg;
      reg.id = static_cast<int>(set.regions.size());
      reg.image = img.id;
      const double slot = static_cast<double>(img.regions.size());
      reg.box = {slot, 0.0, slot + 1.0, 1.0};
      reg.raw = detail::noisy_copy(rng, prototype, sigma);
      reg.concept_tag = tag;
      img.regions.push_back(reg.id);
      set.regions.push_back(std::move(reg));
    };

    add_region(setting.core_prototypes[label], spec.noise_std * spec.core_noise_mult,
               spec.labels[label]);
    if (feature) add_region(setting.spurious_prototype, spec.noise_std, spec.spurious_concept);
    for (int b = 0; b < backgrounds; ++b) {
      const int which = rng.next_int(0, spec.background_concepts - 1);
      add_region(setting.background_prototypes[which], spec.noise_std,
                 "background_" + std::to_string(which));
    }

    img.raw.assign(spec.raw_dim, 0.0);
    for (int r : img.regions) {
      for (int i = 0; i < spec.raw_dim; ++i) img.raw[i] += set.regions[r].raw[i];
    }
    for (double& v : img.raw) v /= static_cast<double>(img.regions.size());

    if (with_caption) {
      const int t = rng.next_int(0, static_cast<int>(spec.caption_templates.size()) - 1);
      std::string caption = spec.caption_templates[t];
      caption.replace(caption.find("{}"), 2, spec.labels[label]);
      img.caption = caption;
      Embedding ce = setting.labels.embeddings[label];
      for (int i = 0; i < spec.embed_dim; ++i) ce[i] += spec.caption_jitter * template_directions[t][i];
      img.caption_embedding = l2_normalized(ce);
    }
    set.images.push_back(std::move(img));
  };

  for (const auto& p : planned) emit_image(setting.finetune, ft_rng, p.label, p.feature, true);

  // Evaluation split: identical per-label counts and identical feature-present
  // counts per label, so feature and label are independent exactly.
  Rng ev_rng(setting_seed(spec.seed, SeedStream::eval));
  {
    const int per_label = spec.eval_images / label_count;
    const int with_feature = static_cast<int>(std::lround(spec.eval_feature_rate * per_label));
    std::vector<PlannedImage> eval_plan;
    eval_plan.reserve(spec.eval_images);
    for (int y = 0; y < label_count; ++y) {
      for (int i = 0; i < per_label; ++i) eval_plan.push_back({y, i < with_feature});
    }
    ev_rng.shuffle(eval_plan);
    for (const auto& p : eval_plan) emit_image(setting.eval, ev_rng, p.label, p.feature, false);
  }
  return setting;
}

/// Embeds a raw split with an encoder, producing the labeled zero-shot
/// dataset consumed by discovery and the evaluation metrics.
inline EvalDataset materialize_eval(const RawSet& raws, const EncoderParams& encoder) {
  EvalDataset ds;
  ds.images.reserve(raws.images.size());
  ds.regions.reserve(raws.regions.size());
  for (const auto& img : raws.images) {
    ImageRecord rec;
    rec.id = img.id;
    rec.embedding = encoder.embed(img.raw);
    rec.label = img.label;
    rec.regions = img.regions;
    ds.images.push_back(std::move(rec));
  }
  for (const auto& reg : raws.regions) {
    RegionRecord rec;
    rec.id = reg.id;
    rec.image = reg.image;
    rec.box = reg.box;
    rec.embedding = encoder.embed(reg.raw);
    rec.concept_tag = reg.concept_tag;
    ds.regions.push_back(std::move(rec));
  }
  return ds;
}

/// Image subgroup id for worst-group reporting: one group per
/// (label, feature-presence) combination.
inline std::vector<int> eval_subgroups(const RawSet& raws) {
  std::vector<int> groups;
  groups.reserve(raws.images.size());
  for (const auto& img : raws.images) {
    groups.push_back(img.label * 2 + (img.has_feature ? 1 : 0));
  }
  return groups;
}

/// Checks whether a model learned the planted correlation. eps1 is the
/// accuracy drop (in points) on correlated-label images when the feature is
/// absent; eps2 is the largest drop on other labels when the feature is
/// present. Both must exceed tau_eval.
inline ValidityReport check_validity(const EvalSetting& setting,
                                     const std::function<int(const RawImage&)>& predict,
                                     double tau_eval) {
  ValidityReport report;
  report.tau_eval = tau_eval;
  const int label_count = static_cast<int>(setting.labels.size());
  std::vector<std::array<int, 2>> counts(label_count, {0, 0});
  std::vector<std::array<int, 2>> correct(label_count, {0, 0});
  for (const auto& img : setting.eval.images) {
    const int f = img.has_feature ? 1 : 0;
    counts[img.label][f] += 1;
    if (predict(img) == img.label) correct[img.label][f] += 1;
  }
  auto accuracy = [&](int y, int f) -> std::optional<double> {
    if (counts[y][f] == 0) return std::nullopt;
    return static_cast<double>(correct[y][f]) / counts[y][f];
  };

  const int a = setting.spurious_label_index;
  const auto with_a = accuracy(a, 1);
  const auto without_a = accuracy(a, 0);
  if (with_a && without_a) {
    report.eps1 = 100.0 * (*with_a - *without_a);
    report.eps1_defined = true;
  }
  bool any_other = false;
  double worst = -std::numeric_limits<double>::infinity();
  bool missing_other_cell = false;
  for (int y = 0; y < label_count; ++y) {
    if (y == a) continue;
    const auto with_y = accuracy(y, 1);
    const auto without_y = accuracy(y, 0);
    if (!with_y || !without_y) {
      missing_other_cell = true;
      continue;
    }
    any_other = true;
    worst = std::max(worst, 100.0 * (*without_y - *with_y));
  }
  if (any_other) {
    report.eps2 = worst;
    report.eps2_defined = true;
  }

  if (!report.eps1_defined) {
    report.reason = "eps1 undefined: no images in one correlated-label cell";
  } else if (!report.eps2_defined) {
    report.reason = "eps2 undefined: no other-label cell has both feature states";
  } else if (missing_other_cell) {
    report.reason = "eps2 computed on a subset of labels; some cells were empty";
  }
  report.valid = report.eps1_defined && report.eps2_defined && report.eps1 > tau_eval &&
                 report.eps2 > tau_eval;
  if (!report.valid && report.reason.empty()) {
    report.reason = "correlation gaps below tau_eval";
  }
  return report;
}

/// Oracle predictor that scores with ground-truth core-concept similarity:
/// each label gets the best cosine between its core prototype and any region
/// of the image, so the planted feature never sways the prediction.
inline std::function<int(const RawImage&)> oracle_predictor(const EvalSetting& setting) {
  return [&setting](const RawImage& img) {
    std::vector<double> sims(setting.core_prototypes.size(),
                             -std::numeric_limits<double>::infinity());
    for (std::size_t y = 0; y < setting.core_prototypes.size(); ++y) {
      if (img.regions.empty()) {
        sims[y] = cosine_similarity(img.raw, setting.core_prototypes[y]);
        continue;
      }
      for (int r : img.regions) {
        sims[y] = std::max(
            sims[y], cosine_similarity(setting.eval.regions[r].raw, setting.core_prototypes[y]));
      }
    }
    return static_cast<int>(argmax_stable(sims));
  };
}

/// Predictor backed by a trained encoder and the frozen label embeddings.
inline std::function<int(const RawImage&)> encoder_predictor(const EncoderParams& encoder,
                                                             const LabelEmbeddings& labels) {
  return [&encoder, &labels](const RawImage& img) {
    return predict_label(encoder.embed(img.raw), labels);
  };
}

struct PrecisionResult {
  double value = 0.0;
  int evaluated = 0;
  bool truncated = false;  // fewer than k ranked regions were available
};

/// Fraction of the top-k ranked regions whose ground-truth concept tag equals
/// the planted spurious concept.
inline PrecisionResult precision_at_k(const SpuriousReport& report, const EvalDataset& ds,
                                      const std::string& spurious_concept, int k) {
  if (k < 1) throw std::invalid_argument("precision_at_k: k must be positive");
  if (report.top_regions.empty()) {
    throw std::invalid_argument("precision_at_k: report has no ranked regions");
  }
  PrecisionResult res;
  res.evaluated = std::min<int>(k, static_cast<int>(report.top_regions.size()));
  res.truncated = res.evaluated < k;
  int hits = 0;
  for (int i = 0; i < res.evaluated; ++i) {
    const int r = report.top_regions[i].region_index;
    if (ds.regions[r].concept_tag == spurious_concept) hits += 1;
  }
  res.value = static_cast<double>(hits) / res.evaluated;
  return res;
}

}  // namespace ravl
