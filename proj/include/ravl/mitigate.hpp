#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ravl/core.hpp"
#include "ravl/dataset.hpp"
#include "ravl/discover.hpp"
#include "ravl/encoder.hpp"
#include "ravl/evalgen.hpp"
#include "ravl/rng.hpp"

namespace ravl {

enum class TrainMode { standard, upsampled, ravl };

inline std::string to_string(TrainMode m) {
  switch (m) {
    case TrainMode::standard: return "standard";
    case TrainMode::upsampled: return "upsampled";
    case TrainMode::ravl: return "ravl";
  }
  return "unknown";
}

inline TrainMode mode_from_string(const std::string& s) {
  if (s == "standard") return TrainMode::standard;
  if (s == "upsampled") return TrainMode::upsampled;
  if (s == "ravl") return TrainMode::ravl;
  throw std::invalid_argument("unknown train mode: " + s);
}

struct TrainConfig {
  double lambda = 0.8;
  double temperature = 0.07;
  double learning_rate = 0.05;
  int batch_size = 64;
  int epochs = 100;
  int patience = 10;
  double holdout_fraction = 0.1;
  std::uint64_t seed = 0;
  TrainMode mode = TrainMode::standard;

  void validate() const {
    if (lambda < 0.0 || lambda > 1.0) throw std::invalid_argument("TrainConfig: lambda must be in [0, 1]");
    if (temperature <= 0.0) throw std::invalid_argument("TrainConfig: temperature must be positive");
    if (learning_rate <= 0.0) throw std::invalid_argument("TrainConfig: learning rate must be positive");
    if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch size must be positive");
    if (epochs < 1) throw std::invalid_argument("TrainConfig: epochs must be positive");
    if (holdout_fraction < 0.0 || holdout_fraction >= 1.0) {
      throw std::invalid_argument("TrainConfig: holdout fraction must be in [0, 1)");
    }
  }
};

/// sigma(a, b) = exp(<a, b> / tau) on unit-normalized inputs.
inline double sigma(const Embedding& region, const Embedding& label, double tau) {
  if (tau <= 0.0) throw std::invalid_argument("sigma: temperature must be positive");
  return std::exp(dot(l2_normalized(region), l2_normalized(label)) / tau);
}

/// sigma_m(A, b) = exp(max_{a in A} <a, b> / tau).
inline double sigma_m(const std::vector<Embedding>& regions, const Embedding& label, double tau) {
  if (regions.empty()) throw std::invalid_argument("sigma_m: empty region set");
  if (tau <= 0.0) throw std::invalid_argument("sigma_m: temperature must be positive");
  double best = -std::numeric_limits<double>::infinity();
  const Embedding unit_label = l2_normalized(label);
  for (const auto& r : regions) best = std::max(best, dot(l2_normalized(r), unit_label));
  return std::exp(best / tau);
}

/// P = sum over spurious regions of max over batch labels of sigma(r, y).
/// An empty pool (or an empty label set) contributes 0.
inline double penalty(const std::vector<Embedding>& spurious_pool,
                      const std::vector<Embedding>& batch_labels, double tau) {
  if (spurious_pool.empty() || batch_labels.empty()) return 0.0;
  double total = 0.0;
  for (const auto& r : spurious_pool) {
    double best = -std::numeric_limits<double>::infinity();
    for (const auto& y : batch_labels) best = std::max(best, dot(l2_normalized(r), l2_normalized(y)) / tau);
    total += std::exp(best);
  }
  return total;
}

/// Case-insensitive whole-word match. Word boundaries are non-alphanumeric
/// characters or the string ends.
inline bool caption_mentions(const std::string& caption, const std::string& label) {
  auto lower = [](std::string s) {
    for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
  };
  const std::string hay = lower(caption);
  const std::string needle = lower(label);
  if (needle.empty()) return false;
  auto is_word = [](char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; };
  std::size_t pos = 0;
  while ((pos = hay.find(needle, pos)) != std::string::npos) {
    const bool left_ok = pos == 0 || !is_word(hay[pos - 1]);
    const std::size_t end = pos + needle.size();
    const bool right_ok = end == hay.size() || !is_word(hay[end]);
    if (left_ok && right_ok) return true;
    pos += 1;
  }
  return false;
}

/// Pseudo-label per image from its caption: exactly one class label mentioned
/// as a whole word yields that label, otherwise -1.
inline std::vector<int> assign_pseudo_labels(const RawSet& ftset,
                                             const std::vector<std::string>& label_names) {
  std::vector<int> out;
  out.reserve(ftset.images.size());
  for (const auto& img : ftset.images) {
    int found = -1;
    int matches = 0;
    for (std::size_t y = 0; y < label_names.size(); ++y) {
      if (caption_mentions(img.caption, label_names[y])) {
        matches += 1;
        found = static_cast<int>(y);
      }
    }
    out.push_back(matches == 1 ? found : -1);
  }
  return out;
}

/// Region spurious/non-spurious split plus image subgroup ids for sampling
/// and evaluation. Subgroup id = pseudo_label * 2 + feature flag, with
/// unlabeled images in their own pair of groups.
struct SubgroupAssignment {
  std::vector<int> pseudo_label;
  std::vector<std::uint8_t> region_spurious;
  std::vector<int> image_subgroup;
  bool empty_report = false;
};

/// Assigns every fine-tuning region to the nearest stage-1 medoid and flags
/// those landing in the top-ranked cluster as spurious. Region embeddings
/// are computed with the encoder the clustering was fitted under. An empty
/// report marks all regions non-spurious.
inline SubgroupAssignment assign_subgroups(const RawSet& ftset, const SpuriousReport& report,
                                           const EncoderParams& stage1_encoder,
                                           const std::vector<std::string>& label_names) {
  SubgroupAssignment out;
  out.pseudo_label = assign_pseudo_labels(ftset, label_names);
  out.region_spurious.assign(ftset.regions.size(), 0);
  out.empty_report = report.empty();
  if (!report.empty()) {
    const int top = report.ranked.front().cluster_id;
    for (std::size_t r = 0; r < ftset.regions.size(); ++r) {
      const Embedding e = stage1_encoder.embed(ftset.regions[r].raw);
      if (assign(e, report.clustering) == top) out.region_spurious[r] = 1;
    }
  }
  const int none_base = 2 * static_cast<int>(label_names.size());
  out.image_subgroup.resize(ftset.images.size());
  for (std::size_t i = 0; i < ftset.images.size(); ++i) {
    bool has_spurious = false;
    for (int r : ftset.images[i].regions) {
      if (out.region_spurious[r]) {
        has_spurious = true;
        break;
      }
    }
    const int y = out.pseudo_label[i];
    out.image_subgroup[i] = (y >= 0 ? y * 2 : none_base) + (has_spurious ? 1 : 0);
  }
  return out;
}

/// Sampling weight per item: inverse frequency of its subgroup, so expected
/// sampling mass is uniform across subgroups.
inline std::vector<double> inverse_frequency_weights(const std::vector<int>& subgroup) {
  std::vector<int> counts;
  for (int g : subgroup) {
    if (g < 0) throw std::invalid_argument("inverse_frequency_weights: negative subgroup id");
    if (g >= static_cast<int>(counts.size())) counts.resize(g + 1, 0);
    counts[g] += 1;
  }
  std::vector<double> weights(subgroup.size());
  for (std::size_t i = 0; i < subgroup.size(); ++i) {
    weights[i] = 1.0 / static_cast<double>(counts[subgroup[i]]);
  }
  return weights;
}

struct LossBreakdown {
  double total = 0.0;
  double l_cl = 0.0;
  double l_r_sum = 0.0;
  double l_a_sum = 0.0;
  int contributing_images = 0;  // images entering the region-aware terms
  int skipped_images = 0;       // pseudo-labeled images with no non-spurious region
};

namespace detail {

inline double log_sum_exp(const std::vector<double>& xs) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : xs) m = std::max(m, x);
  double s = 0.0;
  for (double x : xs) s += std::exp(x - m);
  return m + std::log(s);
}

// Forward pass and (optionally) the analytic gradient of
// L = lambda * L_CL + (1 - lambda) * sum_i (L_R^i + L_A^i)
// with respect to the encoder weights. Max selections route their gradient
// to the argmax entry; ties resolve to the lowest index.
inline LossBreakdown loss_impl(const RawSet& ft, const std::vector<int>& batch,
                               const SubgroupAssignment& sub, const EncoderParams& params,
                               const LabelEmbeddings& labels, double lambda, double tau,
                               std::vector<double>* grad) {
  if (batch.empty()) throw std::invalid_argument("loss: empty batch");
  LossBreakdown out;
  const int B = static_cast<int>(batch.size());
  const int D = params.out_dim;

  if (grad) grad->assign(params.weights.size(), 0.0);

  // Image embeddings and caption targets.
  std::vector<std::vector<double>> img_pre(B);  // W x before normalization
  std::vector<double> img_norm(B);
  std::vector<Embedding> img_emb(B);
  std::vector<const Embedding*> captions(B);
  for (int bi = 0; bi < B; ++bi) {
    const RawImage& img = ft.images[batch[bi]];
    if (img.caption_embedding.empty()) {
      throw std::invalid_argument("loss: image lacks a caption embedding");
    }
    captions[bi] = &img.caption_embedding;
    img_pre[bi] = params.apply(img.raw);
    img_norm[bi] = l2_norm(img_pre[bi]);
    if (img_norm[bi] == 0.0) throw std::invalid_argument("loss: zero-norm image embedding");
    img_emb[bi].resize(D);
    for (int d = 0; d < D; ++d) img_emb[bi][d] = img_pre[bi][d] / img_norm[bi];
  }

  // Region embeddings, split into per-image non-spurious lists and the
  // batch-level spurious pool.
  struct RegionState {
    int region_index;
    std::vector<double> pre;
    double norm;
    Embedding emb;
    std::vector<double> grad_emb;
  };
  std::vector<RegionState> regions;
  std::vector<std::vector<int>> nonspur(B);  // indices into `regions`
  std::vector<int> spur_pool;
  for (int bi = 0; bi < B; ++bi) {
    const RawImage& img = ft.images[batch[bi]];
    for (int r : img.regions) {
      RegionState st;
      st.region_index = r;
      st.pre = params.apply(ft.regions[r].raw);
      st.norm = l2_norm(st.pre);
      if (st.norm == 0.0) throw std::invalid_argument("loss: zero-norm region embedding");
      st.emb.resize(D);
      for (int d = 0; d < D; ++d) st.emb[d] = st.pre[d] / st.norm;
      st.grad_emb.assign(D, 0.0);
      const int slot = static_cast<int>(regions.size());
      regions.push_back(std::move(st));
      if (sub.region_spurious.empty() || !sub.region_spurious[r]) {
        nonspur[bi].push_back(slot);
      } else {
        spur_pool.push_back(slot);
      }
    }
  }

  std::vector<std::vector<double>> img_grad(B, std::vector<double>(D, 0.0));

  // CLIP objective: symmetric cross-entropy over the image/caption cosine
  // logit matrix.
  {
    std::vector<double> logits(static_cast<std::size_t>(B) * B);
    for (int i = 0; i < B; ++i) {
      for (int j = 0; j < B; ++j) logits[i * B + j] = dot(img_emb[i], *captions[j]) / tau;
    }
    double cl = 0.0;
    std::vector<double> row(B), col(B);
    std::vector<double> glogits(grad ? static_cast<std::size_t>(B) * B : 0, 0.0);
    for (int i = 0; i < B; ++i) {
      for (int j = 0; j < B; ++j) row[j] = logits[i * B + j];
      const double lse = log_sum_exp(row);
      cl += lse - logits[i * B + i];
      if (grad) {
        for (int j = 0; j < B; ++j) glogits[i * B + j] += std::exp(row[j] - lse);
        glogits[i * B + i] -= 1.0;
      }
    }
    for (int j = 0; j < B; ++j) {
      for (int i = 0; i < B; ++i) col[i] = logits[i * B + j];
      const double lse = log_sum_exp(col);
      cl += lse - logits[j * B + j];
      if (grad) {
        for (int i = 0; i < B; ++i) glogits[i * B + j] += std::exp(col[i] - lse);
        glogits[j * B + j] -= 1.0;
      }
    }
    out.l_cl = cl / (2.0 * B);
    if (grad && lambda > 0.0) {
      const double scale = lambda / (2.0 * B * tau);
      for (int i = 0; i < B; ++i) {
        for (int j = 0; j < B; ++j) {
          const double g = glogits[i * B + j] * scale;
          if (g == 0.0) continue;
          for (int d = 0; d < D; ++d) img_grad[i][d] += g * (*captions[j])[d];
        }
      }
    }
  }

  // Region-aware terms.
  if (lambda < 1.0) {
    std::vector<int> pl;  // batch positions with a pseudo-label
    std::vector<int> ra;  // pseudo-labeled positions with non-spurious regions
    for (int bi = 0; bi < B; ++bi) {
      const int y = sub.pseudo_label.empty() ? -1 : sub.pseudo_label[batch[bi]];
      if (y < 0) continue;
      pl.push_back(bi);
      if (!nonspur[bi].empty()) {
        ra.push_back(bi);
      } else {
        out.skipped_images += 1;
      }
    }
    out.contributing_images = static_cast<int>(ra.size());
    auto label_of = [&](int bi) -> const Embedding& {
      return labels.embeddings[sub.pseudo_label[batch[bi]]];
    };

    // m_val[i][j]: max cosine between image i's non-spurious regions and the
    // pseudo-label of image j, over tau; m_arg is the selected region slot.
    const int R = static_cast<int>(ra.size());
    const int P = static_cast<int>(pl.size());
    std::vector<int> ra_pos_of(B, -1), pl_pos_of(B, -1);
    for (int x = 0; x < R; ++x) ra_pos_of[ra[x]] = x;
    for (int x = 0; x < P; ++x) pl_pos_of[pl[x]] = x;
    std::vector<std::vector<double>> m_val(R, std::vector<double>(P));
    std::vector<std::vector<int>> m_arg(R, std::vector<int>(P));
    for (int x = 0; x < R; ++x) {
      const int bi = ra[x];
      for (int z = 0; z < P; ++z) {
        const Embedding& g = label_of(pl[z]);
        double best = -std::numeric_limits<double>::infinity();
        int best_slot = -1;
        for (int slot : nonspur[bi]) {
          const double s = dot(regions[slot].emb, g);
          if (s > best) {
            best = s;
            best_slot = slot;
          }
        }
        m_val[x][z] = best / tau;
        m_arg[x][z] = best_slot;
      }
    }

    // Penalty entries: for each spurious region, the best batch label.
    const int S = static_cast<int>(spur_pool.size());
    std::vector<double> q_max(S, 0.0);
    std::vector<int> q_arg(S, -1);
    std::vector<std::vector<double>> q_val(S, std::vector<double>(P));
    for (int s = 0; s < S; ++s) {
      const int slot = spur_pool[s];
      double best = -std::numeric_limits<double>::infinity();
      int best_z = -1;
      for (int z = 0; z < P; ++z) {
        const double v = dot(regions[slot].emb, label_of(pl[z])) / tau;
        q_val[s][z] = v;
        if (v > best) {
          best = v;
          best_z = z;
        }
      }
      q_max[s] = best;
      q_arg[s] = best_z;
    }

    auto add_region_grad = [&](int slot, double coeff, const Embedding& g) {
      for (int d = 0; d < D; ++d) regions[slot].grad_emb[d] += coeff * g[d] / tau;
    };

    const double ra_scale = 1.0 - lambda;
    for (int x = 0; x < R; ++x) {
      const int bi = ra[x];
      const int self_z = pl_pos_of[bi];

      // L_R: one exponent per pseudo-labeled batch image plus the penalty.
      {
        std::vector<double> args;
        args.reserve(P + S);
        for (int z = 0; z < P; ++z) args.push_back(m_val[x][z]);
        const bool has_penalty = P > 0;
        if (has_penalty) {
          for (int s = 0; s < S; ++s) args.push_back(q_max[s]);
        }
        const double lse = log_sum_exp(args);
        out.l_r_sum += lse - m_val[x][self_z];
        if (grad) {
          for (int z = 0; z < P; ++z) {
            double w = std::exp(m_val[x][z] - lse);
            if (z == self_z) w -= 1.0;
            if (w != 0.0) add_region_grad(m_arg[x][z], ra_scale * w, label_of(pl[z]));
          }
          if (has_penalty) {
            for (int s = 0; s < S; ++s) {
              const double w = std::exp(q_max[s] - lse);
              add_region_grad(spur_pool[s], ra_scale * w, label_of(pl[q_arg[s]]));
            }
          }
        }
      }

      // L_A: own max term, other-label image maxes against this label, and
      // every spurious region against this label.
      {
        std::vector<double> args;
        std::vector<std::pair<int, const Embedding*>> sources;  // region slot + label used
        const Embedding& gi = label_of(bi);
        args.push_back(m_val[x][self_z]);
        sources.push_back({m_arg[x][self_z], &gi});
        for (int xo = 0; xo < R; ++xo) {
          if (xo == x) continue;
          if (sub.pseudo_label[batch[ra[xo]]] == sub.pseudo_label[batch[bi]]) continue;
          args.push_back(m_val[xo][self_z]);
          sources.push_back({m_arg[xo][self_z], &gi});
        }
        for (int s = 0; s < S; ++s) {
          args.push_back(q_val[s][self_z]);
          sources.push_back({spur_pool[s], &gi});
        }
        const double lse = log_sum_exp(args);
        out.l_a_sum += lse - m_val[x][self_z];
        if (grad) {
          for (std::size_t t = 0; t < args.size(); ++t) {
            double w = std::exp(args[t] - lse);
            if (t == 0) w -= 1.0;
            if (w != 0.0) add_region_grad(sources[t].first, ra_scale * w, *sources[t].second);
          }
        }
      }
    }
  }

  out.total = lambda * out.l_cl + (1.0 - lambda) * (out.l_r_sum + out.l_a_sum);

  if (grad) {
    // Backprop through L2 normalization, then the linear map.
    auto accumulate = [&](const std::vector<double>& grad_emb, const Embedding& emb, double norm,
                          const std::vector<double>& raw) {
      double inner = 0.0;
      for (int d = 0; d < D; ++d) inner += grad_emb[d] * emb[d];
      for (int d = 0; d < D; ++d) {
        const double gu = (grad_emb[d] - emb[d] * inner) / norm;
        if (gu == 0.0) continue;
        double* row = grad->data() + static_cast<std::size_t>(d) * params.in_dim;
        for (int c = 0; c < params.in_dim; ++c) row[c] += gu * raw[c];
      }
    };
    for (int bi = 0; bi < B; ++bi) {
      accumulate(img_grad[bi], img_emb[bi], img_norm[bi], ft.images[batch[bi]].raw);
    }
    for (const auto& st : regions) {
      accumulate(st.grad_emb, st.emb, st.norm, ft.regions[st.region_index].raw);
    }
  }
  return out;
}

}  // namespace detail

/// Loss value and per-term breakdown for one batch.
inline LossBreakdown loss_total(const RawSet& ft, const std::vector<int>& batch,
                                const SubgroupAssignment& sub, const EncoderParams& params,
                                const LabelEmbeddings& labels, const TrainConfig& cfg) {
  cfg.validate();
  return detail::loss_impl(ft, batch, sub, params, labels, cfg.lambda, cfg.temperature, nullptr);
}

/// Analytic gradient of loss_total with respect to the encoder weights.
inline std::vector<double> grad_loss(const RawSet& ft, const std::vector<int>& batch,
                                     const SubgroupAssignment& sub, const EncoderParams& params,
                                     const LabelEmbeddings& labels, const TrainConfig& cfg,
                                     LossBreakdown* breakdown = nullptr) {
  cfg.validate();
  std::vector<double> grad;
  LossBreakdown b =
      detail::loss_impl(ft, batch, sub, params, labels, cfg.lambda, cfg.temperature, &grad);
  if (breakdown) *breakdown = b;
  return grad;
}

struct TrainLogRow {
  int epoch = 0;
  double loss = 0.0;
  double loss_cl = 0.0;
  double loss_r = 0.0;
  double loss_a = 0.0;
  double val_loss = 0.0;
};

struct TrainResult {
  EncoderParams params;
  std::vector<TrainLogRow> log;
  bool diverged = false;
  int best_epoch = 0;
  double best_val_loss = 0.0;
};

/// Mini-batch gradient descent over the linear encoder. Standard and
/// upsampled modes optimize the CLIP objective alone; ravl mode optimizes
/// the combined region-aware loss. Upsampled and ravl modes draw batches
/// with inverse-subgroup-frequency weights. Fully deterministic per seed.
inline TrainResult train(const RawSet& ftset, const LabelEmbeddings& labels, TrainConfig cfg,
                         const SubgroupAssignment* subgroups = nullptr,
                         std::optional<EncoderParams> init = std::nullopt) {
  cfg.validate();
  labels.validate();
  if (ftset.images.empty()) throw std::invalid_argument("train: empty fine-tuning set");
  const bool needs_subgroups = cfg.mode != TrainMode::standard;
  if (needs_subgroups && subgroups == nullptr) {
    throw std::invalid_argument("train: " + to_string(cfg.mode) + " mode requires subgroup assignments");
  }
  const int raw_dim = static_cast<int>(ftset.images.front().raw.size());
  const int emb_dim = static_cast<int>(labels.embeddings.front().size());

  TrainResult result;
  result.params = init ? std::move(*init)
                       : EncoderParams::random_init(emb_dim, raw_dim, mix_seed(cfg.seed, 11));

  const double lambda_eff = cfg.mode == TrainMode::ravl ? cfg.lambda : 1.0;
  static const SubgroupAssignment kNoAssignments;
  const SubgroupAssignment& sub = subgroups ? *subgroups : kNoAssignments;

  // Held-out split for early stopping.
  const int m = static_cast<int>(ftset.images.size());
  std::vector<int> order(m);
  for (int i = 0; i < m; ++i) order[i] = i;
  Rng split_rng(mix_seed(cfg.seed, 12));
  split_rng.shuffle(order);
  int val_count = static_cast<int>(std::lround(cfg.holdout_fraction * m));
  val_count = std::min(val_count, m - 1);
  std::vector<int> val_idx(order.begin(), order.begin() + val_count);
  std::vector<int> train_idx(order.begin() + val_count, order.end());

  std::vector<double> weights;
  if (cfg.mode != TrainMode::standard) {
    std::vector<int> train_groups;
    train_groups.reserve(train_idx.size());
    for (int i : train_idx) train_groups.push_back(sub.image_subgroup[i]);
    weights = inverse_frequency_weights(train_groups);
  }

  std::vector<double> grad_buffer;
  auto run_batches = [&](const std::vector<int>& indices, bool update,
                         TrainLogRow& row) -> bool {
    int batches = 0;
    for (std::size_t start = 0; start < indices.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(indices.size(), start + cfg.batch_size);
      std::vector<int> batch(indices.begin() + start, indices.begin() + end);
      const LossBreakdown b = detail::loss_impl(ftset, batch, sub, result.params, labels,
                                                lambda_eff, cfg.temperature,
                                                update ? &grad_buffer : nullptr);
      if (!std::isfinite(b.total)) return false;
      if (update) {
        bool finite = true;
        for (std::size_t w = 0; w < result.params.weights.size(); ++w) {
          result.params.weights[w] -= cfg.learning_rate * grad_buffer[w];
          finite = finite && std::isfinite(result.params.weights[w]);
        }
        if (!finite) return false;
      }
      row.loss += b.total;
      row.loss_cl += b.l_cl;
      row.loss_r += b.l_r_sum;
      row.loss_a += b.l_a_sum;
      batches += 1;
    }
    if (batches > 0) {
      row.loss /= batches;
      row.loss_cl /= batches;
      row.loss_r /= batches;
      row.loss_a /= batches;
    }
    return true;
  };

  Rng epoch_rng(mix_seed(cfg.seed, 13));
  EncoderParams best_params = result.params;
  double best_val = std::numeric_limits<double>::infinity();
  int best_epoch = 0;
  int patience_left = cfg.patience;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::vector<int> epoch_order;
    if (cfg.mode == TrainMode::standard) {
      epoch_order = train_idx;
      epoch_rng.shuffle(epoch_order);
    } else {
      epoch_order.resize(train_idx.size());
      for (std::size_t i = 0; i < train_idx.size(); ++i) {
        epoch_order[i] = train_idx[epoch_rng.next_weighted(weights)];
      }
    }

    TrainLogRow row;
    row.epoch = epoch;
    EncoderParams before = result.params;
    if (!run_batches(epoch_order, true, row)) {
      result.params = before;  // last finite checkpoint
      result.diverged = true;
      break;
    }

    if (!val_idx.empty()) {
      TrainLogRow val_row;
      if (!run_batches(val_idx, false, val_row)) {
        result.params = before;
        result.diverged = true;
        break;
      }
      row.val_loss = val_row.loss;
    } else {
      row.val_loss = row.loss;
    }
    result.log.push_back(row);

    if (row.val_loss < best_val - 1e-9) {
      best_val = row.val_loss;
      best_params = result.params;
      best_epoch = epoch;
      patience_left = cfg.patience;
    } else if (!val_idx.empty()) {
      patience_left -= 1;
      if (patience_left <= 0) break;
    }
  }

  if (!val_idx.empty() && !result.diverged) {
    result.params = best_params;
    result.best_epoch = best_epoch;
    result.best_val_loss = best_val;
  } else {
    result.best_epoch = result.log.empty() ? 0 : result.log.back().epoch;
    result.best_val_loss = result.log.empty() ? 0.0 : result.log.back().val_loss;
  }
  return result;
}

}  // namespace ravl
