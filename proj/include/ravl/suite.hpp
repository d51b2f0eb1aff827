#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <exception>
#include <limits>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "ravl/discover.hpp"
#include "ravl/evalgen.hpp"
#include "ravl/mitigate.hpp"
#include "ravl/zeroshot.hpp"

namespace ravl {

struct SuiteConfig {
  WorldSpec world;  // template; per-setting seeds are derived from `seed`
  int setting_count = 20;
  std::vector<double> tau_eval_grid = {10.0, 20.0, 30.0, 40.0};
  std::vector<DiscoveryVariant> variants = {DiscoveryVariant::full, DiscoveryVariant::gap_only,
                                            DiscoveryVariant::unweighted_gap,
                                            DiscoveryVariant::random};
  std::vector<TrainMode> modes = {TrainMode::standard, TrainMode::upsampled, TrainMode::ravl};
  TrainConfig train;
  DiscoverOptions discover;
  int precision_k = 10;
  double precision_filter = 0.8;  // stage-1 precision floor for mitigation aggregates
  bool rotate_spurious_label = true;
  std::uint64_t seed = 7;
  int threads = 1;

  void validate() const {
    if (setting_count < 1) throw std::invalid_argument("SuiteConfig: needs at least one setting");
    if (tau_eval_grid.empty()) throw std::invalid_argument("SuiteConfig: empty tau_eval grid");
    if (variants.empty()) throw std::invalid_argument("SuiteConfig: empty variant list");
    if (modes.empty()) throw std::invalid_argument("SuiteConfig: empty mode list");
    if (precision_k < 1) throw std::invalid_argument("SuiteConfig: precision k must be positive");
    if (threads < 1) throw std::invalid_argument("SuiteConfig: thread count must be positive");
  }
};

struct ModeMetrics {
  double image_overall = 0.0;
  double image_worst_group = 0.0;
  double region_overall = 0.0;
  double region_worst_group = 0.0;
};

struct SettingOutcome {
  int index = 0;
  std::uint64_t seed = 0;
  std::string spurious_label;
  double achieved_v = 0.0;
  ValidityReport validity;
  std::vector<double> precision;        // aligned with SuiteConfig::variants
  std::vector<std::uint8_t> truncated;  // fewer ranked regions than k
  double precision_full = 0.0;          // the full variant, used for filtering
  bool report_empty = false;
  std::vector<ModeMetrics> metrics;     // aligned with SuiteConfig::modes
  std::string note;
  double discovery_seconds = 0.0;
  double mitigation_seconds = 0.0;

  bool valid_at(double tau) const {
    return validity.eps1_defined && validity.eps2_defined && validity.eps1 > tau &&
           validity.eps2 > tau;
  }
};

struct SuiteAggregates {
  // mean_precision[variant][tau]; NaN when no setting is valid at that tau
  std::vector<std::vector<double>> mean_precision;
  std::vector<int> valid_counts;  // per tau
  std::vector<ModeMetrics> mean_metrics;  // per mode, over the filtered settings
  int metrics_setting_count = 0;
};

struct SuiteResult {
  std::vector<SettingOutcome> settings;
  SuiteAggregates aggregates;
  double discovery_seconds = 0.0;   // generation + training + validity + discovery
  double mitigation_seconds = 0.0;  // additional mode training + evaluation
  double total_seconds = 0.0;
};

namespace detail {

inline ModeMetrics to_mode_metrics(const WorstGroupMetrics& wg) {
  ModeMetrics m;
  m.image_overall = wg.image_overall;
  m.image_worst_group = wg.image_worst_group;
  m.region_overall = wg.region_overall.value_or(0.0);
  m.region_worst_group = wg.region_worst_group.value_or(0.0);
  return m;
}

inline SettingOutcome run_setting(const SuiteConfig& cfg, int index) {
  SettingOutcome out;
  out.index = index;

  WorldSpec world = cfg.world;
  world.seed = mix_seed(cfg.seed, 1000 + static_cast<std::uint64_t>(index));
  if (cfg.rotate_spurious_label) {
    world.spurious_label = world.labels[index % world.labels.size()];
  }
  out.seed = world.seed;
  out.spurious_label = world.spurious_label;

  const auto t0 = std::chrono::steady_clock::now();
  const EvalSetting setting = generate_setting(world);
  out.achieved_v = setting.achieved_v;

  TrainConfig standard_cfg = cfg.train;
  standard_cfg.mode = TrainMode::standard;
  standard_cfg.seed = setting_seed(world.seed, SeedStream::train_standard);
  const TrainResult standard = train(setting.finetune, setting.labels, standard_cfg);

  out.validity = check_validity(setting, encoder_predictor(standard.params, setting.labels),
                                cfg.tau_eval_grid.front());

  const EvalDataset dv = materialize_eval(setting.eval, standard.params);
  std::vector<Embedding> region_embeddings;
  region_embeddings.reserve(dv.regions.size());
  for (const auto& reg : dv.regions) region_embeddings.push_back(reg.embedding);
  const Clustering clustering =
      select_k(region_embeddings, static_cast<int>(setting.labels.size()),
               setting_seed(world.seed, SeedStream::clustering), cfg.discover.sweep);

  DiscoverOptions full_opts = cfg.discover;
  full_opts.variant = DiscoveryVariant::full;
  const std::uint64_t discovery_seed = setting_seed(world.seed, SeedStream::discovery);
  const SpuriousReport full_report =
      discover_with_clustering(dv, setting.labels, clustering, discovery_seed, full_opts);
  out.report_empty = full_report.empty();
  if (full_report.top_regions.empty()) {
    out.precision_full = 0.0;
    out.note = full_report.status;
  } else {
    out.precision_full =
        precision_at_k(full_report, dv, world.spurious_concept, cfg.precision_k).value;
  }

  out.precision.resize(cfg.variants.size(), 0.0);
  out.truncated.resize(cfg.variants.size(), 0);
  for (std::size_t v = 0; v < cfg.variants.size(); ++v) {
    if (cfg.variants[v] == DiscoveryVariant::full) {
      out.precision[v] = out.precision_full;
      continue;
    }
    DiscoverOptions opts = cfg.discover;
    opts.variant = cfg.variants[v];
    const SpuriousReport rep =
        discover_with_clustering(dv, setting.labels, clustering, discovery_seed, opts);
    if (rep.top_regions.empty()) continue;  // precision stays 0
    const PrecisionResult pr = precision_at_k(rep, dv, world.spurious_concept, cfg.precision_k);
    out.precision[v] = pr.value;
    out.truncated[v] = pr.truncated ? 1 : 0;
  }
  const auto t1 = std::chrono::steady_clock::now();

  const SubgroupAssignment subgroups =
      assign_subgroups(setting.finetune, full_report, standard.params, setting.labels.names);
  out.metrics.resize(cfg.modes.size());
  for (std::size_t m = 0; m < cfg.modes.size(); ++m) {
    const TrainMode mode = cfg.modes[m];
    EncoderParams params;
    if (mode == TrainMode::standard) {
      params = standard.params;
    } else {
      TrainConfig tc = cfg.train;
      tc.mode = mode;
      tc.seed = setting_seed(world.seed, mode == TrainMode::upsampled
                                             ? SeedStream::train_upsampled
                                             : SeedStream::train_ravl);
      params = train(setting.finetune, setting.labels, tc, &subgroups).params;
    }
    const EvalDataset ds = materialize_eval(setting.eval, params);
    out.metrics[m] =
        to_mode_metrics(worst_group_metrics(ds, setting.labels, eval_subgroups(setting.eval)));
  }
  const auto t2 = std::chrono::steady_clock::now();

  out.discovery_seconds = std::chrono::duration<double>(t1 - t0).count();
  out.mitigation_seconds = std::chrono::duration<double>(t2 - t1).count();
  return out;
}

}  // namespace detail

/// Runs every setting of the suite (in parallel when cfg.threads > 1; results
/// are merged by setting index so the output is identical for any thread
/// count) and aggregates discovery precision per (variant, tau_eval) plus
/// mitigation metrics per mode over the validity- and precision-filtered
/// settings.
inline SuiteResult run_suite(const SuiteConfig& cfg) {
  cfg.validate();
  {
    WorldSpec probe = cfg.world;
    if (cfg.rotate_spurious_label && !probe.labels.empty()) probe.spurious_label = probe.labels[0];
    probe.validate();
  }
  const auto t_start = std::chrono::steady_clock::now();

  SuiteResult result;
  result.settings.resize(cfg.setting_count);
  std::atomic<int> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&]() {
    for (;;) {
      const int index = next.fetch_add(1);
      if (index >= cfg.setting_count) return;
      try {
        result.settings[index] = detail::run_setting(cfg, index);
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        return;
      }
    }
  };
  if (cfg.threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    const int n = std::min(cfg.threads, cfg.setting_count);
    pool.reserve(n);
    for (int i = 0; i < n; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);

  for (const auto& s : result.settings) {
    result.discovery_seconds += s.discovery_seconds;
    result.mitigation_seconds += s.mitigation_seconds;
  }

  SuiteAggregates& agg = result.aggregates;
  agg.mean_precision.assign(cfg.variants.size(),
                            std::vector<double>(cfg.tau_eval_grid.size(),
                                                std::numeric_limits<double>::quiet_NaN()));
  agg.valid_counts.assign(cfg.tau_eval_grid.size(), 0);
  for (std::size_t t = 0; t < cfg.tau_eval_grid.size(); ++t) {
    const double tau = cfg.tau_eval_grid[t];
    int count = 0;
    std::vector<double> sums(cfg.variants.size(), 0.0);
    for (const auto& s : result.settings) {
      if (!s.valid_at(tau)) continue;
      count += 1;
      for (std::size_t v = 0; v < cfg.variants.size(); ++v) sums[v] += s.precision[v];
    }
    agg.valid_counts[t] = count;
    if (count > 0) {
      for (std::size_t v = 0; v < cfg.variants.size(); ++v) {
        agg.mean_precision[v][t] = sums[v] / count;
      }
    }
  }

  agg.mean_metrics.assign(cfg.modes.size(), ModeMetrics{});
  agg.metrics_setting_count = 0;
  const double tau0 = cfg.tau_eval_grid.front();
  for (const auto& s : result.settings) {
    if (!s.valid_at(tau0) || s.precision_full < cfg.precision_filter) continue;
    agg.metrics_setting_count += 1;
    for (std::size_t m = 0; m < cfg.modes.size(); ++m) {
      agg.mean_metrics[m].image_overall += s.metrics[m].image_overall;
      agg.mean_metrics[m].image_worst_group += s.metrics[m].image_worst_group;
      agg.mean_metrics[m].region_overall += s.metrics[m].region_overall;
      agg.mean_metrics[m].region_worst_group += s.metrics[m].region_worst_group;
    }
  }
  if (agg.metrics_setting_count > 0) {
    for (auto& m : agg.mean_metrics) {
      m.image_overall /= agg.metrics_setting_count;
      m.image_worst_group /= agg.metrics_setting_count;
      m.region_overall /= agg.metrics_setting_count;
      m.region_worst_group /= agg.metrics_setting_count;
    }
  }

  result.total_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return result;
}

}  // namespace ravl
