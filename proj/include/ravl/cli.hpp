#pragma once

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ravl/io.hpp"
#include "ravl/suite.hpp"

namespace ravl::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitError = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitCorrupt = 3;
inline constexpr int kExitMissing = 4;

inline std::string format_fixed(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

/// Flag-level overrides collected by the argument parser; every unset field
/// falls back to the config file (and RAVL_OUT / RAVL_THREADS for the two
/// environment-controlled settings).
struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<int> threads;
  std::optional<std::string> variant;
  std::optional<std::string> mode;
  std::optional<int> k;
  std::optional<double> tau_l;
  std::optional<std::vector<double>> tau_eval;
  std::optional<std::string> encoder;
  std::optional<std::string> report;
};

struct AppConfig {
  nlohmann::json raw;
  std::uint64_t seed = 7;
  std::filesystem::path out = "out";
  int threads = 1;
  Overrides overrides;
};

inline AppConfig load_config(const std::filesystem::path& path, const Overrides& overrides) {
  std::ifstream in(path);
  if (!in) throw MissingArtifact("cannot open config file: " + path.string());
  AppConfig cfg;
  cfg.raw = nlohmann::json::parse(in);
  cfg.overrides = overrides;
  cfg.seed = cfg.raw.value("seed", cfg.seed);
  cfg.out = cfg.raw.value("out", cfg.out.string());
  cfg.threads = cfg.raw.value("threads", cfg.threads);
  if (const char* env_out = std::getenv("RAVL_OUT")) cfg.out = env_out;
  if (const char* env_threads = std::getenv("RAVL_THREADS")) cfg.threads = std::atoi(env_threads);
  if (overrides.seed) cfg.seed = *overrides.seed;
  if (overrides.out) cfg.out = *overrides.out;
  if (overrides.threads) cfg.threads = *overrides.threads;
  return cfg;
}

inline WorldSpec world_from_json(const nlohmann::json& j) {
  WorldSpec w;
  w.labels = j.at("labels").get<std::vector<std::string>>();
  w.background_concepts = j.value("background_concepts", w.background_concepts);
  w.spurious_concept = j.value("spurious_concept", w.spurious_concept);
  w.spurious_label = j.value("spurious_label", std::string());
  w.cramers_v_target = j.value("cramers_v", w.cramers_v_target);
  w.raw_dim = j.value("raw_dim", w.raw_dim);
  w.embed_dim = j.value("embed_dim", w.embed_dim);
  w.noise_std = j.value("noise_std", w.noise_std);
  w.core_similarity = j.value("core_similarity", w.core_similarity);
  w.core_noise_mult = j.value("core_noise_mult", w.core_noise_mult);
  if (j.contains("regions_per_image")) {
    const auto range = j.at("regions_per_image").get<std::vector<int>>();
    if (range.size() != 2) throw std::invalid_argument("regions_per_image must be [min, max]");
    w.regions_min = range[0];
    w.regions_max = range[1];
  }
  w.finetune_images = j.value("finetune_images", w.finetune_images);
  w.eval_images = j.value("eval_images", w.eval_images);
  w.eval_feature_rate = j.value("eval_feature_rate", w.eval_feature_rate);
  if (j.contains("caption_templates")) {
    w.caption_templates = j.at("caption_templates").get<std::vector<std::string>>();
  }
  w.caption_jitter = j.value("caption_jitter", w.caption_jitter);
  return w;
}

inline nlohmann::json world_to_json(const WorldSpec& w) {
  nlohmann::json j;
  j["labels"] = w.labels;
  j["background_concepts"] = w.background_concepts;
  j["spurious_concept"] = w.spurious_concept;
  j["spurious_label"] = w.spurious_label;
  j["cramers_v"] = w.cramers_v_target;
  j["raw_dim"] = w.raw_dim;
  j["embed_dim"] = w.embed_dim;
  j["noise_std"] = w.noise_std;
  j["core_similarity"] = w.core_similarity;
  j["core_noise_mult"] = w.core_noise_mult;
  j["regions_per_image"] = {w.regions_min, w.regions_max};
  j["finetune_images"] = w.finetune_images;
  j["eval_images"] = w.eval_images;
  j["eval_feature_rate"] = w.eval_feature_rate;
  j["caption_templates"] = w.caption_templates;
  j["caption_jitter"] = w.caption_jitter;
  j["seed"] = w.seed;
  return j;
}

inline TrainConfig train_from_json(const nlohmann::json& root) {
  TrainConfig t;
  if (!root.contains("train")) return t;
  const auto& j = root.at("train");
  t.lambda = j.value("lambda", t.lambda);
  t.temperature = j.value("temperature", t.temperature);
  t.learning_rate = j.value("learning_rate", t.learning_rate);
  t.batch_size = j.value("batch_size", t.batch_size);
  t.epochs = j.value("epochs", t.epochs);
  t.patience = j.value("patience", t.patience);
  t.holdout_fraction = j.value("holdout_fraction", t.holdout_fraction);
  if (j.contains("mode")) t.mode = mode_from_string(j.at("mode").get<std::string>());
  return t;
}

inline DiscoverOptions discover_from_json(const nlohmann::json& root) {
  DiscoverOptions d;
  if (!root.contains("discover")) return d;
  const auto& j = root.at("discover");
  d.tau_l = j.value("tau_l", d.tau_l);
  if (j.contains("variant")) d.variant = variant_from_string(j.at("variant").get<std::string>());
  if (j.contains("sweep_min")) d.sweep.sweep_min = j.at("sweep_min").get<int>();
  if (j.contains("sweep_max")) d.sweep.sweep_max = j.at("sweep_max").get<int>();
  if (j.contains("cluster_k")) d.sweep.fixed_k = j.at("cluster_k").get<int>();
  d.sweep.kmedoids.exact_cap = j.value("exact_cap", d.sweep.kmedoids.exact_cap);
  return d;
}

struct SettingPaths {
  std::filesystem::path dir;
  std::filesystem::path metadata;
  std::filesystem::path labels_emb, labels_sidecar;
  std::filesystem::path finetune_emb, finetune_sidecar;
  std::filesystem::path finetune_text_emb, finetune_text_sidecar;
  std::filesystem::path eval_emb, eval_sidecar;

  static SettingPaths in(const std::filesystem::path& dir) {
    SettingPaths p;
    p.dir = dir;
    p.metadata = dir / "setting.json";
    p.labels_emb = dir / "labels.emb";
    p.labels_sidecar = dir / "labels.jsonl";
    p.finetune_emb = dir / "finetune.emb";
    p.finetune_sidecar = dir / "finetune.jsonl";
    p.finetune_text_emb = dir / "finetune_text.emb";
    p.finetune_text_sidecar = dir / "finetune_text.jsonl";
    p.eval_emb = dir / "eval.emb";
    p.eval_sidecar = dir / "eval.jsonl";
    return p;
  }
};

inline int run_gen(const AppConfig& cfg) {
  if (!cfg.raw.contains("world")) {
    std::cerr << "gen: config lacks a \"world\" section\n";
    return kExitUsage;
  }
  WorldSpec world = world_from_json(cfg.raw.at("world"));
  world.seed = cfg.seed;
  const EvalSetting setting = generate_setting(world);

  std::filesystem::create_directories(cfg.out);
  const SettingPaths paths = SettingPaths::in(cfg.out);
  save_labels(paths.labels_emb, paths.labels_sidecar, setting.labels);
  save_rawset(paths.finetune_emb, paths.finetune_sidecar, setting.finetune, setting.labels.names);
  save_caption_embeddings(paths.finetune_text_emb, paths.finetune_text_sidecar, setting.finetune);
  save_rawset(paths.eval_emb, paths.eval_sidecar, setting.eval, setting.labels.names);

  nlohmann::json meta;
  meta["seed"] = world.seed;
  meta["world"] = world_to_json(world);
  meta["spurious_concept"] = world.spurious_concept;
  meta["spurious_label"] = world.spurious_label;
  meta["achieved_cramers_v"] = setting.achieved_v;
  meta["target_cramers_v"] = world.cramers_v_target;
  meta["cooccurrence"] = {{"label_with_feature", setting.finetune_counts.a},
                          {"label_without_feature", setting.finetune_counts.b},
                          {"other_with_feature", setting.finetune_counts.c},
                          {"other_without_feature", setting.finetune_counts.d}};
  meta["files"] = {{"labels", "labels.emb"},
                   {"finetune", "finetune.emb"},
                   {"finetune_text", "finetune_text.emb"},
                   {"eval", "eval.emb"}};
  meta["config"] = cfg.raw;
  atomic_write_bytes(paths.metadata, meta.dump(2) + "\n");

  std::cout << "achieved_cramers_v " << format_fixed(setting.achieved_v) << "\n";
  std::cout << "setting written to " << cfg.out.string() << "\n";
  return kExitOk;
}

struct LoadedSetting {
  LabelEmbeddings labels;
  RawSet finetune;
  RawSet eval;
  nlohmann::json metadata;
};

inline LoadedSetting load_setting(const std::filesystem::path& dir, bool need_finetune) {
  const SettingPaths paths = SettingPaths::in(dir);
  if (!std::filesystem::exists(paths.metadata)) {
    throw MissingArtifact("no setting.json under " + dir.string());
  }
  LoadedSetting s;
  {
    std::ifstream in(paths.metadata);
    s.metadata = nlohmann::json::parse(in);
  }
  s.labels = load_labels(paths.labels_emb, paths.labels_sidecar);
  s.eval = load_rawset(paths.eval_emb, paths.eval_sidecar, s.labels.names);
  if (need_finetune) {
    s.finetune = load_rawset(paths.finetune_emb, paths.finetune_sidecar, s.labels.names);
    load_caption_embeddings(paths.finetune_text_emb, paths.finetune_text_sidecar, s.finetune);
  }
  return s;
}

inline std::optional<std::string> config_string(const AppConfig& cfg, const std::string& key) {
  if (cfg.raw.contains(key) && cfg.raw.at(key).is_string()) {
    return cfg.raw.at(key).get<std::string>();
  }
  return std::nullopt;
}

inline int run_discover(const AppConfig& cfg, const std::filesystem::path& dataset_path) {
  DiscoverOptions opts = discover_from_json(cfg.raw);
  if (cfg.overrides.variant) opts.variant = variant_from_string(*cfg.overrides.variant);
  if (cfg.overrides.tau_l) opts.tau_l = *cfg.overrides.tau_l;
  int k = cfg.raw.contains("discover") ? cfg.raw.at("discover").value("k", 10) : 10;
  if (cfg.overrides.k) k = *cfg.overrides.k;

  LabelEmbeddings labels;
  EvalDataset ds;
  std::optional<std::string> spurious_concept;
  if (std::filesystem::is_directory(dataset_path)) {
    LoadedSetting s = load_setting(dataset_path, false);
    labels = s.labels;
    std::optional<std::string> encoder_path = cfg.overrides.encoder;
    if (!encoder_path) encoder_path = config_string(cfg, "encoder");
    if (encoder_path) {
      const EncoderParams encoder = load_encoder(*encoder_path);
      ds = materialize_eval(s.eval, encoder);
    } else {
      // Rows are treated as precomputed embeddings.
      const SettingPaths paths = SettingPaths::in(dataset_path);
      ds = load_eval_dataset(paths.eval_emb, paths.eval_sidecar, labels);
    }
    if (s.metadata.contains("spurious_concept")) {
      spurious_concept = s.metadata.at("spurious_concept").get<std::string>();
    }
  } else {
    const auto labels_path = config_string(cfg, "labels");
    if (!labels_path) {
      std::cerr << "discover: a bare dataset file needs a \"labels\" path in the config\n";
      return kExitUsage;
    }
    std::filesystem::path lp = *labels_path;
    labels = load_labels(lp, std::filesystem::path(lp).replace_extension(".jsonl"));
    ds = load_eval_dataset(dataset_path,
                           std::filesystem::path(dataset_path).replace_extension(".jsonl"), labels);
  }

  const SpuriousReport report = discover(ds, labels, cfg.seed, opts);

  std::filesystem::create_directories(cfg.out);
  nlohmann::json j = report_to_json(report, ds);
  j["seed"] = cfg.seed;
  j["config"] = cfg.raw;
  if (report.correlated_label >= 0) {
    j["correlated_label_name"] = labels.names[report.correlated_label];
  }
  atomic_write_bytes(cfg.out / "report.json", j.dump(2) + "\n");

  std::cout << "status " << report.status << "\n";
  if (const FeatureCluster* top = report.top()) {
    std::cout << "top_cluster " << top->cluster_id << " influence " << format_fixed(top->influence)
              << " gap " << format_fixed(top->gap_total) << " gap_percent "
              << format_fixed(top->gap_total * 100.0) << "\n";
    std::cout << "correlated_attribute "
              << (report.correlated_label >= 0 ? labels.names[report.correlated_label] : "none")
              << "\n";
    const int show = std::min<int>(k, static_cast<int>(report.top_regions.size()));
    for (int i = 0; i < show; ++i) {
      const auto& rr = report.top_regions[i];
      const auto& reg = ds.regions[rr.region_index];
      std::cout << "region " << reg.id << " image " << ds.images[reg.image].id << " similarity "
                << format_fixed(rr.medoid_similarity) << "\n";
    }
    if (spurious_concept) {
      const PrecisionResult pr = precision_at_k(report, ds, *spurious_concept, k);
      std::cout << "precision_at_" << k << " " << format_fixed(pr.value) << "\n";
    }
  }
  return kExitOk;
}

inline std::string train_log_csv(const std::vector<TrainLogRow>& log) {
  std::string csv = "epoch,loss,loss_cl,loss_r,loss_a,val_loss\n";
  for (const auto& row : log) {
    csv += std::to_string(row.epoch) + "," + format_fixed(row.loss) + "," +
           format_fixed(row.loss_cl) + "," + format_fixed(row.loss_r) + "," +
           format_fixed(row.loss_a) + "," + format_fixed(row.val_loss) + "\n";
  }
  return csv;
}

inline int run_mitigate(const AppConfig& cfg, const std::filesystem::path& setting_path) {
  TrainConfig train_cfg = train_from_json(cfg.raw);
  if (cfg.overrides.mode) train_cfg.mode = mode_from_string(*cfg.overrides.mode);
  train_cfg.seed = mix_seed(cfg.seed, static_cast<std::uint64_t>(train_cfg.mode) + 21);

  LoadedSetting s = load_setting(setting_path, true);

  std::optional<std::string> report_path = cfg.overrides.report;
  if (!report_path) report_path = config_string(cfg, "report");
  SpuriousReport report;
  bool have_report = false;
  if (report_path && std::filesystem::exists(*report_path)) {
    std::ifstream in(*report_path);
    report = report_from_json(nlohmann::json::parse(in));
    have_report = true;
  }
  if (train_cfg.mode == TrainMode::ravl && !have_report) {
    std::cerr << "mitigate: ravl mode needs a discovery report (--report)\n";
    return kExitMissing;
  }

  SubgroupAssignment subgroups;
  if (train_cfg.mode != TrainMode::standard) {
    EncoderParams stage1;
    std::optional<std::string> encoder_path = cfg.overrides.encoder;
    if (!encoder_path) encoder_path = config_string(cfg, "encoder");
    if (have_report) {
      if (!encoder_path) {
        std::cerr << "mitigate: region assignment needs the stage-1 encoder (--encoder)\n";
        return kExitMissing;
      }
      stage1 = load_encoder(*encoder_path);
    }
    subgroups = assign_subgroups(s.finetune, report, stage1, s.labels.names);
    if (subgroups.empty_report) {
      std::cerr << "warning: empty discovery report; all regions treated as non-spurious\n";
    }
  }

  const TrainResult trained =
      train(s.finetune, s.labels, train_cfg,
            train_cfg.mode == TrainMode::standard ? nullptr : &subgroups);

  std::filesystem::create_directories(cfg.out);
  save_encoder(cfg.out / "checkpoint.emb", trained.params);
  atomic_write_bytes(cfg.out / "train_log.csv", train_log_csv(trained.log));

  const EvalDataset ds = materialize_eval(s.eval, trained.params);
  const WorstGroupMetrics wg = worst_group_metrics(ds, s.labels, eval_subgroups(s.eval));
  nlohmann::json metrics;
  metrics["image_overall"] = wg.image_overall;
  metrics["image_worst_group"] = wg.image_worst_group;
  metrics["region_overall"] = wg.region_overall.value_or(0.0);
  metrics["region_worst_group"] = wg.region_worst_group.value_or(0.0);
  nlohmann::json j;
  j["metrics"] = metrics;
  j["mode"] = to_string(train_cfg.mode);
  j["seed"] = cfg.seed;
  j["diverged"] = trained.diverged;
  j["best_epoch"] = trained.best_epoch;
  j["config"] = cfg.raw;
  atomic_write_bytes(cfg.out / "metrics.json", j.dump(2) + "\n");

  std::cout << "mode " << to_string(train_cfg.mode) << "\n";
  std::cout << "image_overall " << format_fixed(wg.image_overall) << "\n";
  std::cout << "image_worst_group " << format_fixed(wg.image_worst_group) << "\n";
  std::cout << "region_overall " << format_fixed(wg.region_overall.value_or(0.0)) << "\n";
  std::cout << "region_worst_group " << format_fixed(wg.region_worst_group.value_or(0.0)) << "\n";
  return kExitOk;
}

inline SuiteConfig suite_from_json(const AppConfig& cfg) {
  if (!cfg.raw.contains("world")) throw std::invalid_argument("suite: config lacks a \"world\" section");
  SuiteConfig sc;
  sc.world = world_from_json(cfg.raw.at("world"));
  sc.train = train_from_json(cfg.raw);
  sc.discover = discover_from_json(cfg.raw);
  sc.seed = cfg.seed;
  sc.threads = cfg.threads;
  if (cfg.raw.contains("suite")) {
    const auto& j = cfg.raw.at("suite");
    sc.setting_count = j.value("settings", sc.setting_count);
    if (j.contains("tau_eval")) sc.tau_eval_grid = j.at("tau_eval").get<std::vector<double>>();
    if (j.contains("variants")) {
      sc.variants.clear();
      for (const auto& v : j.at("variants")) sc.variants.push_back(variant_from_string(v));
    }
    if (j.contains("modes")) {
      sc.modes.clear();
      for (const auto& m : j.at("modes")) sc.modes.push_back(mode_from_string(m));
    }
    sc.precision_k = j.value("k", sc.precision_k);
    sc.precision_filter = j.value("precision_filter", sc.precision_filter);
    sc.rotate_spurious_label = j.value("rotate_spurious_label", sc.rotate_spurious_label);
  }
  if (cfg.overrides.k) sc.precision_k = *cfg.overrides.k;
  if (cfg.overrides.tau_l) sc.discover.tau_l = *cfg.overrides.tau_l;
  if (cfg.overrides.tau_eval) sc.tau_eval_grid = *cfg.overrides.tau_eval;
  if (!sc.rotate_spurious_label && sc.world.spurious_label.empty() && !sc.world.labels.empty()) {
    sc.world.spurious_label = sc.world.labels.front();
  }
  return sc;
}

inline std::string suite_precision_csv(const SuiteConfig& sc, const SuiteResult& result) {
  std::string csv = "variant,tau_eval,mean_precision,valid_settings\n";
  for (std::size_t v = 0; v < sc.variants.size(); ++v) {
    for (std::size_t t = 0; t < sc.tau_eval_grid.size(); ++t) {
      csv += to_string(sc.variants[v]) + "," + format_fixed(sc.tau_eval_grid[t]) + ",";
      if (result.aggregates.valid_counts[t] > 0) {
        csv += format_fixed(result.aggregates.mean_precision[v][t]);
      }
      csv += "," + std::to_string(result.aggregates.valid_counts[t]) + "\n";
    }
  }
  return csv;
}

inline std::string suite_mitigation_csv(const SuiteConfig& sc, const SuiteResult& result) {
  std::string csv = "mode,image_overall,image_worst_group,region_overall,region_worst_group,setting_count\n";
  for (std::size_t m = 0; m < sc.modes.size(); ++m) {
    const ModeMetrics& mm = result.aggregates.mean_metrics[m];
    csv += to_string(sc.modes[m]) + ",";
    if (result.aggregates.metrics_setting_count > 0) {
      csv += format_fixed(mm.image_overall) + "," + format_fixed(mm.image_worst_group) + "," +
             format_fixed(mm.region_overall) + "," + format_fixed(mm.region_worst_group);
    } else {
      csv += ",,,";
    }
    csv += "," + std::to_string(result.aggregates.metrics_setting_count) + "\n";
  }
  return csv;
}

inline std::string suite_settings_csv(const SuiteConfig& sc, const SuiteResult& result) {
  std::string csv = "setting,seed,spurious_label,achieved_v,eps1,eps2";
  for (double tau : sc.tau_eval_grid) csv += ",valid_at_" + std::to_string(static_cast<int>(tau));
  for (const auto v : sc.variants) csv += ",precision_" + to_string(v);
  for (const auto m : sc.modes) {
    csv += ",image_overall_" + to_string(m) + ",image_worst_group_" + to_string(m) +
           ",region_overall_" + to_string(m) + ",region_worst_group_" + to_string(m);
  }
  csv += ",note\n";
  for (const auto& s : result.settings) {
    csv += std::to_string(s.index) + "," + std::to_string(s.seed) + "," + s.spurious_label + "," +
           format_fixed(s.achieved_v) + "," +
           (s.validity.eps1_defined ? format_fixed(s.validity.eps1) : "") + "," +
           (s.validity.eps2_defined ? format_fixed(s.validity.eps2) : "");
    for (double tau : sc.tau_eval_grid) csv += s.valid_at(tau) ? ",1" : ",0";
    for (std::size_t v = 0; v < sc.variants.size(); ++v) csv += "," + format_fixed(s.precision[v]);
    for (std::size_t m = 0; m < sc.modes.size(); ++m) {
      csv += "," + format_fixed(s.metrics[m].image_overall) + "," +
             format_fixed(s.metrics[m].image_worst_group) + "," +
             format_fixed(s.metrics[m].region_overall) + "," +
             format_fixed(s.metrics[m].region_worst_group);
    }
    csv += "," + s.note + "\n";
  }
  return csv;
}

inline nlohmann::json suite_to_json(const SuiteConfig& sc, const SuiteResult& result) {
  nlohmann::json j;
  j["seed"] = sc.seed;
  j["settings"] = nlohmann::json::array();
  for (const auto& s : result.settings) {
    nlohmann::json sj;
    sj["index"] = s.index;
    sj["seed"] = s.seed;
    sj["spurious_label"] = s.spurious_label;
    sj["achieved_v"] = s.achieved_v;
    sj["eps1"] = s.validity.eps1_defined ? nlohmann::json(s.validity.eps1) : nlohmann::json();
    sj["eps2"] = s.validity.eps2_defined ? nlohmann::json(s.validity.eps2) : nlohmann::json();
    sj["report_empty"] = s.report_empty;
    sj["note"] = s.note;
    for (std::size_t v = 0; v < sc.variants.size(); ++v) {
      sj["precision"][to_string(sc.variants[v])] = s.precision[v];
    }
    for (std::size_t m = 0; m < sc.modes.size(); ++m) {
      nlohmann::json mm;
      mm["image_overall"] = s.metrics[m].image_overall;
      mm["image_worst_group"] = s.metrics[m].image_worst_group;
      mm["region_overall"] = s.metrics[m].region_overall;
      mm["region_worst_group"] = s.metrics[m].region_worst_group;
      sj["metrics"][to_string(sc.modes[m])] = mm;
    }
    j["settings"].push_back(sj);
  }
  nlohmann::json agg;
  for (std::size_t v = 0; v < sc.variants.size(); ++v) {
    for (std::size_t t = 0; t < sc.tau_eval_grid.size(); ++t) {
      const double mean = result.aggregates.mean_precision[v][t];
      agg["precision"][to_string(sc.variants[v])][std::to_string(
          static_cast<int>(sc.tau_eval_grid[t]))] =
          result.aggregates.valid_counts[t] > 0 ? nlohmann::json(mean) : nlohmann::json();
    }
  }
  for (std::size_t t = 0; t < sc.tau_eval_grid.size(); ++t) {
    agg["valid_settings"][std::to_string(static_cast<int>(sc.tau_eval_grid[t]))] =
        result.aggregates.valid_counts[t];
  }
  for (std::size_t m = 0; m < sc.modes.size(); ++m) {
    nlohmann::json mm;
    mm["image_overall"] = result.aggregates.mean_metrics[m].image_overall;
    mm["image_worst_group"] = result.aggregates.mean_metrics[m].image_worst_group;
    mm["region_overall"] = result.aggregates.mean_metrics[m].region_overall;
    mm["region_worst_group"] = result.aggregates.mean_metrics[m].region_worst_group;
    agg["mitigation"][to_string(sc.modes[m])] = mm;
  }
  agg["mitigation_setting_count"] = result.aggregates.metrics_setting_count;
  j["aggregates"] = agg;
  j["timings"] = {{"discovery_seconds", result.discovery_seconds},
                  {"mitigation_seconds", result.mitigation_seconds},
                  {"total_seconds", result.total_seconds}};
  return j;
}

inline int run_suite_cmd(const AppConfig& cfg) {
  const SuiteConfig sc = suite_from_json(cfg);
  const SuiteResult result = run_suite(sc);

  std::filesystem::create_directories(cfg.out);
  atomic_write_bytes(cfg.out / "suite_precision.csv", suite_precision_csv(sc, result));
  atomic_write_bytes(cfg.out / "suite_mitigation.csv", suite_mitigation_csv(sc, result));
  atomic_write_bytes(cfg.out / "suite_settings.csv", suite_settings_csv(sc, result));
  nlohmann::json j = suite_to_json(sc, result);
  j["config"] = cfg.raw;
  atomic_write_bytes(cfg.out / "suite.json", j.dump(2) + "\n");

  std::cout << suite_precision_csv(sc, result);
  std::cout << suite_mitigation_csv(sc, result);
  int valid0 = result.aggregates.valid_counts.empty() ? 0 : result.aggregates.valid_counts.front();
  if (valid0 == 0) {
    std::cout << "no valid settings at the lowest tau_eval; see suite_settings.csv for reasons\n";
  }
  return kExitOk;
}

/// Parses argv-style arguments and dispatches the subcommand. Exit codes:
/// 0 success, 2 usage, 3 data corruption, 4 missing dependency artifact.
inline int run_cli(std::vector<std::string> args) {
  CLI::App app{"region-aware spurious-correlation discovery and mitigation"};
  app.require_subcommand(1);

  std::string config_path;
  Overrides ov;
  std::string dataset_path;

  auto add_common = [&](CLI::App* sub, bool with_path) {
    sub->add_option("--config", config_path, "JSON configuration file")->required();
    sub->add_option_function<std::uint64_t>("--seed", [&](std::uint64_t v) { ov.seed = v; },
                                            "master random seed");
    sub->add_option_function<std::string>("--out", [&](const std::string& v) { ov.out = v; },
                                          "output directory");
    sub->add_option_function<int>("--threads", [&](int v) { ov.threads = v; }, "worker threads");
    if (with_path) sub->add_option("path", dataset_path, "setting directory or dataset file")->required();
  };

  CLI::App* gen = app.add_subcommand("gen", "generate a synthetic evaluation setting");
  add_common(gen, false);

  CLI::App* discover_cmd = app.add_subcommand("discover", "rank spurious feature clusters");
  add_common(discover_cmd, true);
  discover_cmd->add_option_function<std::string>(
      "--variant", [&](const std::string& v) { ov.variant = v; },
      "full | gap_only | unweighted_gap | random");
  discover_cmd->add_option_function<double>("--tau-l", [&](double v) { ov.tau_l = v; },
                                            "influence pruning threshold");
  discover_cmd->add_option_function<int>("--k", [&](int v) { ov.k = v; }, "regions to report");
  discover_cmd->add_option_function<std::string>(
      "--encoder", [&](const std::string& v) { ov.encoder = v; }, "encoder checkpoint");

  CLI::App* mitigate_cmd = app.add_subcommand("mitigate", "fine-tune with a mitigation mode");
  add_common(mitigate_cmd, true);
  mitigate_cmd->add_option_function<std::string>(
      "--mode", [&](const std::string& v) { ov.mode = v; }, "standard | upsampled | ravl");
  mitigate_cmd->add_option_function<std::string>(
      "--report", [&](const std::string& v) { ov.report = v; }, "discovery report JSON");
  mitigate_cmd->add_option_function<std::string>(
      "--encoder", [&](const std::string& v) { ov.encoder = v; }, "stage-1 encoder checkpoint");

  CLI::App* suite_cmd = app.add_subcommand("suite", "run a full evaluation suite");
  add_common(suite_cmd, false);
  suite_cmd->add_option_function<std::vector<double>>(
      "--tau-eval", [&](const std::vector<double>& v) { ov.tau_eval = v; },
      "validity thresholds (percentage points)");
  suite_cmd->add_option_function<int>("--k", [&](int v) { ov.k = v; }, "precision cutoff");
  suite_cmd->add_option_function<double>("--tau-l", [&](double v) { ov.tau_l = v; },
                                         "influence pruning threshold");

  try {
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::CallForHelp& e) {
    std::cout << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n";
    return kExitUsage;
  }

  try {
    const AppConfig cfg = load_config(config_path, ov);
    if (gen->parsed()) return run_gen(cfg);
    if (discover_cmd->parsed()) return run_discover(cfg, dataset_path);
    if (mitigate_cmd->parsed()) return run_mitigate(cfg, dataset_path);
    if (suite_cmd->parsed()) return run_suite_cmd(cfg);
    return kExitUsage;
  } catch (const CorruptEmbeddingFile& e) {
    std::cerr << "data corruption: " << e.what() << "\n";
    return kExitCorrupt;
  } catch (const MissingArtifact& e) {
    std::cerr << "missing artifact: " << e.what() << "\n";
    return kExitMissing;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid input: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitError;
  }
}

}  // namespace ravl::cli
