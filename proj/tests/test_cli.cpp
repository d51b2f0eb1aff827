#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "ravl/cli.hpp"

using namespace ravl;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("ravl_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

fs::path write_config(const fs::path& dir) {
  nlohmann::json cfg;
  cfg["seed"] = 7;
  cfg["world"] = {
      {"labels", {"otter", "heron", "lynx", "ibis"}},
      {"spurious_label", "otter"},
      {"spurious_concept", "marker"},
      {"background_concepts", 4},
      {"cramers_v", 0.95},
      {"finetune_images", 96},
      {"eval_images", 64},
  };
  cfg["train"] = {{"epochs", 12}, {"batch_size", 32}, {"patience", 4}};
  cfg["discover"] = {{"k", 10}};
  const fs::path p = dir / "config.json";
  std::ofstream(p) << cfg.dump(2);
  return p;
}

int run(std::vector<std::string> args) { return cli::run_cli(std::move(args)); }

}  // namespace

TEST_CASE("usage errors exit with code 2", "[cli]") {
  CHECK(run({}) == cli::kExitUsage);
  CHECK(run({"frobnicate"}) == cli::kExitUsage);
  CHECK(run({"gen"}) == cli::kExitUsage);  // --config is required
  CHECK(run({"--help"}) == cli::kExitOk);

  const fs::path dir = temp_dir("usage");
  std::ofstream(dir / "bad.json") << "{ not json";
  CHECK(run({"gen", "--config", (dir / "bad.json").string(), "--out", (dir / "o").string()}) ==
        cli::kExitUsage);
  std::ofstream(dir / "empty.json") << "{}";
  CHECK(run({"gen", "--config", (dir / "empty.json").string(), "--out", (dir / "o").string()}) ==
        cli::kExitUsage);
  CHECK(run({"gen", "--config", (dir / "nonexistent.json").string()}) == cli::kExitMissing);
}

TEST_CASE("gen writes a complete deterministic setting", "[cli]") {
  const fs::path dir = temp_dir("gen");
  const fs::path cfg = write_config(dir);
  const fs::path out_a = dir / "a";
  const fs::path out_b = dir / "b";
  REQUIRE(run({"gen", "--config", cfg.string(), "--out", out_a.string()}) == cli::kExitOk);
  REQUIRE(run({"gen", "--config", cfg.string(), "--out", out_b.string()}) == cli::kExitOk);
  for (const char* name : {"labels.emb", "labels.jsonl", "finetune.emb", "finetune.jsonl",
                           "finetune_text.emb", "finetune_text.jsonl", "eval.emb", "eval.jsonl",
                           "setting.json"}) {
    CAPTURE(name);
    REQUIRE(fs::exists(out_a / name));
    CHECK(slurp(out_a / name) == slurp(out_b / name));
  }
  const auto meta = nlohmann::json::parse(slurp(out_a / "setting.json"));
  CHECK(std::abs(meta.at("achieved_cramers_v").get<double>() - 0.95) <= 0.02);

  // A different seed produces different bytes.
  const fs::path out_c = dir / "c";
  REQUIRE(run({"gen", "--config", cfg.string(), "--out", out_c.string(), "--seed", "8"}) ==
          cli::kExitOk);
  CHECK(slurp(out_a / "eval.emb") != slurp(out_c / "eval.emb"));
}

TEST_CASE("corrupt datasets exit with code 3 and missing reports with 4", "[cli]") {
  const fs::path dir = temp_dir("codes");
  const fs::path cfg = write_config(dir);
  const fs::path out = dir / "setting";
  REQUIRE(run({"gen", "--config", cfg.string(), "--out", out.string()}) == cli::kExitOk);

  // ravl mode without a report is a missing artifact.
  CHECK(run({"mitigate", out.string(), "--config", cfg.string(), "--out",
             (dir / "fit").string(), "--mode", "ravl"}) == cli::kExitMissing);

  // Flip a magic byte in the eval embeddings.
  std::string bytes = slurp(out / "eval.emb");
  bytes[0] = 'Z';
  std::ofstream(out / "eval.emb", std::ios::binary | std::ios::trunc) << bytes;
  CHECK(run({"discover", out.string(), "--config", cfg.string(), "--out",
             (dir / "rep").string()}) == cli::kExitCorrupt);
}

TEST_CASE("the full pipeline runs end to end", "[cli]") {
  const fs::path dir = temp_dir("pipeline");
  const fs::path cfg = write_config(dir);
  const fs::path setting = dir / "setting";
  REQUIRE(run({"gen", "--config", cfg.string(), "--out", setting.string()}) == cli::kExitOk);

  const fs::path standard_out = dir / "standard";
  REQUIRE(run({"mitigate", setting.string(), "--config", cfg.string(), "--out",
               standard_out.string(), "--mode", "standard"}) == cli::kExitOk);
  REQUIRE(fs::exists(standard_out / "checkpoint.emb"));
  REQUIRE(fs::exists(standard_out / "metrics.json"));
  REQUIRE(fs::exists(standard_out / "train_log.csv"));
  {
    const auto metrics = nlohmann::json::parse(slurp(standard_out / "metrics.json"));
    REQUIRE(metrics.contains("metrics"));
    CHECK(metrics.at("metrics").size() == 4);
    for (const char* key :
         {"image_overall", "image_worst_group", "region_overall", "region_worst_group"}) {
      CHECK(metrics.at("metrics").contains(key));
    }
  }

  // Standard mode ignores a supplied report.
  const fs::path standard_again = dir / "standard_again";
  nlohmann::json cfg_with_report = nlohmann::json::parse(slurp(cfg));
  cfg_with_report["report"] = (dir / "does_not_exist.json").string();
  const fs::path cfg2 = dir / "config_report.json";
  std::ofstream(cfg2) << cfg_with_report.dump(2);
  REQUIRE(run({"mitigate", setting.string(), "--config", cfg2.string(), "--out",
               standard_again.string(), "--mode", "standard"}) == cli::kExitOk);
  CHECK(nlohmann::json::parse(slurp(standard_again / "metrics.json")).at("metrics") ==
        nlohmann::json::parse(slurp(standard_out / "metrics.json")).at("metrics"));

  const fs::path report_out = dir / "report";
  REQUIRE(run({"discover", setting.string(), "--config", cfg.string(), "--out",
               report_out.string(), "--encoder", (standard_out / "checkpoint.emb").string()}) ==
          cli::kExitOk);
  REQUIRE(fs::exists(report_out / "report.json"));
  {
    const auto rep = nlohmann::json::parse(slurp(report_out / "report.json"));
    CHECK(rep.contains("status"));
    CHECK(rep.contains("clusters"));
    CHECK(rep.contains("top_regions"));
    CHECK(rep.at("seed").get<int>() == 7);
  }

  const fs::path ravl_out = dir / "ravl";
  REQUIRE(run({"mitigate", setting.string(), "--config", cfg.string(), "--out",
               ravl_out.string(), "--mode", "ravl", "--report",
               (report_out / "report.json").string(), "--encoder",
               (standard_out / "checkpoint.emb").string()}) == cli::kExitOk);
  REQUIRE(fs::exists(ravl_out / "metrics.json"));

  // Rerunning discovery with the same inputs reproduces the report bytes.
  const fs::path report_again = dir / "report_again";
  REQUIRE(run({"discover", setting.string(), "--config", cfg.string(), "--out",
               report_again.string(), "--encoder",
               (standard_out / "checkpoint.emb").string()}) == cli::kExitOk);
  CHECK(slurp(report_out / "report.json") == slurp(report_again / "report.json"));
}

TEST_CASE("unreachable influence thresholds yield an empty ok report", "[cli]") {
  const fs::path dir = temp_dir("empty_report");
  // Match raw and embedding dimensions so the eval rows parse directly as
  // embeddings (the no-encoder ingestion path).
  nlohmann::json raw_cfg = nlohmann::json::parse(slurp(write_config(dir)));
  raw_cfg["world"]["raw_dim"] = 12;
  raw_cfg["world"]["embed_dim"] = 12;
  const fs::path cfg = dir / "config12.json";
  std::ofstream(cfg) << raw_cfg.dump(2);
  const fs::path setting = dir / "setting";
  REQUIRE(run({"gen", "--config", cfg.string(), "--out", setting.string()}) == cli::kExitOk);
  const fs::path out = dir / "rep";
  REQUIRE(run({"discover", setting.string(), "--config", cfg.string(), "--out", out.string(),
               "--tau-l", "1.01"}) == cli::kExitOk);
  const auto rep = nlohmann::json::parse(slurp(out / "report.json"));
  CHECK(rep.at("status").get<std::string>() == "no spurious cluster above tau_l");
  CHECK(rep.at("clusters").empty());
}
