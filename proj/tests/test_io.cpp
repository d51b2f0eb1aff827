#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "ravl/io.hpp"
#include "ravl/rng.hpp"

using namespace ravl;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("ravl_io_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("embedding files round-trip bit exactly", "[io]") {
  Rng rng(61);
  const fs::path dir = temp_dir("roundtrip");
  for (int trial = 0; trial < 20; ++trial) {
    EmbeddingMatrix m;
    m.rows = static_cast<std::uint32_t>(rng.next_int(0, 12));
    m.dim = static_cast<std::uint32_t>(rng.next_int(1, 9));
    m.values.resize(static_cast<std::size_t>(m.rows) * m.dim);
    // Values forced through float32 so the round trip is exact.
    for (double& v : m.values) v = static_cast<double>(static_cast<float>(rng.next_gaussian()));
    const fs::path p = dir / ("m" + std::to_string(trial) + ".emb");
    write_embedding_file(p, m);
    const EmbeddingMatrix back = read_embedding_file(p);
    CHECK(back.rows == m.rows);
    CHECK(back.dim == m.dim);
    CHECK(back.values == m.values);
    // Writing the decoded matrix reproduces the bytes.
    CHECK(encode_embedding_file(back) == slurp(p));
  }
}

TEST_CASE("corrupt embedding files report the byte offset", "[io]") {
  const fs::path dir = temp_dir("corrupt");
  EmbeddingMatrix m;
  m.rows = 2;
  m.dim = 3;
  m.values = {1, 2, 3, 4, 5, 6};
  const fs::path good = dir / "good.emb";
  write_embedding_file(good, m);
  const std::string bytes = slurp(good);

  {
    std::string bad = bytes;
    bad[0] = 'X';
    try {
      decode_embedding_file(bad);
      FAIL("expected CorruptEmbeddingFile");
    } catch (const CorruptEmbeddingFile& e) {
      CHECK(e.byte_offset == 0);
    }
  }
  {
    const std::string truncated = bytes.substr(0, bytes.size() - 5);
    try {
      decode_embedding_file(truncated);
      FAIL("expected CorruptEmbeddingFile");
    } catch (const CorruptEmbeddingFile& e) {
      CHECK(e.byte_offset == truncated.size());
    }
  }
  {
    const std::string trailing = bytes + "zz";
    try {
      decode_embedding_file(trailing);
      FAIL("expected CorruptEmbeddingFile");
    } catch (const CorruptEmbeddingFile& e) {
      CHECK(e.byte_offset == bytes.size());
    }
  }
  {
    const std::string header_only = bytes.substr(0, 10);
    CHECK_THROWS_AS(decode_embedding_file(header_only), CorruptEmbeddingFile);
  }
  CHECK_THROWS_AS(read_embedding_file(dir / "missing.emb"), MissingArtifact);
}

TEST_CASE("encoder checkpoints survive the float32 format", "[io]") {
  const fs::path dir = temp_dir("ckpt");
  EncoderParams p = EncoderParams::random_init(3, 5, 7);
  // Round the weights to float precision so the save/load is lossless.
  for (double& w : p.weights) w = static_cast<double>(static_cast<float>(w));
  save_encoder(dir / "enc.emb", p);
  const EncoderParams back = load_encoder(dir / "enc.emb");
  CHECK(back.out_dim == p.out_dim);
  CHECK(back.in_dim == p.in_dim);
  CHECK(back.weights == p.weights);
}

TEST_CASE("label files and dataset sidecars round-trip", "[io]") {
  const fs::path dir = temp_dir("labels");
  LabelEmbeddings labels;
  labels.names = {"ash", "birch"};
  labels.embeddings = {{1.0, 0.0}, {0.0, 1.0}};
  save_labels(dir / "labels.emb", dir / "labels.jsonl", labels);
  const LabelEmbeddings back = load_labels(dir / "labels.emb", dir / "labels.jsonl");
  CHECK(back.names == labels.names);
  CHECK(back.embeddings == labels.embeddings);

  RawSet set;
  RawImage img;
  img.id = 0;
  img.raw = {0.5, 0.25, 0.125};
  img.label = 1;
  img.caption = "a birch in fog";
  img.has_feature = true;
  RawRegion reg;
  reg.id = 0;
  reg.image = 0;
  reg.box = {0.0, 0.0, 1.0, 1.0};
  reg.raw = {0.25, 0.5, 0.75};
  reg.concept_tag = "marker";
  img.regions = {0};
  set.images.push_back(img);
  set.regions.push_back(reg);

  save_rawset(dir / "set.emb", dir / "set.jsonl", set, labels.names);
  const RawSet loaded = load_rawset(dir / "set.emb", dir / "set.jsonl", labels.names);
  REQUIRE(loaded.images.size() == 1);
  REQUIRE(loaded.regions.size() == 1);
  CHECK(loaded.images[0].label == 1);
  CHECK(loaded.images[0].caption == "a birch in fog");
  CHECK(loaded.images[0].has_feature);
  CHECK(loaded.images[0].raw == std::vector<double>{0.5, 0.25, 0.125});
  CHECK(loaded.regions[0].concept_tag == "marker");
  CHECK(loaded.regions[0].image == 0);
  CHECK(loaded.images[0].regions == std::vector<int>{0});
}

TEST_CASE("sidecar row mismatches are rejected", "[io]") {
  const fs::path dir = temp_dir("mismatch");
  LabelEmbeddings labels;
  labels.names = {"ash", "birch"};
  labels.embeddings = {{1.0, 0.0}, {0.0, 1.0}};
  save_labels(dir / "labels.emb", dir / "labels.jsonl", labels);
  // Drop one sidecar line.
  std::string sidecar = slurp(dir / "labels.jsonl");
  sidecar = sidecar.substr(0, sidecar.find('\n') + 1);
  std::ofstream(dir / "labels.jsonl", std::ios::trunc) << sidecar;
  CHECK_THROWS_AS(load_labels(dir / "labels.emb", dir / "labels.jsonl"), CorruptEmbeddingFile);
}

TEST_CASE("reports round-trip the fields stage two needs", "[io]") {
  SpuriousReport report;
  report.status = "ok";
  report.variant = DiscoveryVariant::full;
  report.tau_l = 0.25;
  report.total_clusters = 3;
  report.pruned_count = 1;
  report.correlated_label = 2;
  FeatureCluster fc;
  fc.cluster_id = 1;
  fc.influence = 0.75;
  fc.gap_total = 0.4;
  fc.gap_attribute = 2;
  fc.cells.push_back({2, 10, 0.5, 20, 0.9, 2.0 / 3.0, -4.0 / 15.0});
  report.ranked.push_back(fc);
  report.clustering.k = 2;
  report.clustering.medoid_indices = {4, 9};
  report.clustering.medoid_embeddings = {{1.0, 0.0}, {0.0, 1.0}};
  report.clustering.total_cost = 0.125;
  report.top_regions.push_back({0, 0.9});

  EvalDataset ds;
  ImageRecord img;
  img.id = 7;
  img.label = 0;
  img.regions = {0};
  RegionRecord reg;
  reg.id = 3;
  reg.image = 0;
  ds.images.push_back(img);
  ds.regions.push_back(reg);

  const nlohmann::json j = report_to_json(report, ds);
  const SpuriousReport back = report_from_json(j);
  CHECK(back.status == report.status);
  CHECK(back.variant == report.variant);
  CHECK(back.total_clusters == 3);
  CHECK(back.pruned_count == 1);
  CHECK(back.correlated_label == 2);
  REQUIRE(back.ranked.size() == 1);
  CHECK(back.ranked[0].cluster_id == 1);
  CHECK(back.ranked[0].influence == 0.75);
  CHECK(back.ranked[0].cells[0].n_out == 20);
  CHECK(back.clustering.k == 2);
  CHECK(back.clustering.medoid_embeddings == report.clustering.medoid_embeddings);
  CHECK(j.at("top_regions")[0].at("region_id") == 3);
  CHECK(j.at("top_regions")[0].at("image_id") == 7);
  CHECK(j.at("clusters")[0].at("gap_percent") == Catch::Approx(40.0));
}

TEST_CASE("atomic writes replace the target in one step", "[io]") {
  const fs::path dir = temp_dir("atomic");
  const fs::path p = dir / "file.txt";
  atomic_write_bytes(p, "first");
  CHECK(slurp(p) == "first");
  atomic_write_bytes(p, "second");
  CHECK(slurp(p) == "second");
  CHECK_FALSE(fs::exists(p.string() + ".tmp"));
}
