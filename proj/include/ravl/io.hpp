#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ravl/cluster.hpp"
#include "ravl/dataset.hpp"
#include "ravl/discover.hpp"
#include "ravl/encoder.hpp"
#include "ravl/evalgen.hpp"

namespace ravl {

/// Raised for malformed embedding files; byte_offset points at the first
/// offending byte.
struct CorruptEmbeddingFile : std::runtime_error {
  std::uint64_t byte_offset;
  CorruptEmbeddingFile(const std::string& what, std::uint64_t offset)
      : std::runtime_error(what + " (byte offset " + std::to_string(offset) + ")"),
        byte_offset(offset) {}
};

/// Raised when a required artifact (report, checkpoint, dataset) is missing.
struct MissingArtifact : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Binary matrix format: 8-byte magic "RAVLEMB1", row count and dimension as
// little-endian uint32, then row-major float32 little-endian values.
inline constexpr char kEmbeddingMagic[8] = {'R', 'A', 'V', 'L', 'E', 'M', 'B', '1'};

struct EmbeddingMatrix {
  std::uint32_t rows = 0;
  std::uint32_t dim = 0;
  std::vector<double> values;  // row-major, rows * dim

  const double* row(std::uint32_t r) const { return values.data() + static_cast<std::size_t>(r) * dim; }
  std::vector<double> row_vector(std::uint32_t r) const {
    return {row(r), row(r) + dim};
  }
};

namespace detail {

inline void append_u32_le(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 24) & 0xff));
}

inline std::uint32_t read_u32_le(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace detail

/// Writes bytes atomically: a sibling temp file is renamed over the target.
inline void atomic_write_bytes(const std::filesystem::path& path, const std::string& bytes) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for writing: " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::string encode_embedding_file(const EmbeddingMatrix& m) {
  if (m.values.size() != static_cast<std::size_t>(m.rows) * m.dim) {
    throw std::invalid_argument("encode_embedding_file: value count does not match header");
  }
  std::string out;
  out.reserve(16 + m.values.size() * 4);
  out.append(kEmbeddingMagic, 8);
  detail::append_u32_le(out, m.rows);
  detail::append_u32_le(out, m.dim);
  for (double v : m.values) {
    const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
    detail::append_u32_le(out, bits);
  }
  return out;
}

inline void write_embedding_file(const std::filesystem::path& path, const EmbeddingMatrix& m) {
  atomic_write_bytes(path, encode_embedding_file(m));
}

inline EmbeddingMatrix decode_embedding_file(const std::string& bytes) {
  if (bytes.size() < 16) {
    throw CorruptEmbeddingFile("embedding file truncated before header end", bytes.size());
  }
  if (std::memcmp(bytes.data(), kEmbeddingMagic, 8) != 0) {
    throw CorruptEmbeddingFile("bad magic; not an embedding file", 0);
  }
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  EmbeddingMatrix m;
  m.rows = detail::read_u32_le(p + 8);
  m.dim = detail::read_u32_le(p + 12);
  const std::uint64_t expected = 16 + 4ull * m.rows * m.dim;
  if (bytes.size() < expected) {
    throw CorruptEmbeddingFile("embedding body shorter than header promises", bytes.size());
  }
  if (bytes.size() > expected) {
    throw CorruptEmbeddingFile("trailing bytes after embedding body", expected);
  }
  m.values.resize(static_cast<std::size_t>(m.rows) * m.dim);
  for (std::size_t i = 0; i < m.values.size(); ++i) {
    const std::uint32_t bits = detail::read_u32_le(p + 16 + 4 * i);
    m.values[i] = static_cast<double>(std::bit_cast<float>(bits));
  }
  return m;
}

inline EmbeddingMatrix read_embedding_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifact("cannot open embedding file: " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_embedding_file(bytes);
}

/// One line of the line-delimited JSON sidecar that annotates embedding rows.
struct SidecarRecord {
  int id = -1;
  std::string kind;  // image | region | label
  int image_id = -1;
  std::optional<std::array<double, 4>> box;
  std::string concept_tag;
  std::string label;
  std::string caption;
  bool has_feature = false;
};

inline nlohmann::json to_json(const SidecarRecord& r) {
  nlohmann::json j;
  j["id"] = r.id;
  j["kind"] = r.kind;
  if (r.image_id >= 0) j["image_id"] = r.image_id;
  if (r.box) j["box"] = *r.box;
  if (!r.concept_tag.empty()) j["concept"] = r.concept_tag;
  if (!r.label.empty()) j["label"] = r.label;
  if (!r.caption.empty()) j["caption"] = r.caption;
  if (r.has_feature) j["feature"] = true;
  return j;
}

inline SidecarRecord sidecar_from_json(const nlohmann::json& j) {
  SidecarRecord r;
  r.id = j.at("id").get<int>();
  r.kind = j.at("kind").get<std::string>();
  r.image_id = j.value("image_id", -1);
  if (j.contains("box")) {
    r.box = j.at("box").get<std::array<double, 4>>();
  }
  r.concept_tag = j.value("concept", "");
  r.label = j.value("label", "");
  r.caption = j.value("caption", "");
  r.has_feature = j.value("feature", false);
  return r;
}

inline void write_sidecar(const std::filesystem::path& path, const std::vector<SidecarRecord>& records) {
  std::string out;
  for (const auto& r : records) {
    out += to_json(r).dump();
    out += '\n';
  }
  atomic_write_bytes(path, out);
}

inline std::vector<SidecarRecord> read_sidecar(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifact("cannot open sidecar: " + path.string());
  std::vector<SidecarRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(sidecar_from_json(nlohmann::json::parse(line)));
  }
  return out;
}

/// Encoder checkpoints reuse the embedding binary format: one row per output
/// dimension, no sidecar.
inline void save_encoder(const std::filesystem::path& path, const EncoderParams& params) {
  EmbeddingMatrix m;
  m.rows = static_cast<std::uint32_t>(params.out_dim);
  m.dim = static_cast<std::uint32_t>(params.in_dim);
  m.values = params.weights;
  write_embedding_file(path, m);
}

inline EncoderParams load_encoder(const std::filesystem::path& path) {
  const EmbeddingMatrix m = read_embedding_file(path);
  EncoderParams p;
  p.out_dim = static_cast<int>(m.rows);
  p.in_dim = static_cast<int>(m.dim);
  p.weights = m.values;
  return p;
}

// ---------------------------------------------------------------------------
// Dataset serialization: an embedding (or raw-feature) matrix whose rows are
// images followed by regions, plus a sidecar describing each row.

inline void save_labels(const std::filesystem::path& emb_path,
                        const std::filesystem::path& sidecar_path, const LabelEmbeddings& labels) {
  EmbeddingMatrix m;
  m.rows = static_cast<std::uint32_t>(labels.size());
  m.dim = labels.size() ? static_cast<std::uint32_t>(labels.embeddings.front().size()) : 0;
  std::vector<SidecarRecord> records;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    m.values.insert(m.values.end(), labels.embeddings[i].begin(), labels.embeddings[i].end());
    SidecarRecord r;
    r.id = static_cast<int>(i);
    r.kind = "label";
    r.label = labels.names[i];
    records.push_back(r);
  }
  write_embedding_file(emb_path, m);
  write_sidecar(sidecar_path, records);
}

inline LabelEmbeddings load_labels(const std::filesystem::path& emb_path,
                                   const std::filesystem::path& sidecar_path) {
  const EmbeddingMatrix m = read_embedding_file(emb_path);
  const std::vector<SidecarRecord> records = read_sidecar(sidecar_path);
  if (records.size() != m.rows) {
    throw CorruptEmbeddingFile("sidecar row count differs from embedding header", 8);
  }
  LabelEmbeddings labels;
  for (std::uint32_t i = 0; i < m.rows; ++i) {
    if (records[i].kind != "label") throw std::runtime_error("label sidecar has a non-label row");
    labels.names.push_back(records[i].label);
    labels.embeddings.push_back(m.row_vector(i));
  }
  labels.validate();
  return labels;
}

inline void save_rawset(const std::filesystem::path& emb_path,
                        const std::filesystem::path& sidecar_path, const RawSet& set,
                        const std::vector<std::string>& label_names) {
  EmbeddingMatrix m;
  m.rows = static_cast<std::uint32_t>(set.images.size() + set.regions.size());
  m.dim = set.images.empty()
              ? (set.regions.empty() ? 0 : static_cast<std::uint32_t>(set.regions.front().raw.size()))
              : static_cast<std::uint32_t>(set.images.front().raw.size());
  std::vector<SidecarRecord> records;
  for (const auto& img : set.images) {
    m.values.insert(m.values.end(), img.raw.begin(), img.raw.end());
    SidecarRecord r;
    r.id = img.id;
    r.kind = "image";
    r.label = img.label >= 0 ? label_names[img.label] : "";
    r.caption = img.caption;
    r.has_feature = img.has_feature;
    records.push_back(r);
  }
  for (const auto& reg : set.regions) {
    m.values.insert(m.values.end(), reg.raw.begin(), reg.raw.end());
    SidecarRecord r;
    r.id = reg.id;
    r.kind = "region";
    r.image_id = set.images[reg.image].id;
    r.box = reg.box;
    r.concept_tag = reg.concept_tag;
    records.push_back(r);
  }
  write_embedding_file(emb_path, m);
  write_sidecar(sidecar_path, records);
}

inline RawSet load_rawset(const std::filesystem::path& emb_path,
                          const std::filesystem::path& sidecar_path,
                          const std::vector<std::string>& label_names) {
  const EmbeddingMatrix m = read_embedding_file(emb_path);
  const std::vector<SidecarRecord> records = read_sidecar(sidecar_path);
  if (records.size() != m.rows) {
    throw CorruptEmbeddingFile("sidecar row count differs from embedding header", 8);
  }
  RawSet set;
  std::vector<int> image_index_by_id;
  auto label_index = [&](const std::string& name) -> int {
    for (std::size_t i = 0; i < label_names.size(); ++i) {
      if (label_names[i] == name) return static_cast<int>(i);
    }
    return -1;
  };
  for (std::uint32_t i = 0; i < m.rows; ++i) {
    const SidecarRecord& r = records[i];
    if (r.kind == "image") {
      RawImage img;
      img.id = r.id;
      img.raw = m.row_vector(i);
      img.label = label_index(r.label);
      img.caption = r.caption;
      img.has_feature = r.has_feature;
      if (r.id >= static_cast<int>(image_index_by_id.size())) image_index_by_id.resize(r.id + 1, -1);
      image_index_by_id[r.id] = static_cast<int>(set.images.size());
      set.images.push_back(std::move(img));
    } else if (r.kind == "region") {
      RawRegion reg;
      reg.id = r.id;
      reg.raw = m.row_vector(i);
      if (r.box) reg.box = *r.box;
      reg.concept_tag = r.concept_tag;
      if (r.image_id < 0 || r.image_id >= static_cast<int>(image_index_by_id.size()) ||
          image_index_by_id[r.image_id] < 0) {
        throw std::runtime_error("region row references unknown image id " +
                                 std::to_string(r.image_id));
      }
      reg.image = image_index_by_id[r.image_id];
      set.images[reg.image].regions.push_back(static_cast<int>(set.regions.size()));
      set.regions.push_back(std::move(reg));
    } else {
      throw std::runtime_error("unexpected sidecar kind in dataset file: " + r.kind);
    }
  }
  return set;
}

/// Caption embeddings for a fine-tuning split: one row per image.
inline void save_caption_embeddings(const std::filesystem::path& emb_path,
                                    const std::filesystem::path& sidecar_path, const RawSet& set) {
  EmbeddingMatrix m;
  m.rows = static_cast<std::uint32_t>(set.images.size());
  m.dim = set.images.empty() ? 0
                             : static_cast<std::uint32_t>(set.images.front().caption_embedding.size());
  std::vector<SidecarRecord> records;
  for (const auto& img : set.images) {
    m.values.insert(m.values.end(), img.caption_embedding.begin(), img.caption_embedding.end());
    SidecarRecord r;
    r.id = img.id;
    r.kind = "image";
    r.image_id = img.id;
    records.push_back(r);
  }
  write_embedding_file(emb_path, m);
  write_sidecar(sidecar_path, records);
}

inline void load_caption_embeddings(const std::filesystem::path& emb_path,
                                    const std::filesystem::path& sidecar_path, RawSet& set) {
  const EmbeddingMatrix m = read_embedding_file(emb_path);
  const std::vector<SidecarRecord> records = read_sidecar(sidecar_path);
  if (records.size() != m.rows) {
    throw CorruptEmbeddingFile("sidecar row count differs from embedding header", 8);
  }
  std::vector<int> index_by_id;
  for (std::size_t i = 0; i < set.images.size(); ++i) {
    const int id = set.images[i].id;
    if (id >= static_cast<int>(index_by_id.size())) index_by_id.resize(id + 1, -1);
    index_by_id[id] = static_cast<int>(i);
  }
  for (std::uint32_t i = 0; i < m.rows; ++i) {
    const int id = records[i].image_id >= 0 ? records[i].image_id : records[i].id;
    if (id < 0 || id >= static_cast<int>(index_by_id.size()) || index_by_id[id] < 0) {
      throw std::runtime_error("caption row references unknown image id " + std::to_string(id));
    }
    set.images[index_by_id[id]].caption_embedding = m.row_vector(i);
  }
}

/// Loads a dataset file whose rows already are embeddings (the ingestion path
/// for externally computed embeddings).
inline EvalDataset load_eval_dataset(const std::filesystem::path& emb_path,
                                     const std::filesystem::path& sidecar_path,
                                     const LabelEmbeddings& labels) {
  const RawSet raw = load_rawset(emb_path, sidecar_path, labels.names);
  EvalDataset ds;
  for (const auto& img : raw.images) {
    ImageRecord rec;
    rec.id = img.id;
    rec.embedding = img.raw;
    rec.label = img.label;
    rec.regions = img.regions;
    ds.images.push_back(std::move(rec));
  }
  for (const auto& reg : raw.regions) {
    RegionRecord rec;
    rec.id = reg.id;
    rec.image = reg.image;
    rec.box = reg.box;
    rec.embedding = reg.raw;
    rec.concept_tag = reg.concept_tag;
    ds.regions.push_back(std::move(rec));
  }
  ds.validate(labels.size());
  return ds;
}

// ---------------------------------------------------------------------------
// Report serialization.

inline nlohmann::json report_to_json(const SpuriousReport& report, const EvalDataset& ds) {
  nlohmann::json j;
  j["status"] = report.status;
  j["variant"] = to_string(report.variant);
  j["tau_l"] = report.tau_l;
  j["total_clusters"] = report.total_clusters;
  j["pruned_clusters"] = report.pruned_count;
  j["correlated_label"] = report.correlated_label;
  nlohmann::json clusters = nlohmann::json::array();
  for (const auto& fc : report.ranked) {
    nlohmann::json c;
    c["cluster_id"] = fc.cluster_id;
    c["influence"] = fc.influence;
    c["gap"] = fc.gap_total;
    c["gap_percent"] = fc.gap_total * 100.0;
    c["gap_attribute"] = fc.gap_attribute;
    c["region_count"] = fc.region_indices.size();
    c["image_count"] = fc.image_indices.size();
    nlohmann::json cells = nlohmann::json::array();
    for (const auto& cell : fc.cells) {
      nlohmann::json cj;
      cj["label"] = cell.label;
      cj["n_in"] = cell.n_in;
      cj["p_in"] = cell.p_in;
      cj["n_out"] = cell.n_out;
      if (cell.n_out > 0) {
        cj["p_out"] = cell.p_out;
      } else {
        cj["p_out"] = nullptr;
      }
      cj["weight"] = cell.weight;
      cj["gap"] = cell.gap;
      cells.push_back(cj);
    }
    c["cells"] = cells;
    clusters.push_back(c);
  }
  j["clusters"] = clusters;
  nlohmann::json regions = nlohmann::json::array();
  for (const auto& rr : report.top_regions) {
    nlohmann::json r;
    r["region_id"] = ds.regions[rr.region_index].id;
    r["image_id"] = ds.images[ds.regions[rr.region_index].image].id;
    r["box"] = ds.regions[rr.region_index].box;
    r["medoid_similarity"] = rr.medoid_similarity;
    regions.push_back(r);
  }
  j["top_regions"] = regions;
  nlohmann::json clustering;
  clustering["k"] = report.clustering.k;
  clustering["medoid_indices"] = report.clustering.medoid_indices;
  clustering["medoid_embeddings"] = report.clustering.medoid_embeddings;
  clustering["total_cost"] = report.clustering.total_cost;
  j["clustering"] = clustering;
  return j;
}

/// Rebuilds the parts of a report that stage 2 needs: the ranked cluster ids,
/// their scores, and the clustering medoids. Region ranking indices refer to
/// the discovery dataset and are not reloaded.
inline SpuriousReport report_from_json(const nlohmann::json& j) {
  SpuriousReport report;
  report.status = j.at("status").get<std::string>();
  report.variant = variant_from_string(j.at("variant").get<std::string>());
  report.tau_l = j.at("tau_l").get<double>();
  report.total_clusters = j.at("total_clusters").get<int>();
  report.pruned_count = j.at("pruned_clusters").get<int>();
  report.correlated_label = j.at("correlated_label").get<int>();
  for (const auto& c : j.at("clusters")) {
    FeatureCluster fc;
    fc.cluster_id = c.at("cluster_id").get<int>();
    fc.influence = c.at("influence").get<double>();
    fc.gap_total = c.at("gap").get<double>();
    fc.gap_attribute = c.at("gap_attribute").get<int>();
    for (const auto& cj : c.at("cells")) {
      ClusterLabelCell cell;
      cell.label = cj.at("label").get<int>();
      cell.n_in = cj.at("n_in").get<int>();
      cell.p_in = cj.at("p_in").get<double>();
      cell.n_out = cj.at("n_out").get<int>();
      cell.p_out = cj.at("p_out").is_null() ? 0.0 : cj.at("p_out").get<double>();
      cell.weight = cj.at("weight").get<double>();
      cell.gap = cj.at("gap").get<double>();
      fc.cells.push_back(cell);
    }
    report.ranked.push_back(std::move(fc));
  }
  const auto& clustering = j.at("clustering");
  report.clustering.k = clustering.at("k").get<int>();
  report.clustering.medoid_indices = clustering.at("medoid_indices").get<std::vector<int>>();
  report.clustering.medoid_embeddings =
      clustering.at("medoid_embeddings").get<std::vector<Embedding>>();
  report.clustering.total_cost = clustering.at("total_cost").get<double>();
  return report;
}

}  // namespace ravl
