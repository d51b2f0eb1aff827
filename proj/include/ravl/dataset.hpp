#pragma once

#include <array>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "ravl/core.hpp"

namespace ravl {

/// Frozen text embeddings for the class label set, one per label, in a fixed
/// label order that every score vector follows.
struct LabelEmbeddings {
  std::vector<std::string> names;
  std::vector<Embedding> embeddings;

  std::size_t size() const { return names.size(); }

  int find(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i) {
      if (names[i] == name) return static_cast<int>(i);
    }
    return -1;
  }

  void validate() const {
    if (names.empty()) throw std::invalid_argument("LabelEmbeddings: label set is empty");
    if (names.size() != embeddings.size()) {
      throw std::invalid_argument("LabelEmbeddings: names/embeddings size mismatch");
    }
    const std::size_t dim = embeddings.front().size();
    for (const auto& e : embeddings) {
      if (e.size() != dim) throw std::invalid_argument("LabelEmbeddings: mixed dimensions");
    }
    for (std::size_t i = 0; i < names.size(); ++i) {
      for (std::size_t j = i + 1; j < names.size(); ++j) {
        if (names[i] == names[j]) throw std::invalid_argument("LabelEmbeddings: duplicate label " + names[i]);
      }
    }
  }
};

/// One candidate region. `image` is an index into EvalDataset::images;
/// `concept_tag` is empty when no ground-truth annotation exists.
struct RegionRecord {
  int id = -1;
  int image = -1;
  std::array<double, 4> box{0.0, 0.0, 0.0, 0.0};
  Embedding embedding;
  std::string concept_tag;
};

/// One labeled image. `regions` holds indices into EvalDataset::regions.
struct ImageRecord {
  int id = -1;
  Embedding embedding;
  int label = -1;
  std::vector<int> regions;
};

/// A labeled zero-shot classification dataset: images with class labels plus
/// candidate regions carrying their own embeddings.
struct EvalDataset {
  std::vector<ImageRecord> images;
  std::vector<RegionRecord> regions;

  void validate(std::size_t label_count) const {
    for (std::size_t i = 0; i < images.size(); ++i) {
      const auto& img = images[i];
      if (img.label < 0 || static_cast<std::size_t>(img.label) >= label_count) {
        throw std::invalid_argument("EvalDataset: image label out of range");
      }
      for (int r : img.regions) {
        if (r < 0 || static_cast<std::size_t>(r) >= regions.size()) {
          throw std::invalid_argument("EvalDataset: image references missing region");
        }
        if (regions[r].image != static_cast<int>(i)) {
          throw std::invalid_argument("EvalDataset: region/image cross-reference mismatch");
        }
      }
    }
    for (const auto& reg : regions) {
      if (reg.image < 0 || static_cast<std::size_t>(reg.image) >= images.size()) {
        throw std::invalid_argument("EvalDataset: region references missing image");
      }
    }
  }
};

}  // namespace ravl
