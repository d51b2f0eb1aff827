#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "ravl/core.hpp"
#include "ravl/rng.hpp"

namespace ravl {

/// Trainable linear image/region encoder: embed(x) = normalize(W x). The
/// frozen class-label text embeddings live in LabelEmbeddings.
struct EncoderParams {
  int out_dim = 0;
  int in_dim = 0;
  std::vector<double> weights;  // row-major, out_dim x in_dim

  double& at(int row, int col) { return weights[static_cast<std::size_t>(row) * in_dim + col]; }
  double at(int row, int col) const { return weights[static_cast<std::size_t>(row) * in_dim + col]; }

  std::vector<double> apply(const std::vector<double>& raw) const {
    if (static_cast<int>(raw.size()) != in_dim) {
      throw std::invalid_argument("EncoderParams: raw feature dimension mismatch");
    }
    std::vector<double> out(out_dim, 0.0);
    for (int r = 0; r < out_dim; ++r) {
      double s = 0.0;
      const double* row = weights.data() + static_cast<std::size_t>(r) * in_dim;
      for (int c = 0; c < in_dim; ++c) s += row[c] * raw[c];
      out[r] = s;
    }
    return out;
  }

  /// L2-normalized embedding; throws on a zero pre-normalization output.
  Embedding embed(const std::vector<double>& raw) const { return l2_normalized(apply(raw)); }

  static EncoderParams random_init(int out_dim, int in_dim, std::uint64_t seed) {
    EncoderParams p;
    p.out_dim = out_dim;
    p.in_dim = in_dim;
    p.weights.resize(static_cast<std::size_t>(out_dim) * in_dim);
    Rng rng(seed);
    const double scale = 1.0 / std::sqrt(static_cast<double>(in_dim));
    for (double& w : p.weights) w = scale * rng.next_gaussian();
    return p;
  }
};

}  // namespace ravl
