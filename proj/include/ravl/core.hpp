#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

namespace ravl {

/// A region, image, or label embedding. Finite entries, dimension >= 1.
using Embedding = std::vector<double>;

/// Softmax-normalized scores over the label set: entries in [0,1], sum 1.
using ScoreVector = std::vector<double>;

/// One ScoreVector per region of an image.
using ScoreMatrix = std::vector<ScoreVector>;

inline double dot(const Embedding& a, const Embedding& b) {
  if (a.size() != b.size()) throw std::invalid_argument("dot: dimension mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double l2_norm(const Embedding& a) {
  double s = 0.0;
  for (double v : a) s += v * v;
  return std::sqrt(s);
}

inline Embedding l2_normalized(const Embedding& a) {
  if (a.empty()) throw std::invalid_argument("l2_normalized: empty embedding");
  const double n = l2_norm(a);
  if (n == 0.0) throw std::invalid_argument("l2_normalized: zero-norm embedding");
  Embedding out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] / n;
  return out;
}

inline double cosine_similarity(const Embedding& a, const Embedding& b) {
  if (a.size() != b.size()) throw std::invalid_argument("cosine_similarity: dimension mismatch");
  const double na = l2_norm(a);
  const double nb = l2_norm(b);
  if (na == 0.0 || nb == 0.0) {
    throw std::invalid_argument("cosine_similarity: zero-norm embedding is degenerate");
  }
  return dot(a, b) / (na * nb);
}

/// Cosine distance, 1 - cos(a, b), in [0, 2].
inline double cosine_distance(const Embedding& a, const Embedding& b) {
  return 1.0 - cosine_similarity(a, b);
}

/// Max-subtracted softmax.
inline ScoreVector softmax(const std::vector<double>& logits) {
  if (logits.empty()) throw std::invalid_argument("softmax: empty input");
  const double m = *std::max_element(logits.begin(), logits.end());
  ScoreVector out(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - m);
    total += out[i];
  }
  for (double& v : out) v /= total;
  return out;
}

/// Index of the maximum value; ties break toward the lowest index.
inline std::size_t argmax_stable(const std::vector<double>& values) {
  if (values.empty()) throw std::invalid_argument("argmax_stable: empty input");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

}  // namespace ravl
