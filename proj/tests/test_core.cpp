#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "ravl/core.hpp"
#include "ravl/rng.hpp"

using namespace ravl;

TEST_CASE("cosine similarity on axis-aligned vectors", "[core]") {
  CHECK(cosine_similarity({1, 0}, {1, 0}) == Catch::Approx(1.0));
  CHECK(cosine_similarity({1, 0}, {0, 1}) == Catch::Approx(0.0).margin(1e-12));
  CHECK(cosine_similarity({1, 1}, {1, 0}) == Catch::Approx(0.70710678).epsilon(1e-7));
}

TEST_CASE("cosine similarity rejects zero-norm input", "[core]") {
  CHECK_THROWS_AS(cosine_similarity({0, 0}, {1, 0}), std::invalid_argument);
  CHECK_THROWS_AS(cosine_similarity({1, 0}, {0, 0}), std::invalid_argument);
  CHECK_THROWS_AS(cosine_similarity({1, 0}, {1, 0, 0}), std::invalid_argument);
}

TEST_CASE("cosine similarity is symmetric and scale invariant", "[core]") {
  Rng rng(41);
  for (int trial = 0; trial < 200; ++trial) {
    const int dim = rng.next_int(1, 12);
    Embedding a(dim), b(dim);
    for (int i = 0; i < dim; ++i) {
      a[i] = rng.next_gaussian();
      b[i] = rng.next_gaussian();
    }
    if (l2_norm(a) == 0.0 || l2_norm(b) == 0.0) continue;
    const double ab = cosine_similarity(a, b);
    CHECK(std::abs(ab - cosine_similarity(b, a)) < 1e-9);
    CHECK(ab >= -1.0 - 1e-12);
    CHECK(ab <= 1.0 + 1e-12);
    const double alpha = 0.5 + 3.0 * rng.next_double();
    Embedding scaled = a;
    for (double& v : scaled) v *= alpha;
    CHECK(std::abs(ab - cosine_similarity(scaled, b)) < 1e-9);
  }
}

TEST_CASE("softmax basics", "[core]") {
  const ScoreVector even = softmax({0.0, 0.0});
  CHECK(even[0] == Catch::Approx(0.5));
  CHECK(even[1] == Catch::Approx(0.5));

  const ScoreVector direct = softmax({std::log(2.0), 0.0});
  CHECK(direct[0] == Catch::Approx(2.0 / 3.0));
  CHECK(direct[1] == Catch::Approx(1.0 / 3.0));

  const ScoreVector large = softmax({1000.0, 0.0});
  CHECK(std::isfinite(large[0]));
  CHECK(large[0] == Catch::Approx(1.0));
  CHECK(large[1] == Catch::Approx(0.0).margin(1e-12));

  CHECK_THROWS_AS(softmax({}), std::invalid_argument);
}

TEST_CASE("softmax output is a normalized score vector", "[core]") {
  Rng rng(42);
  for (int trial = 0; trial < 500; ++trial) {
    const int n = rng.next_int(1, 16);
    std::vector<double> logits(n);
    for (double& v : logits) v = 20.0 * (rng.next_double() - 0.5);
    const ScoreVector s = softmax(logits);
    double sum = 0.0;
    for (double v : s) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
      sum += v;
    }
    CHECK(std::abs(sum - 1.0) < 1e-9);
  }
}

TEST_CASE("softmax is shift invariant", "[core]") {
  Rng rng(43);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = rng.next_int(1, 10);
    std::vector<double> logits(n), shifted(n);
    const double c = 50.0 * (rng.next_double() - 0.5);
    for (int i = 0; i < n; ++i) {
      logits[i] = 10.0 * (rng.next_double() - 0.5);
      shifted[i] = logits[i] + c;
    }
    const ScoreVector a = softmax(logits);
    const ScoreVector b = softmax(shifted);
    for (int i = 0; i < n; ++i) CHECK(std::abs(a[i] - b[i]) < 1e-9);
  }
}

TEST_CASE("argmax breaks ties toward the lowest index", "[core]") {
  CHECK(argmax_stable({0.2, 0.8}) == 1);
  CHECK(argmax_stable({0.5, 0.5}) == 0);
  CHECK(argmax_stable({3, 1, 3}) == 0);
  CHECK_THROWS_AS(argmax_stable({}), std::invalid_argument);
}
