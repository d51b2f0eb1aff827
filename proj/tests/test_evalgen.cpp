#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <map>
#include <set>

#include "ravl/evalgen.hpp"
#include "ravl/rng.hpp"

using namespace ravl;

namespace {

WorldSpec small_world(std::uint64_t seed) {
  WorldSpec w;
  w.labels = {"otter", "heron", "lynx", "ibis"};
  w.spurious_label = "otter";
  w.spurious_concept = "marker";
  w.background_concepts = 4;
  w.finetune_images = 120;
  w.eval_images = 80;
  w.seed = seed;
  return w;
}

// Closed-form 2x2 chi-square: N (ad - bc)^2 / ((a+b)(c+d)(a+c)(b+d)).
double cramers_v_oracle(const ContingencyTable2x2& t) {
  const double a = static_cast<double>(t.a), b = static_cast<double>(t.b);
  const double c = static_cast<double>(t.c), d = static_cast<double>(t.d);
  const double n = a + b + c + d;
  const double denom = (a + b) * (c + d) * (a + c) * (b + d);
  if (denom == 0.0) return 0.0;
  const double chi2 = n * (a * d - b * c) * (a * d - b * c) / denom;
  return std::sqrt(chi2 / n);
}

}  // namespace

TEST_CASE("cramers_v on reference tables", "[evalgen]") {
  CHECK(cramers_v({50, 0, 0, 50}) == Catch::Approx(1.0));
  CHECK(cramers_v({25, 25, 25, 25}) == Catch::Approx(0.0).margin(1e-12));
  // chi2 = N (ad - bc)^2 / product of marginals = 20, V = sqrt(20 / 80).
  CHECK(cramers_v({30, 10, 10, 30}) == Catch::Approx(0.5));
  CHECK(cramers_v({10, 0, 90, 0}) == Catch::Approx(0.0));  // zero marginal
  CHECK_THROWS_AS(cramers_v({0, 0, 0, 0}), std::invalid_argument);
  CHECK_THROWS_AS(cramers_v({-1, 1, 1, 1}), std::invalid_argument);
}

TEST_CASE("cramers_v matches the closed-form oracle and is transpose invariant", "[evalgen]") {
  Rng rng(71);
  for (int trial = 0; trial < 500; ++trial) {
    ContingencyTable2x2 t{static_cast<long long>(rng.next_below(60)),
                          static_cast<long long>(rng.next_below(60)),
                          static_cast<long long>(rng.next_below(60)),
                          static_cast<long long>(rng.next_below(60))};
    if (t.total() == 0) continue;
    const double v = cramers_v(t);
    CHECK(std::abs(v - cramers_v_oracle(t)) < 1e-9);
    CHECK(v >= 0.0);
    CHECK(v <= 1.0 + 1e-12);
    const ContingencyTable2x2 transposed{t.a, t.c, t.b, t.d};
    CHECK(std::abs(v - cramers_v(transposed)) < 1e-12);
  }
}

TEST_CASE("generated settings hit the correlation target", "[evalgen]") {
  for (double target : {0.0, 0.5, 0.9, 0.95}) {
    WorldSpec w = small_world(5);
    w.cramers_v_target = target;
    const EvalSetting s = generate_setting(w);
    CHECK(std::abs(s.achieved_v - target) <= 0.02);
    CHECK(s.achieved_v == Catch::Approx(cramers_v(s.finetune_counts)));
    // The solved counts match the emitted images.
    long long a = 0, b = 0, c = 0, d = 0;
    for (const auto& img : s.finetune.images) {
      const bool corr = img.label == s.spurious_label_index;
      if (corr && img.has_feature) ++a;
      if (corr && !img.has_feature) ++b;
      if (!corr && img.has_feature) ++c;
      if (!corr && !img.has_feature) ++d;
    }
    CHECK(a == s.finetune_counts.a);
    CHECK(b == s.finetune_counts.b);
    CHECK(c == s.finetune_counts.c);
    CHECK(d == s.finetune_counts.d);
  }
}

TEST_CASE("a zero target spreads the feature evenly across labels", "[evalgen]") {
  WorldSpec w = small_world(9);
  w.cramers_v_target = 0.0;
  const EvalSetting s = generate_setting(w);
  std::map<int, int> with_feature, count;
  for (const auto& img : s.finetune.images) {
    count[img.label] += 1;
    if (img.has_feature) with_feature[img.label] += 1;
  }
  const double rate0 = static_cast<double>(with_feature[0]) / count[0];
  for (int y = 1; y < 4; ++y) {
    const double rate = static_cast<double>(with_feature[y]) / count[y];
    CHECK(std::abs(rate - rate0) < 0.05);
  }
}

TEST_CASE("the evaluation split is independent by count construction", "[evalgen]") {
  const EvalSetting s = generate_setting(small_world(11));
  std::map<int, int> with_feature, count;
  for (const auto& img : s.eval.images) {
    count[img.label] += 1;
    if (img.has_feature) with_feature[img.label] += 1;
  }
  REQUIRE(count.size() == 4);
  for (int y = 1; y < 4; ++y) {
    CHECK(count[y] == count[0]);
    CHECK(with_feature[y] == with_feature[0]);
  }
  // Region annotations: every region is tagged, spurious tags appear exactly
  // on feature images, and the core tag matches the class label.
  for (const auto& img : s.eval.images) {
    bool saw_spurious = false;
    bool saw_core = false;
    for (int r : img.regions) {
      const auto& reg = s.eval.regions[r];
      CHECK_FALSE(reg.concept_tag.empty());
      if (reg.concept_tag == s.spec.spurious_concept) saw_spurious = true;
      if (reg.concept_tag == s.spec.labels[img.label]) saw_core = true;
    }
    CHECK(saw_spurious == img.has_feature);
    CHECK(saw_core);
  }
}

TEST_CASE("image raw features average their regions", "[evalgen]") {
  const EvalSetting s = generate_setting(small_world(13));
  const auto& img = s.finetune.images.front();
  std::vector<double> mean(s.spec.raw_dim, 0.0);
  for (int r : img.regions) {
    for (int i = 0; i < s.spec.raw_dim; ++i) mean[i] += s.finetune.regions[r].raw[i];
  }
  for (double& v : mean) v /= static_cast<double>(img.regions.size());
  for (int i = 0; i < s.spec.raw_dim; ++i) {
    CHECK(img.raw[i] == Catch::Approx(mean[i]).margin(1e-12));
  }
}

TEST_CASE("captions mention exactly the class label", "[evalgen]") {
  const EvalSetting s = generate_setting(small_world(17));
  for (const auto& img : s.finetune.images) {
    CHECK(img.caption.find(s.spec.labels[img.label]) != std::string::npos);
    CHECK(img.caption.find("{}") == std::string::npos);
    CHECK(img.caption_embedding.size() == static_cast<std::size_t>(s.spec.embed_dim));
  }
}

TEST_CASE("same seed regenerates the identical setting", "[evalgen]") {
  const EvalSetting a = generate_setting(small_world(23));
  const EvalSetting b = generate_setting(small_world(23));
  REQUIRE(a.finetune.images.size() == b.finetune.images.size());
  for (std::size_t i = 0; i < a.finetune.images.size(); ++i) {
    CHECK(a.finetune.images[i].raw == b.finetune.images[i].raw);
    CHECK(a.finetune.images[i].caption == b.finetune.images[i].caption);
    CHECK(a.finetune.images[i].label == b.finetune.images[i].label);
  }
  REQUIRE(a.eval.regions.size() == b.eval.regions.size());
  for (std::size_t r = 0; r < a.eval.regions.size(); ++r) {
    CHECK(a.eval.regions[r].raw == b.eval.regions[r].raw);
    CHECK(a.eval.regions[r].concept_tag == b.eval.regions[r].concept_tag);
  }
  const EvalSetting c = generate_setting(small_world(24));
  CHECK(a.finetune.images.front().raw != c.finetune.images.front().raw);
}

TEST_CASE("infeasible correlation targets report the feasible range", "[evalgen]") {
  WorldSpec w = small_world(29);
  w.labels = {"a", "b"};
  w.spurious_label = "a";
  w.finetune_images = 4;
  w.eval_images = 8;
  w.cramers_v_target = 0.3;
  CHECK_THROWS_WITH(generate_setting(w), Catch::Matchers::ContainsSubstring("feasible range"));
}

TEST_CASE("world validation rejects inconsistent specs", "[evalgen]") {
  WorldSpec w = small_world(1);
  w.spurious_label = "nonexistent";
  CHECK_THROWS_AS(generate_setting(w), std::invalid_argument);
  w = small_world(1);
  w.spurious_concept = "otter";  // collides with a core concept
  CHECK_THROWS_AS(generate_setting(w), std::invalid_argument);
  w = small_world(1);
  w.eval_images = 81;  // not a multiple of the label count
  CHECK_THROWS_AS(generate_setting(w), std::invalid_argument);
  w = small_world(1);
  w.caption_templates = {"no placeholder"};
  CHECK_THROWS_AS(generate_setting(w), std::invalid_argument);
}

TEST_CASE("validity flags a feature-driven model and enforces directions", "[evalgen]") {
  const EvalSetting s = generate_setting(small_world(31));
  const int a = s.spurious_label_index;
  // A model that leans fully on the planted feature: right on correlated
  // images with the feature, wrong otherwise.
  auto shortcut = [&](const RawImage& img) {
    if (img.has_feature) return a;
    return img.label == a ? (a + 1) % 4 : img.label;
  };
  const ValidityReport r = check_validity(s, shortcut, 10.0);
  CHECK(r.eps1_defined);
  CHECK(r.eps2_defined);
  CHECK(r.eps1 == Catch::Approx(100.0));
  CHECK(r.eps2 == Catch::Approx(100.0));
  CHECK(r.valid);
  CHECK(check_validity(s, shortcut, 0.0).valid);

  // Reversed signs are invalid, not valid-with-flip.
  auto reversed = [&](const RawImage& img) {
    if (img.has_feature) return img.label == a ? (a + 1) % 4 : img.label;
    return img.label;
  };
  const ValidityReport rr = check_validity(s, reversed, 10.0);
  CHECK(rr.eps1 <= 0.0);
  CHECK_FALSE(rr.valid);
}

TEST_CASE("the prototype oracle ignores the planted feature", "[evalgen]") {
  const EvalSetting s = generate_setting(small_world(37));
  const ValidityReport r = check_validity(s, oracle_predictor(s), 10.0);
  CHECK(r.eps1_defined);
  CHECK(r.eps2_defined);
  CHECK(std::abs(r.eps1) < 10.0);
  CHECK(std::abs(r.eps2) < 10.0);
  CHECK_FALSE(r.valid);
}

TEST_CASE("validity of an untrained encoder is seed reproducible", "[evalgen]") {
  const EvalSetting s = generate_setting(small_world(41));
  const EncoderParams a = EncoderParams::random_init(s.spec.embed_dim, s.spec.raw_dim, 99);
  const EncoderParams b = EncoderParams::random_init(s.spec.embed_dim, s.spec.raw_dim, 99);
  const ValidityReport ra = check_validity(s, encoder_predictor(a, s.labels), 10.0);
  const ValidityReport rb = check_validity(s, encoder_predictor(b, s.labels), 10.0);
  CHECK(ra.eps1 == rb.eps1);
  CHECK(ra.eps2 == rb.eps2);
  CHECK(ra.valid == rb.valid);
}

TEST_CASE("precision counts spurious tags among the top ranked regions", "[evalgen]") {
  EvalDataset ds;
  SpuriousReport report;
  ImageRecord img;
  img.id = 0;
  img.label = 0;
  for (int r = 0; r < 12; ++r) {
    RegionRecord reg;
    reg.id = r;
    reg.image = 0;
    reg.concept_tag = r < 6 ? "marker" : "background_0";
    img.regions.push_back(r);
    ds.regions.push_back(reg);
    report.top_regions.push_back({r, 1.0 - 0.01 * r});
  }
  ds.images.push_back(img);

  CHECK(precision_at_k(report, ds, "marker", 10).value == Catch::Approx(0.6));
  CHECK(precision_at_k(report, ds, "marker", 6).value == Catch::Approx(1.0));
  CHECK(precision_at_k(report, ds, "nothing", 10).value == Catch::Approx(0.0));
  const PrecisionResult truncated = precision_at_k(report, ds, "marker", 20);
  CHECK(truncated.truncated);
  CHECK(truncated.evaluated == 12);
  report.top_regions.clear();
  CHECK_THROWS_AS(precision_at_k(report, ds, "marker", 10), std::invalid_argument);
}

TEST_CASE("random rankings average to the pool's spurious fraction", "[evalgen]") {
  WorldSpec w = small_world(47);
  w.eval_images = 120;
  const EvalSetting s = generate_setting(w);
  const EncoderParams enc = EncoderParams::random_init(w.embed_dim, w.raw_dim, 3);
  const EvalDataset ds = materialize_eval(s.eval, enc);

  int spurious = 0;
  for (const auto& reg : ds.regions) {
    if (reg.concept_tag == w.spurious_concept) ++spurious;
  }
  const double pool_fraction = static_cast<double>(spurious) / ds.regions.size();

  std::vector<Embedding> region_embs;
  for (const auto& reg : ds.regions) region_embs.push_back(reg.embedding);
  const Clustering clustering = select_k(region_embs, 4, 1);
  DiscoverOptions opts;
  opts.variant = DiscoveryVariant::random;

  const int runs = 120;
  std::vector<double> values;
  for (int i = 0; i < runs; ++i) {
    const SpuriousReport rep = discover_with_clustering(ds, s.labels, clustering, 1000 + i, opts);
    values.push_back(precision_at_k(rep, ds, w.spurious_concept, 10).value);
  }
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= runs;
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  var /= (runs - 1);
  const double se = std::sqrt(var / runs);
  CHECK(std::abs(mean - pool_fraction) <= 3.0 * std::max(se, 1e-6));
}
