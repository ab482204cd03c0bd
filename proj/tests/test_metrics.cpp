#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "doctest.h"
#include "freqhead/metrics.hpp"
#include "oracles.hpp"

using namespace freqhead;

namespace {

Vocab small_vocab() {
  std::vector<std::string> words;
  for (int i = 0; i < 8; ++i) words.push_back("t" + std::to_string(i));
  return Vocab(words);
}

ModelParams<float> small_model(const Vocab& v, std::uint64_t seed) {
  ModelConfig c;
  c.d_model = 8;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_ff = 16;
  c.max_seq_len = 16;
  c.vocab_size = static_cast<int>(v.size());
  return ModelParams<float>::initialize(c, seed);
}

std::vector<Sequence> random_texts(Rng& rng, int count, int max_len, int alphabet) {
  std::vector<Sequence> out;
  for (int i = 0; i < count; ++i) {
    Sequence s(1 + rng.below(static_cast<std::uint64_t>(max_len)));
    for (auto& t : s) t = static_cast<TokenId>(rng.below(static_cast<std::uint64_t>(alphabet)));
    out.push_back(s);
  }
  return out;
}

}  // namespace

TEST_CASE("distinct-n hand examples") {
  const std::vector<Sequence> abab = {{0, 1, 0, 1}};
  CHECK(distinct_n(abab, 1) == doctest::Approx(0.5));
  CHECK(distinct_n(abab, 2) == doctest::Approx(2.0 / 3.0));
  CHECK(distinct_n(abab, 3) == doctest::Approx(1.0));
  CHECK(distinct_n(abab, 4) == doctest::Approx(1.0));
  CHECK(ngram_diversity(abab) == doctest::Approx(0.7917).epsilon(1e-4));

  const std::vector<std::vector<std::string>> words = {{"a", "b", "a", "b"}};
  CHECK(distinct_n(words, 2) == doctest::Approx(2.0 / 3.0));

  for (int len : {5, 17, 40}) {
    const std::vector<Sequence> rep = {Sequence(static_cast<std::size_t>(len), 3)};
    for (int n = 1; n <= 4; ++n) CHECK(distinct_n(rep, n) == doctest::Approx(1.0 / (len - n + 1)));
  }
}

TEST_CASE("distinct-n pools across texts and matches the oracle") {
  const std::vector<Sequence> two = {{1, 2}, {1, 2}};
  CHECK(distinct_n(two, 2) == doctest::Approx(0.5));
  CHECK(distinct_n(two, 1) == doctest::Approx(0.5));

  Rng rng(1);
  for (int trial = 0; trial < 40; ++trial) {
    auto texts = random_texts(rng, 6, 12, 5);
    std::vector<std::vector<int>> as_int(texts.begin(), texts.end());
    for (int n = 1; n <= 4; ++n) {
      bool any = false;
      for (const auto& t : texts) any = any || static_cast<int>(t.size()) >= n;
      if (!any) continue;
      const double d = distinct_n(texts, n);
      CHECK(d == doctest::Approx(oracle::distinct_n(as_int, n)));
      CHECK(d > 0.0);
      CHECK(d <= 1.0);
      std::reverse(texts.begin(), texts.end());
      CHECK(distinct_n(texts, n) == doctest::Approx(d));
    }
  }
}

TEST_CASE("distinct-n errors") {
  const std::vector<Sequence> shorts = {{1}, {2}};
  CHECK_THROWS_AS(distinct_n(shorts, 2), Error);
  CHECK_THROWS_AS(distinct_n(shorts, 0), Error);
  const std::vector<Sequence> none;
  CHECK_THROWS_AS(distinct_n(none, 1), Error);
}

TEST_CASE("perplexity of a uniform head is the vocabulary size") {
  const Vocab v = small_vocab();
  auto p = small_model(v, 2);
  p.embedding.setZero();
  const std::vector<Sequence> docs = {{1, 2, 3, 4, 5}, {6, 7, 0}};
  CHECK(perplexity(p, v, docs, InterventionSpec{}) == doctest::Approx(static_cast<double>(v.size())));
}

TEST_CASE("perplexity agrees with the mean log-likelihood and is bounded below by one") {
  const Vocab v = small_vocab();
  const auto p = small_model(v, 3);
  const std::vector<Sequence> docs = {{1, 2, 3, 4, 5, 6}, {7, 6, 5}};
  const double ppl = perplexity(p, v, docs, InterventionSpec{});
  CHECK(ppl >= 1.0);
  CHECK(ppl == doctest::Approx(std::exp(evaluate_nll(p, v, docs, InterventionSpec{}).mean())));

  const std::vector<Sequence> single = {{1}};
  CHECK_THROWS_AS(perplexity(p, v, single, InterventionSpec{}), Error);

  ModelConfig mc = p.config;
  mc.variant = Variant::masked;
  const auto m = ModelParams<float>::initialize(mc, 3);
  CHECK_THROWS_AS(perplexity(m, v, docs, InterventionSpec{}), Error);
}

TEST_CASE("histogram quality matches one minus normalized jsd") {
  CHECK(histogram_quality(std::vector<double>{1, 2, 3}, std::vector<double>{2, 4, 6}) == doctest::Approx(1.0));
  CHECK(histogram_quality(std::vector<double>{1, 0}, std::vector<double>{0, 1}) == doctest::Approx(0.0));
  Rng rng(4);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> a(6), b(6);
    double sa = 0, sb = 0;
    for (int i = 0; i < 6; ++i) {
      a[i] = rng.uniform();
      b[i] = rng.uniform();
      sa += a[i];
      sb += b[i];
    }
    const double q = histogram_quality(a, b);
    CHECK(q == doctest::Approx(histogram_quality(b, a)));
    for (auto& x : a) x /= sa;
    for (auto& x : b) x /= sb;
    CHECK(q == doctest::Approx(1.0 - oracle::jsd(a, b) / std::numbers::ln2));
  }
  CHECK_THROWS_AS(histogram_quality(std::vector<double>{1, 2}, std::vector<double>{1}), Error);
  CHECK_THROWS_AS(histogram_quality(std::vector<double>{0, 0}, std::vector<double>{1, 1}), Error);
}

TEST_CASE("cluster quality from forced assignments") {
  // Four generated and four reference documents over two clusters.
  const std::vector<std::size_t> same = {0, 0, 1, 1, 0, 1, 0, 1};
  CHECK(cluster_quality(same, 4, 2) == doctest::Approx(1.0));
  const std::vector<std::size_t> disjoint = {0, 0, 0, 0, 1, 1, 1, 1};
  CHECK(cluster_quality(disjoint, 4, 2) == doctest::Approx(0.0));
  const std::vector<std::size_t> skew = {0, 0, 0, 1, 0, 1, 1, 1};
  const double expected = 1.0 - oracle::jsd({0.75, 0.25}, {0.25, 0.75}) / std::numbers::ln2;
  CHECK(cluster_quality(skew, 4, 2) == doctest::Approx(expected));
  CHECK_THROWS_AS(cluster_quality(skew, 0, 2), Error);
  CHECK_THROWS_AS(cluster_quality(skew, 8, 2), Error);
  CHECK_THROWS_AS(cluster_quality(skew, 4, 1), Error);
}

TEST_CASE("k-means is deterministic and separates obvious clusters") {
  Matrix<double> pts(6, 2);
  pts << 0, 0, 0.1, 0, 0, 0.1, 10, 10, 10.1, 10, 10, 10.1;
  const auto a = kmeans(pts, 2, 5);
  const auto b = kmeans(pts, 2, 5);
  CHECK(a.assignments == b.assignments);
  CHECK(a.centroids == b.centroids);
  CHECK(a.assignments[0] == a.assignments[1]);
  CHECK(a.assignments[0] == a.assignments[2]);
  CHECK(a.assignments[3] == a.assignments[4]);
  CHECK(a.assignments[0] != a.assignments[3]);
  CHECK_THROWS_AS(kmeans(pts, 7, 5), Error);
  CHECK_THROWS_AS(kmeans(pts, 0, 5), Error);

  Matrix<double> dup = Matrix<double>::Zero(4, 3);
  const auto d = kmeans(dup, 3, 1);
  CHECK(d.assignments.size() == 4);
}

TEST_CASE("embedding-cluster quality") {
  const Vocab v = small_vocab();
  const auto p = small_model(v, 6);
  Rng rng(7);
  const auto docs = random_texts(rng, 12, 10, 8);
  CHECK(embdiv_quality(docs, docs, p, 3, 1) == doctest::Approx(1.0));
  const double q = embdiv_quality(docs, random_texts(rng, 10, 10, 8), p, 3, 1);
  CHECK(q >= 0.0);
  CHECK(q <= 1.0);
  CHECK_THROWS_AS(embdiv_quality(docs, docs, p, 25, 1), Error);
  CHECK_THROWS_AS(embdiv_quality(docs, docs, p, 1, 1), Error);
  const std::vector<Sequence> none;
  CHECK_THROWS_AS(embdiv_quality(none, docs, p, 2, 1), Error);

  const auto e = embed_documents(p, docs);
  CHECK(e.rows() == 12);
  CHECK(e.cols() == 8);
}

TEST_CASE("frequency ranks") {
  UnigramDistribution u;
  u.counts = {5, 10, 5, 0, 1};
  const auto r = frequency_ranks(u);
  CHECK(r == std::vector<double>{2.5, 1.0, 2.5, 5.0, 4.0});
  const std::vector<Sequence> texts = {{1, 1}, {4}};
  CHECK(mean_frequency_rank(texts, r) == doctest::Approx(2.0));
  const std::vector<Sequence> bad = {{9}};
  CHECK_THROWS_AS(mean_frequency_rank(bad, r), Error);
  const std::vector<Sequence> none = {{}};
  CHECK_THROWS_AS(mean_frequency_rank(none, r), Error);
}

TEST_CASE("eval report json") {
  EvalReport r;
  r.ppl = std::numeric_limits<double>::infinity();
  r.strategy = Strategy::top_k;
  nlohmann::json j = r;
  CHECK(j["ppl"] == "inf");
  CHECK(j["strategy"] == "top_k");
  for (const char* key : {"lambda_ln", "d1", "d2", "d3", "d4", "d_mean", "embdiv", "documents", "mean_freq_rank"}) {
    CHECK(j.contains(key));
  }
}
