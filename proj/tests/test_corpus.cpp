#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <set>

#include "doctest.h"
#include "freqhead/corpus.hpp"
#include "freqhead/error.hpp"
#include "freqhead/synth.hpp"

using namespace freqhead;

namespace {

std::vector<std::string> regular_tokens(const Vocab& v) {
  return {v.tokens().begin(), v.tokens().begin() + static_cast<std::ptrdiff_t>(v.regular_size())};
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("freqhead_test_" + name);
}

}  // namespace

TEST_CASE("vocab ranks by count and appends specials") {
  const std::vector<std::string> texts = {"b a a"};
  const Vocab v = build_vocab(texts, 6);
  CHECK(v.size() == 6);
  CHECK(regular_tokens(v) == std::vector<std::string>{"a", "b"});
  const std::set<TokenId> specials = {v.unk(), v.eos(), v.mask(), v.pad()};
  CHECK(specials.size() == 4);
  for (TokenId id : specials) CHECK(id < static_cast<TokenId>(v.size()));
}

TEST_CASE("vocab truncation sends dropped words to unk") {
  const std::vector<std::string> texts = {"x y", "x"};
  const Vocab v = build_vocab(texts, 5);
  CHECK(regular_tokens(v) == std::vector<std::string>{"x"});
  const Sequence ids = v.encode("x y");
  CHECK(ids == Sequence{v.id_of("x"), v.unk()});
}

TEST_CASE("vocab ties break lexicographically") {
  const std::vector<std::string> texts = {"b b", "a a"};
  const Vocab v = build_vocab(texts, 6);
  CHECK(regular_tokens(v) == std::vector<std::string>{"a", "b"});
}

TEST_CASE("vocab errors") {
  const std::vector<std::string> empty;
  CHECK_THROWS_WITH_AS(build_vocab(empty, 10), "empty corpus", Error);
  const std::vector<std::string> blank = {"   ", ""};
  CHECK_THROWS_WITH_AS(build_vocab(blank, 10), "empty corpus", Error);
  const std::vector<std::string> texts = {"a"};
  CHECK_THROWS_AS(build_vocab(texts, 4), Error);
}

TEST_CASE("vocab save and load keep indices") {
  const std::vector<std::string> texts = {"the cat sat on the mat", "a dog, \"quoted\" the"};
  const Vocab v = build_vocab(texts, 50);
  const auto path = temp_path("vocab.json");
  v.save(path);
  const Vocab w = Vocab::load(path);
  CHECK(w.tokens() == v.tokens());
  CHECK(w.hash() == v.hash());
  CHECK(w.eos() == v.eos());
  CHECK(w.mask() == v.mask());
  std::filesystem::remove(path);
}

TEST_CASE("encode and decode round trip up to unk and whitespace") {
  const std::vector<std::string> texts = {"a b c a"};
  const Vocab v = build_vocab(texts, 7);
  CHECK(v.decode(v.encode("  a   b\tc ")) == "a b c");
  CHECK(v.decode(v.encode("a zzz")) == "a <unk>");
  CHECK(v.decode(v.encode_document("a b")) == "a b");
}

TEST_CASE("unigram counts include one eos per document") {
  const std::vector<std::string> texts = {"a a a b"};
  const Vocab v = build_vocab(texts, 10);
  const UnigramDistribution u = count_unigram(texts, v);
  // Hand count: a x3, b x1, EOS x1 out of 5.
  CHECK(u.probs[static_cast<std::size_t>(v.id_of("a"))] == doctest::Approx(3.0 / 5.0).epsilon(1e-12));
  CHECK(u.probs[static_cast<std::size_t>(v.id_of("b"))] == doctest::Approx(1.0 / 5.0).epsilon(1e-12));
  CHECK(u.probs[static_cast<std::size_t>(v.eos())] == doctest::Approx(1.0 / 5.0).epsilon(1e-12));
  CHECK(u.total() == 5);
}

TEST_CASE("unigram single token and all-oov corpora") {
  const std::vector<std::string> one = {"a"};
  const Vocab v = build_vocab(one, 10);
  const auto u = count_unigram(one, v);
  CHECK(u.probs[static_cast<std::size_t>(v.id_of("a"))] == 0.5);
  CHECK(u.probs[static_cast<std::size_t>(v.eos())] == 0.5);

  const std::vector<std::string> oov = {"q r", "s"};
  const auto w = count_unigram(oov, v);
  CHECK(w.counts[static_cast<std::size_t>(v.unk())] == 3);
  CHECK(w.counts[static_cast<std::size_t>(v.eos())] == 2);
  CHECK(w.probs[static_cast<std::size_t>(v.unk())] + w.probs[static_cast<std::size_t>(v.eos())] ==
        doctest::Approx(1.0));
}

TEST_CASE("unigram probabilities sum to one on random corpora") {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::string> texts;
    const auto ndocs = 1 + rng.below(20);
    for (std::uint64_t d = 0; d < ndocs; ++d) {
      std::string t;
      const auto len = rng.below(15);
      for (std::uint64_t i = 0; i < len; ++i) t += "w" + std::to_string(rng.below(40)) + " ";
      texts.push_back(t);
    }
    texts.push_back("anchor");
    const Vocab v = build_vocab(texts, 5 + rng.below(30));
    const auto u = count_unigram(texts, v);
    double s = 0;
    for (std::size_t i = 0; i < u.probs.size(); ++i) {
      CHECK(u.probs[i] >= 0.0);
      CHECK(u.probs[i] == static_cast<double>(u.counts[i]) / static_cast<double>(u.total()));
      s += u.probs[i];
    }
    CHECK(std::abs(s - 1.0) <= 1e-9);
  }
}

TEST_CASE("unigram csv round trip") {
  const std::vector<std::string> texts = {"x, y \"z\" x", "y x"};
  const Vocab v = build_vocab(texts, 20);
  const auto u = count_unigram(texts, v);
  const auto path = temp_path("unigram.csv");
  u.write_csv(path, v);
  const auto r = UnigramDistribution::read_csv(path);
  CHECK(r.counts == u.counts);
  CHECK(r.probs == u.probs);
  std::filesystem::remove(path);
}

TEST_CASE("mask corruption edge rates") {
  const std::vector<std::string> texts = {"a b c d e f g"};
  const Vocab v = build_vocab(texts, 20);
  const Sequence ids = v.encode("a b c d e f g");
  Rng rng(3);
  const auto none = mask_corrupt(ids, v, rng, {0.0, 0.8, 0.1});
  CHECK(none.ids == ids);
  CHECK(none.targets.empty());
  const auto all = mask_corrupt(ids, v, rng, {1.0, 1.0, 0.0});
  CHECK(all.targets.size() == ids.size());
  for (TokenId id : all.ids) CHECK(id == v.mask());
  const auto empty = mask_corrupt(Sequence{}, v, rng);
  CHECK(empty.ids.empty());
  CHECK(empty.targets.empty());
}

TEST_CASE("mask corruption default rates") {
  std::vector<std::string> words;
  for (int i = 0; i < 50; ++i) words.push_back("w" + std::to_string(i));
  std::string text;
  for (int i = 0; i < 10000; ++i) text += words[static_cast<std::size_t>(i % 50)] + " ";
  const std::vector<std::string> texts = {text};
  const Vocab v = build_vocab(texts, 100);
  const Sequence ids = v.encode(text);
  Rng rng(2024);
  const auto c = mask_corrupt(ids, v, rng);
  const auto masks = std::count(c.ids.begin(), c.ids.end(), v.mask());
  // Expected fraction 0.15 * 0.8 = 0.12; binomial sd is about 0.0032.
  CHECK(std::abs(static_cast<double>(masks) / 10000.0 - 0.12) <= 0.01);
}

TEST_CASE("mask corruption skips pad and never draws specials") {
  const std::vector<std::string> texts = {"a b c"};
  const Vocab v = build_vocab(texts, 10);
  Sequence ids;
  for (int i = 0; i < 2000; ++i) ids.push_back(i % 4 == 0 ? v.pad() : static_cast<TokenId>(i % 3));
  Rng rng(9);
  const auto c = mask_corrupt(ids, v, rng, {0.5, 0.0, 1.0});
  for (std::size_t pos : c.targets) {
    CHECK(ids[pos] != v.pad());
    CHECK_FALSE(v.is_special(c.ids[pos]));
  }
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] == v.pad()) CHECK(c.ids[i] == v.pad());
  }
}

TEST_CASE("mask corruption rejects invalid rates") {
  const std::vector<std::string> texts = {"a"};
  const Vocab v = build_vocab(texts, 10);
  Rng rng(1);
  const Sequence ids = {0};
  CHECK_THROWS_AS(mask_corrupt(ids, v, rng, {0.15, 0.8, 0.3}), Error);
  CHECK_THROWS_AS(mask_corrupt(ids, v, rng, {1.5, 0.8, 0.1}), Error);
}

TEST_CASE("binned curve geometric statistics") {
  const std::vector<double> freqs = {0.5, 0.5};
  const std::vector<double> probs = {1e-2, 1e-4};
  const auto c = bin_curve(freqs, probs, 1);
  CHECK(c.count[0] == 2);
  CHECK(c.geo_mean[0] == doctest::Approx(1e-3).epsilon(1e-12));

  const std::vector<double> same = {0.2, 0.2, 0.2};
  const std::vector<double> f3 = {0.1, 0.2, 0.3};
  const auto d = bin_curve(f3, same, 1);
  CHECK(d.geo_sd[0] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("binned curve membership matches a linear scan") {
  const std::vector<double> freqs = {0.01, 0.2, 0.05};
  const std::vector<double> probs = {0.1, 0.2, 0.3};
  const std::vector<double> edges = {0.005, 0.03, 0.5};
  const auto c = bin_curve_with_edges(freqs, probs, edges);
  for (std::size_t i = 0; i < freqs.size(); ++i) {
    std::size_t expected = 99;
    for (std::size_t b = 0; b + 1 < edges.size(); ++b) {
      const bool last = b + 2 == edges.size();
      if (freqs[i] >= edges[b] && (freqs[i] < edges[b + 1] || (last && freqs[i] == edges[b + 1]))) expected = b;
    }
    const auto& m = c.members[expected];
    CHECK(std::find(m.begin(), m.end(), i) != m.end());
  }
  CHECK(c.members[0] == std::vector<std::size_t>{0});
  CHECK(c.members[1] == std::vector<std::size_t>{1, 2});
}

TEST_CASE("binned curve partitions the non-dropped items") {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> f, p;
    const auto n = 3 + rng.below(200);
    for (std::uint64_t i = 0; i < n; ++i) {
      f.push_back(rng.uniform() < 0.1 ? 0.0 : std::exp(-10.0 * rng.uniform()));
      p.push_back(0.001 + rng.uniform());
    }
    f[0] = 0.5;
    const auto c = bin_curve(f, p, 1 + rng.below(10));
    std::vector<int> seen(n, 0);
    for (std::size_t b = 0; b < c.members.size(); ++b) {
      CHECK(c.members[b].size() == c.count[b]);
      double lo = 1e300, hi = 0;
      for (std::size_t i : c.members[b]) {
        ++seen[i];
        lo = std::min(lo, p[i]);
        hi = std::max(hi, p[i]);
      }
      if (c.count[b] > 0) {
        CHECK(c.geo_mean[b] >= lo * (1 - 1e-12));
        CHECK(c.geo_mean[b] <= hi * (1 + 1e-12));
      }
    }
    for (std::size_t b = 1; b < c.bin_edges.size(); ++b) CHECK(c.bin_edges[b] > c.bin_edges[b - 1]);
    std::size_t dropped = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (f[i] > 0) {
        CHECK(seen[i] == 1);
      } else {
        CHECK(seen[i] == 0);
        ++dropped;
      }
    }
    CHECK(c.dropped == dropped);
  }
}

TEST_CASE("binned curve with no positive frequency") {
  const std::vector<double> f = {0.0, 0.0};
  const std::vector<double> p = {0.5, 0.5};
  CHECK_THROWS_WITH_AS(bin_curve(f, p, 3), "nothing to bin", Error);
}

TEST_CASE("synthetic corpus is deterministic and Zipfian") {
  SynthConfig cfg;
  cfg.num_words = 300;
  cfg.num_classes = 8;
  cfg.target_tokens = 20000;
  const auto a = synth_corpus(cfg, 4);
  const auto b = synth_corpus(cfg, 4);
  CHECK(a == b);
  const Vocab v = build_vocab(a, 400);
  const auto u = count_unigram(a, v);
  // Frequency falls steeply with rank.
  CHECK(u.counts[0] > 10 * u.counts[200]);
  CHECK(synth_word(0) != synth_word(1));

  SynthConfig shifted = cfg;
  shifted.rank_shift = 0.5;
  const auto c = synth_corpus(shifted, 4);
  CHECK(c != a);
}
