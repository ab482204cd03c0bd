#include "freqhead/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "freqhead/error.hpp"
#include "freqhead/rng.hpp"

namespace freqhead {

void SynthConfig::validate() const {
  if (num_words < 2 || num_classes < 1 || num_classes > num_words) {
    throw Error("synth: need num_words >= 2 and 1 <= num_classes <= num_words");
  }
  if (successors < 1 || successors > num_classes) throw Error("synth: successors out of range");
  if (min_doc_len < 1 || max_doc_len < min_doc_len) throw Error("synth: bad document lengths");
  if (!(rank_shift >= 0.0 && rank_shift < 1.0)) throw Error("synth: rank_shift must lie in [0, 1)");
  if (target_tokens < 1) throw Error("synth: target_tokens must be positive");
}

std::string synth_word(std::size_t i) {
  static constexpr const char* kOnsets[] = {"b", "d", "f", "g", "k", "l", "m", "n",
                                            "p", "r", "s", "t", "v", "z", "sh", "tr"};
  static constexpr const char* kVowels[] = {"a", "e", "i", "o", "u", "ai", "ou", "ei"};
  std::string out;
  // Bijective base-128 syllable encoding; at least two syllables.
  std::size_t v = i;
  int syllables = 0;
  do {
    const std::size_t s = v % 128;
    out += kOnsets[s / 8];
    out += kVowels[s % 8];
    v /= 128;
    ++syllables;
  } while (v > 0 || syllables < 2);
  return out;
}

namespace {

std::size_t draw(const std::vector<double>& cdf, Rng& rng) {
  const double u = rng.uniform() * cdf.back();
  const auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
  return std::min(static_cast<std::size_t>(it - cdf.begin()), cdf.size() - 1);
}

std::vector<double> cumulative(const std::vector<double>& w) {
  std::vector<double> c(w.size());
  std::partial_sum(w.begin(), w.end(), c.begin());
  return c;
}

}  // namespace

std::vector<std::string> synth_corpus(const SynthConfig& cfg, std::uint64_t structure_seed) {
  cfg.validate();
  Rng structure(structure_seed);

  // Word w has global rank w; classes take words round-robin so every class
  // spans the whole frequency range.
  const std::size_t nc = cfg.num_classes;
  std::vector<std::vector<std::size_t>> members(nc);
  for (std::size_t w = 0; w < cfg.num_words; ++w) members[w % nc].push_back(w);

  std::vector<std::vector<double>> emit_cdf(nc);
  for (std::size_t c = 0; c < nc; ++c) {
    const std::size_t m = members[c].size();
    const auto shift = static_cast<std::size_t>(std::floor(cfg.rank_shift * static_cast<double>(m)));
    std::vector<double> w(m);
    for (std::size_t j = 0; j < m; ++j) {
      const std::size_t global_rank = members[c][(j + m - shift) % m];
      w[j] = std::pow(static_cast<double>(global_rank + 1), -cfg.zipf_exponent);
    }
    emit_cdf[c] = cumulative(w);
  }

  std::vector<std::vector<std::size_t>> next(nc);
  std::vector<std::vector<double>> next_cdf(nc);
  for (std::size_t c = 0; c < nc; ++c) {
    std::vector<std::size_t> all(nc);
    std::iota(all.begin(), all.end(), 0);
    for (std::size_t i = 0; i < cfg.successors; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(structure.below(nc - i));
      std::swap(all[i], all[j]);
      next[c].push_back(all[i]);
    }
    std::vector<double> w(cfg.successors);
    for (auto& x : w) x = 0.2 + structure.uniform();
    next_cdf[c] = cumulative(w);
  }

  Rng rng(cfg.seed);
  std::vector<std::string> docs;
  std::size_t produced = 0;
  while (produced < cfg.target_tokens) {
    const std::size_t len =
        cfg.min_doc_len + static_cast<std::size_t>(rng.below(cfg.max_doc_len - cfg.min_doc_len + 1));
    std::size_t c = static_cast<std::size_t>(rng.below(nc));
    std::string doc;
    for (std::size_t t = 0; t < len; ++t) {
      const std::size_t w = members[c][draw(emit_cdf[c], rng)];
      if (!doc.empty()) doc += ' ';
      doc += synth_word(w);
      c = next[c][draw(next_cdf[c], rng)];
    }
    produced += len + 1;  // one EOS per document
    docs.push_back(std::move(doc));
  }
  return docs;
}

}  // namespace freqhead
