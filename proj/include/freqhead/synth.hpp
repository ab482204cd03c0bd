#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace freqhead {

/// Synthetic word-level language: a hidden Markov chain over word classes,
/// each class emitting its words with Zipfian weights. Word frequency is
/// therefore a context-independent factor of every next-word distribution.
struct SynthConfig {
  std::size_t num_words = 1996;
  std::size_t num_classes = 32;
  std::size_t successors = 4;       // nonzero transitions per class
  std::size_t target_tokens = 1'000'000;
  double zipf_exponent = 1.1;
  std::size_t min_doc_len = 20;
  std::size_t max_doc_len = 60;
  /// In [0, 1): rotates each class's Zipf ranking by this fraction of the
  /// class size. Shares syntax and words with the unshifted language while
  /// moving frequency mass onto different words.
  double rank_shift = 0.0;
  std::uint64_t seed = 1;

  void validate() const;
};

/// Surface form for word index `i`; unique per index.
std::string synth_word(std::size_t i);

/// Documents (one per line when written out). Structure (classes,
/// transitions, word-to-class map) depends on `structure_seed` only, so a
/// shifted corpus can share grammar with the original.
std::vector<std::string> synth_corpus(const SynthConfig& cfg, std::uint64_t structure_seed);

}  // namespace freqhead
