#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "freqhead/corpus.hpp"
#include "freqhead/model.hpp"
#include "freqhead/rng.hpp"
#include "json.hpp"

namespace freqhead {

enum class Strategy { vanilla, top_k, top_p };

std::string_view to_string(Strategy s);
Strategy strategy_from_string(std::string_view s);

struct GenerationConfig {
  Strategy strategy = Strategy::top_p;
  int k = 50;
  double p = 0.9;
  double lambda_ln = 1.0;
  int prompt_len = 10;
  int max_len = 1024;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const GenerationConfig& c);
void from_json(const nlohmann::json& j, GenerationConfig& c);

/// Truncates a distribution for sampling. top_k keeps the k largest entries,
/// top_p the shortest descending prefix reaching mass p (boundary token
/// included); ties are ordered by ascending token id. Kept entries are
/// renormalized. When everything is kept the input is returned unchanged,
/// and k larger than the vocabulary falls back to vanilla.
std::vector<double> filter_distribution(std::span<const double> dist, Strategy strategy, int k,
                                        double p);

/// Inverse-CDF draw.
TokenId sample_next(std::span<const double> dist, Rng& rng);

struct GenerationResult {
  Sequence tokens;  // prompt followed by generated tokens, EOS excluded
  std::size_t prompt_len = 0;
  bool stopped_at_eos = false;

  std::span<const TokenId> continuation() const {
    return std::span<const TokenId>(tokens).subspan(prompt_len);
  }
};

/// Samples a continuation of the first prompt_len reference tokens until EOS
/// or min(max_len, max_seq_len) total tokens. `stream` selects the rng
/// stream derived from cfg.seed.
GenerationResult generate(const ModelParams<float>& params, const Vocab& vocab,
                          std::span<const TokenId> reference, const GenerationConfig& cfg,
                          std::uint64_t stream = 0);

/// One generation per reference, reference i using stream i. Runs on
/// `threads` workers; the output does not depend on the thread count.
std::vector<GenerationResult> generate_all(const ModelParams<float>& params, const Vocab& vocab,
                                           std::span<const Sequence> references,
                                           const GenerationConfig& cfg, unsigned threads = 1);

/// Worker count from FREQHEAD_THREADS (default 1).
unsigned thread_count_from_env();

}  // namespace freqhead
