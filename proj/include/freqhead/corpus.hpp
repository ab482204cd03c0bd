#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "freqhead/rng.hpp"

namespace freqhead {

using TokenId = std::int32_t;
using Sequence = std::vector<TokenId>;

/// Whitespace-split surface forms.
std::vector<std::string> split_words(std::string_view text);

/// Token inventory. Regular tokens come first, ranked by corpus count; the
/// four specials are appended at the end.
class Vocab {
 public:
  static constexpr std::string_view kUnk = "<unk>";
  static constexpr std::string_view kEos = "<eos>";
  static constexpr std::string_view kMask = "<mask>";
  static constexpr std::string_view kPad = "<pad>";

  Vocab() = default;
  /// `regular` must not contain duplicates or special strings.
  explicit Vocab(std::vector<std::string> regular);

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::string& token(TokenId id) const;
  TokenId id_of(std::string_view token) const;  // UNK for unknown

  TokenId unk() const { return unk_; }
  TokenId eos() const { return eos_; }
  TokenId mask() const { return mask_; }
  TokenId pad() const { return pad_; }
  bool is_special(TokenId id) const { return id >= unk_; }
  /// Number of non-special tokens; they occupy ids [0, regular_size()).
  std::size_t regular_size() const { return static_cast<std::size_t>(unk_); }

  Sequence encode(std::string_view text) const;
  /// Encodes and appends one EOS.
  Sequence encode_document(std::string_view text) const;
  /// Space-joined surface forms; EOS and PAD are dropped.
  std::string decode(std::span<const TokenId> ids) const;

  /// FNV-1a over the ordered token list; stored in checkpoints.
  std::uint64_t hash() const;

  void save(const std::filesystem::path& path) const;
  static Vocab load(const std::filesystem::path& path);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
  TokenId unk_ = 0, eos_ = 0, mask_ = 0, pad_ = 0;
};

Vocab build_vocab(std::span<const std::string> texts, std::size_t max_vocab);

struct UnigramDistribution {
  std::vector<double> probs;
  std::vector<std::uint64_t> counts;

  std::uint64_t total() const;
  /// Add-`alpha` smoothed copy; used when a KL target needs full support.
  UnigramDistribution smoothed(double alpha) const;
  std::size_t zero_count() const;

  /// CSV `token,id,count,prob`.
  void write_csv(const std::filesystem::path& path, const Vocab& vocab) const;
  /// Reads counts back from write_csv output; probabilities are recomputed.
  static UnigramDistribution read_csv(const std::filesystem::path& path);
};

UnigramDistribution count_unigram(std::span<const std::string> texts,
                                  const Vocab& vocab);
UnigramDistribution count_unigram(std::span<const Sequence> docs,
                                  std::size_t vocab_size);

struct MaskingRates {
  double select_rate = 0.15;
  double mask_frac = 0.8;
  double random_frac = 0.1;
};

struct Corruption {
  Sequence ids;
  std::vector<std::size_t> targets;
};

/// BERT-style corruption. PAD positions are never selected and random
/// replacements are drawn from the regular (non-special) tokens only.
Corruption mask_corrupt(std::span<const TokenId> ids, const Vocab& vocab,
                        Rng& rng, const MaskingRates& rates = {});

struct BinnedCurve {
  std::vector<double> bin_edges;   // num_bins + 1, strictly increasing
  std::vector<double> geo_mean;    // per bin; NaN when empty
  std::vector<double> geo_sd;      // per bin; NaN when empty
  std::vector<std::size_t> count;  // per bin
  std::vector<std::vector<std::size_t>> members;
  std::size_t dropped = 0;  // items with freq <= 0

  void write_csv(const std::filesystem::path& path) const;
};

/// Log-spaced bins over [min freq, max freq] of the positive entries.
BinnedCurve bin_curve(std::span<const double> freqs,
                      std::span<const double> probs, std::size_t num_bins);
/// Bins with caller-supplied edges; an item belongs to bin b when
/// edges[b] <= f < edges[b+1], the last bin being closed on the right.
/// Items outside [edges.front(), edges.back()] are dropped.
BinnedCurve bin_curve_with_edges(std::span<const double> freqs,
                                 std::span<const double> probs,
                                 std::vector<double> edges);

std::vector<std::string> read_lines(const std::filesystem::path& path);

}  // namespace freqhead
