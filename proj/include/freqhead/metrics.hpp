#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "freqhead/corpus.hpp"
#include "freqhead/generation.hpp"
#include "freqhead/model.hpp"
#include "json.hpp"

namespace freqhead {

/// Unique n-grams over total n-gram occurrences, pooled across all texts.
double distinct_n(std::span<const Sequence> texts, int n);
/// Same over whitespace-split strings.
double distinct_n(std::span<const std::vector<std::string>> texts, int n);

/// Mean of distinct_n for n = 1..4.
double ngram_diversity(std::span<const Sequence> texts);

/// exp(mean negative log-likelihood) over the causal evaluation positions.
/// +inf when some observed token gets zero probability.
double perplexity(const ModelParams<float>& params, const Vocab& vocab,
                  std::span<const Sequence> docs, const InterventionSpec& iv);

/// 1 - JSD(P, Q) / ln 2 between two histograms of equal length (counts or
/// probabilities; each is normalized).
double histogram_quality(std::span<const double> gen_hist, std::span<const double> ref_hist);

/// Score from explicit cluster assignments: first `n_gen` entries belong to
/// the generated corpus, the rest to the reference corpus.
double cluster_quality(std::span<const std::size_t> assignments, std::size_t n_gen,
                       std::size_t k_clusters);

/// Mean last-layer hidden state per document (truncated to max_seq_len).
Matrix<double> embed_documents(const ModelParams<float>& params, std::span<const Sequence> docs);

struct KMeansResult {
  std::vector<std::size_t> assignments;
  Matrix<double> centroids;
  int iterations = 0;
};

/// Lloyd's algorithm with k-means++ seeding from `seed`; stops on a fixed
/// point or after max_iter rounds.
KMeansResult kmeans(const Matrix<double>& points, std::size_t k, std::uint64_t seed,
                    int max_iter = 100);

/// Desk-scale distributional quality: documents embedded by the model,
/// jointly clustered, and the two cluster histograms compared by JSD.
double embdiv_quality(std::span<const Sequence> gen_texts, std::span<const Sequence> ref_texts,
                      const ModelParams<float>& params, std::size_t k_clusters, std::uint64_t seed);

/// 1-based frequency rank per token (most frequent = 1, ties averaged).
std::vector<double> frequency_ranks(const UnigramDistribution& unigram);
/// Mean rank over all tokens of the given texts.
double mean_frequency_rank(std::span<const Sequence> texts, std::span<const double> ranks);

struct EvalReport {
  double d1 = 0, d2 = 0, d3 = 0, d4 = 0;
  double d_mean = 0;
  double ppl = 0;
  double embdiv = 0;
  double lambda_ln = 1.0;
  Strategy strategy = Strategy::top_p;
  std::size_t documents = 0;
  double mean_freq_rank = 0;  // mean corpus-frequency rank of generated tokens
};

void to_json(nlohmann::json& j, const EvalReport& r);

}  // namespace freqhead
