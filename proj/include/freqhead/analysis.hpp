#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "freqhead/corpus.hpp"
#include "freqhead/head.hpp"
#include "freqhead/model.hpp"
#include "freqhead/tensor.hpp"

namespace freqhead {

/// Mean of the per-position prediction distributions over an evaluation set.
struct PredictionSummary {
  std::vector<double> avg_probs;
  std::size_t positions = 0;
};

/// Causal models: every position after the first of each sequence. Masked
/// models: MASK positions of a corruption drawn from (mask_seed, doc index).
PredictionSummary avg_prediction_distribution(const ModelParams<float>& params,
                                              const Vocab& vocab,
                                              std::span<const Sequence> docs,
                                              const InterventionSpec& iv,
                                              std::uint64_t mask_seed = 0);

/// Arithmetic mean of explicit distributions (rows). Compensated summation.
PredictionSummary average_distributions(std::span<const std::vector<double>> dists);

/// KL(p || q) in nats. Throws when q_i = 0 < p_i, naming index i.
double kl_divergence(std::span<const double> p, std::span<const double> q);

/// KL target built from corpus counts: add-one smoothed whenever some
/// vocabulary item has count 0, so every token has support.
struct KlReference {
  std::vector<double> probs;
  bool smoothed = false;
};
KlReference kl_reference(const UnigramDistribution& unigram);
std::vector<double> uniform_distribution(std::size_t n);

/// <b, w_i> for every row w_i of `embedding`.
std::vector<double> bias_embedding_products(const Vector<double>& b,
                                            const Matrix<double>& embedding);

/// Average-rank Spearman correlation. Throws "undefined correlation" when
/// either side is constant.
double spearman(std::span<const double> xs, std::span<const double> ys);

/// Average ranks (1-based), ties share the mean of their positions.
std::vector<double> average_ranks(std::span<const double> xs);

/// Projects every row of `embedding` onto the orthogonal complement of b.
Matrix<double> remove_direction(const Matrix<double>& embedding, const Vector<double>& b);

/// Mean pairwise cosine over all ordered pairs of rows, self-pairs included.
double isotropy(const Matrix<double>& vectors);

/// Mean |cos(h, b)| over evaluation positions, h being the head's hidden
/// state right before b_LN is added.
double hidden_bias_orthogonality(const ModelParams<float>& params, const Vocab& vocab,
                                 std::span<const Sequence> docs, const Vector<double>& b,
                                 std::uint64_t mask_seed = 0);
/// Same statistic over explicit hidden states (rows).
double mean_abs_cosine(const Matrix<double>& hidden, const Vector<double>& b);

/// Spearman against log frequency, restricted to tokens with freq > 0.
struct FrequencyCorrelation {
  double rho = 0.0;
  std::size_t used = 0;
  std::size_t excluded_zero_freq = 0;
};

FrequencyCorrelation correlation_with_log_freq(std::span<const double> values,
                                               std::span<const double> freqs);

struct GeometryReport {
  std::vector<double> products;
  FrequencyCorrelation spearman_vs_logfreq;
  double isotropy_before = 0.0;
  double isotropy_after = 0.0;
  double hidden_orthogonality = 0.0;
};

GeometryReport geometry_report(const ModelParams<float>& params, const Vocab& vocab,
                               std::span<const Sequence> docs,
                               std::span<const double> unigram_probs,
                               std::uint64_t mask_seed = 0);

struct FinetuneShift {
  double rho_old_before = 0.0;
  double rho_old_after = 0.0;
  double rho_new_before = 0.0;
  double rho_new_after = 0.0;
};

FinetuneShift finetune_shift_report(const ModelParams<float>& before,
                                    const ModelParams<float>& after,
                                    const UnigramDistribution& unigram_pretrain,
                                    const UnigramDistribution& unigram_finetune);

Vector<double> to_double(const Vector<float>& v);
Matrix<double> to_double(const Matrix<float>& m);

}  // namespace freqhead
