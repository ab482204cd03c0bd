#include "freqhead/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "freqhead/error.hpp"
#include "freqhead/numeric.hpp"

namespace freqhead {

Vector<double> to_double(const Vector<float>& v) { return v.cast<double>(); }
Matrix<double> to_double(const Matrix<float>& m) { return m.cast<double>(); }

namespace {

// Rows of the hidden-state matrix at which the model predicts, plus the
// hidden states themselves, for one document.
Matrix<float> predicted_hidden_rows(const ModelParams<float>& params, const Vocab& vocab,
                                    std::span<const TokenId> doc, std::uint64_t mask_seed,
                                    std::size_t index) {
  const EvalPositions ep = eval_positions(params.config, vocab, doc, mask_seed, index, true);
  Matrix<float> rows(static_cast<Eigen::Index>(ep.positions.size()), params.config.d_model);
  if (ep.positions.empty()) return rows;
  const Matrix<float> hidden = forward_hidden(params, std::span<const TokenId>(ep.inputs));
  for (std::size_t r = 0; r < ep.positions.size(); ++r) {
    rows.row(static_cast<Eigen::Index>(r)) = hidden.row(static_cast<Eigen::Index>(ep.positions[r]));
  }
  return rows;
}

}  // namespace

PredictionSummary avg_prediction_distribution(const ModelParams<float>& params,
                                              const Vocab& vocab,
                                              std::span<const Sequence> docs,
                                              const InterventionSpec& iv,
                                              std::uint64_t mask_seed) {
  const std::size_t v = static_cast<std::size_t>(params.config.vocab_size);
  std::vector<CompensatedSum> sums(v);
  PredictionSummary out;
  for (std::size_t i = 0; i < docs.size(); ++i) {
    const Matrix<float> rows = predicted_hidden_rows(params, vocab, docs[i], mask_seed, i);
    if (rows.rows() == 0) continue;
    const Matrix<float> probs = head_prob_rows(rows, params.head, iv, params.embedding);
    for (Eigen::Index r = 0; r < probs.rows(); ++r) {
      for (std::size_t c = 0; c < v; ++c) sums[c].add(probs(r, static_cast<Eigen::Index>(c)));
    }
    out.positions += static_cast<std::size_t>(rows.rows());
  }
  if (out.positions == 0) throw Error("avg_prediction_distribution: zero predicted positions");
  out.avg_probs.resize(v);
  for (std::size_t c = 0; c < v; ++c) {
    out.avg_probs[c] = sums[c].value() / static_cast<double>(out.positions);
  }
  return out;
}

PredictionSummary average_distributions(std::span<const std::vector<double>> dists) {
  if (dists.empty()) throw Error("avg_prediction_distribution: zero predicted positions");
  const std::size_t v = dists.front().size();
  std::vector<CompensatedSum> sums(v);
  for (const auto& d : dists) {
    if (d.size() != v) throw Error("average_distributions: length mismatch");
    for (std::size_t c = 0; c < v; ++c) sums[c].add(d[c]);
  }
  PredictionSummary out;
  out.positions = dists.size();
  out.avg_probs.resize(v);
  for (std::size_t c = 0; c < v; ++c) out.avg_probs[c] = sums[c].value() / static_cast<double>(dists.size());
  return out;
}

double kl_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw Error("kl_divergence: length mismatch");
  CompensatedSum s;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] == 0.0) continue;
    if (q[i] == 0.0) {
      throw Error("kl_divergence: q has zero mass on token " + std::to_string(i) +
                  " where p is positive");
    }
    s.add(p[i] * std::log(p[i] / q[i]));
  }
  return s.value();
}

std::vector<double> bias_embedding_products(const Vector<double>& b,
                                            const Matrix<double>& embedding) {
  if (embedding.cols() != b.size()) throw Error("bias_embedding_products: shape mismatch");
  const Vector<double> prod = embedding * b;
  return {prod.data(), prod.data() + prod.size()};
}

std::vector<double> average_ranks(std::span<const double> xs) {
  std::vector<std::size_t> order(xs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return xs[a] < xs[b]; });
  std::vector<double> ranks(xs.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && xs[order[j + 1]] == xs[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

double spearman(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw Error("spearman: length mismatch");
  if (xs.size() < 3) throw Error("spearman: need at least 3 points");
  const auto rx = average_ranks(xs);
  const auto ry = average_ranks(ys);
  const double n = static_cast<double>(xs.size());
  const double mean = (n + 1.0) / 2.0;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    const double a = rx[i] - mean, b = ry[i] - mean;
    sxy += a * b;
    sxx += a * a;
    syy += b * b;
  }
  if (sxx == 0.0 || syy == 0.0) throw Error("undefined correlation");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

Matrix<double> remove_direction(const Matrix<double>& embedding, const Vector<double>& b) {
  if (embedding.cols() != b.size()) throw Error("remove_direction: shape mismatch");
  const double norm = b.norm();
  if (!(norm > 0.0)) throw Error("remove_direction: bias vector is zero");
  const Vector<double> unit = b / norm;
  const Vector<double> coeff = embedding * unit;
  return embedding - coeff * unit.transpose();
}

double isotropy(const Matrix<double>& vectors) {
  if (vectors.rows() == 0) throw Error("isotropy: no vectors");
  // (1/n^2) sum_ij cos(w_i, w_j) = || mean of unit vectors ||^2
  RowVector<double> acc = RowVector<double>::Zero(vectors.cols());
  for (Eigen::Index i = 0; i < vectors.rows(); ++i) {
    const double norm = vectors.row(i).norm();
    if (!(norm > 0.0)) throw Error("isotropy: zero vector at index " + std::to_string(i));
    acc += vectors.row(i) / norm;
  }
  acc /= static_cast<double>(vectors.rows());
  return std::clamp(acc.squaredNorm(), -1.0, 1.0);
}

double mean_abs_cosine(const Matrix<double>& hidden, const Vector<double>& b) {
  if (hidden.rows() == 0) throw Error("hidden_bias_orthogonality: no hidden states");
  if (hidden.cols() != b.size()) throw Error("hidden_bias_orthogonality: shape mismatch");
  const double bn = b.norm();
  if (!(bn > 0.0)) throw Error("hidden_bias_orthogonality: bias vector is zero");
  CompensatedSum s;
  for (Eigen::Index r = 0; r < hidden.rows(); ++r) {
    const double hn = hidden.row(r).norm();
    if (hn == 0.0) continue;  // contributes |cos| = 0
    s.add(std::abs(hidden.row(r).dot(b)) / (hn * bn));
  }
  return s.value() / static_cast<double>(hidden.rows());
}

double hidden_bias_orthogonality(const ModelParams<float>& params, const Vocab& vocab,
                                 std::span<const Sequence> docs, const Vector<double>& b,
                                 std::uint64_t mask_seed) {
  if (docs.empty()) throw Error("hidden_bias_orthogonality: dataset is empty");
  std::vector<Matrix<double>> parts;
  Eigen::Index total = 0;
  for (std::size_t i = 0; i < docs.size(); ++i) {
    const Matrix<float> rows = predicted_hidden_rows(params, vocab, docs[i], mask_seed, i);
    if (rows.rows() == 0) continue;
    parts.push_back(head_pre_bias_rows(rows, params.head).cast<double>());
    total += rows.rows();
  }
  if (total == 0) throw Error("hidden_bias_orthogonality: dataset is empty");
  Matrix<double> all(total, params.config.d_model);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    all.middleRows(at, p.rows()) = p;
    at += p.rows();
  }
  return mean_abs_cosine(all, b);
}

KlReference kl_reference(const UnigramDistribution& unigram) {
  KlReference ref;
  ref.smoothed = unigram.zero_count() > 0;
  ref.probs = ref.smoothed ? unigram.smoothed(1.0).probs : unigram.probs;
  return ref;
}

std::vector<double> uniform_distribution(std::size_t n) {
  return std::vector<double>(n, 1.0 / static_cast<double>(n));
}

FrequencyCorrelation correlation_with_log_freq(std::span<const double> values,
                                               std::span<const double> freqs) {
  if (values.size() != freqs.size()) throw Error("correlation_with_log_freq: length mismatch");
  std::vector<double> xs, ys;
  FrequencyCorrelation out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (freqs[i] > 0.0) {
      xs.push_back(values[i]);
      ys.push_back(std::log(freqs[i]));
    } else {
      ++out.excluded_zero_freq;
    }
  }
  out.used = xs.size();
  out.rho = spearman(xs, ys);
  return out;
}

GeometryReport geometry_report(const ModelParams<float>& params, const Vocab& vocab,
                               std::span<const Sequence> docs,
                               std::span<const double> unigram_probs, std::uint64_t mask_seed) {
  GeometryReport g;
  const Vector<double> b = to_double(params.head.b_ln);
  const Matrix<double> emb = to_double(params.embedding);
  g.products = bias_embedding_products(b, emb);
  g.spearman_vs_logfreq = correlation_with_log_freq(g.products, unigram_probs);
  g.isotropy_before = isotropy(emb);
  g.isotropy_after = isotropy(remove_direction(emb, b));
  g.hidden_orthogonality = hidden_bias_orthogonality(params, vocab, docs, b, mask_seed);
  return g;
}

FinetuneShift finetune_shift_report(const ModelParams<float>& before,
                                    const ModelParams<float>& after,
                                    const UnigramDistribution& unigram_pretrain,
                                    const UnigramDistribution& unigram_finetune) {
  const auto v = static_cast<std::size_t>(before.config.vocab_size);
  if (static_cast<std::size_t>(after.config.vocab_size) != v || unigram_pretrain.probs.size() != v ||
      unigram_finetune.probs.size() != v) {
    throw Error("finetune_shift_report: vocabulary mismatch");
  }
  const auto pb = bias_embedding_products(to_double(before.head.b_ln), to_double(before.embedding));
  const auto pa = bias_embedding_products(to_double(after.head.b_ln), to_double(after.embedding));
  FinetuneShift s;
  s.rho_old_before = correlation_with_log_freq(pb, unigram_pretrain.probs).rho;
  s.rho_old_after = correlation_with_log_freq(pa, unigram_pretrain.probs).rho;
  s.rho_new_before = correlation_with_log_freq(pb, unigram_finetune.probs).rho;
  s.rho_new_after = correlation_with_log_freq(pa, unigram_finetune.probs).rho;
  return s;
}

}  // namespace freqhead
