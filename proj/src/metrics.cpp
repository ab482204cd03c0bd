#include "freqhead/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numbers>
#include <unordered_map>
#include <unordered_set>

#include "freqhead/analysis.hpp"
#include "freqhead/error.hpp"
#include "freqhead/numeric.hpp"

namespace freqhead {

double distinct_n(std::span<const Sequence> texts, int n) {
  if (n < 1) throw Error("distinct_n: n must be >= 1");
  const auto un = static_cast<std::size_t>(n);
  std::unordered_set<std::string> unique;
  std::size_t total = 0;
  std::string key(un * sizeof(TokenId), '\0');
  for (const auto& t : texts) {
    if (t.size() < un) continue;
    for (std::size_t i = 0; i + un <= t.size(); ++i) {
      std::memcpy(key.data(), t.data() + i, un * sizeof(TokenId));
      unique.insert(key);
      ++total;
    }
  }
  if (total == 0) throw Error("distinct_n: no " + std::to_string(n) + "-grams in texts");
  return static_cast<double>(unique.size()) / static_cast<double>(total);
}

double distinct_n(std::span<const std::vector<std::string>> texts, int n) {
  std::unordered_map<std::string, TokenId> ids;
  std::vector<Sequence> seqs;
  seqs.reserve(texts.size());
  for (const auto& t : texts) {
    Sequence s;
    for (const auto& w : t) {
      s.push_back(ids.emplace(w, static_cast<TokenId>(ids.size())).first->second);
    }
    seqs.push_back(std::move(s));
  }
  return distinct_n(std::span<const Sequence>(seqs), n);
}

double ngram_diversity(std::span<const Sequence> texts) {
  double s = 0.0;
  for (int n = 1; n <= 4; ++n) s += distinct_n(texts, n);
  return s / 4.0;
}

double perplexity(const ModelParams<float>& params, const Vocab& vocab,
                  std::span<const Sequence> docs, const InterventionSpec& iv) {
  if (params.config.variant != Variant::causal) throw Error("perplexity: requires a causal model");
  const NllSummary s = evaluate_nll(params, vocab, docs, iv);
  if (s.positions == 0) throw Error("perplexity: no predicted positions");
  if (!std::isfinite(s.total_nll)) return std::numeric_limits<double>::infinity();
  return std::exp(s.mean());
}

namespace {

std::vector<double> normalized(std::span<const double> h) {
  double total = 0.0;
  for (double v : h) {
    if (v < 0.0) throw Error("histogram_quality: negative histogram entry");
    total += v;
  }
  if (!(total > 0.0)) throw Error("histogram_quality: empty histogram");
  std::vector<double> out(h.size());
  for (std::size_t i = 0; i < h.size(); ++i) out[i] = h[i] / total;
  return out;
}

}  // namespace

double histogram_quality(std::span<const double> gen_hist, std::span<const double> ref_hist) {
  if (gen_hist.size() != ref_hist.size()) throw Error("histogram_quality: length mismatch");
  const auto p = normalized(gen_hist);
  const auto q = normalized(ref_hist);
  std::vector<double> m(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) m[i] = 0.5 * (p[i] + q[i]);
  const double jsd = 0.5 * kl_divergence(p, m) + 0.5 * kl_divergence(q, m);
  return std::clamp(1.0 - jsd / std::numbers::ln2, 0.0, 1.0);
}

double cluster_quality(std::span<const std::size_t> assignments, std::size_t n_gen,
                       std::size_t k_clusters) {
  if (n_gen == 0 || n_gen >= assignments.size()) {
    throw Error("cluster_quality: both corpora must be non-empty");
  }
  std::vector<double> gen(k_clusters, 0.0), ref(k_clusters, 0.0);
  for (std::size_t i = 0; i < assignments.size(); ++i) {
    if (assignments[i] >= k_clusters) throw Error("cluster_quality: assignment out of range");
    (i < n_gen ? gen : ref)[assignments[i]] += 1.0;
  }
  return histogram_quality(gen, ref);
}

Matrix<double> embed_documents(const ModelParams<float>& params, std::span<const Sequence> docs) {
  Matrix<double> out(static_cast<Eigen::Index>(docs.size()), params.config.d_model);
  for (std::size_t i = 0; i < docs.size(); ++i) {
    const std::size_t n =
        std::min(docs[i].size(), static_cast<std::size_t>(params.config.max_seq_len));
    if (n == 0) throw Error("embed_documents: empty document at index " + std::to_string(i));
    const Matrix<float> h =
        forward_hidden(params, std::span<const TokenId>(docs[i].data(), n));
    out.row(static_cast<Eigen::Index>(i)) = h.cast<double>().colwise().mean();
  }
  return out;
}

KMeansResult kmeans(const Matrix<double>& points, std::size_t k, std::uint64_t seed, int max_iter) {
  const auto n = static_cast<std::size_t>(points.rows());
  if (k < 1) throw Error("kmeans: k must be >= 1");
  if (k > n) throw Error("kmeans: k_clusters (" + std::to_string(k) + ") exceeds number of points (" +
                         std::to_string(n) + ")");
  Rng rng(seed);
  KMeansResult res;
  res.centroids.resize(static_cast<Eigen::Index>(k), points.cols());

  // k-means++ seeding
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  std::vector<bool> chosen(n, false);
  std::size_t first = static_cast<std::size_t>(rng.below(n));
  res.centroids.row(0) = points.row(static_cast<Eigen::Index>(first));
  chosen[first] = true;
  for (std::size_t c = 1; c < k; ++c) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double dist =
          (points.row(static_cast<Eigen::Index>(i)) - res.centroids.row(static_cast<Eigen::Index>(c - 1)))
              .squaredNorm();
      d2[i] = std::min(d2[i], dist);
      total += d2[i];
    }
    std::size_t pick = n;
    if (total > 0.0) {
      const double u = rng.uniform() * total;
      double cum = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        cum += d2[i];
        if (u < cum && d2[i] > 0.0) {
          pick = i;
          break;
        }
      }
    }
    if (pick == n) {
      // Duplicate points: fall back to the first unchosen index.
      for (std::size_t i = 0; i < n; ++i) {
        if (!chosen[i]) {
          pick = i;
          break;
        }
      }
    }
    chosen[pick] = true;
    res.centroids.row(static_cast<Eigen::Index>(c)) = points.row(static_cast<Eigen::Index>(pick));
  }

  res.assignments.assign(n, k);
  for (res.iterations = 0; res.iterations < max_iter; ++res.iterations) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) {
        const double dist = (points.row(static_cast<Eigen::Index>(i)) -
                             res.centroids.row(static_cast<Eigen::Index>(c)))
                                .squaredNorm();
        if (dist < best_d) {
          best_d = dist;
          best = c;
        }
      }
      if (res.assignments[i] != best) {
        res.assignments[i] = best;
        changed = true;
      }
    }
    if (!changed) break;
    Matrix<double> sums = Matrix<double>::Zero(static_cast<Eigen::Index>(k), points.cols());
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      sums.row(static_cast<Eigen::Index>(res.assignments[i])) += points.row(static_cast<Eigen::Index>(i));
      ++counts[res.assignments[i]];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] > 0) {
        res.centroids.row(static_cast<Eigen::Index>(c)) =
            sums.row(static_cast<Eigen::Index>(c)) / static_cast<double>(counts[c]);
      }
    }
  }
  return res;
}

double embdiv_quality(std::span<const Sequence> gen_texts, std::span<const Sequence> ref_texts,
                      const ModelParams<float>& params, std::size_t k_clusters, std::uint64_t seed) {
  if (gen_texts.empty() || ref_texts.empty()) throw Error("embdiv_quality: both corpora must be non-empty");
  if (k_clusters < 2) throw Error("embdiv_quality: k_clusters must be >= 2");
  const std::size_t total = gen_texts.size() + ref_texts.size();
  if (k_clusters > total) {
    throw Error("embdiv_quality: k_clusters (" + std::to_string(k_clusters) +
                ") exceeds total documents (" + std::to_string(total) + ")");
  }
  const Matrix<double> g = embed_documents(params, gen_texts);
  const Matrix<double> r = embed_documents(params, ref_texts);
  Matrix<double> joint(g.rows() + r.rows(), g.cols());
  joint << g, r;
  const KMeansResult km = kmeans(joint, k_clusters, seed);
  return cluster_quality(km.assignments, gen_texts.size(), k_clusters);
}

std::vector<double> frequency_ranks(const UnigramDistribution& unigram) {
  std::vector<double> neg(unigram.counts.size());
  for (std::size_t i = 0; i < neg.size(); ++i) neg[i] = -static_cast<double>(unigram.counts[i]);
  return average_ranks(neg);
}

double mean_frequency_rank(std::span<const Sequence> texts, std::span<const double> ranks) {
  CompensatedSum s;
  std::size_t n = 0;
  for (const auto& t : texts) {
    for (TokenId id : t) {
      if (id < 0 || static_cast<std::size_t>(id) >= ranks.size()) {
        throw Error("mean_frequency_rank: id out of range");
      }
      s.add(ranks[static_cast<std::size_t>(id)]);
      ++n;
    }
  }
  if (n == 0) throw Error("mean_frequency_rank: no tokens");
  return s.value() / static_cast<double>(n);
}

void to_json(nlohmann::json& j, const EvalReport& r) {
  j = nlohmann::ordered_json{{"lambda_ln", r.lambda_ln},
                             {"strategy", std::string(to_string(r.strategy))},
                             {"d1", r.d1},
                             {"d2", r.d2},
                             {"d3", r.d3},
                             {"d4", r.d4},
                             {"d_mean", r.d_mean},
                             {"embdiv", r.embdiv},
                             {"ppl", std::isfinite(r.ppl) ? nlohmann::json(r.ppl) : nlohmann::json("inf")},
                             {"documents", r.documents},
                             {"mean_freq_rank", r.mean_freq_rank}};
}

}  // namespace freqhead
