#include "freqhead/generation.hpp"

#include <algorithm>
#include <cstdlib>
#include <numeric>
#include <thread>

#include "freqhead/error.hpp"
#include "freqhead/head.hpp"

namespace freqhead {

std::string_view to_string(Strategy s) {
  switch (s) {
    case Strategy::vanilla: return "vanilla";
    case Strategy::top_k: return "top_k";
    case Strategy::top_p: return "top_p";
  }
  return "?";
}

Strategy strategy_from_string(std::string_view s) {
  if (s == "vanilla") return Strategy::vanilla;
  if (s == "top_k") return Strategy::top_k;
  if (s == "top_p") return Strategy::top_p;
  throw Error("unknown sampling strategy: " + std::string(s));
}

void GenerationConfig::validate() const {
  if (k < 1) throw Error("generation: k must be >= 1");
  if (!(p > 0.0 && p <= 1.0)) throw Error("generation: p must lie in (0, 1]");
  if (prompt_len < 1) throw Error("generation: prompt_len must be >= 1");
  if (max_len <= prompt_len) throw Error("generation: max_len must exceed prompt_len");
}

void to_json(nlohmann::json& j, const GenerationConfig& c) {
  j = nlohmann::json{{"strategy", std::string(to_string(c.strategy))},
                     {"k", c.k},
                     {"p", c.p},
                     {"lambda_ln", c.lambda_ln},
                     {"prompt_len", c.prompt_len},
                     {"max_len", c.max_len},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, GenerationConfig& c) {
  c = GenerationConfig{};
  if (j.contains("strategy")) c.strategy = strategy_from_string(j.at("strategy").get<std::string>());
  if (j.contains("k")) c.k = j.at("k").get<int>();
  if (j.contains("p")) c.p = j.at("p").get<double>();
  if (j.contains("lambda_ln")) c.lambda_ln = j.at("lambda_ln").get<double>();
  if (j.contains("prompt_len")) c.prompt_len = j.at("prompt_len").get<int>();
  if (j.contains("max_len")) c.max_len = j.at("max_len").get<int>();
  if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
}

std::vector<double> filter_distribution(std::span<const double> dist, Strategy strategy, int k,
                                        double p) {
  std::vector<double> out(dist.begin(), dist.end());
  if (strategy == Strategy::vanilla || dist.empty()) return out;
  if (strategy == Strategy::top_k && (k < 1)) throw Error("filter_distribution: k must be >= 1");
  if (strategy == Strategy::top_p && !(p > 0.0 && p <= 1.0)) {
    throw Error("filter_distribution: p must lie in (0, 1]");
  }
  if (strategy == Strategy::top_k && static_cast<std::size_t>(k) >= dist.size()) return out;
  if (strategy == Strategy::top_p && p >= 1.0) return out;

  std::vector<std::size_t> order(dist.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dist[a] > dist[b]; });

  std::size_t keep = order.size();
  if (strategy == Strategy::top_k) {
    keep = static_cast<std::size_t>(k);
  } else {
    double cum = 0.0;
    for (std::size_t i = 0; i < order.size(); ++i) {
      cum += dist[order[i]];
      // Small slack so round-off cannot push the boundary one token late.
      if (cum + 1e-12 >= p) {
        keep = i + 1;
        break;
      }
    }
  }
  if (keep >= order.size()) return out;

  double mass = 0.0;
  for (std::size_t i = 0; i < keep; ++i) mass += dist[order[i]];
  std::fill(out.begin(), out.end(), 0.0);
  for (std::size_t i = 0; i < keep; ++i) out[order[i]] = dist[order[i]] / mass;
  return out;
}

TokenId sample_next(std::span<const double> dist, Rng& rng) {
  if (dist.empty()) throw Error("sample_next: empty distribution");
  double total = 0.0;
  for (double v : dist) total += v;
  const double u = rng.uniform() * total;
  double cum = 0.0;
  std::size_t last_positive = 0;
  for (std::size_t i = 0; i < dist.size(); ++i) {
    if (dist[i] <= 0.0) continue;
    last_positive = i;
    cum += dist[i];
    if (u < cum) return static_cast<TokenId>(i);
  }
  return static_cast<TokenId>(last_positive);
}

GenerationResult generate(const ModelParams<float>& params, const Vocab& vocab,
                          std::span<const TokenId> reference, const GenerationConfig& cfg,
                          std::uint64_t stream) {
  cfg.validate();
  if (params.config.variant != Variant::causal) {
    throw Error("generate: masked-variant models cannot generate");
  }
  const auto prompt_len = static_cast<std::size_t>(cfg.prompt_len);
  if (reference.size() < prompt_len) throw Error("generate: reference shorter than prompt_len");
  const std::size_t cap =
      std::min(static_cast<std::size_t>(cfg.max_len), static_cast<std::size_t>(params.config.max_seq_len));
  if (cap <= prompt_len) throw Error("generate: max_seq_len leaves no room after the prompt");

  GenerationResult res;
  res.prompt_len = prompt_len;
  res.tokens.assign(reference.begin(), reference.begin() + static_cast<std::ptrdiff_t>(prompt_len));
  Rng rng = Rng::derive(cfg.seed, stream);
  const InterventionSpec iv = InterventionSpec::with_lambda(cfg.lambda_ln).clamped();

  DecodeState<float> state(params);
  Vector<float> hidden;
  for (TokenId id : res.tokens) hidden = state.step(id);
  std::vector<double> dist(vocab.size());
  while (res.tokens.size() < cap) {
    const Matrix<float> probs =
        head_prob_rows<float>(hidden.transpose(), params.head, iv, params.embedding);
    for (std::size_t i = 0; i < dist.size(); ++i) dist[i] = probs(0, static_cast<Eigen::Index>(i));
    const auto filtered = filter_distribution(dist, cfg.strategy, cfg.k, cfg.p);
    const TokenId next = sample_next(filtered, rng);
    if (next == vocab.eos()) {
      res.stopped_at_eos = true;
      break;
    }
    res.tokens.push_back(next);
    if (res.tokens.size() < cap) hidden = state.step(next);
  }
  return res;
}

std::vector<GenerationResult> generate_all(const ModelParams<float>& params, const Vocab& vocab,
                                           std::span<const Sequence> references,
                                           const GenerationConfig& cfg, unsigned threads) {
  std::vector<GenerationResult> out(references.size());
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(references.size())));
  if (threads <= 1) {
    for (std::size_t i = 0; i < references.size(); ++i) {
      out[i] = generate(params, vocab, references[i], cfg, i);
    }
    return out;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (unsigned w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < references.size(); i += threads) {
          out[i] = generate(params, vocab, references[i], cfg, i);
        }
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

unsigned thread_count_from_env() {
  const char* v = std::getenv("FREQHEAD_THREADS");
  if (v == nullptr) return 1;
  const long n = std::strtol(v, nullptr, 10);
  return n >= 1 ? static_cast<unsigned>(n) : 1u;
}

}  // namespace freqhead
