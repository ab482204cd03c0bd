#include "freqhead/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>

#include "json.hpp"

#include "freqhead/error.hpp"
#include "freqhead/numeric.hpp"

namespace freqhead {

namespace {

bool is_space(char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' ||
         c == '\v';
}

bool is_special_string(std::string_view s) {
  return s == Vocab::kUnk || s == Vocab::kEos || s == Vocab::kMask ||
         s == Vocab::kPad;
}

}  // namespace

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    std::size_t j = i;
    while (j < text.size() && !is_space(text[j])) ++j;
    if (j > i) out.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

Vocab::Vocab(std::vector<std::string> regular) : tokens_(std::move(regular)) {
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (is_special_string(tokens_[i])) {
      throw Error("vocab: special string used as regular token: " + tokens_[i]);
    }
    if (!index_.emplace(tokens_[i], static_cast<TokenId>(i)).second) {
      throw Error("vocab: duplicate token: " + tokens_[i]);
    }
  }
  const auto add = [&](std::string_view s) {
    const auto id = static_cast<TokenId>(tokens_.size());
    tokens_.emplace_back(s);
    index_.emplace(std::string(s), id);
    return id;
  };
  unk_ = add(kUnk);
  eos_ = add(kEos);
  mask_ = add(kMask);
  pad_ = add(kPad);
}

const std::string& Vocab::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw Error("vocab: id out of range: " + std::to_string(id));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

TokenId Vocab::id_of(std::string_view token) const {
  const auto it = index_.find(std::string(token));
  return it == index_.end() ? unk_ : it->second;
}

Sequence Vocab::encode(std::string_view text) const {
  Sequence out;
  for (const auto& w : split_words(text)) out.push_back(id_of(w));
  return out;
}

Sequence Vocab::encode_document(std::string_view text) const {
  Sequence out = encode(text);
  out.push_back(eos_);
  return out;
}

std::string Vocab::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId id : ids) {
    if (id == eos_ || id == pad_) continue;
    if (!out.empty()) out += ' ';
    out += token(id);
  }
  return out;
}

std::uint64_t Vocab::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& t : tokens_) {
    h = fnv1a64(t.data(), t.size(), h);
    const char sep = '\n';
    h = fnv1a64(&sep, 1, h);
  }
  return h;
}

void Vocab::save(const std::filesystem::path& path) const {
  nlohmann::ordered_json j;
  j["tokens"] = tokens_;
  j["special_ids"] = {{"unk", unk_}, {"eos", eos_}, {"mask", mask_}, {"pad", pad_}};
  j["hash"] = hash();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write vocab file: " + path.string());
  os << j.dump(1) << '\n';
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open vocab file: " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw Error("malformed vocab file " + path.string() + ": " + e.what());
  }
  auto tokens = j.at("tokens").get<std::vector<std::string>>();
  if (tokens.size() < 4) throw Error("vocab file has fewer than 4 tokens");
  tokens.resize(tokens.size() - 4);
  Vocab v(std::move(tokens));
  const auto& sp = j.at("special_ids");
  if (sp.at("unk").get<TokenId>() != v.unk_ || sp.at("eos").get<TokenId>() != v.eos_ ||
      sp.at("mask").get<TokenId>() != v.mask_ || sp.at("pad").get<TokenId>() != v.pad_) {
    throw Error("vocab file special ids are inconsistent: " + path.string());
  }
  return v;
}

Vocab build_vocab(std::span<const std::string> texts, std::size_t max_vocab) {
  if (max_vocab < 5) throw Error("max_vocab must be at least 5");
  std::map<std::string, std::uint64_t> counts;
  bool any = false;
  for (const auto& t : texts) {
    for (auto& w : split_words(t)) {
      any = true;
      if (!is_special_string(w)) ++counts[std::move(w)];
    }
  }
  if (!any) throw Error("empty corpus");
  std::vector<std::pair<std::string, std::uint64_t>> ranked(counts.begin(),
                                                            counts.end());
  // std::map iteration is already lexicographic, so a stable sort on count
  // keeps the tie-break.
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  const std::size_t keep = std::min(ranked.size(), max_vocab - 4);
  std::vector<std::string> regular;
  regular.reserve(keep);
  for (std::size_t i = 0; i < keep; ++i) regular.push_back(std::move(ranked[i].first));
  return Vocab(std::move(regular));
}

std::uint64_t UnigramDistribution::total() const {
  std::uint64_t t = 0;
  for (auto c : counts) t += c;
  return t;
}

std::size_t UnigramDistribution::zero_count() const {
  return static_cast<std::size_t>(std::count(counts.begin(), counts.end(), 0u));
}

UnigramDistribution UnigramDistribution::smoothed(double alpha) const {
  UnigramDistribution out;
  out.counts = counts;
  out.probs.resize(counts.size());
  const double denom =
      static_cast<double>(total()) + alpha * static_cast<double>(counts.size());
  for (std::size_t i = 0; i < counts.size(); ++i) {
    out.probs[i] = (static_cast<double>(counts[i]) + alpha) / denom;
  }
  return out;
}

void UnigramDistribution::write_csv(const std::filesystem::path& path,
                                    const Vocab& vocab) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path.string());
  os.precision(17);
  os << "token,id,count,prob\n";
  for (std::size_t i = 0; i < counts.size(); ++i) {
    const auto& tok = vocab.token(static_cast<TokenId>(i));
    // Surface forms may contain commas or quotes.
    std::string field = tok;
    if (field.find_first_of(",\"") != std::string::npos) {
      std::string q = "\"";
      for (char c : field) {
        if (c == '"') q += '"';
        q += c;
      }
      field = q + "\"";
    }
    os << field << ',' << i << ',' << counts[i] << ',' << probs[i] << '\n';
  }
}

UnigramDistribution UnigramDistribution::read_csv(const std::filesystem::path& path) {
  const auto lines = read_lines(path);
  if (lines.empty() || lines.front() != "token,id,count,prob") {
    throw Error("unigram file has no header: " + path.string());
  }
  UnigramDistribution u;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const std::string& line = lines[i];
    if (line.empty()) continue;
    // The token field may be quoted, so the numeric fields are read from the right.
    const auto c3 = line.rfind(',');
    const auto c2 = c3 == std::string::npos ? c3 : line.rfind(',', c3 - 1);
    const auto c1 = c2 == std::string::npos || c2 == 0 ? std::string::npos : line.rfind(',', c2 - 1);
    if (c1 == std::string::npos) {
      throw Error("malformed unigram line " + std::to_string(i + 1) + " in " + path.string());
    }
    const auto id = std::stoull(line.substr(c1 + 1, c2 - c1 - 1));
    if (id != u.counts.size()) {
      throw Error("unigram ids out of order at line " + std::to_string(i + 1) + " in " + path.string());
    }
    u.counts.push_back(std::stoull(line.substr(c2 + 1, c3 - c2 - 1)));
  }
  const std::uint64_t total = u.total();
  if (total == 0) throw Error("unigram file has zero total count: " + path.string());
  u.probs.resize(u.counts.size());
  for (std::size_t i = 0; i < u.counts.size(); ++i) {
    u.probs[i] = static_cast<double>(u.counts[i]) / static_cast<double>(total);
  }
  return u;
}

UnigramDistribution count_unigram(std::span<const Sequence> docs,
                                  std::size_t vocab_size) {
  UnigramDistribution u;
  u.counts.assign(vocab_size, 0);
  for (const auto& d : docs) {
    for (TokenId id : d) {
      if (id < 0 || static_cast<std::size_t>(id) >= vocab_size) {
        throw Error("count_unigram: id out of range");
      }
      ++u.counts[static_cast<std::size_t>(id)];
    }
  }
  const auto total = u.total();
  if (total == 0) throw Error("count_unigram: zero total tokens");
  u.probs.resize(vocab_size);
  for (std::size_t i = 0; i < vocab_size; ++i) {
    u.probs[i] = static_cast<double>(u.counts[i]) / static_cast<double>(total);
  }
  return u;
}

UnigramDistribution count_unigram(std::span<const std::string> texts,
                                  const Vocab& vocab) {
  std::vector<Sequence> docs;
  docs.reserve(texts.size());
  for (const auto& t : texts) docs.push_back(vocab.encode_document(t));
  return count_unigram(docs, vocab.size());
}

Corruption mask_corrupt(std::span<const TokenId> ids, const Vocab& vocab,
                        Rng& rng, const MaskingRates& rates) {
  const auto in_unit = [](double r) { return r >= 0.0 && r <= 1.0; };
  if (!in_unit(rates.select_rate) || !in_unit(rates.mask_frac) ||
      !in_unit(rates.random_frac) || rates.mask_frac + rates.random_frac > 1.0 + 1e-12) {
    throw Error("mask_corrupt: rates must lie in [0,1] with mask_frac + random_frac <= 1");
  }
  Corruption out;
  out.ids.assign(ids.begin(), ids.end());
  if (vocab.regular_size() == 0 && rates.random_frac > 0.0) {
    throw Error("mask_corrupt: no regular tokens to draw replacements from");
  }
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] == vocab.pad()) continue;
    if (rates.select_rate <= 0.0 || rng.uniform() >= rates.select_rate) continue;
    out.targets.push_back(i);
    const double r = rng.uniform();
    if (r < rates.mask_frac) {
      out.ids[i] = vocab.mask();
    } else if (r < rates.mask_frac + rates.random_frac) {
      out.ids[i] = static_cast<TokenId>(rng.below(vocab.regular_size()));
    }
  }
  return out;
}

namespace {

void fill_bin_stats(BinnedCurve& c, std::span<const double> probs) {
  const std::size_t nb = c.members.size();
  c.count.assign(nb, 0);
  c.geo_mean.assign(nb, std::numeric_limits<double>::quiet_NaN());
  c.geo_sd.assign(nb, std::numeric_limits<double>::quiet_NaN());
  for (std::size_t b = 0; b < nb; ++b) {
    const auto& m = c.members[b];
    c.count[b] = m.size();
    if (m.empty()) continue;
    CompensatedSum s;
    for (auto i : m) {
      if (!(probs[i] > 0.0)) throw Error("bin_curve: probabilities must be positive");
      s.add(std::log(probs[i]));
    }
    const double mu = s.value() / static_cast<double>(m.size());
    CompensatedSum v;
    for (auto i : m) {
      const double d = std::log(probs[i]) - mu;
      v.add(d * d);
    }
    c.geo_mean[b] = std::exp(mu);
    c.geo_sd[b] = std::exp(std::sqrt(v.value() / static_cast<double>(m.size())));
  }
}

}  // namespace

BinnedCurve bin_curve_with_edges(std::span<const double> freqs,
                                 std::span<const double> probs,
                                 std::vector<double> edges) {
  if (freqs.size() != probs.size()) throw Error("bin_curve: length mismatch");
  if (edges.size() < 2) throw Error("bin_curve: need at least one bin");
  for (std::size_t i = 1; i < edges.size(); ++i) {
    if (!(edges[i] > edges[i - 1])) throw Error("bin_curve: edges must be strictly increasing");
  }
  BinnedCurve c;
  c.bin_edges = std::move(edges);
  const std::size_t nb = c.bin_edges.size() - 1;
  c.members.assign(nb, {});
  for (std::size_t i = 0; i < freqs.size(); ++i) {
    const double f = freqs[i];
    if (!(f > 0.0) || f < c.bin_edges.front() || f > c.bin_edges.back()) {
      ++c.dropped;
      continue;
    }
    auto it = std::upper_bound(c.bin_edges.begin(), c.bin_edges.end(), f);
    std::size_t b = static_cast<std::size_t>(it - c.bin_edges.begin()) - 1;
    if (b >= nb) b = nb - 1;
    c.members[b].push_back(i);
  }
  fill_bin_stats(c, probs);
  return c;
}

BinnedCurve bin_curve(std::span<const double> freqs,
                      std::span<const double> probs, std::size_t num_bins) {
  if (freqs.size() != probs.size()) throw Error("bin_curve: length mismatch");
  if (num_bins == 0) throw Error("bin_curve: num_bins must be positive");
  double lo = std::numeric_limits<double>::infinity();
  double hi = 0.0;
  for (double f : freqs) {
    if (f > 0.0) {
      lo = std::min(lo, f);
      hi = std::max(hi, f);
    }
  }
  if (hi <= 0.0) throw Error("nothing to bin");
  double log_lo = std::log(lo);
  double log_hi = std::log(hi);
  if (log_hi <= log_lo) {
    // Single distinct frequency: widen symmetrically so edges increase.
    log_lo -= 0.5;
    log_hi += 0.5;
  }
  std::vector<double> edges(num_bins + 1);
  for (std::size_t b = 0; b <= num_bins; ++b) {
    edges[b] = std::exp(log_lo + (log_hi - log_lo) * static_cast<double>(b) /
                                     static_cast<double>(num_bins));
  }
  // Pin the outer edges so exp/log round-off cannot drop the extremes.
  edges.front() = std::min(edges.front(), lo);
  edges.back() = std::max(edges.back(), hi);
  return bin_curve_with_edges(freqs, probs, std::move(edges));
}

void BinnedCurve::write_csv(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path.string());
  os.precision(17);
  os << "bin,lower,upper,count,geo_mean,geo_sd\n";
  for (std::size_t b = 0; b < count.size(); ++b) {
    os << b << ',' << bin_edges[b] << ',' << bin_edges[b + 1] << ',' << count[b]
       << ',';
    if (count[b] > 0) {
      os << geo_mean[b] << ',' << geo_sd[b];
    } else {
      os << ',';
    }
    os << '\n';
  }
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open file: " + path.string());
  std::vector<std::string> out;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    out.push_back(std::move(line));
  }
  return out;
}

}  // namespace freqhead
