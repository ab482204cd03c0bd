#include "freqhead/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "freqhead/analysis.hpp"
#include "freqhead/corpus.hpp"
#include "freqhead/error.hpp"
#include "freqhead/generation.hpp"
#include "freqhead/metrics.hpp"
#include "freqhead/model.hpp"
#include "freqhead/numeric.hpp"
#include "freqhead/synth.hpp"
#include "json.hpp"

namespace freqhead {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

constexpr const char* kManifest = "manifest.json";
constexpr const char* kCheckpointName = "model.ckpt";
constexpr const char* kVocabName = "vocab.json";
constexpr const char* kUnigramName = "unigram.csv";

// Raised for inputs that do not exist; mapped to exit code 2.
class MissingInput : public Error {
 public:
  using Error::Error;
};

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

std::string read_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingInput("cannot open input file: " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::uint64_t file_hash(const fs::path& path) {
  const std::string bytes = read_file(path);
  return fnv1a64(bytes.data(), bytes.size());
}

void require_file(const fs::path& path, const std::string& what) {
  if (!fs::is_regular_file(path)) {
    throw MissingInput(what + " not found: " + path.string());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path.string());
  os << text;
  if (!os) throw Error("write failed: " + path.string());
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

json read_json_file(const fs::path& path) {
  const std::string text = read_file(path);
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw Error("invalid JSON in " + path.string() + ": " + e.what());
  }
}

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}


/// Non-empty lines of a corpus file, one document each.
std::vector<std::string> read_corpus(const fs::path& path) {
  require_file(path, "corpus file");
  std::vector<std::string> docs;
  for (auto& line : read_lines(path)) {
    if (!split_words(line).empty()) docs.push_back(std::move(line));
  }
  if (docs.empty()) throw Error("corpus has no documents: " + path.string());
  return docs;
}

std::vector<Sequence> encode_docs(const Vocab& vocab, std::span<const std::string> texts) {
  std::vector<Sequence> out;
  out.reserve(texts.size());
  for (const auto& t : texts) out.push_back(vocab.encode_document(t));
  return out;
}

/// Layered configuration: defaults, then the config file, then flags.
/// The manifest records all three.
class Settings {
 public:
  void load_file(const std::string& path) {
    if (path.empty()) return;
    require_file(path, "config file");
    file_ = read_json_file(path);
    if (!file_.is_object()) throw Error("config file must hold a JSON object: " + path);
    static const std::vector<std::string> sections = {"model", "train", "data",     "analysis",
                                                      "generation", "eval", "synth"};
    for (const auto& [key, value] : file_.items()) {
      if (std::find(sections.begin(), sections.end(), key) == sections.end()) {
        throw Error("unknown config section: " + key);
      }
      if (!value.is_object()) throw Error("config section must be an object: " + key);
    }
    path_ = path;
  }

  template <typename T>
  void override_value(const std::string& section, const std::string& key, const T& value) {
    overrides_[section][key] = value;
  }

  json section(const std::string& name) const {
    json s = json::object();
    if (file_.contains(name)) s = file_.at(name);
    if (overrides_.contains(name)) {
      for (const auto& [k, v] : overrides_.at(name).items()) s[k] = v;
    }
    return s;
  }

  json manifest_entry(const json& effective) const {
    return json{{"file", path_.empty() ? json(nullptr) : json(path_)},
                {"file_contents", file_.is_null() ? json::object() : file_},
                {"flag_overrides", overrides_.is_null() ? json::object() : overrides_},
                {"effective", effective}};
  }

 private:
  json file_;
  json overrides_ = json::object();
  std::string path_;
};

template <typename T>
json as_json(const T& value) {
  nlohmann::json j;
  to_json(j, value);
  return json::parse(j.dump());
}

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
  return j.contains(key) ? j.at(key).get<T>() : fallback;
}

void check_keys(const json& j, const std::string& section, const std::vector<std::string>& allowed) {
  for (const auto& [key, value] : j.items()) {
    (void)value;
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw Error("unknown key '" + key + "' in config section '" + section + "'");
    }
  }
}

/// Output directory with its manifest. The directory is created on demand;
/// an existing manifest means a previous run owns it.
class OutputDir {
 public:
  explicit OutputDir(const std::string& dir) : dir_(dir) {
    if (dir.empty()) throw Error("--out is required");
    if (fs::exists(dir_ / kManifest)) {
      throw Error("output directory already holds a run (manifest.json exists): " + dir_.string());
    }
    fs::create_directories(dir_);
  }

  fs::path path(const std::string& name) {
    artifacts_.push_back(name);
    return dir_ / name;
  }

  const fs::path& dir() const { return dir_; }

  void add_input(const std::string& role, const fs::path& path) {
    inputs_[role] = json{{"path", path.string()}, {"fnv1a64", hex64(file_hash(path))}};
  }

  void finish(const std::string& command, const json& config, std::uint64_t seed,
              std::chrono::steady_clock::time_point start) {
    std::sort(artifacts_.begin(), artifacts_.end());
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    json m{{"command", command},
           {"config", config},
           {"inputs", inputs_},
           {"seed", seed},
           {"artifacts", artifacts_},
           {"wall_clock_seconds", secs}};
    write_json(dir_ / kManifest, m);
  }

 private:
  fs::path dir_;
  json inputs_ = json::object();
  std::vector<std::string> artifacts_;
};

struct LoadedModel {
  Checkpoint ckpt;
  Vocab vocab;
  UnigramDistribution unigram;
  fs::path ckpt_path, vocab_path, unigram_path;
};

LoadedModel load_model(const std::string& ckpt_path, std::optional<Variant> variant = std::nullopt) {
  LoadedModel m;
  m.ckpt_path = ckpt_path;
  require_file(m.ckpt_path, "checkpoint");
  const fs::path dir = m.ckpt_path.parent_path();
  m.vocab_path = dir / kVocabName;
  m.unigram_path = dir / kUnigramName;
  require_file(m.vocab_path, "vocabulary next to checkpoint");
  require_file(m.unigram_path, "unigram counts next to checkpoint");
  m.vocab = Vocab::load(m.vocab_path);
  m.ckpt = load_checkpoint(m.ckpt_path, CheckpointExpectations{variant, m.vocab.hash()});
  m.unigram = UnigramDistribution::read_csv(m.unigram_path);
  if (m.unigram.counts.size() != m.vocab.size()) {
    throw Error("unigram counts do not match the vocabulary size");
  }
  return m;
}

// ---------------------------------------------------------------------------
// synth

struct SynthOptions {
  std::string config, out;
  std::optional<std::uint64_t> seed, structure_seed, tokens;
  std::optional<double> rank_shift;
};

int cmd_synth(const SynthOptions& o, std::ostream& out) {
  const auto start = std::chrono::steady_clock::now();
  Settings s;
  s.load_file(o.config);
  if (o.seed) s.override_value("synth", "seed", *o.seed);
  if (o.structure_seed) s.override_value("synth", "structure_seed", *o.structure_seed);
  if (o.tokens) s.override_value("synth", "target_tokens", *o.tokens);
  if (o.rank_shift) s.override_value("synth", "rank_shift", *o.rank_shift);
  const json j = s.section("synth");
  check_keys(j, "synth",
             {"num_words", "num_classes", "successors", "target_tokens", "zipf_exponent",
              "min_doc_len", "max_doc_len", "rank_shift", "seed", "structure_seed"});
  SynthConfig cfg;
  cfg.num_words = get_or(j, "num_words", cfg.num_words);
  cfg.num_classes = get_or(j, "num_classes", cfg.num_classes);
  cfg.successors = get_or(j, "successors", cfg.successors);
  cfg.target_tokens = get_or(j, "target_tokens", cfg.target_tokens);
  cfg.zipf_exponent = get_or(j, "zipf_exponent", cfg.zipf_exponent);
  cfg.min_doc_len = get_or(j, "min_doc_len", cfg.min_doc_len);
  cfg.max_doc_len = get_or(j, "max_doc_len", cfg.max_doc_len);
  cfg.rank_shift = get_or(j, "rank_shift", cfg.rank_shift);
  cfg.seed = get_or(j, "seed", cfg.seed);
  const auto structure_seed = get_or<std::uint64_t>(j, "structure_seed", 1);

  OutputDir dir(o.out);
  if (!o.config.empty()) dir.add_input("config", o.config);
  const auto docs = synth_corpus(cfg, structure_seed);
  std::string text;
  for (const auto& d : docs) text += d + "\n";
  write_text(dir.path("corpus.txt"), text);
  dir.finish("synth", s.manifest_entry(json{{"num_words", cfg.num_words},
                                                    {"num_classes", cfg.num_classes},
                                                    {"successors", cfg.successors},
                                                    {"target_tokens", cfg.target_tokens},
                                                    {"zipf_exponent", cfg.zipf_exponent},
                                                    {"min_doc_len", cfg.min_doc_len},
                                                    {"max_doc_len", cfg.max_doc_len},
                                                    {"rank_shift", cfg.rank_shift},
                                                    {"seed", cfg.seed},
                                                    {"structure_seed", structure_seed}}), cfg.seed, start);
  out << "wrote " << docs.size() << " documents to " << (dir.dir() / "corpus.txt").string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train / finetune

struct TrainOptions {
  std::string corpus, config, out, checkpoint;
  std::optional<std::uint64_t> seed;
  std::optional<long> steps;
};

ModelConfig model_config_from(const json& j) {
  check_keys(j, "model",
             {"variant", "d_model", "n_layers", "n_heads", "d_ff", "max_seq_len", "ln_epsilon"});
  ModelConfig c;
  from_json(nlohmann::json::parse(j.dump()), c);
  return c;
}

TrainConfig train_config_from(const json& j) {
  check_keys(j, "train",
             {"steps", "batch_size", "seq_len", "lr", "beta1", "beta2", "adam_eps", "weight_decay",
              "clip_norm", "warmup_steps", "cosine_decay", "seed", "eval_every", "eval_mask_seed",
              "select_rate", "mask_frac", "random_frac"});
  TrainConfig c;
  from_json(nlohmann::json::parse(j.dump()), c);
  c.validate();
  return c;
}

struct DataSettings {
  std::size_t max_vocab = 2000;
  double heldout_fraction = 0.05;
};

void to_json(nlohmann::json& j, const DataSettings& d) {
  j = nlohmann::json{{"max_vocab", d.max_vocab}, {"heldout_fraction", d.heldout_fraction}};
}

DataSettings data_settings_from(const json& j) {
  check_keys(j, "data", {"max_vocab", "heldout_fraction"});
  DataSettings d;
  d.max_vocab = get_or(j, "max_vocab", d.max_vocab);
  d.heldout_fraction = get_or(j, "heldout_fraction", d.heldout_fraction);
  if (!(d.heldout_fraction >= 0.0 && d.heldout_fraction < 1.0)) {
    throw Error("data.heldout_fraction must lie in [0, 1)");
  }
  return d;
}

/// The last ceil(fraction * n) documents are held out.
TrainData split_docs(std::vector<Sequence> docs, double heldout_fraction) {
  const auto n = docs.size();
  auto held = static_cast<std::size_t>(std::ceil(heldout_fraction * static_cast<double>(n)));
  if (held >= n) held = n - 1;
  TrainData data;
  data.heldout_docs.assign(docs.end() - static_cast<std::ptrdiff_t>(held), docs.end());
  docs.resize(n - held);
  data.train_docs = std::move(docs);
  return data;
}

int cmd_train(const TrainOptions& o, std::ostream& out) {
  const auto start = std::chrono::steady_clock::now();
  const auto texts = read_corpus(o.corpus);
  Settings s;
  s.load_file(o.config);
  if (o.seed) s.override_value("train", "seed", *o.seed);
  if (o.steps) s.override_value("train", "steps", *o.steps);
  const ModelConfig mcfg = model_config_from(s.section("model"));
  const TrainConfig tcfg = train_config_from(s.section("train"));
  const DataSettings dcfg = data_settings_from(s.section("data"));

  OutputDir dir(o.out);
  dir.add_input("corpus", o.corpus);
  if (!o.config.empty()) dir.add_input("config", o.config);

  const Vocab vocab = build_vocab(texts, dcfg.max_vocab);
  TrainData data = split_docs(encode_docs(vocab, texts), dcfg.heldout_fraction);
  const UnigramDistribution unigram = count_unigram(std::span<const Sequence>(data.train_docs), vocab.size());

  const TrainResult<float> result = train<float>(mcfg, tcfg, vocab, data, [&](const LossRecord& r) {
    out << "step " << r.step << " train " << format_double(r.train_loss);
    if (r.heldout_loss) out << " heldout " << format_double(*r.heldout_loss);
    out << "\n";
  });

  vocab.save(dir.path(kVocabName));
  unigram.write_csv(dir.path(kUnigramName), vocab);
  save_checkpoint(result.params, vocab.hash(), dir.path(kCheckpointName));
  write_loss_csv(dir.path("loss.csv"), result.curve);
  dir.finish("train", s.manifest_entry(json{{"model", as_json(result.params.config)},
                                                    {"train", as_json(tcfg)},
                                                    {"data", as_json(dcfg)}}), tcfg.seed, start);
  out << "initial heldout " << format_double(result.initial_heldout) << " final heldout "
      << format_double(result.final_heldout) << "\n";
  return 0;
}

int cmd_finetune(const TrainOptions& o, std::ostream& out) {
  const auto start = std::chrono::steady_clock::now();
  const auto texts = read_corpus(o.corpus);
  LoadedModel m = load_model(o.checkpoint);
  Settings s;
  s.load_file(o.config);
  if (o.seed) s.override_value("train", "seed", *o.seed);
  if (o.steps) s.override_value("train", "steps", *o.steps);
  const TrainConfig tcfg = train_config_from(s.section("train"));
  const DataSettings dcfg = data_settings_from(s.section("data"));

  OutputDir dir(o.out);
  dir.add_input("corpus", o.corpus);
  dir.add_input("checkpoint", m.ckpt_path);
  dir.add_input("vocab", m.vocab_path);
  dir.add_input("unigram_pretrain", m.unigram_path);
  if (!o.config.empty()) dir.add_input("config", o.config);

  TrainData data = split_docs(encode_docs(m.vocab, texts), dcfg.heldout_fraction);
  const UnigramDistribution uni_ft =
      count_unigram(std::span<const Sequence>(data.train_docs), m.vocab.size());
  const double unk_rate =
      static_cast<double>(uni_ft.counts[static_cast<std::size_t>(m.vocab.unk())]) /
      static_cast<double>(uni_ft.total());

  const TrainResult<float> result =
      train_from<float>(m.ckpt.params, tcfg, m.vocab, data, [&](const LossRecord& r) {
        out << "step " << r.step << " train " << format_double(r.train_loss);
        if (r.heldout_loss) out << " heldout " << format_double(*r.heldout_loss);
        out << "\n";
      });
  const FinetuneShift shift = finetune_shift_report(m.ckpt.params, result.params, m.unigram, uni_ft);

  m.vocab.save(dir.path(kVocabName));
  uni_ft.write_csv(dir.path(kUnigramName), m.vocab);
  save_checkpoint(result.params, m.vocab.hash(), dir.path(kCheckpointName));
  write_loss_csv(dir.path("loss.csv"), result.curve);
  const json report{{"rho_old_before", shift.rho_old_before},
                    {"rho_old_after", shift.rho_old_after},
                    {"rho_new_before", shift.rho_new_before},
                    {"rho_new_after", shift.rho_new_after},
                    {"steps", tcfg.steps},
                    {"unk_rate", unk_rate},
                    {"initial_heldout", result.initial_heldout},
                    {"final_heldout", result.final_heldout}};
  write_json(dir.path("shift_report.json"), report);
  dir.finish("finetune", s.manifest_entry(json{{"model", as_json(result.params.config)},
                                                       {"train", as_json(tcfg)},
                                                       {"data", as_json(dcfg)}}), tcfg.seed, start);
  out << report.dump(2) << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// analyze

struct AnalyzeOptions {
  std::string checkpoint, corpus, config, out, intervention;
  std::optional<double> lambda;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> bins, max_docs;
};

std::vector<std::string> first_docs(std::vector<std::string> docs, std::size_t max_docs) {
  if (max_docs > 0 && docs.size() > max_docs) docs.resize(max_docs);
  return docs;
}

int cmd_analyze(const AnalyzeOptions& o, std::ostream& out) {
  const auto start = std::chrono::steady_clock::now();
  LoadedModel m = load_model(o.checkpoint);
  const auto all_texts = read_corpus(o.corpus);
  Settings s;
  s.load_file(o.config);
  if (!o.intervention.empty()) {
    require_file(o.intervention, "intervention file");
    InterventionSpec iv;
    from_json(nlohmann::json::parse(read_file(o.intervention)), iv);
    s.override_value("analysis", "lambda_ln", iv.lambda_ln);
    s.override_value("analysis", "use_b_fc", iv.use_b_fc);
    s.override_value("analysis", "use_b_last", iv.use_b_last);
  }
  if (o.lambda) s.override_value("analysis", "lambda_ln", *o.lambda);
  if (o.seed) s.override_value("analysis", "mask_seed", *o.seed);
  if (o.bins) s.override_value("analysis", "bins", *o.bins);
  if (o.max_docs) s.override_value("analysis", "max_docs", *o.max_docs);
  const json a = s.section("analysis");
  check_keys(a, "analysis", {"lambda_ln", "use_b_fc", "use_b_last", "mask_seed", "bins", "max_docs"});
  InterventionSpec iv;
  from_json(nlohmann::json::parse(a.dump()), iv);
  const auto mask_seed = get_or<std::uint64_t>(a, "mask_seed", 7);
  const auto bins = get_or<std::size_t>(a, "bins", 12);
  const auto max_docs = get_or<std::size_t>(a, "max_docs", 200);

  OutputDir dir(o.out);
  dir.add_input("checkpoint", m.ckpt_path);
  dir.add_input("vocab", m.vocab_path);
  dir.add_input("unigram", m.unigram_path);
  dir.add_input("corpus", o.corpus);
  if (!o.config.empty()) dir.add_input("config", o.config);
  if (!o.intervention.empty()) dir.add_input("intervention", o.intervention);

  const auto texts = first_docs(all_texts, max_docs);
  const auto docs = encode_docs(m.vocab, texts);
  const auto& params = m.ckpt.params;
  const PredictionSummary avg = avg_prediction_distribution(params, m.vocab, docs, iv, mask_seed);
  const KlReference ref = kl_reference(m.unigram);
  const double kl_uni = kl_divergence(avg.avg_probs, ref.probs);
  const double kl_uniform = kl_divergence(avg.avg_probs, uniform_distribution(avg.avg_probs.size()));
  const GeometryReport geo = geometry_report(params, m.vocab, docs, m.unigram.probs, mask_seed);
  const BinnedCurve curve = bin_curve(m.unigram.probs, avg.avg_probs, bins);

  {
    std::ostringstream os;
    os.precision(17);
    os << "id,count,product\n";
    for (std::size_t i = 0; i < geo.products.size(); ++i) {
      os << i << ',' << m.unigram.counts[i] << ',' << geo.products[i] << '\n';
    }
    write_text(dir.path("products.csv"), os.str());
  }
  curve.write_csv(dir.path("curve.csv"));
  {
    std::ostringstream os;
    os.precision(17);
    os << "id,unigram_prob,avg_prob\n";
    for (std::size_t i = 0; i < avg.avg_probs.size(); ++i) {
      os << i << ',' << m.unigram.probs[i] << ',' << avg.avg_probs[i] << '\n';
    }
    write_text(dir.path("avg_probs.csv"), os.str());
  }

  json curve_json = json::array();
  for (std::size_t b = 0; b < curve.count.size(); ++b) {
    curve_json.push_back(json{{"lower", curve.bin_edges[b]},
                              {"upper", curve.bin_edges[b + 1]},
                              {"count", curve.count[b]},
                              {"geo_mean", curve.count[b] ? json(curve.geo_mean[b]) : json(nullptr)}});
  }
  const json report{
      {"variant", std::string(to_string(params.config.variant))},
      {"intervention",
       json{{"lambda_ln", iv.lambda_ln}, {"use_b_fc", iv.use_b_fc}, {"use_b_last", iv.use_b_last}}},
      {"documents", docs.size()},
      {"positions", avg.positions},
      {"kl_vs_unigram", kl_uni},
      {"kl_vs_uniform", kl_uniform},
      {"unigram_smoothed", ref.smoothed},
      {"zero_frequency_tokens", m.unigram.zero_count()},
      {"geometry",
       json{{"spearman_vs_logfreq", geo.spearman_vs_logfreq.rho},
            {"spearman_tokens_used", geo.spearman_vs_logfreq.used},
            {"excluded_zero_freq", geo.spearman_vs_logfreq.excluded_zero_freq},
            {"isotropy_before", geo.isotropy_before},
            {"isotropy_after", geo.isotropy_after},
            {"hidden_orthogonality", geo.hidden_orthogonality}}},
      {"curve", curve_json},
      {"curve_dropped", curve.dropped}};
  write_json(dir.path("report.json"), report);
  dir.finish("analyze", s.manifest_entry(json{{"intervention", as_json(iv)},
                                                      {"mask_seed", mask_seed},
                                                      {"bins", bins},
                                                      {"max_docs", max_docs}}), mask_seed, start);
  out << "KL(avg || unigram) = " << format_double(kl_uni)
      << "  KL(avg || uniform) = " << format_double(kl_uniform) << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// generate

struct GenerateOptions {
  std::string checkpoint, corpus, config, out;
  std::vector<double> lambdas;
  std::vector<std::string> strategies;
  std::optional<int> k, prompt_len, max_len;
  std::optional<double> p;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> prompts;
};

std::string cell_name(double lambda, Strategy strategy) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "gen_lambda%.3f_%s", lambda, std::string(to_string(strategy)).c_str());
  return buf;
}

int cmd_generate(const GenerateOptions& o, std::ostream& out) {
  const auto start = std::chrono::steady_clock::now();
  LoadedModel m = load_model(o.checkpoint, Variant::causal);
  const auto all_texts = read_corpus(o.corpus);
  Settings s;
  s.load_file(o.config);
  if (!o.lambdas.empty()) s.override_value("generation", "lambdas", o.lambdas);
  if (!o.strategies.empty()) s.override_value("generation", "strategies", o.strategies);
  if (o.k) s.override_value("generation", "k", *o.k);
  if (o.p) s.override_value("generation", "p", *o.p);
  if (o.seed) s.override_value("generation", "seed", *o.seed);
  if (o.prompts) s.override_value("generation", "prompts", *o.prompts);
  if (o.prompt_len) s.override_value("generation", "prompt_len", *o.prompt_len);
  if (o.max_len) s.override_value("generation", "max_len", *o.max_len);
  json g = s.section("generation");
  check_keys(g, "generation",
             {"lambdas", "strategies", "k", "p", "seed", "prompts", "prompt_len", "max_len"});
  const std::vector<double> lambdas = get_or<std::vector<double>>(
      g, "lambdas", {0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0});
  const std::vector<std::string> strategies =
      get_or<std::vector<std::string>>(g, "strategies", {"top_p"});
  const auto prompts = get_or<std::size_t>(g, "prompts", 200);
  if (lambdas.empty() || strategies.empty()) throw Error("generation sweep is empty");
  GenerationConfig base;
  {
    json gj = g;
    gj.erase("lambdas");
    gj.erase("strategies");
    gj.erase("prompts");
    from_json(nlohmann::json::parse(gj.dump()), base);
  }

  OutputDir dir(o.out);
  dir.add_input("checkpoint", m.ckpt_path);
  dir.add_input("vocab", m.vocab_path);
  dir.add_input("corpus", o.corpus);
  if (!o.config.empty()) dir.add_input("config", o.config);

  const auto texts = first_docs(all_texts, prompts);
  const auto refs = encode_docs(m.vocab, texts);
  const unsigned threads = thread_count_from_env();
  for (const auto& sname : strategies) {
    const Strategy strategy = strategy_from_string(sname);
    for (double lambda : lambdas) {
      GenerationConfig cfg = base;
      cfg.strategy = strategy;
      cfg.lambda_ln = lambda;
      cfg.validate();
      const auto results = generate_all(m.ckpt.params, m.vocab, refs, cfg, threads);
      std::string text;
      std::size_t stopped = 0;
      for (const auto& r : results) {
        text += m.vocab.decode(r.tokens) + "\n";
        stopped += r.stopped_at_eos ? 1 : 0;
      }
      const std::string name = cell_name(lambda, strategy);
      write_text(dir.path(name + ".txt"), text);
      nlohmann::json cj;
      to_json(cj, cfg);
      const json sidecar{{"text_file", name + ".txt"},
                         {"lambda_ln", lambda},
                         {"strategy", sname},
                         {"generation", json::parse(cj.dump())},
                         {"documents", results.size()},
                         {"stopped_at_eos", stopped}};
      write_json(dir.path(name + ".json"), sidecar);
      out << name << ": " << results.size() << " documents\n";
    }
  }
  dir.finish("generate", s.manifest_entry(json{{"lambdas", lambdas},
                                                       {"strategies", strategies},
                                                       {"prompts", prompts},
                                                       {"generation", as_json(base)}}), base.seed, start);
  return 0;
}

// ---------------------------------------------------------------------------
// eval

struct EvalOptions {
  std::string checkpoint, corpus, config, out, gen_dir;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> k_clusters, max_docs;
};

int cmd_eval(const EvalOptions& o, std::ostream& out) {
  const auto start = std::chrono::steady_clock::now();
  LoadedModel m = load_model(o.checkpoint, Variant::causal);
  const auto all_texts = read_corpus(o.corpus);
  if (o.gen_dir.empty()) throw Error("--gen-dir is required");
  if (!fs::is_directory(o.gen_dir)) throw MissingInput("generation directory not found: " + o.gen_dir);
  Settings s;
  s.load_file(o.config);
  if (o.seed) s.override_value("eval", "seed", *o.seed);
  if (o.k_clusters) s.override_value("eval", "k_clusters", *o.k_clusters);
  if (o.max_docs) s.override_value("eval", "max_docs", *o.max_docs);
  const json e = s.section("eval");
  check_keys(e, "eval", {"seed", "k_clusters", "max_docs"});
  const auto seed = get_or<std::uint64_t>(e, "seed", 0);
  const auto k_clusters = get_or<std::size_t>(e, "k_clusters", 10);
  const auto max_docs = get_or<std::size_t>(e, "max_docs", 200);

  std::vector<fs::path> sidecars;
  for (const auto& entry : fs::directory_iterator(o.gen_dir)) {
    const auto name = entry.path().filename().string();
    if (entry.is_regular_file() && name.starts_with("gen_") && entry.path().extension() == ".json") {
      sidecars.push_back(entry.path());
    }
  }
  if (sidecars.empty()) {
    throw Error("generation directory holds no generated texts: " + o.gen_dir);
  }
  std::sort(sidecars.begin(), sidecars.end());

  OutputDir dir(o.out);
  dir.add_input("checkpoint", m.ckpt_path);
  dir.add_input("vocab", m.vocab_path);
  dir.add_input("unigram", m.unigram_path);
  dir.add_input("corpus", o.corpus);
  if (!o.config.empty()) dir.add_input("config", o.config);

  const auto ref_texts = first_docs(all_texts, max_docs);
  const auto ref_docs = encode_docs(m.vocab, ref_texts);
  std::vector<Sequence> ref_plain;
  for (const auto& t : ref_texts) ref_plain.push_back(m.vocab.encode(t));
  const auto ranks = frequency_ranks(m.unigram);
  const auto& params = m.ckpt.params;

  std::vector<EvalReport> reports;
  std::map<double, double> ppl_cache;
  for (const auto& sc : sidecars) {
    dir.add_input(sc.filename().string(), sc);
    const json meta = read_json_file(sc);
    const fs::path text_path = fs::path(o.gen_dir) / meta.at("text_file").get<std::string>();
    require_file(text_path, "generated text");
    dir.add_input(text_path.filename().string(), text_path);
    const auto prompt_len = static_cast<std::size_t>(meta.at("generation").at("prompt_len").get<int>());
    std::vector<Sequence> full, cont;
    for (const auto& line : read_lines(text_path)) {
      Sequence ids = m.vocab.encode(line);
      if (ids.size() < prompt_len) throw Error("generated line shorter than its prompt in " + text_path.string());
      cont.emplace_back(ids.begin() + static_cast<std::ptrdiff_t>(prompt_len), ids.end());
      full.push_back(std::move(ids));
    }
    if (full.empty()) throw Error("no generated documents in " + text_path.string());

    EvalReport r;
    r.lambda_ln = meta.at("lambda_ln").get<double>();
    r.strategy = strategy_from_string(meta.at("strategy").get<std::string>());
    r.documents = full.size();
    r.d1 = distinct_n(cont, 1);
    r.d2 = distinct_n(cont, 2);
    r.d3 = distinct_n(cont, 3);
    r.d4 = distinct_n(cont, 4);
    r.d_mean = (r.d1 + r.d2 + r.d3 + r.d4) / 4.0;
    if (!ppl_cache.contains(r.lambda_ln)) {
      ppl_cache[r.lambda_ln] =
          perplexity(params, m.vocab, ref_docs, InterventionSpec::with_lambda(r.lambda_ln));
    }
    r.ppl = ppl_cache[r.lambda_ln];
    r.embdiv = embdiv_quality(full, ref_plain, params, k_clusters, seed);
    r.mean_freq_rank = mean_frequency_rank(cont, ranks);
    reports.push_back(r);
  }
  std::stable_sort(reports.begin(), reports.end(), [](const EvalReport& a, const EvalReport& b) {
    if (a.strategy != b.strategy) return a.strategy < b.strategy;
    return a.lambda_ln < b.lambda_ln;
  });

  std::string jsonl;
  std::ostringstream table;
  table << "lambda,strategy,D1,D2,D,embdiv,ppl\n";
  for (const auto& r : reports) {
    nlohmann::json j;
    to_json(j, r);
    jsonl += j.dump() + "\n";
    table << format_double(r.lambda_ln) << ',' << to_string(r.strategy) << ',' << format_double(r.d1)
          << ',' << format_double(r.d2) << ',' << format_double(r.d_mean) << ','
          << format_double(r.embdiv) << ',' << format_double(r.ppl) << '\n';
  }
  write_text(dir.path("eval.jsonl"), jsonl);
  write_text(dir.path("table.csv"), table.str());
  dir.finish("eval", s.manifest_entry(json{{"seed", seed},
                                                   {"k_clusters", k_clusters},
                                                   {"max_docs", max_docs}}), seed, start);
  out << table.str();
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Train small transformer language models and study their prediction-head biases",
               "freqhead"};
  app.require_subcommand(1);

  SynthOptions so;
  auto* synth = app.add_subcommand("synth", "Write a synthetic Zipfian corpus");
  synth->add_option("--config", so.config, "JSON config file (section 'synth')");
  synth->add_option("--out", so.out, "Output directory")->required();
  synth->add_option("--seed", so.seed, "Sampling seed");
  synth->add_option("--structure-seed", so.structure_seed, "Seed of the grammar and word classes");
  synth->add_option("--tokens", so.tokens, "Approximate number of word tokens");
  synth->add_option("--rank-shift", so.rank_shift, "Fraction by which word frequency ranks rotate");

  TrainOptions to;
  auto* train_cmd = app.add_subcommand("train", "Train a model from scratch");
  train_cmd->add_option("--corpus", to.corpus, "Corpus, one document per line")->required();
  train_cmd->add_option("--config", to.config, "JSON config (sections model, train, data)");
  train_cmd->add_option("--out", to.out, "Output directory")->required();
  train_cmd->add_option("--seed", to.seed, "Training seed");
  train_cmd->add_option("--steps", to.steps, "Optimizer steps");

  TrainOptions fo;
  auto* finetune = app.add_subcommand("finetune", "Continue training on a new corpus");
  finetune->add_option("--checkpoint", fo.checkpoint, "Checkpoint to start from")->required();
  finetune->add_option("--corpus", fo.corpus, "Fine-tuning corpus")->required();
  finetune->add_option("--config", fo.config, "JSON config (sections train, data)");
  finetune->add_option("--out", fo.out, "Output directory")->required();
  finetune->add_option("--seed", fo.seed, "Training seed");
  finetune->add_option("--steps", fo.steps, "Optimizer steps");

  AnalyzeOptions ao;
  auto* analyze = app.add_subcommand("analyze", "Averaged prediction distribution and head geometry");
  analyze->add_option("--checkpoint", ao.checkpoint, "Checkpoint")->required();
  analyze->add_option("--corpus", ao.corpus, "Evaluation corpus")->required();
  analyze->add_option("--config", ao.config, "JSON config (section analysis)");
  analyze->add_option("--out", ao.out, "Output directory")->required();
  analyze->add_option("--intervention", ao.intervention, "JSON intervention spec");
  analyze->add_option("--lambda", ao.lambda, "Scale of the head LayerNorm bias");
  analyze->add_option("--seed", ao.seed, "Seed of the evaluation masking");
  analyze->add_option("--bins", ao.bins, "Number of frequency bins");
  analyze->add_option("--max-docs", ao.max_docs, "Evaluate on the first N documents (0 = all)");

  GenerateOptions go;
  auto* generate_cmd = app.add_subcommand("generate", "Sample continuations over a lambda sweep");
  generate_cmd->add_option("--checkpoint", go.checkpoint, "Causal checkpoint")->required();
  generate_cmd->add_option("--corpus", go.corpus, "Reference corpus supplying prompts")->required();
  generate_cmd->add_option("--config", go.config, "JSON config (section generation)");
  generate_cmd->add_option("--out", go.out, "Output directory")->required();
  generate_cmd->add_option("--lambda", go.lambdas, "Lambda values (comma separated)")->delimiter(',');
  generate_cmd->add_option("--strategy", go.strategies, "vanilla, top_k or top_p (comma separated)")
      ->delimiter(',');
  generate_cmd->add_option("--k", go.k, "Top-k cutoff");
  generate_cmd->add_option("--p", go.p, "Top-p mass");
  generate_cmd->add_option("--seed", go.seed, "Sampling seed");
  generate_cmd->add_option("--prompts", go.prompts, "Number of reference documents used as prompts");
  generate_cmd->add_option("--prompt-len", go.prompt_len, "Prompt length in tokens");
  generate_cmd->add_option("--max-len", go.max_len, "Maximum total length in tokens");

  EvalOptions eo;
  auto* eval = app.add_subcommand("eval", "Score generated texts");
  eval->add_option("--checkpoint", eo.checkpoint, "Causal checkpoint")->required();
  eval->add_option("--corpus", eo.corpus, "Reference corpus")->required();
  eval->add_option("--gen-dir", eo.gen_dir, "Directory written by generate")->required();
  eval->add_option("--config", eo.config, "JSON config (section eval)");
  eval->add_option("--out", eo.out, "Output directory")->required();
  eval->add_option("--seed", eo.seed, "Clustering seed");
  eval->add_option("--k-clusters", eo.k_clusters, "Number of clusters for the embedding score");
  eval->add_option("--max-docs", eo.max_docs, "Reference documents used (0 = all)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }

  try {
    if (synth->parsed()) return cmd_synth(so, out);
    if (train_cmd->parsed()) return cmd_train(to, out);
    if (finetune->parsed()) return cmd_finetune(fo, out);
    if (analyze->parsed()) return cmd_analyze(ao, out);
    if (generate_cmd->parsed()) return cmd_generate(go, out);
    if (eval->parsed()) return cmd_eval(eo, out);
  } catch (const MissingInput& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace freqhead
