#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "freqhead/cli.hpp"
#include "json.hpp"

namespace fs = std::filesystem;

namespace {

struct RunResult {
  int code;
  std::string out, err;
};

RunResult run(std::vector<std::string> args) {
  args.insert(args.begin(), "freqhead");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = freqhead::run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(slurp(p)); }

void write(const fs::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::binary);
  os << text;
}

// Shared tiny workspace: a synthetic corpus plus one causal and one masked
// model, built once per process.
struct Workspace {
  fs::path root;
  fs::path corpus, config, causal, masked;

  Workspace() {
    root = fs::current_path() / "cli_work";
    fs::remove_all(root);
    fs::create_directories(root);
    config = root / "tiny.json";
    write(config, R"({
  "synth": {"num_words": 150, "num_classes": 6, "successors": 2, "target_tokens": 20000,
            "min_doc_len": 8, "max_doc_len": 24},
  "model": {"d_model": 16, "n_layers": 1, "n_heads": 2, "d_ff": 32, "max_seq_len": 32},
  "train": {"steps": 50, "batch_size": 8, "seq_len": 16, "lr": 0.003, "eval_every": 25},
  "data": {"max_vocab": 200, "heldout_fraction": 0.1}
})");
    REQUIRE(run({"synth", "--config", config.string(), "--out", (root / "synth").string(), "--seed", "3"}).code == 0);
    corpus = root / "synth" / "corpus.txt";
    REQUIRE(run({"train", "--corpus", corpus.string(), "--config", config.string(), "--out",
                 (root / "causal").string()})
                .code == 0);
    fs::path masked_config = root / "masked.json";
    auto j = read_json(config);
    j["model"]["variant"] = "masked";
    write(masked_config, j.dump());
    REQUIRE(run({"train", "--corpus", corpus.string(), "--config", masked_config.string(), "--out",
                 (root / "masked").string()})
                .code == 0);
    causal = root / "causal" / "model.ckpt";
    masked = root / "masked" / "model.ckpt";
  }
};

const Workspace& workspace() {
  static const Workspace w;
  return w;
}

}  // namespace

TEST_CASE("help and usage errors") {
  CHECK(run({"--help"}).code == 0);
  CHECK(run({}).code == 2);
  CHECK(run({"train"}).code == 2);
  CHECK(run({"bogus"}).code == 2);
}

TEST_CASE("missing inputs exit with code 2 and name the path") {
  const auto r = run({"train", "--corpus", "/nonexistent/corpus.txt", "--out",
                      (fs::current_path() / "cli_unused").string()});
  CHECK(r.code == 2);
  CHECK(r.err.find("/nonexistent/corpus.txt") != std::string::npos);
  const auto a = run({"analyze", "--checkpoint", "/nonexistent/model.ckpt", "--corpus", "x", "--out", "y"});
  CHECK(a.code == 2);
  CHECK(a.err.find("/nonexistent/model.ckpt") != std::string::npos);
}

TEST_CASE("training writes its artifacts and reruns are byte-identical") {
  const auto& w = workspace();
  for (const char* name : {"model.ckpt", "vocab.json", "unigram.csv", "loss.csv", "manifest.json"}) {
    CHECK(fs::is_regular_file(w.root / "causal" / name));
  }
  const auto m = read_json(w.root / "causal" / "manifest.json");
  for (const char* key : {"command", "config", "inputs", "seed", "artifacts", "wall_clock_seconds"}) {
    CHECK(m.contains(key));
  }
  CHECK(m["config"]["effective"]["model"]["d_model"] == 16);

  const auto again = w.root / "causal_again";
  REQUIRE(run({"train", "--corpus", w.corpus.string(), "--config", w.config.string(), "--out", again.string()})
              .code == 0);
  CHECK(slurp(again / "model.ckpt") == slurp(w.root / "causal" / "model.ckpt"));
  CHECK(slurp(again / "loss.csv") == slurp(w.root / "causal" / "loss.csv"));
}

TEST_CASE("output directories are never overwritten") {
  const auto& w = workspace();
  const std::string before = slurp(w.root / "causal" / "model.ckpt");
  const auto r = run({"train", "--corpus", w.corpus.string(), "--config", w.config.string(), "--out",
                      (w.root / "causal").string(), "--seed", "99"});
  CHECK(r.code == 1);
  CHECK(r.err.find("manifest.json") != std::string::npos);
  CHECK(slurp(w.root / "causal" / "model.ckpt") == before);
}

TEST_CASE("unknown configuration keys are rejected") {
  const auto& w = workspace();
  const auto cfg = w.root / "bad.json";
  write(cfg, R"({"train": {"stepz": 3}})");
  const auto r = run({"train", "--corpus", w.corpus.string(), "--config", cfg.string(), "--out",
                      (w.root / "bad_out").string()});
  CHECK(r.code == 1);
  CHECK(r.err.find("stepz") != std::string::npos);
  write(cfg, R"({"trian": {}})");
  CHECK(run({"train", "--corpus", w.corpus.string(), "--config", cfg.string(), "--out",
             (w.root / "bad_out2").string()})
            .code == 1);
}

TEST_CASE("analyze reports the lambda effect and is deterministic") {
  const auto& w = workspace();
  const auto a0 = w.root / "an0";
  const auto a1 = w.root / "an1";
  const auto a1b = w.root / "an1b";
  REQUIRE(run({"analyze", "--checkpoint", w.masked.string(), "--corpus", w.corpus.string(), "--out",
               a0.string(), "--lambda", "0", "--max-docs", "40"})
              .code == 0);
  REQUIRE(run({"analyze", "--checkpoint", w.masked.string(), "--corpus", w.corpus.string(), "--out",
               a1.string(), "--lambda", "1", "--max-docs", "40"})
              .code == 0);
  REQUIRE(run({"analyze", "--checkpoint", w.masked.string(), "--corpus", w.corpus.string(), "--out",
               a1b.string(), "--lambda", "1", "--max-docs", "40"})
              .code == 0);
  const auto r0 = read_json(a0 / "report.json");
  const auto r1 = read_json(a1 / "report.json");
  CHECK(r0["variant"] == "masked");
  CHECK(r0["intervention"]["lambda_ln"] == 0.0);
  CHECK(r1["intervention"]["lambda_ln"] == 1.0);
  CHECK(r0["kl_vs_unigram"].get<double>() >= 0.0);
  CHECK(r0["kl_vs_unigram"] != r1["kl_vs_unigram"]);
  CHECK(r1.contains("zero_frequency_tokens"));
  CHECK(r1["geometry"].contains("excluded_zero_freq"));
  CHECK(r1["positions"].get<std::size_t>() > 0);
  for (const char* f : {"report.json", "products.csv", "curve.csv", "avg_probs.csv"}) {
    CHECK(slurp(a1 / f) == slurp(a1b / f));
  }

  const auto iv = w.root / "iv.json";
  write(iv, R"({"lambda_ln": 0.5, "use_b_fc": false, "use_b_last": true})");
  REQUIRE(run({"analyze", "--checkpoint", w.masked.string(), "--corpus", w.corpus.string(), "--out",
               (w.root / "an_iv").string(), "--intervention", iv.string(), "--max-docs", "20"})
              .code == 0);
  const auto riv = read_json(w.root / "an_iv" / "report.json");
  CHECK(riv["intervention"]["use_b_fc"] == false);
  CHECK(riv["intervention"]["lambda_ln"] == 0.5);
}

TEST_CASE("generation sweep and evaluation table") {
  const auto& w = workspace();
  const auto gen = w.root / "gen";
  REQUIRE(run({"generate", "--checkpoint", w.causal.string(), "--corpus", w.corpus.string(), "--out",
               gen.string(), "--lambda", "0,0.5,1", "--strategy", "top_p", "--prompts", "12",
               "--prompt-len", "4", "--max-len", "20"})
              .code == 0);
  int cells = 0;
  for (const auto& e : fs::directory_iterator(gen)) {
    if (e.path().extension() == ".json" && e.path().filename().string().starts_with("gen_")) ++cells;
  }
  CHECK(cells == 3);
  const auto side = read_json(gen / "gen_lambda0.500_top_p.json");
  CHECK(side["documents"] == 12);
  CHECK(side["generation"]["prompt_len"] == 4);

  const auto ev = w.root / "eval";
  REQUIRE(run({"eval", "--checkpoint", w.causal.string(), "--corpus", w.corpus.string(), "--gen-dir",
               gen.string(), "--out", ev.string(), "--k-clusters", "4", "--max-docs", "30"})
              .code == 0);
  std::istringstream table(slurp(ev / "table.csv"));
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(table, line)) lines.push_back(line);
  REQUIRE(lines.size() == 4);
  CHECK(lines[0] == "lambda,strategy,D1,D2,D,embdiv,ppl");
  CHECK(lines[1].starts_with("0,top_p,"));
  CHECK(lines[3].starts_with("1,top_p,"));

  std::istringstream jl(slurp(ev / "eval.jsonl"));
  int rows = 0;
  while (std::getline(jl, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j["d1"].get<double>() > 0.0);
    CHECK(j["d1"].get<double>() <= 1.0);
    CHECK(j["embdiv"].get<double>() >= 0.0);
    CHECK(j["embdiv"].get<double>() <= 1.0);
    ++rows;
  }
  CHECK(rows == 3);

  const auto empty = w.root / "empty_gen";
  fs::create_directories(empty);
  const auto r = run({"eval", "--checkpoint", w.causal.string(), "--corpus", w.corpus.string(), "--gen-dir",
                      empty.string(), "--out", (w.root / "eval_empty").string()});
  CHECK(r.code == 1);

  CHECK(run({"generate", "--checkpoint", w.masked.string(), "--corpus", w.corpus.string(), "--out",
             (w.root / "gen_masked").string(), "--lambda", "1", "--prompts", "2"})
            .code == 1);
}

TEST_CASE("fine-tuning with zero steps leaves the correlations unchanged") {
  const auto& w = workspace();
  REQUIRE(run({"synth", "--config", w.config.string(), "--out", (w.root / "shifted").string(), "--seed", "4",
               "--rank-shift", "0.5", "--tokens", "8000"})
              .code == 0);
  const auto shifted = w.root / "shifted" / "corpus.txt";
  const auto ft0 = w.root / "ft0";
  REQUIRE(run({"finetune", "--checkpoint", w.causal.string(), "--corpus", shifted.string(), "--config",
               w.config.string(), "--out", ft0.string(), "--steps", "0"})
              .code == 0);
  const auto rep = read_json(ft0 / "shift_report.json");
  CHECK(rep["rho_old_before"] == rep["rho_old_after"]);
  CHECK(rep["rho_new_before"] == rep["rho_new_after"]);
  CHECK(rep["steps"] == 0);

  const auto ft = w.root / "ft";
  REQUIRE(run({"finetune", "--checkpoint", w.causal.string(), "--corpus", shifted.string(), "--config",
               w.config.string(), "--out", ft.string(), "--steps", "20"})
              .code == 0);
  const auto rep2 = read_json(ft / "shift_report.json");
  CHECK(rep2["rho_old_before"] == rep["rho_old_before"]);
  CHECK(rep2["rho_old_after"] != rep2["rho_old_before"]);
  CHECK(fs::is_regular_file(ft / "model.ckpt"));
}
