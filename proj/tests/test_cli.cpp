#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "mtslm/cli.hpp"

using namespace mtslm;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code = 0;
  std::string out, err;
};

CliResult invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "mtslm");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream f(p, std::ios::binary);
  f << s;
}

std::string slurp(const fs::path& p) { return detail::read_file(p); }

std::size_t csv_rows(const fs::path& p) { return read_csv(p).rows.size(); }

// Small text with a repeating sentence structure.
std::string synthetic_text(std::size_t sentences, std::uint64_t seed) {
  Rng rng(seed);
  const std::vector<std::string> subj{"the cat", "a dog", "my friend", "the old man", "some birds"};
  const std::vector<std::string> verb{"saw", "liked", "found", "chased", "heard"};
  const std::vector<std::string> obj{"the ball", "a tree", "the river", "a small house", "the red car"};
  std::string text;
  for (std::size_t k = 0; k < sentences; ++k)
    text += subj[rng.below(5)] + " " + verb[rng.below(5)] + " " + obj[rng.below(5)] + " today\n";
  return text;
}

class CliPipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = fs::temp_directory_path() / "mtslm_test_cli";
    fs::remove_all(root_);
    fs::create_directories(root_);
    write_text(root_ / "train.txt", synthetic_text(300, 1));
    write_text(root_ / "valid.txt", synthetic_text(40, 2) + "unseen words here\n");
    write_text(root_ / "test.txt", synthetic_text(60, 3));
    write_text(root_ / "lm.json", R"({"seed": 3,
      "model": {"preset": "mts", "embedding_size": 8, "layer_sizes": [12, 8], "alpha": 0.56},
      "optimizer": {"epochs": 3, "batch_size": 4, "eval_batch_size": 2}})");
    write_text(root_ / "base.json", R"({"seed": 3,
      "model": {"preset": "baseline", "embedding_size": 8, "layer_sizes": [12, 8]},
      "optimizer": {"epochs": 3, "batch_size": 4, "eval_batch_size": 2}})");
    ASSERT_EQ(invoke({"prepare-corpus", "--train", (root_ / "train.txt").string(), "--valid",
                      (root_ / "valid.txt").string(), "--test", (root_ / "test.txt").string(), "--out",
                      (root_ / "corpus").string()})
                  .code,
              0);
  }

  static fs::path root_;
};

fs::path CliPipeline::root_;

}  // namespace

TEST(CliExitCodes, UsageErrors) {
  EXPECT_EQ(invoke({}).code, 2);
  EXPECT_EQ(invoke({"gen-dyck", "--out", "x", "--bogus"}).code, 2);
  EXPECT_EQ(invoke({"gen-dyck"}).code, 2);
  EXPECT_EQ(invoke({"no-such-command"}).code, 2);
  EXPECT_EQ(invoke({"--version"}).code, 0);
}

TEST(CliExitCodes, SchemaAndMissingInput) {
  const fs::path dir = fs::temp_directory_path() / "mtslm_test_cli_codes";
  fs::remove_all(dir);
  fs::create_directories(dir);
  write_text(dir / "unknown.json", R"({"seed": 1, "n_trian": 5})");
  write_text(dir / "wrongtype.json", R"({"seed": "one"})");
  write_text(dir / "broken.json", "{");
  write_text(dir / "nested.json", R"({"optimizer": {"lr": "fast"}})");
  const auto out = (dir / "d").string();
  const auto r = invoke({"gen-dyck", "--out", out, "--config", (dir / "unknown.json").string()});
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("n_trian"), std::string::npos) << r.err;
  EXPECT_EQ(invoke({"gen-dyck", "--out", out, "--config", (dir / "wrongtype.json").string()}).code, 3);
  EXPECT_EQ(invoke({"gen-dyck", "--out", out, "--config", (dir / "broken.json").string()}).code, 3);
  EXPECT_EQ(invoke({"train-dyck", "--data", out, "--out", out, "--config", (dir / "nested.json").string()}).code, 3);
  EXPECT_EQ(invoke({"gen-dyck", "--out", out, "--config", (dir / "absent.json").string()}).code, 4);
  EXPECT_EQ(invoke({"train-lm", "--corpus", (dir / "nope").string(), "--out", out}).code, 4);
  EXPECT_EQ(invoke({"eval", "--model", (dir / "nope.ckpt").string(), "--corpus", out, "--report", out}).code, 4);
}

TEST(CliDyck, GenerationIsByteReproducible) {
  const fs::path dir = fs::temp_directory_path() / "mtslm_test_cli_dyck";
  fs::remove_all(dir);
  fs::create_directories(dir);
  write_text(dir / "cfg.json", R"({"seed": 7, "n_train": 100, "n_valid": 20, "n_test": 50})");
  for (const char* d : {"a", "b"})
    ASSERT_EQ(invoke({"gen-dyck", "--out", (dir / d).string(), "--config", (dir / "cfg.json").string()}).code, 0);
  for (const char* f : {"train.jsonl", "valid.jsonl", "test.jsonl", "config.json"})
    EXPECT_EQ(slurp(dir / "a" / f), slurp(dir / "b" / f)) << f;
  EXPECT_EQ(read_dyck_jsonl(dir / "a" / "test.jsonl").size(), 50u);
  const auto cfg = nlohmann::json::parse(slurp(dir / "a" / "config.json"));
  EXPECT_EQ(cfg.at("command"), "gen-dyck");
  EXPECT_EQ(cfg.at("config").at("p1"), 0.25);
  EXPECT_TRUE(cfg.contains("version"));

  write_text(dir / "train.json", R"({"seed": 1, "model": {"hidden_size": 6, "timescale": "mts"},
    "optimizer": {"epochs": 2, "lr": 0.01}})");
  ASSERT_EQ(invoke({"train-dyck", "--data", (dir / "a").string(), "--out", (dir / "run").string(), "--config",
                    (dir / "train.json").string()})
                .code,
            0);
  EXPECT_EQ(csv_rows(dir / "run" / "train_log.csv"), 2u);
  const auto r = invoke({"dyck-eval", "--model", (dir / "run" / "model.ckpt").string(), "--data",
                         (dir / "a").string(), "--report", (dir / "rep").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto summary = nlohmann::json::parse(slurp(dir / "rep" / "dyck_summary.json"));
  EXPECT_EQ(summary.at("n"), 50);
  EXPECT_GE(csv_rows(dir / "rep" / "dyck_acc.csv"), 1u);
}

TEST_F(CliPipeline, TrainEvaluateAnalyseReport) {
  const auto corpus = (root_ / "corpus").string();
  const auto meta = nlohmann::json::parse(slurp(root_ / "corpus" / "meta.json"));
  EXPECT_EQ(meta.at("provenance"), "natural");

  for (const char* which : {"lm", "base"}) {
    const auto r = invoke({"train-lm", "--corpus", corpus, "--out", (root_ / which).string(), "--config",
                           (root_ / (std::string(which) + ".json")).string()});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(csv_rows(root_ / which / "train_log.csv"), 3u);
  }
  const auto mts_ckpt = (root_ / "lm" / "model.ckpt").string();

  write_text(root_ / "eval.json", R"({"label": "mts", "resamples": 200})");
  auto r = invoke({"eval", "--model", mts_ckpt, "--corpus", corpus, "--report", (root_ / "eval").string(),
                   "--config", (root_ / "eval.json").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(csv_rows(root_ / "eval" / "table1.csv"), 5u);
  r = invoke({"eval", "--model", mts_ckpt, "--baseline", (root_ / "base" / "model.ckpt").string(), "--corpus", corpus,
              "--report", (root_ / "eval2").string(), "--config", (root_ / "eval.json").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(csv_rows(root_ / "eval2" / "table1.csv"), 10u);
  EXPECT_GE(csv_rows(root_ / "eval2" / "bootstrap.csv"), 2u);

  write_text(root_ / "fit.json", R"({"layer": 1, "sequences": 5, "steps": 20, "heatmap_group": 4})");
  r = invoke({"fit-timescales", "--model", mts_ckpt, "--corpus", corpus, "--report", (root_ / "fit").string(),
              "--config", (root_ / "fit.json").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(csv_rows(root_ / "fit" / "timescales.csv"), 8u);
  EXPECT_EQ(csv_rows(root_ / "fit" / "ksfit.csv"), 60u);
  EXPECT_EQ(csv_rows(root_ / "fit" / "heatmap.csv"), 2u * 20u);

  write_text(root_ / "ablate.json", R"({"layer": 0, "group_size": 4, "max_tokens": 300})");
  r = invoke({"ablate", "--model", mts_ckpt, "--corpus", corpus, "--report", (root_ / "ablate").string(), "--config",
              (root_ / "ablate.json").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_GE(csv_rows(root_ / "ablate" / "routing.csv"), 3u);

  write_text(root_ / "word.json", R"({"ablate_pos": 1, "min_length": 5, "sentences": 10, "group_size": 4})");
  r = invoke({"word-ablate", "--model", mts_ckpt, "--corpus", corpus, "--report", (root_ / "word").string(),
              "--config", (root_ / "word.json").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_GT(csv_rows(root_ / "word" / "decay.csv"), 0u);

  const fs::path bundle = root_ / "bundle.json";
  r = invoke({"report", "--run", (root_ / "eval").string(), "--run", (root_ / "fit").string(), "--out",
              bundle.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(slurp(bundle));
  EXPECT_EQ(j.at("runs").size(), 2u);
  EXPECT_TRUE(j.at("runs").at("eval").at("reports").contains("table1.csv"));
  EXPECT_EQ(j.at("runs").at("fit").at("config").at("command"), "fit-timescales");
  EXPECT_NE(j.at("version").get<std::string>().find("mtslm"), std::string::npos);

  r = invoke({"report", "--run", (root_ / "eval").string()});
  ASSERT_EQ(r.code, 0);
  EXPECT_EQ(nlohmann::json::parse(r.out).at("runs").size(), 1u);
}

TEST_F(CliPipeline, MarkovAndSweep) {
  const auto corpus = (root_ / "corpus").string();
  write_text(root_ / "markov.json", R"({"seed": 5})");
  ASSERT_EQ(invoke({"gen-markov", "--corpus", corpus, "--out", (root_ / "markov").string(), "--config",
                    (root_ / "markov.json").string()})
                .code,
            0);
  const auto m = load_corpus_dir(root_ / "markov");
  EXPECT_EQ(m.provenance, Provenance::markov_bigram);

  write_text(root_ / "sweep.json", R"({"seed": 1, "alphas": [0.5, 1.5],
    "model": {"embedding_size": 6, "layer_sizes": [6, 6]},
    "optimizer": {"epochs": 1, "batch_size": 4, "eval_batch_size": 2}})");
  const auto r = invoke({"sweep-alpha", "--corpus", corpus, "--out", (root_ / "sweep").string(), "--config",
                         (root_ / "sweep.json").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(csv_rows(root_ / "sweep" / "sweep.csv"), 2u);
  EXPECT_TRUE(fs::exists(root_ / "sweep" / "alpha_1" / "model.ckpt"));

  write_text(root_ / "sweep_bad.json", R"({"seed": 1})");
  EXPECT_EQ(invoke({"sweep-alpha", "--corpus", corpus, "--out", (root_ / "s2").string(), "--config",
                    (root_ / "sweep_bad.json").string()})
                .code,
            3);
}

TEST_F(CliPipeline, ReportNamesCorruptCsvLine) {
  const fs::path run = root_ / "corrupt_run";
  fs::create_directories(run);
  write_text(run / "table1.csv", "model,bin,perplexity\nmts,All,12.5\nmts,broken\n");
  const auto r = invoke({"report", "--run", run.string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("table1.csv:3"), std::string::npos) << r.err;
  EXPECT_EQ(invoke({"report", "--run", (root_ / "missing_run").string()}).code, 4);
}
