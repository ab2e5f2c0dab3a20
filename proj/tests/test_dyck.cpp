#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "mtslm/dyck.hpp"

using namespace mtslm;
namespace fs = std::filesystem;

TEST(DyckGrammar, ScriptedDrawsPickRules) {
  const DyckGrammarParams p;  // 0.25 each
  ScriptedUniform round({0.10, 0.90});
  EXPECT_EQ(generate_dyck_symbols(p, round), "()");
  ScriptedUniform square({0.30, 0.90});
  EXPECT_EQ(generate_dyck_symbols(p, square), "[]");
  // S -> SS -> (S)S -> ()S -> ()[S] -> ()[]
  ScriptedUniform concat({0.60, 0.10, 0.90, 0.30, 0.90});
  EXPECT_EQ(generate_dyck_symbols(p, concat), "()[]");
  // empty expansion is rejected and redrawn
  ScriptedUniform retry({0.90, 0.10, 0.90});
  EXPECT_EQ(generate_dyck_symbols(p, retry), "()");
  EXPECT_EQ(retry.consumed(), 3u);
}

TEST(DyckGrammar, LengthCapRejects) {
  DyckGrammarParams p;
  p.max_len = 2;
  ScriptedUniform draws({0.10, 0.10, 0.10, 0.90});
  EXPECT_EQ(expand_dyck(p, draws), "");
}

TEST(DyckGrammar, InvalidParameters) {
  DyckGrammarParams p;
  p.p1 = 0.5;
  p.p2 = 0.3;
  p.q = 0.3;
  EXPECT_THROW(p.validate(), std::invalid_argument);
  p = {};
  p.max_len = 1;
  EXPECT_THROW(p.validate(), std::invalid_argument);
}

TEST(DyckTargets, InnermostOpenBracket) {
  const auto t = dyck_targets("([])");
  const std::vector<TargetPair> expected{{1, 0}, {0, 1}, {1, 0}, {0, 0}};
  EXPECT_EQ(t, expected);
  EXPECT_THROW(dyck_targets("(]"), std::invalid_argument);
  EXPECT_THROW(dyck_targets("(x"), std::invalid_argument);
}

TEST(DyckDistances, OrderedByOpeningIndex) {
  EXPECT_EQ(pair_distances("([])"), (std::vector<std::size_t>{3, 1}));
  EXPECT_EQ(pair_distances("()[()]"), (std::vector<std::size_t>{1, 3, 1}));
  const auto s = make_dyck_sequence("(()[])");
  EXPECT_EQ(s.max_distance, 5u);
  EXPECT_THROW(pair_distances("(("), std::invalid_argument);
}

TEST(DyckGrammar, SamplesAreBalancedAndBounded) {
  const DyckGrammarParams p;
  Rng rng(123);
  for (int k = 0; k < 100000; ++k) {
    const std::string s = generate_dyck_symbols(p, rng);
    ASSERT_TRUE(is_balanced(s)) << s;
    ASSERT_LE(s.size(), p.max_len);
    ASSERT_FALSE(s.empty());
  }
}

TEST(DyckDataset, SeededAndSplitIndependent) {
  const DyckGrammarParams p;
  const auto a = build_dyck_dataset(p, 30, 5, 7, 42);
  const auto b = build_dyck_dataset(p, 30, 5, 7, 42);
  const auto c = build_dyck_dataset(p, 10, 5, 7, 42);
  ASSERT_EQ(a.train.size(), 30u);
  for (std::size_t k = 0; k < 30; ++k) EXPECT_EQ(a.train[k].symbols, b.train[k].symbols);
  // test split does not depend on the training split size
  for (std::size_t k = 0; k < 7; ++k) EXPECT_EQ(a.test[k].symbols, c.test[k].symbols);
  EXPECT_THROW(build_dyck_dataset(p, 0, 1, 1, 1), std::invalid_argument);
}

TEST(DyckHistogram, PowerLawFitOnExactLaw) {
  std::vector<std::size_t> hist(101, 0);
  for (std::size_t d = 1; d <= 100; d += 2) hist[d] = static_cast<std::size_t>(std::llround(1e6 * std::pow(d, -1.5)));
  const auto fit = fit_power_law(hist, 1, 100);
  EXPECT_NEAR(fit.slope, -1.5, 1e-3);
  EXPECT_GT(fit.r_squared, 0.9999);
  EXPECT_EQ(fit.points, 50u);
  EXPECT_THROW(fit_power_law(hist, 2, 2), std::invalid_argument);
}

TEST(DyckFiles, JsonlRoundTripAndLineErrors) {
  const fs::path dir = fs::temp_directory_path() / "mtslm_test_dyck";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const auto ds = build_dyck_dataset({}, 20, 1, 1, 5);
  write_dyck_jsonl(dir / "train.jsonl", ds.train);
  const auto back = read_dyck_jsonl(dir / "train.jsonl");
  ASSERT_EQ(back.size(), 20u);
  for (std::size_t k = 0; k < 20; ++k) {
    EXPECT_EQ(back[k].symbols, ds.train[k].symbols);
    EXPECT_EQ(back[k].targets, ds.train[k].targets);
    EXPECT_EQ(back[k].max_distance, ds.train[k].max_distance);
  }
  {
    std::ofstream out(dir / "bad.jsonl");
    out << R"j({"symbols": "()"})j" << '\n' << R"j({"symbols": "(]"})j" << '\n';
  }
  try {
    read_dyck_jsonl(dir / "bad.jsonl");
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("bad.jsonl:2"), std::string::npos) << e.what();
  }
  EXPECT_THROW(read_dyck_jsonl(dir / "none.jsonl"), MissingInputError);
}
