#include <gtest/gtest.h>

#include <sys/wait.h>

#include <algorithm>
#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "dlac/dlac.hpp"

namespace dlac {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct Run {
  int code = -1;
  std::string out;
};

Run run(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + " " + DLAC_BIN + " " + args + " 2>/dev/null";
  Run r;
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (!pipe) return r;
  std::array<char, 4096> buf;
  std::size_t n;
  while ((n = std::fread(buf.data(), 1, buf.size(), pipe)) > 0) r.out.append(buf.data(), n);
  const int status = ::pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class Cli : public ::testing::Test {
 protected:
  fs::path dir;

  void SetUp() override {
    dir = fs::temp_directory_path() /
          (std::string("dlac_cli_") + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  void TearDown() override { fs::remove_all(dir); }

  std::string p(const std::string& name) const { return (dir / name).string(); }

  void small_corpus(const std::string& name, std::uint64_t seed = 7) {
    ASSERT_EQ(run("generate --m 5 --n-docs 120 --mean-len 60 --seed " + std::to_string(seed) + " --out " + p(name)).code, 0);
  }

  void config(const std::string& name, double lr, std::size_t epochs) {
    std::ofstream(p(name)) << json{{"lr", lr}, {"epochs", epochs}, {"folds", 3}, {"batch_size", 8}, {"d_a", 8},
                                   {"encoder", {{"d_e", 12}}}}
                                  .dump();
  }
};

TEST_F(Cli, GenerateIsByteDeterministic) {
  ASSERT_EQ(run("generate --seed 7 --m 6 --n-docs 50 --mean-len 70 --out " + p("a")).code, 0);
  ASSERT_EQ(run("generate --seed 7 --m 6 --n-docs 50 --mean-len 70 --out " + p("b")).code, 0);
  ASSERT_EQ(run("generate --seed 8 --m 6 --n-docs 50 --mean-len 70 --out " + p("c")).code, 0);
  for (const char* f : {"corpus.jsonl", "labels.jsonl", "keywords.jsonl"}) {
    EXPECT_FALSE(slurp(dir / "a" / f).empty());
    EXPECT_EQ(slurp(dir / "a" / f), slurp(dir / "b" / f)) << f;
  }
  EXPECT_NE(slurp(dir / "a" / "corpus.jsonl"), slurp(dir / "c" / "corpus.jsonl"));
  EXPECT_EQ(load_corpus(p("a/corpus.jsonl")).size(), 50u);
  EXPECT_EQ(load_labels(p("a/labels.jsonl")).size(), 6u);
}

TEST_F(Cli, EnvironmentOverridesDefaults) {
  ASSERT_EQ(run("generate --n-docs 10 --mean-len 60 --out " + p("e"), "DLAC_M=3").code, 0);
  EXPECT_EQ(load_labels(p("e/labels.jsonl")).size(), 3u);
  ASSERT_EQ(run("generate --m 4 --n-docs 10 --mean-len 60 --out " + p("f"), "DLAC_M=3").code, 0);
  EXPECT_EQ(load_labels(p("f/labels.jsonl")).size(), 4u);
}

TEST_F(Cli, PreprocessWritesTokensAndVocabulary) {
  small_corpus("c");
  ASSERT_EQ(run("preprocess --corpus " + p("c/corpus.jsonl") + " --out " + p("pp")).code, 0);
  std::vector<std::string> vocab;
  std::ifstream v(p("pp/vocab.txt"));
  for (std::string line; std::getline(v, line);) vocab.push_back(line);
  const auto docs = load_corpus(p("c/corpus.jsonl"));
  EXPECT_EQ(Vocabulary::from_tokens(vocab), build_vocabulary(docs));
  std::ifstream t(p("pp/tokens.jsonl"));
  std::string first;
  std::getline(t, first);
  const auto j = json::parse(first);
  EXPECT_EQ(j["id"], docs[0].id);
  EXPECT_EQ(j["tokens"].get<std::vector<std::string>>(), preprocess_tokens(docs[0].text));
}

TEST_F(Cli, ZeroLearningRateKeepsInitialization) {
  small_corpus("c");
  config("cfg.json", 0.01, 2);
  ASSERT_EQ(run("train --corpus " + p("c/corpus.jsonl") + " --labels " + p("c/labels.jsonl") + " --config " +
                p("cfg.json") + " --lr 0 --out " + p("m"))
                .code,
            0);
  const auto trained = load_checkpoint(p("m/checkpoint.json"));
  EXPECT_EQ(trained.config.lr, 0.0);
  Checkpoint init{trained.config, trained.seed, trained.vocabulary, trained.labels,
                  Model(trained.config.model, trained.vocabulary, trained.labels, trained.seed), {}};
  auto a = trained.model.parameters();
  auto b = init.model.parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto x = a[i]->value.data();
    const auto y = b[i]->value.data();
    EXPECT_TRUE(std::equal(x.begin(), x.end(), y.begin(), y.end())) << a[i]->name;
  }
  save_checkpoint(init, p("init.json"));
  const auto from_trained = run("predict --all-labels --checkpoint " + p("m/checkpoint.json") + " --corpus " + p("c/corpus.jsonl"));
  const auto from_init = run("predict --all-labels --checkpoint " + p("init.json") + " --corpus " + p("c/corpus.jsonl"));
  ASSERT_EQ(from_trained.code, 0);
  EXPECT_FALSE(from_trained.out.empty());
  EXPECT_EQ(from_trained.out, from_init.out);
  for (const char* f : {"history.json", "metrics.json"}) EXPECT_TRUE(fs::exists(dir / "m" / f)) << f;
  const auto metrics = json::parse(slurp(dir / "m" / "metrics.json"));
  EXPECT_EQ(metrics["folds"].size(), 3u);
  EXPECT_EQ(metrics["test_summary"]["f1_micro"]["folds"], 3);
}

TEST_F(Cli, EvalBeatsLabelShuffledCopy) {
  small_corpus("c");
  config("cfg.json", 0.02, 6);
  ASSERT_EQ(run("train --corpus " + p("c/corpus.jsonl") + " --labels " + p("c/labels.jsonl") + " --config " +
                p("cfg.json") + " --out " + p("m"))
                .code,
            0);
  auto docs = load_corpus(p("c/corpus.jsonl"));
  std::vector<std::vector<std::string>> codes;
  for (const auto& d : docs) codes.push_back(d.codes);
  std::mt19937_64 rng(11);
  std::shuffle(codes.begin(), codes.end(), rng);
  for (std::size_t i = 0; i < docs.size(); ++i) docs[i].codes = codes[i];
  save_corpus(docs, p("shuffled.jsonl"));
  const auto own = run("eval --checkpoint " + p("m/checkpoint.json") + " --corpus " + p("c/corpus.jsonl"));
  const auto shuffled = run("eval --checkpoint " + p("m/checkpoint.json") + " --corpus " + p("shuffled.jsonl"));
  ASSERT_EQ(own.code, 0);
  ASSERT_EQ(shuffled.code, 0);
  const double f_own = json::parse(own.out)["f1_micro"], f_shuffled = json::parse(shuffled.out)["f1_micro"];
  EXPECT_GT(f_own, f_shuffled);
  ASSERT_EQ(run("eval --checkpoint " + p("m/checkpoint.json") + " --corpus " + p("c/corpus.jsonl") + " --out " + p("r.json")).code, 0);
  EXPECT_EQ(json::parse(slurp(dir / "r.json")), json::parse(own.out));
}

TEST(SampleConfigs, ParseAndValidate) {
  for (const char* name : {"desk.json", "long_document.json"}) {
    std::ifstream in(fs::path(DLAC_SAMPLES) / "configs" / name);
    ASSERT_TRUE(in) << name;
    EXPECT_NO_THROW(train_config_from_json(json::parse(in))) << name;
  }
}

TEST_F(Cli, ExitCodes) {
  EXPECT_EQ(run("").code, 1);
  EXPECT_EQ(run("bogus").code, 1);
  EXPECT_EQ(run("--help").code, 0);
  EXPECT_EQ(run("train --corpus x").code, 1);
  EXPECT_EQ(run("eval --checkpoint " + p("missing.json") + " --corpus " + p("missing.jsonl")).code, 2);
  std::ofstream(p("bad.jsonl")) << "{\"id\":\"a\",\"text\":\"x\",\"codes\":[]}\nnot json\n";
  std::ofstream(p("labels.jsonl")) << "{\"code\":\"A\",\"description\":\"alpha\"}\n";
  EXPECT_EQ(run("train --corpus " + p("bad.jsonl") + " --labels " + p("labels.jsonl")).code, 2);
  small_corpus("c");
  std::ofstream(p("cfg.json")) << R"({"lr": 0.1, "unknown_field": 1})";
  EXPECT_EQ(run("train --corpus " + p("c/corpus.jsonl") + " --labels " + p("c/labels.jsonl") + " --config " + p("cfg.json")).code, 1);
  EXPECT_EQ(run("train --corpus " + p("c/corpus.jsonl") + " --labels " + p("c/labels.jsonl") + " --head cnn").code, 1);
  EXPECT_EQ(run("train --corpus " + p("c/corpus.jsonl") + " --labels " + p("labels.jsonl")).code, 2);
  EXPECT_EQ(run("predict --checkpoint " + p("missing.json") + " --corpus " + p("c/corpus.jsonl")).code, 2);
}

}  // namespace
}  // namespace dlac
