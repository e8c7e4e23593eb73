#include <gtest/gtest.h>

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <sstream>

#include <json.hpp>

#include "structret/cli.hpp"
#include "test_util.hpp"

namespace structret {
namespace {

namespace fs = std::filesystem;

struct Result {
  int code = 0;
  std::string out;
  std::string err;
};

Result run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  Result r;
  r.code = run_cli(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

nlohmann::json read_json(const std::string& path) { return nlohmann::json::parse(read_file(path)); }

std::vector<std::string> small_corpus(const std::string& dir) {
  return {"gen-data", "--out", dir, "--seed", "1", "--set", "n_pairs=24", "--set", "heldout=8", "--set", "concepts=16"};
}

TEST(Cli, GenDataIsDeterministic) {
  testing::TempDir dir;
  ASSERT_EQ(run(small_corpus(dir.file("a"))).code, kExitOk);
  ASSERT_EQ(run(small_corpus(dir.file("b"))).code, kExitOk);
  const auto a = read_json(dir.file("a/manifest.json"));
  const auto b = read_json(dir.file("b/manifest.json"));
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.at("tool_version"), kToolVersion);
  for (const auto& [name, fp] : a.at("outputs").items()) {
    EXPECT_EQ(read_file(dir.file("a/" + name)), read_file(dir.file("b/" + name))) << name;
  }
  auto other = small_corpus(dir.file("c"));
  other[4] = "2";
  ASSERT_EQ(run(other).code, kExitOk);
  EXPECT_NE(read_json(dir.file("c/manifest.json")).at("config_hash"), a.at("config_hash"));
}

TEST(Cli, StochasticCommandRequiresSeed) {
  testing::TempDir dir;
  const auto r = run({"gen-data", "--out", dir.file("x")});
  EXPECT_EQ(r.code, kExitValidation);
  EXPECT_EQ(nlohmann::json::parse(r.err).at("error"), "validation");
  EXPECT_FALSE(fs::exists(dir.file("x")));
}

TEST(Cli, UnknownKeyIsRejected) {
  testing::TempDir dir;
  const auto r = run({"gen-data", "--out", dir.file("x"), "--seed", "1", "--set", "bogus=3"});
  EXPECT_EQ(r.code, kExitValidation);
  EXPECT_NE(r.err.find("bogus"), std::string::npos);
  EXPECT_EQ(run({"gen-data", "--out", dir.file("x"), "--seed", "1", "--set", "n_pairs=abc"}).code, kExitValidation);
}

TEST(Cli, ConfigFileSectionsApply) {
  testing::TempDir dir;
  dir.write("cfg.json", R"({"seed": 5, "gen-data": {"n_pairs": 20, "heldout": 4, "concepts": 16}})");
  ASSERT_EQ(run({"--config", dir.file("cfg.json"), "gen-data", "--out", dir.file("c")}).code, kExitOk);
  const auto m = read_json(dir.file("c/manifest.json"));
  EXPECT_EQ(m.at("config").at("n_pairs"), 20);
  EXPECT_EQ(m.at("config").at("seed"), 5);
}

TEST(Cli, EvalNamesUnjudgedQueryAndLeavesNoOutput) {
  testing::TempDir dir;
  ASSERT_EQ(run(small_corpus(dir.file("c"))).code, kExitOk);
  dir.write("run.trec", "q0000 Q0 d0000 1 1.0 t\nmystery Q0 d0001 1 1.0 t\n");
  const auto r = run({"eval", "--run", dir.file("run.trec"), "--corpus", dir.file("c"), "--out", dir.file("ev")});
  EXPECT_EQ(r.code, kExitValidation);
  EXPECT_NE(r.err.find("mystery"), std::string::npos);
  EXPECT_FALSE(fs::exists(dir.file("ev")));
}

TEST(Cli, FailedRunLeavesExistingOutputsIntact) {
  testing::TempDir dir;
  ASSERT_EQ(run(small_corpus(dir.file("c"))).code, kExitOk);
  dir.write("good.trec", "q0000 Q0 d0000 1 1.0 t\n");
  dir.write("bad.trec", "nobody Q0 d0000 1 1.0 t\n");
  ASSERT_EQ(run({"eval", "--run", dir.file("good.trec"), "--corpus", dir.file("c"), "--out", dir.file("ev")}).code,
            kExitOk);
  const auto before = read_file(dir.file("ev/metrics.json"));
  EXPECT_EQ(run({"eval", "--run", dir.file("bad.trec"), "--corpus", dir.file("c"), "--out", dir.file("ev")}).code,
            kExitValidation);
  EXPECT_EQ(read_file(dir.file("ev/metrics.json")), before);
}

TEST(Cli, RefusesToWriteIntoInputDirectory) {
  testing::TempDir dir;
  ASSERT_EQ(run(small_corpus(dir.file("c"))).code, kExitOk);
  const auto manifest = read_file(dir.file("c/manifest.json"));
  EXPECT_EQ(run({"extract", "--corpus", dir.file("c"), "--out", dir.file("c")}).code, kExitValidation);
  EXPECT_EQ(read_file(dir.file("c/manifest.json")), manifest);
}

TEST(Cli, HelpAndUnknownCommand) {
  EXPECT_EQ(run({"--help"}).code, kExitOk);
  EXPECT_EQ(run({"frobnicate"}).code, kExitValidation);
}

TEST(Cli, GradCheckPasses) {
  testing::TempDir dir;
  const auto r = run({"grad-check", "--out", dir.file("g"), "--seed", "1"});
  EXPECT_EQ(r.code, kExitOk) << r.err;
  const auto report = read_json(dir.file("g/gradcheck.json"));
  EXPECT_TRUE(report.is_object());
}

TEST(Cli, FullPipelineRuns) {
  const auto start = std::chrono::steady_clock::now();
  testing::TempDir dir;
  const auto d = [&](const std::string& n) { return dir.file(n); };
  const std::vector<std::vector<std::string>> steps{
      small_corpus(d("c")),
      {"extract", "--corpus", d("c"), "--out", d("ent")},
      {"mask", "--corpus", d("c"), "--entities", d("ent"), "--out", d("m")},
      {"pretrain", "--corpus", d("c"), "--masked", d("m"), "--out", d("pt"), "--seed", "1", "--set", "steps=10",
       "--set", "d_model=16", "--set", "ffn_dim=32", "--set", "n_layers=1", "--set", "batch_size=8"},
      {"mine", "--corpus", d("c"), "--model", d("pt"), "--out", d("neg"), "--seed", "1"},
      {"finetune", "--corpus", d("c"), "--model", d("pt"), "--negatives", d("neg"), "--out", d("ft"), "--seed", "1",
       "--set", "steps=5", "--set", "batch_size=8"},
      {"index", "--corpus", d("c"), "--model", d("ft"), "--out", d("idx"), "--set", "export=true"},
      {"search", "--index", d("idx"), "--model", d("ft"), "--corpus", d("c"), "--out", d("run")},
      {"eval", "--run", d("run/run.trec"), "--corpus", d("c"), "--out", d("ev")},
      {"diagnose", "--corpus", d("c"), "--model", d("ft"), "--out", d("dg")},
  };
  for (const auto& args : steps) {
    const auto r = run(args);
    ASSERT_EQ(r.code, kExitOk) << args[0] << ": " << r.err;
    const auto out = std::find(args.begin(), args.end(), "--out");
    EXPECT_TRUE(fs::exists(fs::path(*(out + 1)) / "manifest.json")) << args[0];
  }
  const auto metrics = read_json(d("ev/metrics.json"));
  EXPECT_EQ(metrics.at("per_query").size(), 8u);
  EXPECT_GE(metrics.at("mrr").get<double>(), 0.0);
  EXPECT_TRUE(fs::exists(d("idx/embeddings.tsv")));
  const auto geo = read_json(d("dg/geometry.json"));
  EXPECT_TRUE(geo.contains("alignment"));
  EXPECT_LT(std::chrono::steady_clock::now() - start, std::chrono::minutes(10));
}

}  // namespace
}  // namespace structret
