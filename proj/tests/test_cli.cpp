// Copyright 2026 The MISS Retrieval Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
// =============================================================================

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include <gtest/gtest.h>
#include <json.hpp>

namespace {

namespace fs = std::filesystem;

const std::string kTiny = std::string(MISS_SOURCE_DIR) + "/configs/tiny.toml";

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "miss_cli_test" / name;
  fs::remove_all(dir);
  fs::create_directories(dir.parent_path());
  return dir;
}

struct Run {
  int code;
  std::string err;
};

Run miss(const std::string& args) {
  const auto err = fs::temp_directory_path() / "miss_cli_test" /
                   (std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()) + ".stderr");
  fs::create_directories(err.parent_path());
  const std::string cmd = std::string(MISS_CLI) + " " + args + " >/dev/null 2>" + err.string();
  const int status = std::system(cmd.c_str());
  std::ifstream in(err);
  std::stringstream ss;
  ss << in.rdbuf();
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, ss.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Drops the trailing wall-clock column of the training metrics.
std::string without_wall_clock(const std::string& csv) {
  std::istringstream in(csv);
  std::string line, out;
  while (std::getline(in, line)) out += line.substr(0, line.rfind(',')) + "\n";
  return out;
}

std::map<std::string, std::string> artifacts(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), dir).string();
    if (rel == "timings.json") continue;
    out[rel] = rel == "train_metrics.csv" ? without_wall_clock(slurp(e.path())) : slurp(e.path());
  }
  return out;
}

TEST(Cli, PipelineWritesEveryArtifact) {
  const auto dir = scratch("full");
  ASSERT_EQ(miss("pipeline -c " + kTiny + " -o " + dir.string()).code, 0);
  for (const char* name : {"run_config.json", "corpus.bin", "train_logs.csv", "test_logs.csv", "embeddings.mmeb",
                           "embeddings.csv", "embed_loss.csv", "tree.mtree", "model.ckpt", "train_metrics.csv",
                           "retrieval.jsonl", "report.json", "timings.json", "attention_co.csv", "attention_mm.csv",
                           "attention_hist.csv", "attention_summary.json"})
    EXPECT_TRUE(fs::exists(dir / name)) << name;
  EXPECT_TRUE(fs::exists(dir / "checkpoints" / "ckpt_50.bin"));

  const auto report = nlohmann::json::parse(slurp(dir / "report.json"));
  EXPECT_EQ(report["seed"], 7);
  EXPECT_EQ(report["config"]["corpus"]["n_items"], 256);
  const auto r10 = report["metrics"]["recall"]["10"]["mean"].get<double>();
  EXPECT_GE(r10, 0.0);
  EXPECT_LE(r10, 1.0);
  EXPECT_EQ(report["metrics"]["leaf_equivalence_violations"], 0);

  std::ifstream jsonl(dir / "retrieval.jsonl");
  std::string line;
  int users = 0;
  while (std::getline(jsonl, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j["items"].size(), 10u);
    ++users;
  }
  EXPECT_EQ(users, 120);
}

TEST(Cli, RepeatedRunsAreByteIdentical) {
  const auto dir = scratch("det");
  const std::string args = "pipeline -c " + kTiny + " --seed 1 -o " + dir.string();
  ASSERT_EQ(miss(args).code, 0);
  const auto first = artifacts(dir);
  fs::remove_all(dir);
  ASSERT_EQ(miss(args).code, 0);
  EXPECT_EQ(artifacts(dir), first);

  const auto other = scratch("det_seed");
  ASSERT_EQ(miss("pipeline -c " + kTiny + " --seed 2 -o " + other.string()).code, 0);
  EXPECT_NE(artifacts(other).at("retrieval.jsonl"), first.at("retrieval.jsonl"));
}

TEST(Cli, ThreadCountDoesNotChangeResults) {
  const auto a = scratch("threads_1"), b = scratch("threads_3");
  ASSERT_EQ(miss("pipeline -c " + kTiny + " -o " + a.string()).code, 0);
  ASSERT_EQ(miss("pipeline -c " + kTiny + " --threads 3 -o " + b.string()).code, 0);
  const auto fa = artifacts(a), fb = artifacts(b);
  // These carry no config echo, so they compare across differing run settings.
  for (const char* name : {"train_logs.csv", "test_logs.csv", "embeddings.csv", "embed_loss.csv", "train_metrics.csv",
                           "retrieval.jsonl", "attention_co.csv", "attention_mm.csv", "attention_hist.csv"})
    EXPECT_EQ(fa.at(name), fb.at(name)) << name;
  const auto ra = nlohmann::json::parse(fa.at("report.json")), rb = nlohmann::json::parse(fb.at("report.json"));
  EXPECT_EQ(ra["metrics"], rb["metrics"]);
}

TEST(Cli, StagewiseRunMatchesPipeline) {
  const auto dir = scratch("staged");
  ASSERT_EQ(miss("pipeline -c " + kTiny + " -o " + dir.string()).code, 0);
  const auto whole = artifacts(dir);
  fs::remove_all(dir);
  for (const char* stage : {"gen-data", "train-embed", "build-tree", "train", "retrieve", "eval", "export-attention"})
    ASSERT_EQ(miss(std::string(stage) + " -c " + kTiny + " -o " + dir.string()).code, 0) << stage;
  EXPECT_EQ(artifacts(dir), whole);
}

TEST(Cli, MissingInputsAreDependencyErrorsNamingTheStage) {
  const auto dir = scratch("deps");
  ASSERT_EQ(miss("gen-data -c " + kTiny + " -o " + dir.string()).code, 0);
  ASSERT_EQ(miss("train-embed -c " + kTiny + " -o " + dir.string()).code, 0);
  const auto r = miss("train -c " + kTiny + " -o " + dir.string());
  EXPECT_EQ(r.code, 5);
  EXPECT_NE(r.err.find("build-tree"), std::string::npos) << r.err;
  EXPECT_EQ(miss("eval -c " + kTiny + " -o " + scratch("empty").string()).code, 5);
}

TEST(Cli, ErrorClassesMapToDistinctExitCodes) {
  const auto dir = scratch("codes");
  EXPECT_EQ(miss("").code, 2);
  EXPECT_EQ(miss("frobnicate").code, 2);
  EXPECT_EQ(miss("gen-data -c " + kTiny + " --set train.nope=1 -o " + dir.string()).code, 2);
  EXPECT_EQ(miss("gen-data -c /nonexistent/x.toml").code, 3);
  ASSERT_EQ(miss("pipeline -c " + kTiny + " -o " + dir.string()).code, 0);
  std::ofstream(dir / "tree.mtree", std::ios::binary | std::ios::trunc) << "garbage";
  EXPECT_EQ(miss("retrieve -c " + kTiny + " -o " + dir.string()).code, 4);
  EXPECT_EQ(miss("--help").code, 0);
}

}  // namespace
