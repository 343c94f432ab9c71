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

#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "miss/config.hpp"

namespace miss::config {
namespace {

std::string write_temp(const std::string& name, const std::string& text) {
  const auto path = (std::filesystem::temp_directory_path() / name).string();
  std::ofstream(path) << text;
  return path;
}

TEST(Toml, ParsesScalarsArraysAndComments) {
  const auto t = parse_toml(R"(# header
top = 1
[a]
i = 1_000   # trailing comment
f = 2.5e-1
b = true
s = "x # not a comment \"q\""
arr = [1, 2, 3]
farr = [0.5, 1e-3]
sarr = ["p", "q"]
empty = []
)");
  EXPECT_EQ(t[""]["top"], 1);
  EXPECT_EQ(t["a"]["i"], 1000);
  EXPECT_DOUBLE_EQ(t["a"]["f"].get<double>(), 0.25);
  EXPECT_EQ(t["a"]["b"], true);
  EXPECT_EQ(t["a"]["s"], "x # not a comment \"q\"");
  EXPECT_EQ(t["a"]["arr"], nlohmann::ordered_json::array({1, 2, 3}));
  EXPECT_DOUBLE_EQ(t["a"]["farr"][1].get<double>(), 1e-3);
  EXPECT_EQ(t["a"]["sarr"][1], "q");
  EXPECT_TRUE(t["a"]["empty"].empty());
}

TEST(Toml, MalformedInputNamesTheLine) {
  const auto fails_on_line = [](const std::string& text, const std::string& line) {
    try {
      parse_toml(text);
    } catch (const ConfigError& e) {
      return std::string(e.what()).find("line " + line) != std::string::npos;
    }
    return false;
  };
  EXPECT_TRUE(fails_on_line("[a]\nx = 1\nx = 2\n", "3"));
  EXPECT_TRUE(fails_on_line("[a]\n[a]\n", "2"));
  EXPECT_TRUE(fails_on_line("[a\n", "1"));
  EXPECT_TRUE(fails_on_line("[a]\njust words\n", "2"));
  EXPECT_TRUE(fails_on_line("[a]\nx = \"open\n", "2"));
  EXPECT_TRUE(fails_on_line("[a]\nx = [1, 2\n", "2"));
  EXPECT_TRUE(fails_on_line("[a]\nx = 12abc\n", "2"));
  EXPECT_TRUE(fails_on_line("[a]\nx =\n", "2"));
}

TEST(RunConfig, DefaultsResolveAndPropagateSharedValues) {
  const auto c = config::apply(RunConfig{}, nlohmann::ordered_json::object());
  EXPECT_EQ(c.estimator.T, c.logs.T);
  EXPECT_EQ(c.logs.max_seq_len, c.estimator.m_mm);
  EXPECT_EQ(c.eval.beam_size, c.beam_size);
  EXPECT_EQ(c.eval.seed, derive_seed(c.seed, 8));
}

TEST(RunConfig, ShippedConfigsLoad) {
  const auto small = load(std::string(MISS_SOURCE_DIR) + "/configs/small.toml");
  EXPECT_EQ(small.corpus.n_items, 4096);
  EXPECT_EQ(small.corpus.n_clusters, 64);
  EXPECT_EQ(small.embed.dim, 32);
  EXPECT_EQ(small.logs.n_users, 2000);
  EXPECT_EQ(small.logs.T, 3);
  EXPECT_EQ(small.estimator.m_co, 64);
  EXPECT_EQ(small.estimator.m_mm, 128);
  EXPECT_EQ(small.estimator.k_esu, 8);
  EXPECT_EQ(small.beam_size, 64);
  EXPECT_EQ(small.m_ret, 50);
  const auto tiny = load(std::string(MISS_SOURCE_DIR) + "/configs/tiny.toml");
  EXPECT_EQ(tiny.corpus.n_items, 256);
}

TEST(RunConfig, OverridesWinOverTheFile) {
  const auto path = write_temp("miss_cfg_override.toml", "[run]\nseed = 3\n[train]\nlr = 0.01\n");
  const auto c = load(path, {"run.seed=9", "train.lr = 2e-3", "eval.recall_ks=[1, 2]", "run.out_dir=\"x\""});
  EXPECT_EQ(c.seed, 9u);
  EXPECT_DOUBLE_EQ(c.train.lr, 2e-3);
  EXPECT_EQ(c.eval.recall_ks, (std::vector<int>{1, 2}));
  EXPECT_EQ(c.out_dir, "x");
}

TEST(RunConfig, IntegersAreAcceptedForFloatFields) {
  const auto c = load("", {"train.lr=1"});
  EXPECT_DOUBLE_EQ(c.train.lr, 1.0);
}

TEST(RunConfig, UnknownKeysSectionsAndWrongTypesAreRejected) {
  EXPECT_THROW(load("", {"train.learning_rate=0.1"}), ConfigError);
  EXPECT_THROW(load("", {"bogus.x=1"}), ConfigError);
  EXPECT_THROW(load("", {"train.lr=\"fast\""}), ConfigError);
  EXPECT_THROW(load("", {"train.epochs=1.5"}), ConfigError);
  EXPECT_THROW(load("", {"estimator.use_co_gsu=1"}), ConfigError);
  EXPECT_THROW(load("", {"no-dot=1"}), ConfigError);
  EXPECT_THROW(load("", {"run.seed"}), ConfigError);
}

TEST(RunConfig, InvalidValuesAreRejected) {
  EXPECT_THROW(load("", {"retrieval.m_ret=100", "retrieval.beam_size=64"}), ConfigError);
  EXPECT_THROW(load("", {"eval.recall_ks=[128]"}), ConfigError);
  EXPECT_THROW(load("", {"estimator.m_co=500"}), ConfigError);
  EXPECT_THROW(load("", {"logs.label_rates=[0.5]"}), ConfigError);
  EXPECT_THROW(load("", {"ablation.variants=[\"full\", \"full\"]"}), ConfigError);
  EXPECT_THROW(load("", {"ablation.variants=[\"nope\"]"}), ConfigError);
  EXPECT_THROW(load("", {"run.threads=0"}), ConfigError);
  EXPECT_THROW(load("", {"embed.temperature=0"}), ConfigError);
}

TEST(RunConfig, MissingFileIsAnIoError) {
  EXPECT_THROW(load("/nonexistent/cfg.toml"), IoError);
}

TEST(RunConfig, JsonEchoRoundTrips) {
  const auto c = load("", {"run.seed=11", "estimator.use_mm_gsu=false", "eval.hier_levels=[2, 3]"});
  const auto again = config::apply(RunConfig{}, c.to_json());
  EXPECT_EQ(again.to_json().dump(), c.to_json().dump());
  EXPECT_FALSE(again.estimator.use_mm_gsu);
}

}  // namespace
}  // namespace miss::config
