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
#include <numeric>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "miss/eval.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"

namespace miss::eval {
namespace {

using retrieval::BeamTrace;
using retrieval::ScoredNode;

tree::IndexTree eight_leaf_tree() {
  tree::IndexTree t(3, 1, 8);
  const std::vector<ItemId> leaves{0, 1, 2, 3, 4, 5, 6, 7};
  t.assign_leaves(leaves, MatF::Zero(8, 1));
  return t;
}

BeamTrace trace_of(std::vector<std::vector<NodeId>> levels) {
  BeamTrace t;
  for (const auto& l : levels) {
    t.levels.emplace_back();
    for (NodeId n : l) t.levels.back().push_back({n, 0.0});
  }
  return t;
}

TEST(Recall, Examples) {
  const std::vector<ItemId> rel{1, 2};
  EXPECT_EQ(recall_at_k(std::vector<ItemId>{1, 2, 3}, rel), 1.0);
  EXPECT_EQ(recall_at_k(std::vector<ItemId>{4, 5}, rel), 0.0);
  EXPECT_EQ(recall_at_k(std::vector<ItemId>{1, 9}, rel), 0.5);
  EXPECT_EQ(recall_at_k(std::vector<ItemId>{1, 1, 1}, rel), 0.5) << "duplicates count once";
  EXPECT_EQ(recall_at_k(std::vector<ItemId>{1, 2}, std::vector<ItemId>{1, 1, 2}), 1.0);
  EXPECT_FALSE(recall_at_k(std::vector<ItemId>{1}, std::vector<ItemId>{}).has_value());
}

TEST(HierRecall, Examples) {
  const auto tree = eight_leaf_tree();
  // Items 0, 1 share level-1 ancestor 1 and level-2 ancestor 3; item 6 sits under 2 and 6.
  const auto trace = trace_of({{0}, {1}, {3, 4}, {7, 8}});
  EXPECT_EQ(hier_recall(trace, std::vector<ItemId>{0, 1}, tree, 1), 1.0);
  EXPECT_EQ(hier_recall(trace, std::vector<ItemId>{0, 1}, tree, 2), 1.0);
  EXPECT_EQ(hier_recall(trace, std::vector<ItemId>{0, 6}, tree, 1), 0.5);
  EXPECT_EQ(hier_recall(trace, std::vector<ItemId>{0, 2}, tree, 2), 1.0);
  EXPECT_EQ(hier_recall(trace, std::vector<ItemId>{0, 2, 6}, tree, 3), 1.0 / 3.0);
  EXPECT_FALSE(hier_recall(trace, std::vector<ItemId>{}, tree, 2).has_value());
  EXPECT_THROW(hier_recall(trace, std::vector<ItemId>{0}, tree, 4), ConfigError);
  EXPECT_THROW(hier_recall(trace_of({{0}, {1}}), std::vector<ItemId>{0}, tree, 2), LookupError);
}

TEST(HierRecall, FinalLevelEqualsRecallOverBeamLeaves) {
  Rng rng = make_rng(1);
  const auto store = oracle::random_store(50, 3, 2);
  const auto tree = tree::build_tree(store, 3);
  std::vector<double> s(static_cast<std::size_t>(tree.n_nodes()));
  for (int trial = 0; trial < 100; ++trial) {
    for (auto& x : s) x = uniform01(rng);
    const int k = 1 + trial % 20;
    const auto r = retrieval::retrieve(tree, k, k, [&](NodeId n) { return s[n]; });
    std::vector<ItemId> rel = fixture::random_sequence(50, 1 + trial % 6, rng);
    std::vector<ItemId> got;
    for (const auto& it : r.items) got.push_back(it.item);
    EXPECT_EQ(hier_recall(r.beams, rel, tree, tree.height()), recall_at_k(got, rel));
  }
}

TEST(Overlap, Examples) {
  using Sets = std::vector<std::vector<int>>;
  EXPECT_EQ(overlap_rate(Sets{{1, 2, 3}}, Sets{{3, 2, 1}}), 1.0);
  EXPECT_EQ(overlap_rate(Sets{{1, 2, 3}}, Sets{{4, 5, 6}}), 0.0);
  EXPECT_DOUBLE_EQ(overlap_rate(Sets{{1, 2, 3}}, Sets{{3, 4, 5}}), 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(overlap_rate(Sets{{1, 2}, {1, 2}}, Sets{{1, 2}, {3, 4}}), 0.5);
  EXPECT_EQ(overlap_rate(Sets{{}, {7}}, Sets{{}, {7}}), 1.0) << "empty selections are skipped";
  EXPECT_THROW(overlap_rate(Sets{{1}}, Sets{}), ConfigError);
  EXPECT_THROW(overlap_rate(Sets{{1, 2}}, Sets{{1}}), ConfigError);
}

TEST(MeanStd, SampleStatistics) {
  const std::vector<double> v{1.0, 2.0, 3.0, 4.0};
  const auto m = mean_std(v);
  EXPECT_DOUBLE_EQ(m.mean, 2.5);
  EXPECT_DOUBLE_EQ(m.std, std::sqrt(5.0 / 3.0));
  EXPECT_EQ(m.n, 4);
  EXPECT_EQ(mean_std(std::vector<double>{0.3}).std, 0.0);
  EXPECT_EQ(mean_std(std::vector<double>{}).n, 0);
}

struct Suite {
  fixture::World world;
  std::vector<EvalUser> users;
};

Suite make_suite(std::uint64_t seed) {
  auto cfg = fixture::small_config();
  Suite s{fixture::make_world(60, 3, cfg, seed), {}};
  Rng rng = make_rng(seed, 1);
  for (UserId u = 0; u < 25; ++u) {
    EvalUser e;
    e.user = u;
    e.sequence = fixture::random_sequence(60, static_cast<int>(u % 10), rng);
    if (u % 8 != 7) e.relevant = fixture::random_sequence(60, 1 + static_cast<int>(u % 4), rng);
    s.users.push_back(std::move(e));
  }
  return s;
}

EvalConfig small_eval(int threads) {
  EvalConfig c;
  c.recall_ks = {2, 5, 8};
  c.beam_size = 8;
  c.hier_beam_sizes = {2, 4, 8};
  c.n_splits = 5;
  c.heap_users = 10;
  c.heap_candidates = 4;
  c.threads = threads;
  c.seed = 77;
  return c;
}

TEST(Evaluate, ReportIsWellFormedAndConsistent) {
  const auto s = make_suite(4);
  const auto r = evaluate(s.users, s.world.params, s.world.tree, s.world.store, small_eval(1));
  EXPECT_EQ(r.users_evaluated, 22);
  EXPECT_EQ(r.users_skipped, 3);
  EXPECT_EQ(r.leaf_equivalence_violations, 0);
  for (const auto* grid : {&r.recall, &r.random_recall}) {
    ASSERT_EQ(grid->size(), 3u);
    for (const auto& [k, m] : *grid) {
      EXPECT_GE(m.mean, 0.0);
      EXPECT_LE(m.mean, 1.0);
      EXPECT_GE(m.std, 0.0);
      EXPECT_EQ(m.n, 5);
    }
  }
  EXPECT_LE(r.recall.at(2).mean, r.recall.at(8).mean);
  ASSERT_EQ(r.hier_recall.size(), 3u);
  for (const auto& [b, levels] : r.hier_recall) {
    ASSERT_EQ(levels.size(), static_cast<std::size_t>(s.world.tree.height()));
    for (const auto& [h, m] : levels) {
      EXPECT_GE(m.mean, 0.0);
      EXPECT_LE(m.mean, 1.0);
    }
  }
  // Final level at the retrieval beam equals Recall at that beam size.
  EXPECT_DOUBLE_EQ(r.hier_recall.at(8).at(s.world.tree.height()).mean, r.recall.at(8).mean);
  EXPECT_GE(r.overlap_rate, 0.0);
  EXPECT_LE(r.overlap_rate, 1.0);
  EXPECT_GE(r.heap_tendency, 0.0);
  EXPECT_LE(r.heap_tendency, 1.0);

  const auto j = r.metrics_json();
  EXPECT_TRUE(j.contains("recall"));
  EXPECT_TRUE(j["hier_recall"].contains("4"));
  EXPECT_EQ(j["users_skipped"], 3);
}

TEST(Evaluate, DeterministicAcrossThreadCounts) {
  const auto s = make_suite(5);
  const auto a = evaluate(s.users, s.world.params, s.world.tree, s.world.store, small_eval(1));
  const auto b = evaluate(s.users, s.world.params, s.world.tree, s.world.store, small_eval(3));
  EXPECT_EQ(a.metrics_json().dump(), b.metrics_json().dump());
}

TEST(Evaluate, LevelSubsetAndInvalidConfigs) {
  const auto s = make_suite(6);
  auto cfg = small_eval(1);
  cfg.hier_levels = {2, 4};
  const auto r = evaluate(s.users, s.world.params, s.world.tree, s.world.store, cfg);
  EXPECT_EQ(r.hier_recall.at(4).size(), 2u);
  cfg.hier_levels = {s.world.tree.height() + 1};
  EXPECT_THROW(evaluate(s.users, s.world.params, s.world.tree, s.world.store, cfg), ConfigError);
  cfg = small_eval(1);
  cfg.recall_ks = {9};
  EXPECT_THROW(evaluate(s.users, s.world.params, s.world.tree, s.world.store, cfg), ConfigError);
  cfg = small_eval(1);
  cfg.n_splits = 0;
  EXPECT_THROW(evaluate(s.users, s.world.params, s.world.tree, s.world.store, cfg), ConfigError);
}

TEST(Attention, RowsAreSoftmaxesOverTheWindows) {
  Rng rng = make_rng(7);
  const auto w = fixture::make_world(40, 3, fixture::small_config(), 8);
  std::vector<AttentionQuery> queries;
  for (UserId u = 0; u < 12; ++u)
    queries.push_back({u, fixture::random_sequence(40, 1 + static_cast<int>(u), rng), fixture::random_node(w.tree, rng)});
  const auto d = attention_scores(queries, w.params, w.tree, w.store);
  ASSERT_EQ(d.co_rows.size(), 12u);
  for (std::size_t i = 0; i < 12; ++i) {
    const std::size_t len = queries[i].sequence.size();
    EXPECT_EQ(d.co_rows[i].size(), std::min<std::size_t>(len, 6));
    EXPECT_EQ(d.mm_rows[i].size(), std::min<std::size_t>(len, 9));
    EXPECT_NEAR(std::accumulate(d.co_rows[i].begin(), d.co_rows[i].end(), 0.0), 1.0, 1e-6);
    EXPECT_NEAR(std::accumulate(d.mm_rows[i].begin(), d.mm_rows[i].end(), 0.0), 1.0, 1e-6);
  }
  const int total = std::accumulate(d.co_hist.begin(), d.co_hist.end(), 0);
  std::size_t cells = 0;
  for (const auto& r : d.co_rows) cells += r.size();
  EXPECT_EQ(static_cast<std::size_t>(total), cells);
  EXPECT_EQ(d.co_hist.size(), static_cast<std::size_t>(kHistogramBins));
  EXPECT_GE(d.co_mean_entropy, 0.0);

  const auto again = attention_scores(queries, w.params, w.tree, w.store);
  EXPECT_EQ(again.co_rows, d.co_rows);
  EXPECT_EQ(again.mm_rows, d.mm_rows);
}

TEST(Attention, FilesHaveOneRowPerUserAndFiftyBinsPerBranch) {
  Rng rng = make_rng(9);
  const auto w = fixture::make_world(30, 3, fixture::small_config(), 10);
  std::vector<AttentionQuery> queries{{3, fixture::random_sequence(30, 4, rng), 0},
                                      {5, fixture::random_sequence(30, 9, rng), 1}};
  const auto dir = (std::filesystem::temp_directory_path() / "miss_attention_test").string();
  write_attention(attention_scores(queries, w.params, w.tree, w.store), dir);
  std::ifstream co(dir + "/attention_co.csv");
  std::string line;
  std::getline(co, line);
  EXPECT_EQ(line.substr(0, 2), "3,");
  EXPECT_EQ(std::count(line.begin(), line.end(), ','), 4);
  std::ifstream hist(dir + "/attention_hist.csv");
  int rows = 0;
  std::getline(hist, line);
  EXPECT_EQ(line, "branch,bin_lo,bin_hi,count");
  while (std::getline(hist, line)) ++rows;
  EXPECT_EQ(rows, 2 * kHistogramBins);
}

}  // namespace
}  // namespace miss::eval
