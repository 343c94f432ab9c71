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
#include <set>

#include <gtest/gtest.h>
#include <json.hpp>

#include "miss/retrieval.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"

namespace miss::retrieval {
namespace {

// Scores that follow the max-heap property: each node scores the best leaf below it.
std::vector<double> heap_scores(const tree::IndexTree& tree, std::uint64_t seed) {
  Rng rng = make_rng(seed);
  std::vector<double> s(static_cast<std::size_t>(tree.n_nodes()), -1.0);
  for (NodeId n = tree::IndexTree::first_at(tree.height()); n < tree.n_nodes(); ++n)
    if (!tree.is_placeholder(n)) s[n] = uniform01(rng);
  for (NodeId n = tree::IndexTree::first_at(tree.height()) - 1; n >= 0; --n)
    s[n] = std::max(s[tree::IndexTree::left_child(n)], s[tree::IndexTree::right_child(n)]);
  return s;
}

tree::IndexTree four_leaf_tree() {
  tree::IndexTree t(2, 1, 4);
  const std::vector<ItemId> leaves{0, 1, 2, 3};
  t.assign_leaves(leaves, MatF::Zero(4, 1));
  return t;
}

TEST(BeamSearch, FullWidthEqualsExhaustiveLeafScoring) {
  Rng rng = make_rng(1);
  for (int trial = 0; trial < 10; ++trial) {
    const auto w = fixture::make_world(20 + trial * 5, 3, fixture::small_config(), 50 + static_cast<std::uint64_t>(trial));
    const auto seq = fixture::random_sequence(w.tree.n_items(), 8, rng);
    const NodeScorer scorer(w.params, w.tree, w.store, 4, seq);
    const int width = static_cast<int>(tree::IndexTree::width_at(w.tree.height()));
    const auto r = retrieve(w.tree, width, 10, scorer);
    EXPECT_EQ(r.items, brute_force_top(w.tree, 10, scorer)) << "trial " << trial;
  }
}

TEST(BeamSearch, HeightOneTreeWithBeamOne) {
  const auto store = oracle::random_store(2, 3, 2);
  const auto tree = tree::build_tree(store, 3);
  ASSERT_EQ(tree.height(), 1);
  const auto r = retrieve(tree, 1, 1, [](NodeId n) { return n == 2 ? 0.9 : 0.1; });
  ASSERT_EQ(r.items.size(), 1u);
  EXPECT_EQ(r.items[0].item, tree.item_at(2));
  EXPECT_EQ(r.beams.levels.size(), 2u);
}

TEST(BeamSearch, BeamsAreClosedUnderAncestorsAndBounded) {
  Rng rng = make_rng(4);
  const auto w = fixture::make_world(45, 3, fixture::small_config(), 5);
  for (int k : {1, 2, 3, 7, 16}) {
    const auto seq = fixture::random_sequence(45, 10, rng);
    const auto trace = beam_search(w.tree, k, NodeScorer(w.params, w.tree, w.store, 1, seq));
    ASSERT_EQ(trace.levels.size(), static_cast<std::size_t>(w.tree.height() + 1));
    EXPECT_EQ(trace.levels[0].size(), 1u);
    for (int h = 1; h <= w.tree.height(); ++h) {
      std::set<NodeId> above;
      for (const auto& s : trace.levels[h - 1]) above.insert(s.node);
      EXPECT_LE(trace.levels[h].size(), static_cast<std::size_t>(k));
      for (std::size_t i = 0; i < trace.levels[h].size(); ++i) {
        const auto& s = trace.levels[h][i];
        EXPECT_EQ(w.tree.level(s.node), h);
        EXPECT_FALSE(w.tree.is_placeholder(s.node));
        EXPECT_TRUE(above.count(tree::IndexTree::parent(s.node)));
        if (i > 0) EXPECT_TRUE(ranks_before(trace.levels[h][i - 1], s));
      }
    }
  }
}

TEST(BeamSearch, HeapConsistentScoresGiveExactTopKAndMonotoneBeams) {
  for (int trial = 0; trial < 20; ++trial) {
    const auto store = oracle::random_store(30 + trial, 3, 60 + static_cast<std::uint64_t>(trial));
    const auto tree = tree::build_tree(store, 1);
    const auto s = heap_scores(tree, static_cast<std::uint64_t>(trial));
    const auto score = [&](NodeId n) { return s[n]; };
    std::set<ItemId> previous;
    for (int k = 1; k <= 16; ++k) {
      const auto r = retrieve(tree, k, k, score);
      EXPECT_EQ(r.items, brute_force_top(tree, k, score));
      std::set<ItemId> found;
      for (const auto& it : r.items) found.insert(it.item);
      EXPECT_TRUE(std::includes(found.begin(), found.end(), previous.begin(), previous.end()));
      previous = found;
    }
  }
}

TEST(BeamSearch, WiderBeamsCanLoseLeavesWithoutTheHeapProperty) {
  const auto tree = four_leaf_tree();
  const std::vector<double> s{1.0, 0.9, 0.8, 0.5, 0.4, 0.7, 0.6};
  const auto score = [&](NodeId n) { return s[n]; };
  const auto narrow = retrieve(tree, 1, 1, score);
  const auto wide = retrieve(tree, 2, 2, score);
  EXPECT_EQ(narrow.items[0].item, 0);
  std::set<ItemId> found;
  for (const auto& it : wide.items) found.insert(it.item);
  EXPECT_EQ(found, (std::set<ItemId>{2, 3}));
}

TEST(BeamSearch, TiesBreakTowardSmallerNodeIds) {
  const auto tree = four_leaf_tree();
  const auto r = retrieve(tree, 2, 2, [](NodeId) { return 0.5; });
  EXPECT_EQ(r.beams.levels[2], (std::vector<ScoredNode>{{3, 0.5}, {4, 0.5}}));
}

TEST(Retrieve, InvalidSizesAreConfigErrors) {
  const auto tree = four_leaf_tree();
  const auto score = [](NodeId) { return 0.0; };
  EXPECT_THROW(retrieve(tree, 2, 3, score), ConfigError);
  EXPECT_THROW(retrieve(tree, 2, 0, score), ConfigError);
  EXPECT_THROW(beam_search(tree, 0, score), ConfigError);
}

TEST(Retrieve, TopItemsAreDistinctSortedAndBoundedByMret) {
  Rng rng = make_rng(6);
  const auto w = fixture::make_world(70, 3, fixture::small_config(), 7);
  const auto seq = fixture::random_sequence(70, 12, rng);
  const auto r = retrieve(w.tree, 12, 9, NodeScorer(w.params, w.tree, w.store, 2, seq));
  ASSERT_EQ(r.items.size(), 9u);
  std::set<ItemId> ids;
  for (std::size_t i = 0; i < r.items.size(); ++i) {
    ids.insert(r.items[i].item);
    if (i > 0) EXPECT_GE(r.items[i - 1].score, r.items[i].score);
    EXPECT_EQ(r.items[i].score, r.beams.final_beam()[i].score);
  }
  EXPECT_EQ(ids.size(), 9u);
}

TEST(Scorer, MatchesStandaloneNodeScore) {
  Rng rng = make_rng(8);
  const auto w = fixture::make_world(33, 3, fixture::small_config(), 9);
  const auto seq = fixture::random_sequence(33, 11, rng);
  const NodeScorer scorer(w.params, w.tree, w.store, 5, seq);
  for (int i = 0; i < 30; ++i) {
    const NodeId n = fixture::random_node(w.tree, rng);
    EXPECT_EQ(scorer(n), node_score(w.params, w.tree, w.store, 5, seq, n));
  }
}

TEST(RetrieveAll, ParallelEqualsSerial) {
  Rng rng = make_rng(10);
  const auto w = fixture::make_world(50, 3, fixture::small_config(), 11);
  std::vector<Query> queries;
  for (UserId u = 0; u < 12; ++u) queries.push_back({u, fixture::random_sequence(50, static_cast<int>(u % 6), rng)});
  const auto a = retrieve_all(queries, w.params, w.tree, w.store, 8, 5, 1);
  const auto b = retrieve_all(queries, w.params, w.tree, w.store, 8, 5, 4);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].user, queries[i].user);
    EXPECT_EQ(a[i].items, b[i].items);
    EXPECT_EQ(to_jsonl(a[i]), to_jsonl(b[i]));
  }
}

TEST(Jsonl, OneObjectPerLineWithItemsAndBeams) {
  const auto tree = four_leaf_tree();
  const std::vector<double> s{1.0, 0.9, 0.8, 0.5, 0.4, 0.7, 0.6};
  std::vector<RetrievalResult> results{retrieve(tree, 2, 2, [&](NodeId n) { return s[n]; }, 17)};
  const auto path = (std::filesystem::temp_directory_path() / "miss_retrieval.jsonl").string();
  write_jsonl(path, results);
  std::ifstream in(path);
  std::string line;
  ASSERT_TRUE(std::getline(in, line));
  const auto j = nlohmann::json::parse(line);
  EXPECT_EQ(j["user"], 17);
  ASSERT_EQ(j["items"].size(), 2u);
  EXPECT_EQ(j["items"][0]["id"], 2);
  EXPECT_DOUBLE_EQ(j["items"][0]["score"].get<double>(), 0.7);
  EXPECT_EQ(j["beams"]["0"], nlohmann::json::array({0}));
  EXPECT_EQ(j["beams"]["1"], nlohmann::json::array({1, 2}));
  EXPECT_EQ(j["beams"]["2"], nlohmann::json::array({5, 6}));
  EXPECT_FALSE(std::getline(in, line));
  EXPECT_THROW(write_jsonl("/nonexistent/dir/r.jsonl", results), IoError);
}

}  // namespace
}  // namespace miss::retrieval
