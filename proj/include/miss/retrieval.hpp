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

#ifndef MISS_RETRIEVAL_HPP
#define MISS_RETRIEVAL_HPP

#include <algorithm>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "miss/common.hpp"
#include "miss/estimator.hpp"
#include "miss/mmembed.hpp"
#include "miss/tree.hpp"

namespace miss::retrieval {

struct ScoredNode {
  NodeId node;
  double score;
  friend bool operator==(const ScoredNode&, const ScoredNode&) = default;
};

// Higher score first; equal scores go to the lower NodeId.
inline bool ranks_before(const ScoredNode& a, const ScoredNode& b) {
  return a.score != b.score ? a.score > b.score : a.node < b.node;
}

/// Per-level beams; levels[h] is B_h^(K), sorted by ranks_before.
struct BeamTrace {
  std::vector<std::vector<ScoredNode>> levels;

  const std::vector<ScoredNode>& final_beam() const { return levels.back(); }
};

/// Level-wise beam search. Starts at the root, expands every child of the
/// current beam (placeholders excluded), keeps the top K. `score` maps a
/// NodeId to p(node relevant | user).
template <class Scorer>
BeamTrace beam_search(const tree::IndexTree& tree, int k, Scorer&& score) {
  if (k < 1) throw ConfigError("beam size must be >= 1");
  BeamTrace trace;
  trace.levels.reserve(tree.height() + 1);
  trace.levels.push_back({{0, score(NodeId{0})}});
  std::vector<ScoredNode> candidates;
  for (int h = 1; h <= tree.height(); ++h) {
    candidates.clear();
    for (const auto& parent : trace.levels.back()) {
      for (NodeId c : {tree::IndexTree::left_child(parent.node), tree::IndexTree::right_child(parent.node)}) {
        if (tree.is_placeholder(c)) continue;
        candidates.push_back({c, score(c)});
      }
    }
    const auto keep = std::min<std::size_t>(candidates.size(), static_cast<std::size_t>(k));
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep), candidates.end(),
                      ranks_before);
    trace.levels.emplace_back(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep));
  }
  return trace;
}

struct RetrievedItem {
  ItemId item;
  double score;
  friend bool operator==(const RetrievedItem&, const RetrievedItem&) = default;
};

struct RetrievalResult {
  UserId user = 0;
  std::vector<RetrievedItem> items;  // best first
  BeamTrace beams;
};

/// Top-m of the final beam mapped through the leaf -> item table.
std::vector<RetrievedItem> top_items(const tree::IndexTree& tree, const BeamTrace& trace, int m_ret);

template <class Scorer>
RetrievalResult retrieve(const tree::IndexTree& tree, int k, int m_ret, Scorer&& score, UserId user = 0) {
  if (m_ret < 1 || m_ret > k) throw ConfigError("m_ret must be in [1, K]");
  RetrievalResult r;
  r.user = user;
  r.beams = beam_search(tree, k, std::forward<Scorer>(score));
  r.items = top_items(tree, r.beams, m_ret);
  return r;
}

/// Exhaustive oracle: scores every non-placeholder leaf, returns the top m.
template <class Scorer>
std::vector<RetrievedItem> brute_force_top(const tree::IndexTree& tree, int m, Scorer&& score) {
  std::vector<ScoredNode> all;
  const NodeId first = tree::IndexTree::first_at(tree.height());
  for (NodeId n = first; n < first + tree::IndexTree::width_at(tree.height()); ++n)
    if (!tree.is_placeholder(n)) all.push_back({n, score(n)});
  std::sort(all.begin(), all.end(), ranks_before);
  std::vector<RetrievedItem> out;
  for (std::size_t i = 0; i < all.size() && i < static_cast<std::size_t>(m); ++i)
    out.push_back({tree.item_at(all[i].node), all[i].score});
  return out;
}

/// The estimator as a beam-search scorer: mean over objectives of the
/// predicted probabilities. Sequence-side work is done once at
/// construction.
class NodeScorer {
 public:
  NodeScorer(const estimator::EstimatorParams& params, const tree::IndexTree& tree,
             const mmembed::EmbeddingStore& store, UserId user, std::span<const ItemId> sequence)
      : params_(&params), tree_(&tree), ctx_(estimator::build_context(params, tree, store, user, sequence)) {}

  double operator()(NodeId n) const {
    return estimator::mean_probability(estimator::forward(*params_, *tree_, ctx_, n));
  }

  const estimator::SequenceContext& context() const { return ctx_; }

 private:
  const estimator::EstimatorParams* params_;
  const tree::IndexTree* tree_;
  estimator::SequenceContext ctx_;
};

// Stand-alone score of one node; rebuilds the sequence context every call.
double node_score(const estimator::EstimatorParams& params, const tree::IndexTree& tree,
                  const mmembed::EmbeddingStore& store, UserId user, std::span<const ItemId> sequence, NodeId n);

struct Query {
  UserId user = 0;
  std::vector<ItemId> sequence;
};

std::vector<RetrievalResult> retrieve_all(std::span<const Query> queries, const estimator::EstimatorParams& params,
                                          const tree::IndexTree& tree, const mmembed::EmbeddingStore& store, int k,
                                          int m_ret, int threads = 1);

std::string to_jsonl(const RetrievalResult& r);
void write_jsonl(const std::string& path, std::span<const RetrievalResult> results);

}  // namespace miss::retrieval

#endif  // MISS_RETRIEVAL_HPP
