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

#include "miss/retrieval.hpp"

#include <fstream>

#include <json.hpp>

#include "miss/parallel.hpp"

namespace miss::retrieval {

std::vector<RetrievedItem> top_items(const tree::IndexTree& tree, const BeamTrace& trace, int m_ret) {
  std::vector<RetrievedItem> out;
  const auto& beam = trace.final_beam();
  for (std::size_t i = 0; i < beam.size() && i < static_cast<std::size_t>(m_ret); ++i)
    out.push_back({tree.item_at(beam[i].node), beam[i].score});
  return out;
}

double node_score(const estimator::EstimatorParams& params, const tree::IndexTree& tree,
                  const mmembed::EmbeddingStore& store, UserId user, std::span<const ItemId> sequence, NodeId n) {
  const auto ctx = estimator::build_context(params, tree, store, user, sequence);
  return estimator::mean_probability(estimator::forward(params, tree, ctx, n));
}

std::vector<RetrievalResult> retrieve_all(std::span<const Query> queries, const estimator::EstimatorParams& params,
                                          const tree::IndexTree& tree, const mmembed::EmbeddingStore& store, int k,
                                          int m_ret, int threads) {
  std::vector<RetrievalResult> out(queries.size());
  parallel_for(queries.size(), threads, [&](std::size_t i) {
    const NodeScorer scorer(params, tree, store, queries[i].user, queries[i].sequence);
    out[i] = retrieve(tree, k, m_ret, scorer, queries[i].user);
  });
  return out;
}

std::string to_jsonl(const RetrievalResult& r) {
  nlohmann::ordered_json j;
  j["user"] = r.user;
  auto items = nlohmann::ordered_json::array();
  for (const auto& it : r.items) items.push_back({{"id", it.item}, {"score", it.score}});
  j["items"] = std::move(items);
  nlohmann::ordered_json beams = nlohmann::ordered_json::object();
  for (std::size_t h = 0; h < r.beams.levels.size(); ++h) {
    auto ids = nlohmann::ordered_json::array();
    for (const auto& s : r.beams.levels[h]) ids.push_back(s.node);
    beams[std::to_string(h)] = std::move(ids);
  }
  j["beams"] = std::move(beams);
  return j.dump();
}

void write_jsonl(const std::string& path, std::span<const RetrievalResult> results) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path);
  for (const auto& r : results) out << to_jsonl(r) << '\n';
  if (!out) throw IoError("write failed: " + path);
}

}  // namespace miss::retrieval
