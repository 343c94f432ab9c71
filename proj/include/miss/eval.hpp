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

#ifndef MISS_EVAL_HPP
#define MISS_EVAL_HPP

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "miss/common.hpp"
#include "miss/estimator.hpp"
#include "miss/mmembed.hpp"
#include "miss/retrieval.hpp"
#include "miss/tree.hpp"

namespace miss::eval {

/// |retrieved ∩ relevant| / |relevant| over distinct ids; nullopt when
/// there is nothing relevant (the user is skipped).
std::optional<double> recall_at_k(std::span<const ItemId> retrieved, std::span<const ItemId> relevant);

/// H@hRecall: recall of the level-h ancestors of the relevant items against
/// the level-h beam. Throws when the trace has no beam for level h.
std::optional<double> hier_recall(const retrieval::BeamTrace& trace, std::span<const ItemId> relevant,
                                  const tree::IndexTree& tree, int h);

/// Mean over instances of |co ∩ mm| / K, where K is the common size of the
/// paired selections. Instances with empty selections are skipped.
double overlap_rate(std::span<const std::vector<int>> co_selected, std::span<const std::vector<int>> mm_selected);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
  int n = 0;  // number of splits
};

// Sample standard deviation (n-1); zero for a single value.
MeanStd mean_std(std::span<const double> values);

struct EvalUser {
  UserId user = 0;
  std::vector<ItemId> sequence;  // history before the held-out window
  std::vector<ItemId> relevant;  // held-out positives
};

struct EvalConfig {
  std::vector<int> recall_ks{10, 25, 50};
  int beam_size = 64;
  std::vector<int> hier_beam_sizes{16, 32, 64};
  std::vector<int> hier_levels;  // empty: every level 1..H
  int n_splits = 5;
  int heap_users = 200;      // users sampled for the heap-tendency statistic
  int heap_candidates = 8;   // sampled same-level competitors per ancestor
  int threads = 1;
  std::uint64_t seed = 0;
};

struct EvalReport {
  std::map<int, MeanStd> recall;                        // by m_ret
  std::map<int, MeanStd> random_recall;                 // uniform random m_ret items
  std::map<int, std::map<int, MeanStd>> hier_recall;    // [beam size][level]
  // Users where H@HRecall@K differs from recall over the final-beam leaves.
  int leaf_equivalence_violations = 0;
  // Levels/beam-size pairs where the mean hierarchical recall decreased
  // when the beam grew.
  int hier_monotonicity_violations = 0;
  double overlap_rate = 0.0;
  double heap_tendency = 0.0;
  int users_evaluated = 0;
  int users_skipped = 0;
  double wall_ms = 0.0;

  nlohmann::ordered_json metrics_json() const;
};

/// Splits users round-robin into n_splits disjoint test splits, runs beam
/// search for every configured beam size and aggregates per split.
EvalReport evaluate(std::span<const EvalUser> users, const estimator::EstimatorParams& params,
                    const tree::IndexTree& tree, const mmembed::EmbeddingStore& store, const EvalConfig& cfg);

struct AttentionQuery {
  UserId user = 0;
  std::vector<ItemId> sequence;
  NodeId node = 0;
};

struct AttentionDump {
  std::vector<UserId> users;
  std::vector<std::vector<double>> co_rows;  // softmax of Co-GSU scores, oldest first
  std::vector<std::vector<double>> mm_rows;  // softmax of MM-GSU scores, oldest first
  std::vector<int> co_hist, mm_hist;         // 50 bins on [0, max]
  double co_hist_max = 0.0, mm_hist_max = 0.0;
  double co_mean_entropy = 0.0, mm_mean_entropy = 0.0;
};

inline constexpr int kHistogramBins = 50;

AttentionDump attention_scores(std::span<const AttentionQuery> queries, const estimator::EstimatorParams& params,
                               const tree::IndexTree& tree, const mmembed::EmbeddingStore& store);

// Writes attention_co.csv, attention_mm.csv and attention_hist.csv into dir.
void write_attention(const AttentionDump& dump, const std::string& dir);

}  // namespace miss::eval

#endif  // MISS_EVAL_HPP
