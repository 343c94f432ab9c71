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

#ifndef MISS_TRAINING_HPP
#define MISS_TRAINING_HPP

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "miss/common.hpp"
#include "miss/corpus.hpp"
#include "miss/estimator.hpp"
#include "miss/mmembed.hpp"
#include "miss/tree.hpp"

namespace miss::training {

struct TrainConfig {
  int negatives_per_level = 2;
  double lr = 1e-3;
  int batch_size = 64;
  int epochs = 1;
  long max_steps = -1;  // -1: no limit
  int log_every = 20;
  int checkpoint_every = 0;  // 0: only the caller's final checkpoint
  int threads = 1;
};

/// Pseudo-labels: node n is 1 iff some leaf below it maps to a
/// positive item. Indexed by NodeId.
std::vector<std::uint8_t> pseudo_labels(const tree::IndexTree& tree, std::span<const ItemId> positive_items);

struct LevelSampleSet {
  int level = 0;
  std::vector<NodeId> positives;
  std::vector<NodeId> negatives;
};

/// All positives of level h plus k_neg * |positives| uniformly drawn
/// zero-labelled, non-placeholder nodes of that level (fewer if not enough
/// exist).
LevelSampleSet sample_level(const tree::IndexTree& tree, std::span<const std::uint8_t> labels, int h, int k_neg,
                            Rng& rng);

struct NodeSample {
  NodeId node;
  std::vector<double> labels;  // per objective
};

/// Level-wise samples for levels 1..H of one instance. Positives lie on the
/// target's root path and carry the instance labels; negatives carry zeros.
std::vector<NodeSample> instance_samples(const corpus::TrainingInstance& instance, const tree::IndexTree& tree,
                                         int k_neg, Rng& rng);

struct InstanceLoss {
  double loss = 0.0;
  std::vector<double> per_objective;
  std::size_t nodes = 0;
};

/// Summed BCE over the sampled nodes and objectives of one instance, with
/// gradients accumulated into `grads` when non-null.
InstanceLoss instance_loss(const corpus::TrainingInstance& instance, const tree::IndexTree& tree,
                           const mmembed::EmbeddingStore& store, const estimator::EstimatorParams& params,
                           std::span<const NodeSample> samples, estimator::Gradients* grads);

struct MetricsRow {
  long step = 0;
  double mean_loss = 0.0;  // per instance, over the logging window
  std::vector<double> per_objective;
  double wall_ms = 0.0;
};

struct TrainResult {
  estimator::EstimatorParams params;
  std::vector<MetricsRow> metrics;
  long steps = 0;
};

using CheckpointHook = std::function<void(long step, const estimator::EstimatorParams&)>;

/// Streaming mini-batch Adam over the instances in order. Deterministic for
/// a fixed seed and instance order, independent of `threads`.
TrainResult train(std::span<const corpus::TrainingInstance> instances, const tree::IndexTree& tree,
                  const mmembed::EmbeddingStore& store, estimator::EstimatorParams params, const TrainConfig& cfg,
                  std::uint64_t seed, const CheckpointHook& on_checkpoint = {});

void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows, int T);

}  // namespace miss::training

#endif  // MISS_TRAINING_HPP
