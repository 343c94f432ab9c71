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

#include "miss/training.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <optional>

#include "miss/adam.hpp"
#include "miss/parallel.hpp"

namespace miss::training {

using estimator::EstimatorParams;
using estimator::Gradients;
using estimator::TensorView;

std::vector<std::uint8_t> pseudo_labels(const tree::IndexTree& tree, std::span<const ItemId> positive_items) {
  std::vector<std::uint8_t> labels(static_cast<std::size_t>(tree.n_nodes()), 0);
  for (ItemId item : positive_items) {
    NodeId n = tree.leaf_of(item);
    while (true) {
      if (labels[n]) break;  // the rest of the path is already marked
      labels[n] = 1;
      if (n == 0) break;
      n = tree::IndexTree::parent(n);
    }
  }
  return labels;
}

LevelSampleSet sample_level(const tree::IndexTree& tree, std::span<const std::uint8_t> labels, int h, int k_neg,
                            Rng& rng) {
  if (h < 1 || h > tree.height()) throw ConfigError("sample level out of range");
  if (k_neg < 0) throw ConfigError("negatives_per_level must be >= 0");
  LevelSampleSet s;
  s.level = h;
  std::vector<NodeId> candidates;
  const NodeId first = tree::IndexTree::first_at(h), width = tree::IndexTree::width_at(h);
  for (NodeId n = first; n < first + width; ++n) {
    if (tree.is_placeholder(n)) continue;
    if (labels[n])
      s.positives.push_back(n);
    else
      candidates.push_back(n);
  }
  const std::size_t want =
      std::min(candidates.size(), static_cast<std::size_t>(k_neg) * s.positives.size());
  for (std::size_t k = 0; k < want; ++k) {
    const std::size_t j = k + uniform_index(rng, candidates.size() - k);
    std::swap(candidates[k], candidates[j]);
    s.negatives.push_back(candidates[k]);
  }
  return s;
}

std::vector<NodeSample> instance_samples(const corpus::TrainingInstance& instance, const tree::IndexTree& tree,
                                         int k_neg, Rng& rng) {
  std::vector<NodeSample> out;
  if (!instance.any_positive()) return out;
  const ItemId target[] = {instance.target};
  const auto labels = pseudo_labels(tree, target);
  std::vector<double> pos(instance.labels.begin(), instance.labels.end());
  const std::vector<double> neg(instance.labels.size(), 0.0);
  for (int h = 1; h <= tree.height(); ++h) {
    const auto set = sample_level(tree, labels, h, k_neg, rng);
    for (NodeId n : set.positives) out.push_back({n, pos});
    for (NodeId n : set.negatives) out.push_back({n, neg});
  }
  return out;
}

InstanceLoss instance_loss(const corpus::TrainingInstance& instance, const tree::IndexTree& tree,
                           const mmembed::EmbeddingStore& store, const EstimatorParams& params,
                           std::span<const NodeSample> samples, Gradients* grads) {
  InstanceLoss r;
  r.per_objective.assign(params.cfg.T, 0.0);
  if (samples.empty()) return r;
  const auto ctx = estimator::build_context(params, tree, store, instance.user, instance.sequence);
  std::optional<estimator::SequenceGrad> sg;
  if (grads) sg.emplace(ctx);
  for (const auto& s : samples) {
    const auto tr = estimator::forward(params, tree, ctx, s.node);
    if (grads) estimator::backward(params, ctx, tr, s.labels, *grads, *sg);
    for (int t = 0; t < params.cfg.T; ++t) {
      const double l = estimator::bce(s.labels[t], tr.probs[t]);
      r.per_objective[t] += l;
      r.loss += l;
    }
    ++r.nodes;
  }
  if (grads) estimator::finish_backward(params, ctx, *sg, *grads);
  return r;
}

namespace {

struct Slot {
  Gradients grads;
  InstanceLoss loss;
};

}  // namespace

TrainResult train(std::span<const corpus::TrainingInstance> instances, const tree::IndexTree& tree,
                  const mmembed::EmbeddingStore& store, EstimatorParams params, const TrainConfig& cfg,
                  std::uint64_t seed, const CheckpointHook& on_checkpoint) {
  if (cfg.batch_size < 1 || cfg.epochs < 0 || cfg.negatives_per_level < 0 || !(cfg.lr > 0.0) || cfg.log_every < 1)
    throw ConfigError("invalid training configuration");
  const int T = params.cfg.T;
  TrainResult result;
  Adam adam({.lr = cfg.lr});
  Mat node_g = Mat::Zero(params.node_emb.rows(), params.node_emb.cols());
  Mat user_g = Mat::Zero(params.user_emb.rows(), params.user_emb.cols());
  const auto start = std::chrono::steady_clock::now();

  double window_loss = 0.0;
  std::vector<double> window_obj(T, 0.0);
  long window_instances = 0;
  long step = 0;
  const std::size_t n = instances.size();
  std::vector<Slot> slots;

  auto flush_metrics = [&] {
    if (window_instances == 0) return;
    MetricsRow row;
    row.step = step;
    row.mean_loss = window_loss / static_cast<double>(window_instances);
    for (double v : window_obj) row.per_objective.push_back(v / static_cast<double>(window_instances));
    row.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    result.metrics.push_back(std::move(row));
    window_loss = 0.0;
    std::fill(window_obj.begin(), window_obj.end(), 0.0);
    window_instances = 0;
  };

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t begin = 0; begin < n; begin += cfg.batch_size) {
      if (cfg.max_steps >= 0 && step >= cfg.max_steps) break;
      const std::size_t len = std::min<std::size_t>(cfg.batch_size, n - begin);
      slots.assign(len, Slot{Gradients::zeros(params.cfg), {}});
      parallel_for(len, cfg.threads, [&](std::size_t k) {
        const std::size_t idx = begin + k;
        Rng rng = make_rng(seed, (static_cast<std::uint64_t>(epoch) << 40) + idx + 17);
        const auto samples = instance_samples(instances[idx], tree, cfg.negatives_per_level, rng);
        slots[k].loss = instance_loss(instances[idx], tree, store, params, samples, &slots[k].grads);
      });

      Gradients batch = Gradients::zeros(params.cfg);
      for (std::size_t k = 0; k < len; ++k) {
        const auto& s = slots[k];
        if (!std::isfinite(s.loss.loss)) {
          const auto& bad = instances[begin + k];
          throw TrainingError("non-finite loss at step " + std::to_string(step) + " (user " +
                              std::to_string(bad.user) + ", ts " + std::to_string(bad.ts) + ")");
        }
        batch.add(s.grads);
        window_loss += s.loss.loss;
        for (int t = 0; t < T; ++t) window_obj[t] += s.loss.per_objective[t];
        ++window_instances;
      }
      const double scale = 1.0 / static_cast<double>(len);

      node_g.setZero();
      user_g.setZero();
      for (std::size_t k = 0; k < batch.node_rows.size(); ++k)
        node_g.row(batch.node_rows.id(k)) = scale * batch.node_rows.value(k).transpose();
      for (std::size_t k = 0; k < batch.user_rows.size(); ++k)
        user_g.row(batch.user_rows.id(k)) = scale * batch.user_rows.value(k).transpose();
      std::vector<TensorView> g;
      batch.net.for_each_tensor([&](TensorView t) { g.push_back(std::move(t)); });

      adam.begin_step();
      adam.update(0, params.node_emb.data(), node_g.data(), static_cast<std::size_t>(node_g.size()));
      adam.update(1, params.user_emb.data(), user_g.data(), static_cast<std::size_t>(user_g.size()));
      std::size_t slot = 0;
      params.net.for_each_tensor([&](TensorView t) {
        for (std::size_t i = 0; i < t.size(); ++i) g[slot].data[i] *= scale;
        adam.update(2 + slot, t.data, g[slot].data, t.size());
        ++slot;
      });
      ++step;
      if (step % cfg.log_every == 0) flush_metrics();
      if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && on_checkpoint) on_checkpoint(step, params);
    }
  }
  flush_metrics();
  result.steps = step;
  result.params = std::move(params);
  return result;
}

void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows, int T) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << "step,mean_loss";
  for (int t = 0; t < T; ++t) out << ",loss_obj" << t;
  out << ",wall_ms\n";
  char buf[64];
  for (const auto& r : rows) {
    out << r.step;
    std::snprintf(buf, sizeof(buf), ",%.10g", r.mean_loss);
    out << buf;
    for (double v : r.per_objective) {
      std::snprintf(buf, sizeof(buf), ",%.10g", v);
      out << buf;
    }
    std::snprintf(buf, sizeof(buf), ",%.1f\n", r.wall_ms);
    out << buf;
  }
  if (!out) throw IoError("write failed: " + path);
}

}  // namespace miss::training
