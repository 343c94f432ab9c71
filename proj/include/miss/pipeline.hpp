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

#ifndef MISS_PIPELINE_HPP
#define MISS_PIPELINE_HPP

#include <string>
#include <vector>

#include <json.hpp>

#include "miss/config.hpp"
#include "miss/eval.hpp"
#include "miss/retrieval.hpp"

namespace miss::pipeline {

/// Artifact locations inside a run's output directory.
struct Artifacts {
  std::string dir;

  std::string path(const std::string& name) const { return dir + "/" + name; }
  std::string config() const { return path("run_config.json"); }
  std::string corpus() const { return path("corpus.bin"); }
  std::string train_logs() const { return path("train_logs.csv"); }
  std::string test_logs() const { return path("test_logs.csv"); }
  std::string embeddings() const { return path("embeddings.mmeb"); }
  std::string embeddings_csv() const { return path("embeddings.csv"); }
  std::string embed_loss() const { return path("embed_loss.csv"); }
  std::string tree() const { return path("tree.mtree"); }
  std::string checkpoints() const { return path("checkpoints"); }
  std::string model() const { return path("model.ckpt"); }
  std::string train_metrics() const { return path("train_metrics.csv"); }
  std::string retrieval() const { return path("retrieval.jsonl"); }
  std::string report() const { return path("report.json"); }
  std::string timings() const { return path("timings.json"); }
  std::string attention_summary() const { return path("attention_summary.json"); }
  std::string ablation() const { return path("ablation.json"); }
};

// Stages. Each reads the artifacts of earlier stages from cfg.out_dir and
// raises DependencyError naming the producing stage when one is missing.
void gen_data(const config::RunConfig& cfg);
void train_embed(const config::RunConfig& cfg);
void build_tree(const config::RunConfig& cfg);
void train(const config::RunConfig& cfg);
void retrieve(const config::RunConfig& cfg);
eval::EvalReport evaluate(const config::RunConfig& cfg);
eval::AttentionDump export_attention(const config::RunConfig& cfg);
nlohmann::ordered_json ablate(const config::RunConfig& cfg);
void run_all(const config::RunConfig& cfg);

/// Test users from the stored logs: sequence = a user's training targets in
/// time order (last m_mm kept), relevant = held-out targets with any
/// positive label. Ordered by user id.
std::vector<eval::EvalUser> load_eval_users(const config::RunConfig& cfg);

}  // namespace miss::pipeline

#endif  // MISS_PIPELINE_HPP
