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

#ifndef MISS_ESTIMATOR_HPP
#define MISS_ESTIMATOR_HPP

#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "miss/common.hpp"
#include "miss/corpus.hpp"
#include "miss/mmembed.hpp"
#include "miss/tree.hpp"

namespace miss::estimator {

struct EstimatorConfig {
  int d_id = 32;
  int n_user_buckets = 4096;
  int n_experts = 4;  // L
  int T = 3;
  int expert_hidden = 32;
  int expert_out = 16;
  int tower_hidden = 16;
  int k_esu = 8;
  int m_co = 64;
  int m_mm = 128;
  bool use_co_gsu = true;
  bool use_mm_gsu = true;

  // concat(x_video, x_user, x_co, x_mm, no_history)
  int input_dim() const { return 4 * d_id + 1; }
  void validate() const;
  friend bool operator==(const EstimatorConfig&, const EstimatorConfig&) = default;
};

struct TensorView {
  std::string name;
  double* data;
  Eigen::Index rows;
  Eigen::Index cols;
  std::size_t size() const { return static_cast<std::size_t>(rows * cols); }
};

struct Expert {
  Mat w1;  // expert_hidden x input_dim
  Vec b1;
  Mat w2;  // expert_out x expert_hidden
  Vec b2;
};

struct Gate {
  Mat w;  // L x input_dim
  Vec b;
};

struct Tower {
  Mat w1;  // tower_hidden x expert_out
  Vec b1;
  Vec w2;  // tower_hidden
  Vec b2;  // 1
};

// Everything except the embedding tables.
struct DenseParams {
  Mat wq, wk, wv;           // Co-GSU / Co-ESU (shared)
  Mat wq_mm, wk_mm, wv_mm;  // MM-ESU
  std::vector<Expert> experts;
  std::vector<Gate> gates;
  std::vector<Tower> towers;

  static DenseParams zeros(const EstimatorConfig& cfg);
  void for_each_tensor(const std::function<void(TensorView)>& f);
};

/// All trainable tensors of the node estimator.
struct EstimatorParams {
  EstimatorConfig cfg;
  Mat node_emb;  // one row per tree node (internal nodes included)
  Mat user_emb;  // hashed user-id buckets
  DenseParams net;

  static EstimatorParams init(const EstimatorConfig& cfg, NodeId n_nodes, std::uint64_t seed);
  void for_each_tensor(const std::function<void(TensorView)>& f);
  // Rounds every value through float32, i.e. what a checkpoint round-trip yields.
  void round_to_float();
  int user_row(UserId user) const;
};

/// Gradient rows of an embedding table, kept in first-touch order.
class SparseRows {
 public:
  void add(int row, const Eigen::Ref<const Vec>& g);
  std::size_t size() const { return ids_.size(); }
  int id(std::size_t k) const { return ids_[k]; }
  const Vec& value(std::size_t k) const { return values_[k]; }
  const Vec* find(int row) const;
  void clear();

 private:
  std::unordered_map<int, std::size_t> index_;
  std::vector<int> ids_;
  std::vector<Vec> values_;
};

/// Gradients for every trainable tensor. There is deliberately no slot for
/// the multi-modal embeddings: they are frozen inputs.
struct Gradients {
  DenseParams net;
  SparseRows node_rows;
  SparseRows user_rows;

  static Gradients zeros(const EstimatorConfig& cfg);
  void add(const Gradients& other);
  void scale(double s);
};

/// Target-independent per-query state: the windows of the behavior
/// sequence, their ID embeddings, key/value projections and frozen
/// multi-modal embeddings. Built once per (user, sequence) and reused for
/// every node scored against it.
struct SequenceContext {
  UserId user = 0;
  int user_row = 0;
  std::vector<ItemId> co_items;  // most recent M_co, oldest first
  std::vector<ItemId> mm_items;  // most recent M_mm, oldest first
  std::vector<NodeId> co_nodes;
  std::vector<NodeId> mm_nodes;
  Mat co_e, co_k, co_v;  // M_co x d
  Mat mm_e, mm_k, mm_v;  // M_mm x d
  Mat mm_z;              // M_mm x d_mm (frozen)
  Vec x_user;
  bool has_history = false;
};

SequenceContext build_context(const EstimatorParams& params, const tree::IndexTree& tree,
                              const mmembed::EmbeddingStore& store, UserId user,
                              std::span<const ItemId> sequence);

struct ForwardTrace {
  NodeId node = 0;
  Vec e_n;
  // Co branch
  Vec q;
  Vec co_scores;               // r, over the Co window
  std::vector<int> co_selected;  // B*, window indices
  Vec co_attention;            // a, over B*
  Vec x_co;
  // MM branch
  Vec mm_scores;               // r^mm, over the MM window
  std::vector<int> mm_selected;  // B^mm, window indices
  Vec q_mm;
  Vec mm_logits;
  Vec mm_attention;
  Vec x_mm;
  // MMoE
  Vec x;
  std::vector<Vec> expert_pre, expert_hidden, expert_out;
  std::vector<Vec> gate;  // softmax per objective
  std::vector<Vec> mixture;
  std::vector<Vec> tower_pre, tower_hidden;
  Vec logits;
  Vec probs;
};

// Scores of the Co-GSU: r_i = (W_q e_n)^T (W_k e_i) / sqrt(d).
Vec co_gsu_scores(const EstimatorParams& params, const SequenceContext& ctx, NodeId target);
// Scores of the MM-GSU: r_i = z_n^T z_i with frozen embeddings.
Vec mm_gsu_scores(const SequenceContext& ctx, const tree::IndexTree& tree, NodeId target);

/// Indices of the K largest scores, ordered by score (ties: lower index).
std::vector<int> top_k_select(const Eigen::Ref<const Vec>& scores, int k);

struct MmoeOutput {
  std::vector<Vec> expert_pre, expert_hidden, expert_out;
  std::vector<Vec> gate;
  std::vector<Vec> mixture;
  std::vector<Vec> tower_pre, tower_hidden;
  Vec logits;
  Vec probs;
};

MmoeOutput mmoe_forward(const EstimatorParams& params, const Vec& x);

ForwardTrace forward(const EstimatorParams& params, const tree::IndexTree& tree, const SequenceContext& ctx,
                     NodeId node);

// Mean over objectives of the predicted probabilities.
double mean_probability(const ForwardTrace& trace);

/// Accumulated d(loss)/d(key) and d(loss)/d(value) per window position. The
/// projection products are folded back into parameter gradients once per
/// sequence by finish_backward().
struct SequenceGrad {
  Mat co_dk, co_dv;
  Mat mm_dk, mm_dv;
  std::vector<std::uint8_t> co_touched, mm_touched;

  explicit SequenceGrad(const SequenceContext& ctx);
};

inline constexpr double kProbEpsilon = 1e-7;

double clip_probability(double p);
double bce(double label, double p);

/// Backward of the summed BCE over objectives for one node. Gradients into
/// the sequence keys/values are parked in `seq_grad`. Returns the loss.
double backward(const EstimatorParams& params, const SequenceContext& ctx, const ForwardTrace& trace,
                std::span<const double> labels, Gradients& grads, SequenceGrad& seq_grad);

void finish_backward(const EstimatorParams& params, const SequenceContext& ctx, const SequenceGrad& seq_grad,
                     Gradients& grads);

// Single-node convenience: backward + finish_backward.
double backward(const EstimatorParams& params, const SequenceContext& ctx, const ForwardTrace& trace,
                std::span<const double> labels, Gradients& grads);

// Checkpoint: "MCKPT1", config JSON blob, u32 n_tensors, then per tensor a
// name blob, u32 rows, u32 cols and rows*cols little-endian f32.
void save_checkpoint(const EstimatorParams& params, const std::string& path, const std::string& run_config_json = {});
EstimatorParams load_checkpoint(const std::string& path);

std::string config_to_json(const EstimatorConfig& cfg);
EstimatorConfig config_from_json(const std::string& json);

}  // namespace miss::estimator

#endif  // MISS_ESTIMATOR_HPP
