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

#ifndef MISS_MMEMBED_HPP
#define MISS_MMEMBED_HPP

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "miss/common.hpp"
#include "miss/corpus.hpp"

namespace miss::mmembed {

struct PairDataset {
  std::vector<std::pair<ItemId, ItemId>> pairs;
  std::vector<std::string> warnings;
};

/// Samples `pairs_per_item` same-cluster partners for every item. Clusters
/// with a single member contribute nothing and produce a warning.
PairDataset build_pairs(const corpus::ItemCorpus& corpus, int pairs_per_item, std::uint64_t seed);

/// Frozen-after-training item embedding table.
class EmbeddingStore {
 public:
  EmbeddingStore() = default;
  EmbeddingStore(int n_items, int dim) : table_(MatF::Zero(n_items, dim)) {}
  explicit EmbeddingStore(MatF table) : table_(std::move(table)) {}

  int size() const { return static_cast<int>(table_.rows()); }
  int dim() const { return static_cast<int>(table_.cols()); }
  bool frozen() const { return frozen_; }
  void freeze() { frozen_ = true; }

  void set(ItemId item, std::span<const float> values);
  auto row(ItemId item) const {
    check(item);
    return table_.row(item);
  }
  const MatF& table() const { return table_; }

  friend bool operator==(const EmbeddingStore& a, const EmbeddingStore& b) {
    return a.table_.rows() == b.table_.rows() && a.table_.cols() == b.table_.cols() && a.table_ == b.table_;
  }

 private:
  void check(ItemId item) const {
    if (item < 0 || item >= size()) throw LookupError("item " + std::to_string(item) + " not in embedding store");
  }

  MatF table_;
  bool frozen_ = false;
};

// Embedding file: "MMEB1", u32 n_items, u32 d, then per item u32 id + d f32.
void save_embeddings(const EmbeddingStore& store, const std::string& path, const std::string& config_json = {});
EmbeddingStore load_embeddings(const std::string& path);
void export_embeddings_csv(const EmbeddingStore& store, const std::string& path);

/// 2-layer perceptron content encoder: concat(text, image) -> R^d.
struct EncoderParams {
  Mat w1;  // hidden x in
  Vec b1;
  Mat w2;  // d x hidden
  Vec b2;

  static EncoderParams init(int in_dim, int hidden, int out_dim, std::uint64_t seed);

  template <class F>
  void for_each_tensor(F&& f) {
    f("w1", w1.data(), static_cast<std::size_t>(w1.size()));
    f("b1", b1.data(), static_cast<std::size_t>(b1.size()));
    f("w2", w2.data(), static_cast<std::size_t>(w2.size()));
    f("b2", b2.data(), static_cast<std::size_t>(b2.size()));
  }
  EncoderParams zeros_like() const;
};

// Raw encoder output (not normalized).
Vec encode(const EncoderParams& p, const Vec& content);

/// -log( e^{s(a,p)/tau} / (e^{s(a,p)/tau} + sum_n e^{s(a,n)/tau}) ), s = dot.
double info_nce_loss(const Vec& anchor, const Vec& positive, std::span<const Vec> negatives, double temperature);

struct EmbedTrainConfig {
  int dim = 32;
  int hidden = 64;
  double temperature = 0.1;
  double lr = 1e-3;
  int batch_size = 128;
  int epochs = 5;
  int pairs_per_item = 4;
};

/// Mean in-batch InfoNCE over a batch of pairs, on L2-normalized encoder
/// outputs. Every other pair's positive acts as a negative. When `grads` is
/// non-null it receives d(loss)/d(params).
double batch_loss(const EncoderParams& params, const corpus::ItemCorpus& corpus,
                  std::span<const std::pair<ItemId, ItemId>> batch, double temperature, EncoderParams* grads);

struct EmbedTrainResult {
  EmbeddingStore store;
  EncoderParams encoder;
  std::vector<double> step_losses;
  std::vector<double> epoch_losses;
};

EmbedTrainResult train_embeddings(const corpus::ItemCorpus& corpus, const PairDataset& pairs,
                                  const EmbedTrainConfig& cfg, std::uint64_t seed);

// Encodes every item, normalizes to unit norm, returns a frozen store.
EmbeddingStore encode_corpus(const EncoderParams& params, const corpus::ItemCorpus& corpus);

}  // namespace miss::mmembed

#endif  // MISS_MMEMBED_HPP
