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

#include "miss/mmembed.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "miss/adam.hpp"
#include "miss/binary_io.hpp"

namespace miss::mmembed {

PairDataset build_pairs(const corpus::ItemCorpus& corpus, int pairs_per_item, std::uint64_t seed) {
  if (pairs_per_item < 0) throw ConfigError("pairs_per_item must be >= 0");
  PairDataset ds;
  for (int k = 0; k < corpus.n_clusters(); ++k) {
    if (corpus.cluster_members[k].size() < 2)
      ds.warnings.push_back("cluster " + std::to_string(k) + " has a single item; it contributes no pairs");
  }
  Rng rng = make_rng(seed, 2);
  for (ItemId i = 0; i < corpus.n_items(); ++i) {
    const auto& members = corpus.cluster_members[corpus.latent_cluster[i]];
    if (members.size() < 2) continue;
    for (int r = 0; r < pairs_per_item; ++r) {
      ItemId j = members[uniform_index(rng, members.size() - 1)];
      if (j == i) j = members.back();
      ds.pairs.emplace_back(i, j);
    }
  }
  return ds;
}

void EmbeddingStore::set(ItemId item, std::span<const float> values) {
  if (frozen_) throw FrozenError("embedding store is frozen");
  check(item);
  if (static_cast<int>(values.size()) != dim()) throw ShapeError("embedding dimension mismatch");
  for (int j = 0; j < dim(); ++j) table_(item, j) = values[j];
}

namespace {
constexpr std::string_view kEmbMagic = "MMEB1";
}

void save_embeddings(const EmbeddingStore& store, const std::string& path, const std::string& config_json) {
  io::BinaryWriter w(path);
  w.bytes(kEmbMagic);
  w.scalar<std::uint32_t>(static_cast<std::uint32_t>(store.size()));
  w.scalar<std::uint32_t>(static_cast<std::uint32_t>(store.dim()));
  for (int i = 0; i < store.size(); ++i) {
    w.scalar<std::uint32_t>(static_cast<std::uint32_t>(i));
    w.floats({store.table().row(i).data(), static_cast<std::size_t>(store.dim())});
  }
  io::write_config_trailer(w, config_json);
  w.close();
}

EmbeddingStore load_embeddings(const std::string& path) {
  io::BinaryReader r(path);
  r.expect_magic(kEmbMagic);
  const auto n = r.scalar<std::uint32_t>();
  const auto d = r.scalar<std::uint32_t>();
  if (n == 0 || d == 0 || n > (1u << 28) || d > 65536) throw FormatError(path + ": implausible header");
  MatF table(n, d);
  std::vector<bool> seen(n, false);
  for (std::uint32_t k = 0; k < n; ++k) {
    const auto id = r.scalar<std::uint32_t>();
    if (id >= n || seen[id]) throw FormatError(path + ": bad or duplicate item id");
    seen[id] = true;
    r.floats({table.row(id).data(), d});
  }
  EmbeddingStore store(std::move(table));
  store.freeze();
  return store;
}

void export_embeddings_csv(const EmbeddingStore& store, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << "item_id";
  for (int j = 0; j < store.dim(); ++j) out << ",e" << j;
  out << '\n';
  char buf[32];
  for (int i = 0; i < store.size(); ++i) {
    out << i;
    for (int j = 0; j < store.dim(); ++j) {
      std::snprintf(buf, sizeof(buf), ",%.9g", static_cast<double>(store.table()(i, j)));
      out << buf;
    }
    out << '\n';
  }
  if (!out) throw IoError("write failed: " + path);
}

EncoderParams EncoderParams::init(int in_dim, int hidden, int out_dim, std::uint64_t seed) {
  if (in_dim < 1 || hidden < 1 || out_dim < 1) throw ConfigError("encoder dims must be >= 1");
  Rng rng = make_rng(seed, 3);
  EncoderParams p;
  p.w1.resize(hidden, in_dim);
  p.w2.resize(out_dim, hidden);
  const double s1 = std::sqrt(2.0 / in_dim), s2 = std::sqrt(1.0 / hidden);
  for (Eigen::Index i = 0; i < p.w1.size(); ++i) p.w1.data()[i] = s1 * standard_normal(rng);
  for (Eigen::Index i = 0; i < p.w2.size(); ++i) p.w2.data()[i] = s2 * standard_normal(rng);
  p.b1 = Vec::Zero(hidden);
  p.b2 = Vec::Zero(out_dim);
  return p;
}

EncoderParams EncoderParams::zeros_like() const {
  return {Mat::Zero(w1.rows(), w1.cols()), Vec::Zero(b1.size()), Mat::Zero(w2.rows(), w2.cols()),
          Vec::Zero(b2.size())};
}

Vec encode(const EncoderParams& p, const Vec& content) {
  if (content.size() != p.w1.cols()) throw ShapeError("encoder input dimension mismatch");
  const Vec h = (p.w1 * content + p.b1).cwiseMax(0.0);
  return p.w2 * h + p.b2;
}

double info_nce_loss(const Vec& anchor, const Vec& positive, std::span<const Vec> negatives, double temperature) {
  if (!(temperature > 0.0)) throw ConfigError("temperature must be > 0");
  if (negatives.empty()) throw ConfigError("info_nce_loss needs at least one negative");
  if (anchor.size() != positive.size()) throw ShapeError("anchor/positive dimension mismatch");
  std::vector<double> logits;
  logits.reserve(negatives.size() + 1);
  logits.push_back(anchor.dot(positive) / temperature);
  for (const auto& n : negatives) {
    if (n.size() != anchor.size()) throw ShapeError("negative dimension mismatch");
    logits.push_back(anchor.dot(n) / temperature);
  }
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double l : logits) z += std::exp(l - mx);
  return std::max(0.0, mx + std::log(z) - logits[0]);
}

namespace {

struct EncodedBatch {
  Mat x;    // B x in
  Mat pre;  // B x hidden (before ReLU)
  Mat h;    // B x hidden
  Mat y;    // B x d
  Vec norm;
  Mat u;    // B x d, unit rows
};

EncodedBatch encode_batch(const EncoderParams& p, const corpus::ItemCorpus& corpus, std::span<const ItemId> items) {
  EncodedBatch e;
  const auto b = static_cast<Eigen::Index>(items.size());
  e.x.resize(b, p.w1.cols());
  for (Eigen::Index r = 0; r < b; ++r) e.x.row(r) = corpus.content(items[r]).transpose();
  e.pre = (e.x * p.w1.transpose()).rowwise() + p.b1.transpose();
  e.h = e.pre.cwiseMax(0.0);
  e.y = (e.h * p.w2.transpose()).rowwise() + p.b2.transpose();
  e.norm = e.y.rowwise().norm();
  e.u = e.y;
  for (Eigen::Index r = 0; r < b; ++r) e.u.row(r) /= std::max(e.norm[r], 1e-12);
  return e;
}

void backprop_batch(const EncoderParams& p, const EncodedBatch& e, const Mat& du, EncoderParams& g) {
  Mat dy(du.rows(), du.cols());
  for (Eigen::Index r = 0; r < du.rows(); ++r) {
    const double proj = e.u.row(r).dot(du.row(r));
    dy.row(r) = (du.row(r) - proj * e.u.row(r)) / std::max(e.norm[r], 1e-12);
  }
  g.w2.noalias() += dy.transpose() * e.h;
  g.b2 += dy.colwise().sum().transpose();
  Mat dh = dy * p.w2;
  dh = dh.cwiseProduct((e.pre.array() > 0.0).cast<double>().matrix());
  g.w1.noalias() += dh.transpose() * e.x;
  g.b1 += dh.colwise().sum().transpose();
}

}  // namespace

double batch_loss(const EncoderParams& params, const corpus::ItemCorpus& corpus,
                  std::span<const std::pair<ItemId, ItemId>> batch, double temperature, EncoderParams* grads) {
  if (batch.size() < 2) throw ConfigError("in-batch InfoNCE needs at least 2 pairs");
  if (!(temperature > 0.0)) throw ConfigError("temperature must be > 0");
  std::vector<ItemId> anchors, positives;
  for (auto [i, j] : batch) {
    anchors.push_back(i);
    positives.push_back(j);
  }
  const EncodedBatch a = encode_batch(params, corpus, anchors);
  const EncodedBatch p = encode_batch(params, corpus, positives);
  const auto b = static_cast<Eigen::Index>(batch.size());
  const Mat logits = a.u * p.u.transpose() / temperature;
  Mat probs(b, b);
  double loss = 0.0;
  for (Eigen::Index r = 0; r < b; ++r) {
    const double mx = logits.row(r).maxCoeff();
    probs.row(r) = (logits.row(r).array() - mx).exp();
    const double z = probs.row(r).sum();
    probs.row(r) /= z;
    loss += mx + std::log(z) - logits(r, r);
  }
  loss /= static_cast<double>(b);
  if (grads) {
    Mat g = probs;
    g.diagonal().array() -= 1.0;
    g /= static_cast<double>(b) * temperature;
    const Mat du_a = g * p.u;
    const Mat du_p = g.transpose() * a.u;
    backprop_batch(params, a, du_a, *grads);
    backprop_batch(params, p, du_p, *grads);
  }
  return loss;
}

EmbeddingStore encode_corpus(const EncoderParams& params, const corpus::ItemCorpus& corpus) {
  MatF table(corpus.n_items(), params.w2.rows());
  for (ItemId i = 0; i < corpus.n_items(); ++i) {
    Vec y = encode(params, corpus.content(i));
    const double n = y.norm();
    if (n > 0.0) y /= n;
    table.row(i) = y.transpose().cast<float>();
  }
  EmbeddingStore store(std::move(table));
  store.freeze();
  return store;
}

EmbedTrainResult train_embeddings(const corpus::ItemCorpus& corpus, const PairDataset& pairs,
                                  const EmbedTrainConfig& cfg, std::uint64_t seed) {
  if (cfg.batch_size < 2) throw ConfigError("embed batch_size must be >= 2");
  if (cfg.epochs < 0) throw ConfigError("embed epochs must be >= 0");
  EmbedTrainResult result;
  result.encoder = EncoderParams::init(corpus.d_content(), cfg.hidden, cfg.dim, seed);
  Adam adam({.lr = cfg.lr});
  Rng rng = make_rng(seed, 4);
  auto order = pairs.pairs;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
    double epoch_sum = 0.0;
    int epoch_batches = 0;
    for (std::size_t start = 0; start + 2 <= order.size(); start += cfg.batch_size) {
      const std::size_t len = std::min<std::size_t>(cfg.batch_size, order.size() - start);
      std::span<const std::pair<ItemId, ItemId>> batch(order.data() + start, len);
      EncoderParams grads = result.encoder.zeros_like();
      const double loss = batch_loss(result.encoder, corpus, batch, cfg.temperature, &grads);
      if (!std::isfinite(loss))
        throw TrainingError("non-finite InfoNCE loss at epoch " + std::to_string(epoch) + ", batch " +
                            std::to_string(epoch_batches));
      adam.begin_step();
      std::size_t slot = 0;
      std::vector<std::pair<double*, std::size_t>> g;
      grads.for_each_tensor([&](const char*, double* d, std::size_t n) { g.emplace_back(d, n); });
      result.encoder.for_each_tensor([&](const char*, double* d, std::size_t n) {
        adam.update(slot, d, g[slot].first, n);
        ++slot;
      });
      result.step_losses.push_back(loss);
      epoch_sum += loss;
      ++epoch_batches;
    }
    result.epoch_losses.push_back(epoch_batches ? epoch_sum / epoch_batches : 0.0);
  }
  result.store = encode_corpus(result.encoder, corpus);
  return result;
}

}  // namespace miss::mmembed
