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

#include "miss/tree.hpp"

#include <algorithm>
#include <numeric>

#include "miss/binary_io.hpp"

namespace miss::tree {

IndexTree::IndexTree(int height, int dim, int n_items) : height_(height) {
  if (height < 0 || height > 28) throw ConfigError("tree height out of range");
  const NodeId n_nodes = (NodeId{1} << (height + 1)) - 1;
  placeholder_.assign(n_nodes, 1);
  z_ = MatF::Zero(n_nodes, dim);
  leaf_item_.assign(width_at(height), -1);
  item_leaf_.assign(n_items, -1);
}

int IndexTree::level(NodeId n) const {
  if (!valid(n)) throw LookupError("invalid node " + std::to_string(n));
  return level_of(n);
}

ItemId IndexTree::item_at(NodeId leaf) const {
  if (!is_leaf(leaf)) throw LookupError("node " + std::to_string(leaf) + " is not a leaf");
  return leaf_item_[leaf - first_at(height_)];
}

NodeId IndexTree::leaf_of(ItemId item) const {
  if (item < 0 || item >= n_items()) throw LookupError("item " + std::to_string(item) + " not in tree");
  return item_leaf_[item];
}

NodeId IndexTree::ancestor(NodeId n, int h) const {
  const int l = level(n);
  if (h < 0 || h > l) throw LookupError("ancestor level out of range");
  NodeId a = n;
  for (int k = l; k > h; --k) a = parent(a);
  return a;
}

std::vector<NodeId> IndexTree::ancestors(NodeId n) const {
  const int l = level(n);
  std::vector<NodeId> path(l + 1);
  NodeId a = n;
  for (int k = l; k >= 0; --k) {
    path[k] = a;
    if (k > 0) a = parent(a);
  }
  return path;
}

std::pair<NodeId, NodeId> IndexTree::leaf_range(NodeId n) const {
  const int depth = height_ - level(n);
  const NodeId span = NodeId{1} << depth;
  const NodeId first = (n + 1) * span - 1;
  return {first, first + span - 1};
}

void IndexTree::assign_leaves(std::span<const ItemId> leaf_items, const MatF& item_embeddings) {
  if (static_cast<NodeId>(leaf_items.size()) != width_at(height_)) throw ShapeError("leaf table size mismatch");
  if (item_embeddings.rows() != n_items() || item_embeddings.cols() != dim())
    throw ShapeError("item embedding table shape mismatch");
  std::fill(item_leaf_.begin(), item_leaf_.end(), -1);
  const NodeId first_leaf = first_at(height_);
  const int d = dim();
  Mat sums = Mat::Zero(n_nodes(), d);
  std::vector<int> counts(n_nodes(), 0);
  for (NodeId k = 0; k < width_at(height_); ++k) {
    const ItemId item = leaf_items[k];
    leaf_item_[k] = item;
    if (item < 0) continue;
    if (item >= n_items() || item_leaf_[item] != -1) throw FormatError("leaf table is not a bijection");
    item_leaf_[item] = first_leaf + k;
    sums.row(first_leaf + k) = item_embeddings.row(item).cast<double>();
    counts[first_leaf + k] = 1;
  }
  if (std::find(item_leaf_.begin(), item_leaf_.end(), -1) != item_leaf_.end())
    throw FormatError("leaf table does not cover every item");
  for (NodeId n = first_leaf - 1; n >= 0; --n) {
    sums.row(n) = sums.row(left_child(n)) + sums.row(right_child(n));
    counts[n] = counts[left_child(n)] + counts[right_child(n)];
  }
  for (NodeId n = 0; n < n_nodes(); ++n) {
    placeholder_[n] = counts[n] == 0 ? 1 : 0;
    if (counts[n] > 0)
      z_.row(n) = (sums.row(n) / static_cast<double>(counts[n])).cast<float>();
    else
      z_.row(n).setZero();
  }
}

bool operator==(const IndexTree& a, const IndexTree& b) {
  return a.height_ == b.height_ && a.placeholder_ == b.placeholder_ && a.leaf_item_ == b.leaf_item_ &&
         a.item_leaf_ == b.item_leaf_ && a.z_.rows() == b.z_.rows() && a.z_.cols() == b.z_.cols() &&
         a.z_ == b.z_;
}

TwoMeansResult two_means(const Mat& points, std::uint64_t seed) {
  const auto n = static_cast<int>(points.rows());
  if (n < 2) throw ConfigError("two_means needs at least 2 points");
  Rng rng = make_rng(seed, 5);

  // k-means++ seeding.
  Mat centers(2, points.cols());
  const int first = static_cast<int>(uniform_index(rng, n));
  centers.row(0) = points.row(first);
  Vec d2(n);
  for (int i = 0; i < n; ++i) d2[i] = (points.row(i) - centers.row(0)).squaredNorm();
  const double total = d2.sum();
  int second = 0;
  if (total > 0.0) {
    const double u = uniform01(rng) * total;
    double acc = 0.0;
    second = n - 1;
    for (int i = 0; i < n; ++i) {
      acc += d2[i];
      if (u < acc && d2[i] > 0.0) {
        second = i;
        break;
      }
    }
    while (d2[second] == 0.0) --second;  // u landed exactly on the total
  } else {
    second = static_cast<int>(uniform_index(rng, n - 1));
    if (second >= first) ++second;
  }
  centers.row(1) = points.row(second);

  std::vector<int> assign(n, -1);
  for (int iter = 0; iter < 100; ++iter) {
    bool changed = false;
    for (int i = 0; i < n; ++i) {
      const double a = (points.row(i) - centers.row(0)).squaredNorm();
      const double b = (points.row(i) - centers.row(1)).squaredNorm();
      const int c = b < a ? 1 : 0;
      if (c != assign[i]) {
        assign[i] = c;
        changed = true;
      }
    }
    if (!changed) break;
    int count[2] = {0, 0};
    Mat sums = Mat::Zero(2, points.cols());
    for (int i = 0; i < n; ++i) {
      sums.row(assign[i]) += points.row(i);
      ++count[assign[i]];
    }
    if (count[0] == 0 || count[1] == 0) break;
    centers.row(0) = sums.row(0) / count[0];
    centers.row(1) = sums.row(1) / count[1];
  }

  std::vector<int> cl[2];
  for (int i = 0; i < n; ++i) cl[assign[i]].push_back(i);
  const int big = cl[0].size() >= cl[1].size() ? 0 : 1;
  const int small = 1 - big;
  const std::size_t excess = (cl[big].size() - cl[small].size()) / 2;
  if (excess > 0) {
    std::vector<std::pair<double, int>> margin;
    margin.reserve(cl[big].size());
    for (int i : cl[big]) {
      const double near = (points.row(i) - centers.row(big)).norm();
      const double far = (points.row(i) - centers.row(small)).norm();
      margin.emplace_back(std::abs(far - near), i);
    }
    std::sort(margin.begin(), margin.end());
    std::vector<int> moved;
    for (std::size_t k = 0; k < excess; ++k) moved.push_back(margin[k].second);
    std::sort(moved.begin(), moved.end());
    std::vector<int> kept;
    std::set_difference(cl[big].begin(), cl[big].end(), moved.begin(), moved.end(), std::back_inserter(kept));
    cl[big] = std::move(kept);
    cl[small].insert(cl[small].end(), moved.begin(), moved.end());
    std::sort(cl[small].begin(), cl[small].end());
  }

  TwoMeansResult r;
  const bool first_is_left = cl[0].size() > cl[1].size() ||
                             (cl[0].size() == cl[1].size() && !cl[0].empty() &&
                              (cl[1].empty() || cl[0].front() < cl[1].front()));
  r.left = std::move(first_is_left ? cl[0] : cl[1]);
  r.right = std::move(first_is_left ? cl[1] : cl[0]);
  return r;
}

namespace {

int height_for(int n_items) {
  int h = 0;
  while ((1LL << h) < n_items) ++h;
  return h;
}

}  // namespace

IndexTree build_tree(const mmembed::EmbeddingStore& store, std::uint64_t seed) {
  if (store.size() == 0) throw ConfigError("cannot build a tree from an empty store");
  const int n = store.size();
  const int h = height_for(n);
  IndexTree tree(h, store.dim(), n);
  const Mat all = store.table().cast<double>();

  std::vector<ItemId> leaf_items(IndexTree::width_at(h), -1);
  struct Task {
    NodeId node;
    std::vector<ItemId> items;
  };
  std::vector<Task> stack;
  std::vector<ItemId> everything(n);
  std::iota(everything.begin(), everything.end(), 0);
  stack.push_back({0, std::move(everything)});
  while (!stack.empty()) {
    Task task = std::move(stack.back());
    stack.pop_back();
    const int level = IndexTree::level_of(task.node);
    if (level == h) {
      leaf_items[task.node - IndexTree::first_at(h)] = task.items.empty() ? -1 : task.items.front();
      continue;
    }
    std::vector<ItemId> left, right;
    if (task.items.size() >= 2) {
      Mat pts(task.items.size(), all.cols());
      for (std::size_t k = 0; k < task.items.size(); ++k) pts.row(k) = all.row(task.items[k]);
      const auto split = two_means(pts, derive_seed(seed, static_cast<std::uint64_t>(task.node)));
      for (int k : split.left) left.push_back(task.items[k]);
      for (int k : split.right) right.push_back(task.items[k]);
    } else {
      left = std::move(task.items);
    }
    stack.push_back({IndexTree::right_child(task.node), std::move(right)});
    stack.push_back({IndexTree::left_child(task.node), std::move(left)});
  }
  tree.assign_leaves(leaf_items, store.table());
  return tree;
}

IndexTree build_random_tree(const mmembed::EmbeddingStore& store, std::uint64_t seed) {
  if (store.size() == 0) throw ConfigError("cannot build a tree from an empty store");
  const int n = store.size();
  const int h = height_for(n);
  IndexTree tree(h, store.dim(), n);
  std::vector<ItemId> items(n);
  std::iota(items.begin(), items.end(), 0);
  Rng rng = make_rng(seed, 6);
  for (std::size_t i = items.size(); i > 1; --i) std::swap(items[i - 1], items[uniform_index(rng, i)]);
  // Keep the same placeholder pattern as a balanced split: deal items out so
  // that every level-(H-1) node gets one item before any gets two.
  std::vector<ItemId> leaf_items(IndexTree::width_at(h), -1);
  if (h == 0) {
    leaf_items[0] = items[0];
  } else {
    const NodeId pairs = IndexTree::width_at(h) / 2;
    for (int k = 0; k < n; ++k) leaf_items[k < pairs ? 2 * k : 2 * (k - pairs) + 1] = items[k];
  }
  tree.assign_leaves(leaf_items, store.table());
  return tree;
}

namespace {
constexpr std::string_view kTreeMagic = "MTREE1";
}

void save_tree(const IndexTree& tree, const std::string& path, const std::string& config_json) {
  io::BinaryWriter w(path);
  w.bytes(kTreeMagic);
  w.scalar<std::uint32_t>(static_cast<std::uint32_t>(tree.height()));
  w.scalar<std::uint32_t>(static_cast<std::uint32_t>(tree.n_items()));
  w.scalar<std::uint32_t>(static_cast<std::uint32_t>(tree.dim()));
  for (NodeId n = 0; n < tree.n_nodes(); ++n) {
    w.scalar<std::int32_t>(n == 0 ? -1 : IndexTree::parent(n));
    w.scalar<std::uint8_t>(tree.is_leaf(n) ? 0 : 1);
    w.scalar<std::uint8_t>(tree.placeholder_[n]);
    w.floats({tree.z_.row(n).data(), static_cast<std::size_t>(tree.dim())});
  }
  for (ItemId item : tree.leaf_item_) w.scalar<std::int32_t>(item);
  io::write_config_trailer(w, config_json);
  w.close();
}

IndexTree load_tree(const std::string& path) {
  io::BinaryReader r(path);
  r.expect_magic(kTreeMagic);
  const auto h = r.scalar<std::uint32_t>();
  const auto n_items = r.scalar<std::uint32_t>();
  const auto d = r.scalar<std::uint32_t>();
  if (h > 28 || d == 0 || d > 65536 || n_items == 0 || n_items > (1u << h))
    throw FormatError(path + ": implausible tree header");
  IndexTree tree(static_cast<int>(h), static_cast<int>(d), static_cast<int>(n_items));
  for (NodeId n = 0; n < tree.n_nodes(); ++n) {
    const auto parent = r.scalar<std::int32_t>();
    const auto has_children = r.scalar<std::uint8_t>();
    const auto placeholder = r.scalar<std::uint8_t>();
    if (parent != (n == 0 ? -1 : IndexTree::parent(n)) || has_children != (tree.is_leaf(n) ? 0 : 1) ||
        placeholder > 1)
      throw FormatError(path + ": inconsistent node record " + std::to_string(n));
    tree.placeholder_[n] = placeholder;
    r.floats({tree.z_.row(n).data(), d});
  }
  const auto stored_placeholder = tree.placeholder_;
  const NodeId first_leaf = IndexTree::first_at(static_cast<int>(h));
  for (auto& item : tree.leaf_item_) {
    item = r.scalar<std::int32_t>();
    if (item < -1 || item >= static_cast<std::int32_t>(n_items)) throw FormatError(path + ": bad leaf item");
  }
  for (NodeId k = 0; k < static_cast<NodeId>(tree.leaf_item_.size()); ++k) {
    const ItemId item = tree.leaf_item_[k];
    if (item < 0) continue;
    if (tree.item_leaf_[item] != -1) throw FormatError(path + ": leaf table is not a bijection");
    tree.item_leaf_[item] = first_leaf + k;
  }
  if (std::find(tree.item_leaf_.begin(), tree.item_leaf_.end(), -1) != tree.item_leaf_.end())
    throw FormatError(path + ": leaf table does not cover every item");
  for (NodeId n = tree.n_nodes() - 1; n >= 0; --n) {
    const bool empty = tree.is_leaf(n) ? tree.leaf_item_[n - first_leaf] < 0
                                       : (stored_placeholder[IndexTree::left_child(n)] &&
                                          stored_placeholder[IndexTree::right_child(n)]);
    if (empty != (stored_placeholder[n] != 0)) throw FormatError(path + ": placeholder flags inconsistent");
  }
  io::read_config_trailer(r);
  return tree;
}

}  // namespace miss::tree
