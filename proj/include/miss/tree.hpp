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

#ifndef MISS_TREE_HPP
#define MISS_TREE_HPP

#include <bit>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "miss/common.hpp"
#include "miss/mmembed.hpp"

namespace miss::tree {

/// Complete binary index tree in level-order layout.
///
/// Node n has children 2n+1 and 2n+2; the root is node 0 at level 0 and
/// leaves sit at level H. Leaves without an item are placeholders, as is any
/// internal node whose subtree holds no item. Every non-placeholder node
/// carries a multi-modal embedding equal to the mean of its items'
/// embeddings.
class IndexTree {
 public:
  IndexTree() = default;
  IndexTree(int height, int dim, int n_items);

  int height() const { return height_; }
  int dim() const { return static_cast<int>(z_.cols()); }
  int n_items() const { return static_cast<int>(item_leaf_.size()); }
  NodeId n_nodes() const { return static_cast<NodeId>(placeholder_.size()); }

  static int level_of(NodeId n) { return std::bit_width(static_cast<std::uint32_t>(n) + 1u) - 1; }
  static NodeId first_at(int level) { return (NodeId{1} << level) - 1; }
  static NodeId width_at(int level) { return NodeId{1} << level; }
  static NodeId parent(NodeId n) { return (n - 1) / 2; }
  static NodeId left_child(NodeId n) { return 2 * n + 1; }
  static NodeId right_child(NodeId n) { return 2 * n + 2; }

  bool valid(NodeId n) const { return n >= 0 && n < n_nodes(); }
  int level(NodeId n) const;
  bool is_leaf(NodeId n) const { return level(n) == height_; }
  bool is_placeholder(NodeId n) const { return placeholder_.at(n) != 0; }

  // Item at a leaf, or -1 for a placeholder leaf.
  ItemId item_at(NodeId leaf) const;
  NodeId leaf_of(ItemId item) const;

  // Anc(n; h): the level-h node on the root path of n.
  NodeId ancestor(NodeId n, int h) const;
  // Root-to-n path, length level(n)+1.
  std::vector<NodeId> ancestors(NodeId n) const;
  // Contiguous leaf range [first, last] of n's subtree (including placeholders).
  std::pair<NodeId, NodeId> leaf_range(NodeId n) const;

  auto embedding(NodeId n) const { return z_.row(n); }
  const MatF& embeddings() const { return z_; }

  // Assigns the leaf -> item map and recomputes placeholders and mean-pooled
  // embeddings from `item_embeddings` (one row per item).
  void assign_leaves(std::span<const ItemId> leaf_items, const MatF& item_embeddings);

  friend bool operator==(const IndexTree& a, const IndexTree& b);

 private:
  friend void save_tree(const IndexTree&, const std::string&, const std::string&);
  friend IndexTree load_tree(const std::string&);

  int height_ = 0;
  std::vector<std::uint8_t> placeholder_;
  MatF z_;
  std::vector<ItemId> leaf_item_;  // indexed by leaf offset (n - first_at(H))
  std::vector<NodeId> item_leaf_;
};

struct TwoMeansResult {
  std::vector<int> left;   // indices into the point set, ascending
  std::vector<int> right;  // |left| - |right| is 0 or 1
};

/// Balanced 2-means: Lloyd iterations from a k-means++ seeding (at most 100,
/// or until assignments stop changing), then the larger cluster sheds its
/// smallest-margin points until the sizes differ by at most one.
TwoMeansResult two_means(const Mat& points, std::uint64_t seed);

/// Recursive balanced 2-means over item embeddings; height ceil(log2(n)).
IndexTree build_tree(const mmembed::EmbeddingStore& store, std::uint64_t seed);

/// Tree with items assigned to leaves in a seeded random order.
IndexTree build_random_tree(const mmembed::EmbeddingStore& store, std::uint64_t seed);

// Tree file: "MTREE1", u32 H, u32 n_items, u32 d, level-order node records
// (i32 parent, u8 has_children, u8 placeholder, d x f32), then the leaf -> item
// table (i32, -1 for placeholders).
void save_tree(const IndexTree& tree, const std::string& path, const std::string& config_json = {});
IndexTree load_tree(const std::string& path);

}  // namespace miss::tree

#endif  // MISS_TREE_HPP
