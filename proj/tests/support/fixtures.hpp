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

// Small random trees, stores and estimator parameters shared by the tests.

#ifndef MISS_TESTS_FIXTURES_HPP
#define MISS_TESTS_FIXTURES_HPP

#include <vector>

#include "miss/estimator.hpp"
#include "miss/tree.hpp"
#include "support/oracles.hpp"

namespace miss::fixture {

inline estimator::EstimatorConfig small_config() {
  estimator::EstimatorConfig c;
  c.d_id = 4;
  c.n_user_buckets = 8;
  c.n_experts = 3;
  c.T = 2;
  c.expert_hidden = 5;
  c.expert_out = 4;
  c.tower_hidden = 3;
  c.k_esu = 3;
  c.m_co = 6;
  c.m_mm = 9;
  return c;
}

struct World {
  mmembed::EmbeddingStore store;
  tree::IndexTree tree;
  estimator::EstimatorParams params;
};

// Every parameter (biases included) drawn from N(0, scale^2).
inline void randomize(estimator::EstimatorParams& p, std::uint64_t seed, double scale = 0.5) {
  Rng rng = make_rng(seed, 202);
  p.for_each_tensor([&](estimator::TensorView t) {
    for (std::size_t i = 0; i < t.size(); ++i) t.data[i] = scale * standard_normal(rng);
  });
}

inline World make_world(int n_items, int mm_dim, const estimator::EstimatorConfig& cfg, std::uint64_t seed,
                        double scale = 0.5) {
  World w{oracle::random_store(n_items, mm_dim, seed), {}, {}};
  w.tree = tree::build_tree(w.store, seed + 1);
  w.params = estimator::EstimatorParams::init(cfg, w.tree.n_nodes(), seed + 2);
  randomize(w.params, seed + 3, scale);
  return w;
}

inline std::vector<ItemId> random_sequence(int n_items, int length, Rng& rng) {
  std::vector<ItemId> s(static_cast<std::size_t>(length));
  for (auto& i : s) i = static_cast<ItemId>(uniform_index(rng, static_cast<std::size_t>(n_items)));
  return s;
}

inline NodeId random_node(const tree::IndexTree& t, Rng& rng) {
  while (true) {
    const auto n = static_cast<NodeId>(uniform_index(rng, static_cast<std::size_t>(t.n_nodes())));
    if (!t.is_placeholder(n)) return n;
  }
}

}  // namespace miss::fixture

#endif  // MISS_TESTS_FIXTURES_HPP
