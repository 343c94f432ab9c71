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

// Central finite-difference check of the estimator's analytic gradients.

#ifndef MISS_TESTS_GRADCHECK_HPP
#define MISS_TESTS_GRADCHECK_HPP

#include <cmath>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "miss/training.hpp"
#include "support/fixtures.hpp"

namespace miss::gradcheck {

struct TensorError {
  std::string name;
  double relative_error = 0.0;
  double analytic_norm = 0.0;
};

// Relative error ||fd - analytic|| / (||fd|| + ||analytic||) per tensor over
// the summed BCE of `samples`. Embedding tables are probed on the rows the
// instance touches plus one untouched row each.
inline std::vector<TensorError> check(const fixture::World& w, const corpus::TrainingInstance& inst,
                                      const std::vector<training::NodeSample>& samples, double h = 1e-6) {
  using estimator::TensorView;
  auto grads = estimator::Gradients::zeros(w.params.cfg);
  training::instance_loss(inst, w.tree, w.store, w.params, samples, &grads);

  // Dense copies of the analytic gradients, in parameter order.
  std::vector<std::vector<double>> analytic;
  {
    Mat node = Mat::Zero(w.params.node_emb.rows(), w.params.node_emb.cols());
    for (std::size_t k = 0; k < grads.node_rows.size(); ++k) node.row(grads.node_rows.id(k)) = grads.node_rows.value(k);
    Mat user = Mat::Zero(w.params.user_emb.rows(), w.params.user_emb.cols());
    for (std::size_t k = 0; k < grads.user_rows.size(); ++k) user.row(grads.user_rows.id(k)) = grads.user_rows.value(k);
    analytic.emplace_back(node.data(), node.data() + node.size());
    analytic.emplace_back(user.data(), user.data() + user.size());
    grads.net.for_each_tensor([&](TensorView t) { analytic.emplace_back(t.data, t.data + t.size()); });
  }

  std::set<NodeId> node_rows;
  for (std::size_t k = 0; k < grads.node_rows.size(); ++k) node_rows.insert(grads.node_rows.id(k));
  for (NodeId n = 0; n < w.params.node_emb.rows(); ++n)
    if (!node_rows.count(n)) {
      node_rows.insert(n);
      break;
    }
  const int user_row = w.params.user_row(inst.user);
  const std::set<int> user_rows{user_row, (user_row + 1) % w.params.cfg.n_user_buckets};

  auto probe = w;
  std::vector<TensorView> views;
  probe.params.for_each_tensor([&](TensorView t) { views.push_back(t); });
  auto loss = [&] { return training::instance_loss(inst, probe.tree, probe.store, probe.params, samples, nullptr).loss; };

  std::vector<TensorError> out;
  for (std::size_t k = 0; k < views.size(); ++k) {
    const auto& v = views[k];
    double num = 0.0, fd_sq = 0.0, an_sq = 0.0;
    for (Eigen::Index r = 0; r < v.rows; ++r) {
      if (k == 0 && !node_rows.count(static_cast<NodeId>(r))) continue;
      if (k == 1 && !user_rows.count(static_cast<int>(r))) continue;
      for (Eigen::Index c = 0; c < v.cols; ++c) {
        // Row-major tables; column vectors have cols == 1.
        const std::size_t i = static_cast<std::size_t>(r * v.cols + c);
        double& x = v.data[i];
        const double x0 = x;
        x = x0 + h;
        const double up = loss();
        x = x0 - h;
        const double down = loss();
        x = x0;
        const double fd = (up - down) / (2.0 * h);
        const double an = analytic[k][i];
        num += (fd - an) * (fd - an);
        fd_sq += fd * fd;
        an_sq += an * an;
      }
    }
    const double den = std::sqrt(fd_sq) + std::sqrt(an_sq);
    out.push_back({v.name, den < 1e-10 ? 0.0 : std::sqrt(num) / den, std::sqrt(an_sq)});
  }
  return out;
}

// A random instance with history and `n_nodes` sampled nodes carrying random labels.
inline std::pair<corpus::TrainingInstance, std::vector<training::NodeSample>> random_case(
    const fixture::World& w, Rng& rng, int seq_len, int n_nodes) {
  corpus::TrainingInstance inst;
  inst.user = static_cast<UserId>(uniform_index(rng, 1000));
  inst.target = static_cast<ItemId>(uniform_index(rng, static_cast<std::size_t>(w.tree.n_items())));
  inst.sequence = fixture::random_sequence(w.tree.n_items(), seq_len, rng);
  inst.labels.assign(static_cast<std::size_t>(w.params.cfg.T), 1);
  std::vector<training::NodeSample> samples;
  for (int k = 0; k < n_nodes; ++k) {
    training::NodeSample s{fixture::random_node(w.tree, rng), {}};
    for (int t = 0; t < w.params.cfg.T; ++t) s.labels.push_back(uniform01(rng) < 0.5 ? 1.0 : 0.0);
    samples.push_back(std::move(s));
  }
  return {std::move(inst), std::move(samples)};
}

}  // namespace miss::gradcheck

#endif  // MISS_TESTS_GRADCHECK_HPP
