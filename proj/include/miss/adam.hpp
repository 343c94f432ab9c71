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

#ifndef MISS_ADAM_HPP
#define MISS_ADAM_HPP

#include <cmath>
#include <cstddef>
#include <vector>

namespace miss {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam over a fixed list of flat tensors. Tensor `slot` must always refer to
/// the same parameter with the same size.
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  // Call once per optimizer step, before the update() calls of that step.
  void begin_step() {
    ++t_;
    bias1_ = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    bias2_ = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  }

  void update(std::size_t slot, double* param, const double* grad, std::size_t n) {
    if (slot >= m_.size()) {
      m_.resize(slot + 1);
      v_.resize(slot + 1);
    }
    auto& m = m_[slot];
    auto& v = v_[slot];
    if (m.size() != n) {
      m.assign(n, 0.0);
      v.assign(n, 0.0);
    }
    const double step = cfg_.lr / bias1_;
    for (std::size_t i = 0; i < n; ++i) {
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * grad[i];
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * grad[i] * grad[i];
      param[i] -= step * m[i] / (std::sqrt(v[i] / bias2_) + cfg_.eps);
    }
  }

  long steps() const { return t_; }

 private:
  AdamConfig cfg_;
  long t_ = 0;
  double bias1_ = 1.0, bias2_ = 1.0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace miss

#endif  // MISS_ADAM_HPP
