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

#include "miss/estimator.hpp"

#include <algorithm>
#include <numeric>

#include <json.hpp>

#include "miss/binary_io.hpp"

namespace miss::estimator {

void EstimatorConfig::validate() const {
  if (d_id < 1 || n_user_buckets < 1 || n_experts < 1 || T < 1 || expert_hidden < 1 || expert_out < 1 ||
      tower_hidden < 1 || k_esu < 1 || m_co < 1 || m_mm < 1)
    throw ConfigError("estimator dimensions must all be >= 1");
  if (m_co > m_mm) throw ConfigError("m_co must be <= m_mm");
}

DenseParams DenseParams::zeros(const EstimatorConfig& cfg) {
  const int d = cfg.d_id, in = cfg.input_dim();
  DenseParams p;
  for (Mat* m : {&p.wq, &p.wk, &p.wv, &p.wq_mm, &p.wk_mm, &p.wv_mm}) *m = Mat::Zero(d, d);
  p.experts.resize(cfg.n_experts);
  for (auto& e : p.experts) {
    e.w1 = Mat::Zero(cfg.expert_hidden, in);
    e.b1 = Vec::Zero(cfg.expert_hidden);
    e.w2 = Mat::Zero(cfg.expert_out, cfg.expert_hidden);
    e.b2 = Vec::Zero(cfg.expert_out);
  }
  p.gates.resize(cfg.T);
  for (auto& g : p.gates) {
    g.w = Mat::Zero(cfg.n_experts, in);
    g.b = Vec::Zero(cfg.n_experts);
  }
  p.towers.resize(cfg.T);
  for (auto& t : p.towers) {
    t.w1 = Mat::Zero(cfg.tower_hidden, cfg.expert_out);
    t.b1 = Vec::Zero(cfg.tower_hidden);
    t.w2 = Vec::Zero(cfg.tower_hidden);
    t.b2 = Vec::Zero(1);
  }
  return p;
}

namespace {

TensorView view(std::string name, Mat& m) { return {std::move(name), m.data(), m.rows(), m.cols()}; }
TensorView view(std::string name, Vec& v) { return {std::move(name), v.data(), v.size(), 1}; }

}  // namespace

void DenseParams::for_each_tensor(const std::function<void(TensorView)>& f) {
  f(view("co.wq", wq));
  f(view("co.wk", wk));
  f(view("co.wv", wv));
  f(view("mm.wq", wq_mm));
  f(view("mm.wk", wk_mm));
  f(view("mm.wv", wv_mm));
  for (std::size_t i = 0; i < experts.size(); ++i) {
    const std::string p = "expert" + std::to_string(i) + ".";
    f(view(p + "w1", experts[i].w1));
    f(view(p + "b1", experts[i].b1));
    f(view(p + "w2", experts[i].w2));
    f(view(p + "b2", experts[i].b2));
  }
  for (std::size_t t = 0; t < gates.size(); ++t) {
    const std::string p = "gate" + std::to_string(t) + ".";
    f(view(p + "w", gates[t].w));
    f(view(p + "b", gates[t].b));
  }
  for (std::size_t t = 0; t < towers.size(); ++t) {
    const std::string p = "tower" + std::to_string(t) + ".";
    f(view(p + "w1", towers[t].w1));
    f(view(p + "b1", towers[t].b1));
    f(view(p + "w2", towers[t].w2));
    f(view(p + "b2", towers[t].b2));
  }
}

EstimatorParams EstimatorParams::init(const EstimatorConfig& cfg, NodeId n_nodes, std::uint64_t seed) {
  cfg.validate();
  if (n_nodes < 1) throw ConfigError("estimator needs at least one tree node");
  EstimatorParams p;
  p.cfg = cfg;
  p.node_emb = Mat::Zero(n_nodes, cfg.d_id);
  p.user_emb = Mat::Zero(cfg.n_user_buckets, cfg.d_id);
  p.net = DenseParams::zeros(cfg);
  Rng rng = make_rng(seed, 7);
  auto fill = [&](Eigen::Ref<Mat> m, double scale) {
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = scale * standard_normal(rng);
  };
  const double id_scale = 0.1;
  fill(p.node_emb, id_scale);
  fill(p.user_emb, id_scale);
  const double proj = 1.0 / std::sqrt(static_cast<double>(cfg.d_id));
  for (Mat* m : {&p.net.wq, &p.net.wk, &p.net.wv, &p.net.wq_mm, &p.net.wk_mm, &p.net.wv_mm}) fill(*m, proj);
  for (auto& e : p.net.experts) {
    fill(e.w1, std::sqrt(2.0 / cfg.input_dim()));
    fill(e.w2, std::sqrt(1.0 / cfg.expert_hidden));
  }
  for (auto& g : p.net.gates) fill(g.w, 0.1 / std::sqrt(static_cast<double>(cfg.input_dim())));
  for (auto& t : p.net.towers) {
    fill(t.w1, std::sqrt(2.0 / cfg.expert_out));
    Eigen::Map<Mat> w2(t.w2.data(), t.w2.size(), 1);
    fill(w2, std::sqrt(1.0 / cfg.tower_hidden));
  }
  return p;
}

void EstimatorParams::for_each_tensor(const std::function<void(TensorView)>& f) {
  f(view("node_emb", node_emb));
  f(view("user_emb", user_emb));
  net.for_each_tensor(f);
}

void EstimatorParams::round_to_float() {
  for_each_tensor([](TensorView t) {
    for (std::size_t i = 0; i < t.size(); ++i) t.data[i] = static_cast<double>(static_cast<float>(t.data[i]));
  });
}

int EstimatorParams::user_row(UserId user) const {
  const auto b = static_cast<std::uint64_t>(cfg.n_user_buckets);
  return static_cast<int>(static_cast<std::uint64_t>(user) % b);
}

void SparseRows::add(int row, const Eigen::Ref<const Vec>& g) {
  auto [it, inserted] = index_.try_emplace(row, ids_.size());
  if (inserted) {
    ids_.push_back(row);
    values_.emplace_back(g);
  } else {
    values_[it->second] += g;
  }
}

const Vec* SparseRows::find(int row) const {
  auto it = index_.find(row);
  return it == index_.end() ? nullptr : &values_[it->second];
}

void SparseRows::clear() {
  index_.clear();
  ids_.clear();
  values_.clear();
}

Gradients Gradients::zeros(const EstimatorConfig& cfg) { return {DenseParams::zeros(cfg), {}, {}}; }

void Gradients::add(const Gradients& other) {
  std::vector<TensorView> mine, theirs;
  net.for_each_tensor([&](TensorView t) { mine.push_back(t); });
  const_cast<DenseParams&>(other.net).for_each_tensor([&](TensorView t) { theirs.push_back(t); });
  for (std::size_t k = 0; k < mine.size(); ++k)
    for (std::size_t i = 0; i < mine[k].size(); ++i) mine[k].data[i] += theirs[k].data[i];
  for (std::size_t k = 0; k < other.node_rows.size(); ++k) node_rows.add(other.node_rows.id(k), other.node_rows.value(k));
  for (std::size_t k = 0; k < other.user_rows.size(); ++k) user_rows.add(other.user_rows.id(k), other.user_rows.value(k));
}

void Gradients::scale(double s) {
  net.for_each_tensor([&](TensorView t) {
    for (std::size_t i = 0; i < t.size(); ++i) t.data[i] *= s;
  });
  SparseRows n, u;
  for (std::size_t k = 0; k < node_rows.size(); ++k) n.add(node_rows.id(k), s * node_rows.value(k));
  for (std::size_t k = 0; k < user_rows.size(); ++k) u.add(user_rows.id(k), s * user_rows.value(k));
  node_rows = std::move(n);
  user_rows = std::move(u);
}

SequenceContext build_context(const EstimatorParams& params, const tree::IndexTree& tree,
                              const mmembed::EmbeddingStore& store, UserId user,
                              std::span<const ItemId> sequence) {
  const auto& cfg = params.cfg;
  if (params.node_emb.rows() != tree.n_nodes()) throw ShapeError("ID table does not match tree size");
  if (store.dim() != tree.dim()) throw ShapeError("embedding store and tree dimensions differ");
  SequenceContext ctx;
  ctx.user = user;
  ctx.user_row = params.user_row(user);
  ctx.x_user = params.user_emb.row(ctx.user_row).transpose();
  ctx.has_history = !sequence.empty();

  const std::size_t n_co = std::min<std::size_t>(sequence.size(), cfg.m_co);
  const std::size_t n_mm = std::min<std::size_t>(sequence.size(), cfg.m_mm);
  ctx.co_items.assign(sequence.end() - static_cast<std::ptrdiff_t>(n_co), sequence.end());
  ctx.mm_items.assign(sequence.end() - static_cast<std::ptrdiff_t>(n_mm), sequence.end());

  const int d = cfg.d_id;
  auto gather = [&](const std::vector<ItemId>& items, std::vector<NodeId>& nodes, Mat& e) {
    nodes.resize(items.size());
    e.resize(static_cast<Eigen::Index>(items.size()), d);
    for (std::size_t i = 0; i < items.size(); ++i) {
      nodes[i] = tree.leaf_of(items[i]);
      e.row(static_cast<Eigen::Index>(i)) = params.node_emb.row(nodes[i]);
    }
  };
  if (cfg.use_co_gsu) {
    gather(ctx.co_items, ctx.co_nodes, ctx.co_e);
    ctx.co_k.noalias() = ctx.co_e * params.net.wk.transpose();
    ctx.co_v.noalias() = ctx.co_e * params.net.wv.transpose();
  } else {
    ctx.co_items.clear();
  }
  if (cfg.use_mm_gsu) {
    gather(ctx.mm_items, ctx.mm_nodes, ctx.mm_e);
    ctx.mm_k.noalias() = ctx.mm_e * params.net.wk_mm.transpose();
    ctx.mm_v.noalias() = ctx.mm_e * params.net.wv_mm.transpose();
    ctx.mm_z.resize(static_cast<Eigen::Index>(ctx.mm_items.size()), store.dim());
    for (std::size_t i = 0; i < ctx.mm_items.size(); ++i)
      ctx.mm_z.row(static_cast<Eigen::Index>(i)) = store.row(ctx.mm_items[i]).cast<double>();
  } else {
    ctx.mm_items.clear();
  }
  return ctx;
}

Vec co_gsu_scores(const EstimatorParams& params, const SequenceContext& ctx, NodeId target) {
  if (target < 0 || target >= params.node_emb.rows()) throw LookupError("unknown node " + std::to_string(target));
  const Vec e_n = params.node_emb.row(target).transpose();
  Vec q;
  q.noalias() = params.net.wq * e_n;
  Vec r;
  r.noalias() = ctx.co_k * q;
  r *= 1.0 / std::sqrt(static_cast<double>(params.cfg.d_id));
  return r;
}

Vec mm_gsu_scores(const SequenceContext& ctx, const tree::IndexTree& tree, NodeId target) {
  if (!tree.valid(target)) throw LookupError("unknown node " + std::to_string(target));
  const Vec z = tree.embedding(target).transpose().cast<double>();
  return ctx.mm_z * z;
}

std::vector<int> top_k_select(const Eigen::Ref<const Vec>& scores, int k) {
  if (k < 1) throw ConfigError("top-k needs K >= 1");
  std::vector<int> idx(static_cast<std::size_t>(scores.size()));
  std::iota(idx.begin(), idx.end(), 0);
  const auto take = std::min<std::size_t>(idx.size(), static_cast<std::size_t>(k));
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(take), idx.end(), [&](int a, int b) {
    return scores[a] != scores[b] ? scores[a] > scores[b] : a < b;
  });
  idx.resize(take);
  return idx;
}

namespace {

Vec softmax(const Vec& v) {
  Vec out = (v.array() - v.maxCoeff()).exp();
  return out / out.sum();
}

double sigmoid(double z) {
  return z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

}  // namespace

MmoeOutput mmoe_forward(const EstimatorParams& params, const Vec& x) {
  const auto& cfg = params.cfg;
  if (x.size() != cfg.input_dim()) throw ShapeError("MMoE input dimension mismatch");
  MmoeOutput o;
  const int L = cfg.n_experts;
  o.expert_pre.resize(L);
  o.expert_hidden.resize(L);
  o.expert_out.resize(L);
  for (int l = 0; l < L; ++l) {
    const auto& e = params.net.experts[l];
    o.expert_pre[l].noalias() = e.w1 * x;
    o.expert_pre[l] += e.b1;
    o.expert_hidden[l] = o.expert_pre[l].cwiseMax(0.0);
    o.expert_out[l].noalias() = e.w2 * o.expert_hidden[l];
    o.expert_out[l] += e.b2;
  }
  o.gate.resize(cfg.T);
  o.mixture.resize(cfg.T);
  o.tower_pre.resize(cfg.T);
  o.tower_hidden.resize(cfg.T);
  o.logits.resize(cfg.T);
  o.probs.resize(cfg.T);
  for (int t = 0; t < cfg.T; ++t) {
    const auto& g = params.net.gates[t];
    o.gate[t] = softmax(g.w * x + g.b);
    o.mixture[t] = Vec::Zero(cfg.expert_out);
    for (int l = 0; l < L; ++l) o.mixture[t] += o.gate[t][l] * o.expert_out[l];
    const auto& tw = params.net.towers[t];
    o.tower_pre[t] = tw.w1 * o.mixture[t] + tw.b1;
    o.tower_hidden[t] = o.tower_pre[t].cwiseMax(0.0);
    o.logits[t] = tw.w2.dot(o.tower_hidden[t]) + tw.b2[0];
    o.probs[t] = sigmoid(o.logits[t]);
  }
  return o;
}

ForwardTrace forward(const EstimatorParams& params, const tree::IndexTree& tree, const SequenceContext& ctx,
                     NodeId node) {
  const auto& cfg = params.cfg;
  if (!tree.valid(node)) throw LookupError("unknown node " + std::to_string(node));
  const int d = cfg.d_id;
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  ForwardTrace tr;
  tr.node = node;
  tr.e_n = params.node_emb.row(node).transpose();

  tr.x_co = Vec::Zero(d);
  if (cfg.use_co_gsu && !ctx.co_items.empty()) {
    tr.q.noalias() = params.net.wq * tr.e_n;
    tr.co_scores.noalias() = ctx.co_k * tr.q;
    tr.co_scores *= inv_sqrt_d;
    tr.co_selected = top_k_select(tr.co_scores, cfg.k_esu);
    Vec logits(static_cast<Eigen::Index>(tr.co_selected.size()));
    for (std::size_t k = 0; k < tr.co_selected.size(); ++k) logits[k] = tr.co_scores[tr.co_selected[k]];
    tr.co_attention = softmax(logits);
    for (std::size_t k = 0; k < tr.co_selected.size(); ++k)
      tr.x_co += tr.co_attention[k] * ctx.co_v.row(tr.co_selected[k]).transpose();
  }

  tr.x_mm = Vec::Zero(d);
  if (cfg.use_mm_gsu && !ctx.mm_items.empty()) {
    tr.mm_scores = mm_gsu_scores(ctx, tree, node);
    tr.mm_selected = top_k_select(tr.mm_scores, cfg.k_esu);
    tr.q_mm.noalias() = params.net.wq_mm * tr.e_n;
    tr.mm_logits.resize(static_cast<Eigen::Index>(tr.mm_selected.size()));
    for (std::size_t k = 0; k < tr.mm_selected.size(); ++k)
      tr.mm_logits[k] = ctx.mm_k.row(tr.mm_selected[k]).dot(tr.q_mm) * inv_sqrt_d;
    tr.mm_attention = softmax(tr.mm_logits);
    for (std::size_t k = 0; k < tr.mm_selected.size(); ++k)
      tr.x_mm += tr.mm_attention[k] * ctx.mm_v.row(tr.mm_selected[k]).transpose();
  }

  tr.x.resize(cfg.input_dim());
  tr.x << tr.e_n, ctx.x_user, tr.x_co, tr.x_mm, (ctx.has_history ? 0.0 : 1.0);
  MmoeOutput o = mmoe_forward(params, tr.x);
  tr.expert_pre = std::move(o.expert_pre);
  tr.expert_hidden = std::move(o.expert_hidden);
  tr.expert_out = std::move(o.expert_out);
  tr.gate = std::move(o.gate);
  tr.mixture = std::move(o.mixture);
  tr.tower_pre = std::move(o.tower_pre);
  tr.tower_hidden = std::move(o.tower_hidden);
  tr.logits = std::move(o.logits);
  tr.probs = std::move(o.probs);
  return tr;
}

double mean_probability(const ForwardTrace& trace) { return trace.probs.mean(); }

SequenceGrad::SequenceGrad(const SequenceContext& ctx)
    : co_dk(Mat::Zero(ctx.co_k.rows(), ctx.co_k.cols())),
      co_dv(Mat::Zero(ctx.co_v.rows(), ctx.co_v.cols())),
      mm_dk(Mat::Zero(ctx.mm_k.rows(), ctx.mm_k.cols())),
      mm_dv(Mat::Zero(ctx.mm_v.rows(), ctx.mm_v.cols())),
      co_touched(static_cast<std::size_t>(ctx.co_k.rows()), 0),
      mm_touched(static_cast<std::size_t>(ctx.mm_k.rows()), 0) {}

double clip_probability(double p) { return std::clamp(p, kProbEpsilon, 1.0 - kProbEpsilon); }

double bce(double label, double p) {
  const double c = clip_probability(p);
  return -label * std::log(c) - (1.0 - label) * std::log(1.0 - c);
}

double backward(const EstimatorParams& params, const SequenceContext& ctx, const ForwardTrace& tr,
                std::span<const double> labels, Gradients& grads, SequenceGrad& sg) {
  const auto& cfg = params.cfg;
  if (static_cast<int>(labels.size()) != cfg.T) throw ShapeError("label count != T");
  if (tr.x.size() != cfg.input_dim() || static_cast<int>(tr.probs.size()) != cfg.T)
    throw ShapeError("trace does not match parameters");
  const int d = cfg.d_id;
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  auto& g = grads.net;

  double loss = 0.0;
  Vec dx = Vec::Zero(cfg.input_dim());
  std::vector<Vec> d_expert_out(cfg.n_experts, Vec::Zero(cfg.expert_out));
  for (int t = 0; t < cfg.T; ++t) {
    const double p = tr.probs[t];
    loss += bce(labels[t], p);
    // Clipped probabilities make the loss locally constant.
    const double dlogit = (p > kProbEpsilon && p < 1.0 - kProbEpsilon) ? p - labels[t] : 0.0;
    if (dlogit == 0.0) continue;
    const auto& tw = params.net.towers[t];
    auto& gt = g.towers[t];
    gt.w2 += dlogit * tr.tower_hidden[t];
    gt.b2[0] += dlogit;
    const Vec dpre = (dlogit * tw.w2).cwiseProduct((tr.tower_pre[t].array() > 0.0).cast<double>().matrix());
    gt.w1.noalias() += dpre * tr.mixture[t].transpose();
    gt.b1 += dpre;
    const Vec dmix = tw.w1.transpose() * dpre;
    Vec dgate(cfg.n_experts);
    for (int l = 0; l < cfg.n_experts; ++l) {
      d_expert_out[l] += tr.gate[t][l] * dmix;
      dgate[l] = tr.expert_out[l].dot(dmix);
    }
    const Vec dgl = tr.gate[t].cwiseProduct((dgate.array() - tr.gate[t].dot(dgate)).matrix());
    g.gates[t].w.noalias() += dgl * tr.x.transpose();
    g.gates[t].b += dgl;
    dx.noalias() += params.net.gates[t].w.transpose() * dgl;
  }
  for (int l = 0; l < cfg.n_experts; ++l) {
    const auto& e = params.net.experts[l];
    auto& ge = g.experts[l];
    ge.w2.noalias() += d_expert_out[l] * tr.expert_hidden[l].transpose();
    ge.b2 += d_expert_out[l];
    const Vec dh = (e.w2.transpose() * d_expert_out[l])
                       .cwiseProduct((tr.expert_pre[l].array() > 0.0).cast<double>().matrix());
    ge.w1.noalias() += dh * tr.x.transpose();
    ge.b1 += dh;
    dx.noalias() += e.w1.transpose() * dh;
  }

  Vec de_n = dx.segment(0, d);
  grads.user_rows.add(ctx.user_row, dx.segment(d, d));
  const Vec dx_co = dx.segment(2 * d, d);
  const Vec dx_mm = dx.segment(3 * d, d);

  if (!tr.co_selected.empty()) {
    const auto& a = tr.co_attention;
    Vec da(a.size());
    for (std::size_t k = 0; k < tr.co_selected.size(); ++k) {
      const int i = tr.co_selected[k];
      sg.co_dv.row(i) += a[k] * dx_co.transpose();
      sg.co_touched[i] = 1;
      da[k] = ctx.co_v.row(i).dot(dx_co);
    }
    const Vec dr = a.cwiseProduct((da.array() - a.dot(da)).matrix());
    Vec dq = Vec::Zero(d);
    for (std::size_t k = 0; k < tr.co_selected.size(); ++k) {
      const int i = tr.co_selected[k];
      dq += (dr[k] * inv_sqrt_d) * ctx.co_k.row(i).transpose();
      sg.co_dk.row(i) += (dr[k] * inv_sqrt_d) * tr.q.transpose();
    }
    g.wq.noalias() += dq * tr.e_n.transpose();
    de_n.noalias() += params.net.wq.transpose() * dq;
  }

  if (!tr.mm_selected.empty()) {
    const auto& a = tr.mm_attention;
    Vec da(a.size());
    for (std::size_t k = 0; k < tr.mm_selected.size(); ++k) {
      const int i = tr.mm_selected[k];
      sg.mm_dv.row(i) += a[k] * dx_mm.transpose();
      sg.mm_touched[i] = 1;
      da[k] = ctx.mm_v.row(i).dot(dx_mm);
    }
    const Vec ds = a.cwiseProduct((da.array() - a.dot(da)).matrix());
    Vec dq = Vec::Zero(d);
    for (std::size_t k = 0; k < tr.mm_selected.size(); ++k) {
      const int i = tr.mm_selected[k];
      dq += (ds[k] * inv_sqrt_d) * ctx.mm_k.row(i).transpose();
      sg.mm_dk.row(i) += (ds[k] * inv_sqrt_d) * tr.q_mm.transpose();
    }
    g.wq_mm.noalias() += dq * tr.e_n.transpose();
    de_n.noalias() += params.net.wq_mm.transpose() * dq;
  }

  grads.node_rows.add(tr.node, de_n);
  return loss;
}

void finish_backward(const EstimatorParams& params, const SequenceContext& ctx, const SequenceGrad& sg,
                     Gradients& grads) {
  auto& g = grads.net;
  for (std::size_t i = 0; i < sg.co_touched.size(); ++i) {
    if (!sg.co_touched[i]) continue;
    const auto r = static_cast<Eigen::Index>(i);
    const Vec e = ctx.co_e.row(r).transpose();
    const Vec dk = sg.co_dk.row(r).transpose();
    const Vec dv = sg.co_dv.row(r).transpose();
    g.wk.noalias() += dk * e.transpose();
    g.wv.noalias() += dv * e.transpose();
    grads.node_rows.add(ctx.co_nodes[i], params.net.wk.transpose() * dk + params.net.wv.transpose() * dv);
  }
  for (std::size_t i = 0; i < sg.mm_touched.size(); ++i) {
    if (!sg.mm_touched[i]) continue;
    const auto r = static_cast<Eigen::Index>(i);
    const Vec e = ctx.mm_e.row(r).transpose();
    const Vec dk = sg.mm_dk.row(r).transpose();
    const Vec dv = sg.mm_dv.row(r).transpose();
    g.wk_mm.noalias() += dk * e.transpose();
    g.wv_mm.noalias() += dv * e.transpose();
    grads.node_rows.add(ctx.mm_nodes[i], params.net.wk_mm.transpose() * dk + params.net.wv_mm.transpose() * dv);
  }
}

double backward(const EstimatorParams& params, const SequenceContext& ctx, const ForwardTrace& trace,
                std::span<const double> labels, Gradients& grads) {
  SequenceGrad sg(ctx);
  const double loss = backward(params, ctx, trace, labels, grads, sg);
  finish_backward(params, ctx, sg, grads);
  return loss;
}

std::string config_to_json(const EstimatorConfig& c) {
  nlohmann::ordered_json j;
  j["d_id"] = c.d_id;
  j["n_user_buckets"] = c.n_user_buckets;
  j["n_experts"] = c.n_experts;
  j["T"] = c.T;
  j["expert_hidden"] = c.expert_hidden;
  j["expert_out"] = c.expert_out;
  j["tower_hidden"] = c.tower_hidden;
  j["k_esu"] = c.k_esu;
  j["m_co"] = c.m_co;
  j["m_mm"] = c.m_mm;
  j["use_co_gsu"] = c.use_co_gsu;
  j["use_mm_gsu"] = c.use_mm_gsu;
  return j.dump();
}

EstimatorConfig config_from_json(const std::string& text) {
  EstimatorConfig c;
  try {
    const auto j = nlohmann::json::parse(text);
    c.d_id = j.at("d_id");
    c.n_user_buckets = j.at("n_user_buckets");
    c.n_experts = j.at("n_experts");
    c.T = j.at("T");
    c.expert_hidden = j.at("expert_hidden");
    c.expert_out = j.at("expert_out");
    c.tower_hidden = j.at("tower_hidden");
    c.k_esu = j.at("k_esu");
    c.m_co = j.at("m_co");
    c.m_mm = j.at("m_mm");
    c.use_co_gsu = j.at("use_co_gsu");
    c.use_mm_gsu = j.at("use_mm_gsu");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad estimator config: ") + e.what());
  }
  c.validate();
  return c;
}

namespace {
constexpr std::string_view kCkptMagic = "MCKPT1";
}

void save_checkpoint(const EstimatorParams& params, const std::string& path, const std::string& run_config_json) {
  nlohmann::ordered_json header;
  header["estimator"] = nlohmann::json::parse(config_to_json(params.cfg));
  header["n_nodes"] = params.node_emb.rows();
  if (!run_config_json.empty()) header["run"] = nlohmann::ordered_json::parse(run_config_json);
  std::vector<TensorView> tensors;
  const_cast<EstimatorParams&>(params).for_each_tensor([&](TensorView t) { tensors.push_back(std::move(t)); });

  io::BinaryWriter w(path);
  w.bytes(kCkptMagic);
  w.blob(header.dump());
  w.scalar<std::uint32_t>(static_cast<std::uint32_t>(tensors.size()));
  std::vector<float> buf;
  for (const auto& t : tensors) {
    w.blob(t.name);
    w.scalar<std::uint32_t>(static_cast<std::uint32_t>(t.rows));
    w.scalar<std::uint32_t>(static_cast<std::uint32_t>(t.cols));
    buf.resize(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) buf[i] = static_cast<float>(t.data[i]);
    w.floats(buf);
  }
  w.close();
}

EstimatorParams load_checkpoint(const std::string& path) {
  io::BinaryReader r(path);
  r.expect_magic(kCkptMagic);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(r.blob());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": bad checkpoint header: " + e.what());
  }
  if (!header.contains("estimator") || !header.contains("n_nodes")) throw FormatError(path + ": incomplete header");
  const EstimatorConfig cfg = config_from_json(header["estimator"].dump());
  EstimatorParams p = EstimatorParams::init(cfg, header["n_nodes"].get<NodeId>(), 0);
  std::vector<TensorView> tensors;
  p.for_each_tensor([&](TensorView t) { tensors.push_back(std::move(t)); });
  const auto n = r.scalar<std::uint32_t>();
  if (n != tensors.size()) throw FormatError(path + ": tensor count mismatch");
  std::vector<float> buf;
  for (const auto& t : tensors) {
    const std::string name = r.blob(4096);
    const auto rows = r.scalar<std::uint32_t>();
    const auto cols = r.scalar<std::uint32_t>();
    if (name != t.name || rows != t.rows || cols != t.cols)
      throw FormatError(path + ": unexpected tensor " + name);
    buf.resize(t.size());
    r.floats(buf);
    for (std::size_t i = 0; i < t.size(); ++i) t.data[i] = buf[i];
  }
  return p;
}

}  // namespace miss::estimator
