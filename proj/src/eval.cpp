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

#include "miss/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <unordered_map>
#include <unordered_set>

#include "miss/parallel.hpp"

namespace miss::eval {

std::optional<double> recall_at_k(std::span<const ItemId> retrieved, std::span<const ItemId> relevant) {
  const std::set<ItemId> rel(relevant.begin(), relevant.end());
  if (rel.empty()) return std::nullopt;
  const std::set<ItemId> got(retrieved.begin(), retrieved.end());
  std::size_t hit = 0;
  for (ItemId i : rel) hit += got.count(i);
  return static_cast<double>(hit) / static_cast<double>(rel.size());
}

std::optional<double> hier_recall(const retrieval::BeamTrace& trace, std::span<const ItemId> relevant,
                                  const tree::IndexTree& tree, int h) {
  if (h < 0 || h > tree.height()) throw ConfigError("hierarchical recall level out of range");
  if (static_cast<int>(trace.levels.size()) <= h) throw LookupError("beam trace has no level " + std::to_string(h));
  std::set<NodeId> anc;
  for (ItemId i : relevant) anc.insert(tree.ancestor(tree.leaf_of(i), h));
  if (anc.empty()) return std::nullopt;
  std::size_t hit = 0;
  for (const auto& s : trace.levels[h]) hit += anc.count(s.node);
  return static_cast<double>(hit) / static_cast<double>(anc.size());
}

double overlap_rate(std::span<const std::vector<int>> co_selected, std::span<const std::vector<int>> mm_selected) {
  if (co_selected.size() != mm_selected.size()) throw ConfigError("overlap_rate needs paired selections");
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < co_selected.size(); ++i) {
    const auto& a = co_selected[i];
    const auto& b = mm_selected[i];
    if (a.size() != b.size()) throw ConfigError("overlap_rate needs selections of equal size K");
    if (a.empty()) continue;
    const std::set<int> sa(a.begin(), a.end());
    std::size_t common = 0;
    for (int x : std::set<int>(b.begin(), b.end())) common += sa.count(x);
    sum += static_cast<double>(common) / static_cast<double>(a.size());
    ++n;
  }
  return n ? sum / static_cast<double>(n) : 0.0;
}

MeanStd mean_std(std::span<const double> values) {
  MeanStd r;
  r.n = static_cast<int>(values.size());
  if (values.empty()) return r;
  r.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - r.mean) * (v - r.mean);
    r.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return r;
}

nlohmann::ordered_json EvalReport::metrics_json() const {
  auto ms = [](const MeanStd& m) { return nlohmann::ordered_json{{"mean", m.mean}, {"std", m.std}, {"splits", m.n}}; };
  nlohmann::ordered_json j;
  for (const auto& [k, v] : recall) j["recall"][std::to_string(k)] = ms(v);
  for (const auto& [k, v] : random_recall) j["random_recall"][std::to_string(k)] = ms(v);
  for (const auto& [b, levels] : hier_recall)
    for (const auto& [h, v] : levels) j["hier_recall"][std::to_string(b)][std::to_string(h)] = ms(v);
  j["leaf_equivalence_violations"] = leaf_equivalence_violations;
  j["hier_monotonicity_violations"] = hier_monotonicity_violations;
  j["overlap_rate"] = overlap_rate;
  j["heap_tendency"] = heap_tendency;
  j["users_evaluated"] = users_evaluated;
  j["users_skipped"] = users_skipped;
  return j;
}

namespace {

struct UserResult {
  bool has_relevant = false;
  std::map<int, double> recall;
  std::map<int, double> random_recall;
  std::map<int, std::map<int, double>> hier;
  bool leaf_mismatch = false;
  std::vector<int> co_positions, mm_positions;
  int heap_leaves = 0, heap_pass = 0;
};

// Selected window indices -> distance from the most recent event.
std::vector<int> from_end(const std::vector<int>& selected, std::size_t window) {
  std::vector<int> out;
  for (int i : selected) out.push_back(static_cast<int>(window) - 1 - i);
  return out;
}

}  // namespace

EvalReport evaluate(std::span<const EvalUser> users, const estimator::EstimatorParams& params,
                    const tree::IndexTree& tree, const mmembed::EmbeddingStore& store, const EvalConfig& cfg) {
  const auto start = std::chrono::steady_clock::now();
  if (cfg.n_splits < 1) throw ConfigError("n_splits must be >= 1");
  for (int k : cfg.recall_ks)
    if (k < 1 || k > cfg.beam_size) throw ConfigError("every recall K must be in [1, beam_size]");
  std::vector<int> beams = cfg.hier_beam_sizes;
  beams.push_back(cfg.beam_size);
  std::sort(beams.begin(), beams.end());
  beams.erase(std::unique(beams.begin(), beams.end()), beams.end());
  std::vector<int> levels = cfg.hier_levels;
  if (levels.empty())
    for (int h = 1; h <= tree.height(); ++h) levels.push_back(h);
  for (int h : levels)
    if (h < 0 || h > tree.height()) throw ConfigError("hierarchical recall level out of range");

  std::vector<UserResult> results(users.size());
  parallel_for(users.size(), cfg.threads, [&](std::size_t ui) {
    const auto& u = users[ui];
    auto& out = results[ui];
    std::vector<ItemId> relevant;
    for (ItemId i : u.relevant)
      if (std::find(relevant.begin(), relevant.end(), i) == relevant.end()) relevant.push_back(i);
    if (relevant.empty()) return;
    out.has_relevant = true;

    const retrieval::NodeScorer scorer(params, tree, store, u.user, u.sequence);
    std::unordered_map<NodeId, double> memo;
    auto cached = [&](NodeId n) {
      auto it = memo.find(n);
      if (it != memo.end()) return it->second;
      const double s = scorer(n);
      memo.emplace(n, s);
      return s;
    };
    for (int b : beams) {
      const auto trace = retrieval::beam_search(tree, b, cached);
      for (int h : levels) out.hier[b][h] = *hier_recall(trace, relevant, tree, h);
      if (b == cfg.beam_size) {
        for (int m : cfg.recall_ks) {
          std::vector<ItemId> got;
          for (const auto& it : retrieval::top_items(tree, trace, m)) got.push_back(it.item);
          out.recall[m] = *recall_at_k(got, relevant);
        }
        std::vector<ItemId> leaves;
        for (const auto& s : trace.final_beam()) leaves.push_back(tree.item_at(s.node));
        out.leaf_mismatch = *hier_recall(trace, relevant, tree, tree.height()) != *recall_at_k(leaves, relevant);
      }
    }

    Rng rng = make_rng(cfg.seed, 0x5eed0000ULL + static_cast<std::uint64_t>(u.user));
    for (int m : cfg.recall_ks) {
      std::unordered_set<ItemId> pick;
      const int want = std::min(m, tree.n_items());
      while (static_cast<int>(pick.size()) < want) pick.insert(static_cast<ItemId>(uniform_index(rng, tree.n_items())));
      const std::vector<ItemId> got(pick.begin(), pick.end());
      out.random_recall[m] = *recall_at_k(got, relevant);
    }

    const auto tr = estimator::forward(params, tree, scorer.context(), tree.leaf_of(relevant.front()));
    if (!tr.co_selected.empty() && !tr.mm_selected.empty()) {
      out.co_positions = from_end(tr.co_selected, scorer.context().co_items.size());
      out.mm_positions = from_end(tr.mm_selected, scorer.context().mm_items.size());
    }

    if (static_cast<int>(ui) < cfg.heap_users) {
      Rng hrng = make_rng(cfg.seed, 0x4ea90000ULL + static_cast<std::uint64_t>(u.user));
      for (ItemId item : relevant) {
        const NodeId leaf = tree.leaf_of(item);
        bool ok = true;
        for (int h = 1; h <= tree.height() && ok; ++h) {
          const NodeId a = tree.ancestor(leaf, h);
          std::vector<NodeId> others;
          const NodeId first = tree::IndexTree::first_at(h);
          for (NodeId n = first; n < first + tree::IndexTree::width_at(h); ++n)
            if (n != a && !tree.is_placeholder(n)) others.push_back(n);
          const std::size_t take = std::min<std::size_t>(others.size(), static_cast<std::size_t>(cfg.heap_candidates));
          for (std::size_t k = 0; k < take; ++k) std::swap(others[k], others[k + uniform_index(hrng, others.size() - k)]);
          const retrieval::ScoredNode mine{a, cached(a)};
          std::size_t above = 0;
          for (std::size_t k = 0; k < take; ++k)
            if (retrieval::ranks_before({others[k], cached(others[k])}, mine)) ++above;
          ok = 2 * above < take + 1;
        }
        ++out.heap_leaves;
        out.heap_pass += ok ? 1 : 0;
      }
    }
  });

  EvalReport rep;
  std::vector<std::vector<const UserResult*>> splits(cfg.n_splits);
  for (std::size_t i = 0; i < results.size(); ++i) {
    if (!results[i].has_relevant) {
      ++rep.users_skipped;
      continue;
    }
    ++rep.users_evaluated;
    splits[i % cfg.n_splits].push_back(&results[i]);
  }
  auto aggregate = [&](auto&& get) {
    std::vector<double> per_split;
    for (const auto& s : splits) {
      if (s.empty()) continue;
      double sum = 0.0;
      for (const auto* r : s) sum += get(*r);
      per_split.push_back(sum / static_cast<double>(s.size()));
    }
    return mean_std(per_split);
  };
  for (int m : cfg.recall_ks) {
    rep.recall[m] = aggregate([m](const UserResult& r) { return r.recall.at(m); });
    rep.random_recall[m] = aggregate([m](const UserResult& r) { return r.random_recall.at(m); });
  }
  for (int b : beams)
    for (int h : levels) rep.hier_recall[b][h] = aggregate([b, h](const UserResult& r) { return r.hier.at(b).at(h); });
  for (std::size_t k = 1; k < beams.size(); ++k)
    for (int h : levels)
      if (rep.hier_recall[beams[k]][h].mean < rep.hier_recall[beams[k - 1]][h].mean) ++rep.hier_monotonicity_violations;

  std::vector<std::vector<int>> co, mm;
  int heap_leaves = 0, heap_pass = 0;
  for (const auto& r : results) {
    if (r.leaf_mismatch) ++rep.leaf_equivalence_violations;
    if (!r.co_positions.empty() && r.co_positions.size() == r.mm_positions.size()) {
      co.push_back(r.co_positions);
      mm.push_back(r.mm_positions);
    }
    heap_leaves += r.heap_leaves;
    heap_pass += r.heap_pass;
  }
  rep.overlap_rate = overlap_rate(co, mm);
  rep.heap_tendency = heap_leaves ? static_cast<double>(heap_pass) / heap_leaves : 0.0;
  rep.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  return rep;
}

namespace {

std::vector<double> softmax_row(const Vec& v) {
  std::vector<double> out(static_cast<std::size_t>(v.size()));
  if (v.size() == 0) return out;
  const double mx = v.maxCoeff();
  double z = 0.0;
  for (Eigen::Index i = 0; i < v.size(); ++i) z += out[i] = std::exp(v[i] - mx);
  for (double& x : out) x /= z;
  return out;
}

double entropy(const std::vector<double>& p) {
  double h = 0.0;
  for (double x : p)
    if (x > 0.0) h -= x * std::log(x);
  return h;
}

void histogram(const std::vector<std::vector<double>>& rows, std::vector<int>& bins, double& max_value) {
  max_value = 0.0;
  for (const auto& r : rows)
    for (double v : r) max_value = std::max(max_value, v);
  bins.assign(kHistogramBins, 0);
  for (const auto& r : rows)
    for (double v : r) {
      const int b = max_value > 0.0 ? static_cast<int>(v / max_value * kHistogramBins) : 0;
      ++bins[std::clamp(b, 0, kHistogramBins - 1)];
    }
}

}  // namespace

AttentionDump attention_scores(std::span<const AttentionQuery> queries, const estimator::EstimatorParams& params,
                               const tree::IndexTree& tree, const mmembed::EmbeddingStore& store) {
  AttentionDump dump;
  double co_h = 0.0, mm_h = 0.0;
  for (const auto& q : queries) {
    const auto ctx = estimator::build_context(params, tree, store, q.user, q.sequence);
    dump.users.push_back(q.user);
    dump.co_rows.push_back(params.cfg.use_co_gsu ? softmax_row(estimator::co_gsu_scores(params, ctx, q.node))
                                                 : std::vector<double>{});
    dump.mm_rows.push_back(params.cfg.use_mm_gsu ? softmax_row(estimator::mm_gsu_scores(ctx, tree, q.node))
                                                 : std::vector<double>{});
    co_h += entropy(dump.co_rows.back());
    mm_h += entropy(dump.mm_rows.back());
  }
  if (!queries.empty()) {
    dump.co_mean_entropy = co_h / static_cast<double>(queries.size());
    dump.mm_mean_entropy = mm_h / static_cast<double>(queries.size());
  }
  histogram(dump.co_rows, dump.co_hist, dump.co_hist_max);
  histogram(dump.mm_rows, dump.mm_hist, dump.mm_hist_max);
  return dump;
}

void write_attention(const AttentionDump& dump, const std::string& dir) {
  std::filesystem::create_directories(dir);
  char buf[40];
  auto write_rows = [&](const std::string& name, const std::vector<std::vector<double>>& rows) {
    std::ofstream out(dir + "/" + name, std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + dir + "/" + name);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      out << dump.users[i];
      for (double v : rows[i]) {
        std::snprintf(buf, sizeof(buf), ",%.9g", v);
        out << buf;
      }
      out << '\n';
    }
    if (!out) throw IoError("write failed: " + dir + "/" + name);
  };
  write_rows("attention_co.csv", dump.co_rows);
  write_rows("attention_mm.csv", dump.mm_rows);
  std::ofstream out(dir + "/attention_hist.csv", std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + dir + "/attention_hist.csv");
  out << "branch,bin_lo,bin_hi,count\n";
  auto write_hist = [&](const char* name, const std::vector<int>& bins, double mx) {
    for (int b = 0; b < kHistogramBins; ++b) {
      std::snprintf(buf, sizeof(buf), "%.9g,%.9g", mx * b / kHistogramBins, mx * (b + 1) / kHistogramBins);
      out << name << ',' << buf << ',' << bins[b] << '\n';
    }
  };
  write_hist("co", dump.co_hist, dump.co_hist_max);
  write_hist("mm", dump.mm_hist, dump.mm_hist_max);
  if (!out) throw IoError("write failed: " + dir + "/attention_hist.csv");
}

}  // namespace miss::eval
