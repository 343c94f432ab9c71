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

#include "miss/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#include "miss/corpus.hpp"
#include "miss/estimator.hpp"
#include "miss/mmembed.hpp"
#include "miss/training.hpp"
#include "miss/tree.hpp"

namespace miss::pipeline {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

namespace {

// Seed streams per stage.
enum Stream : std::uint64_t {
  kCorpusSeed = 1,
  kLogsSeed = 2,
  kPairsSeed = 3,
  kEmbedSeed = 4,
  kTreeSeed = 5,
  kInitSeed = 6,
  kTrainSeed = 7,
  kIdTreeSeed = 9,
};

std::uint64_t stage_seed(const config::RunConfig& cfg, Stream s) { return derive_seed(cfg.seed, s); }

void log(const std::string& msg) { std::clog << "[miss] " << msg << std::endl; }

void require(const std::string& path, const std::string& producer) {
  if (!fs::exists(path))
    throw DependencyError("missing artifact " + path + "; run the '" + producer + "' stage first");
}

void prepare(const config::RunConfig& cfg) {
  fs::create_directories(cfg.out_dir);
  const Artifacts a{cfg.out_dir};
  std::ofstream out(a.config(), std::ios::trunc);
  if (!out) throw IoError("cannot write " + a.config());
  out << cfg.to_json().dump(2) << '\n';
}

std::string echo(const config::RunConfig& cfg) { return cfg.to_json().dump(); }

void write_json(const std::string& path, const json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out << j.dump(2) << '\n';
  if (!out) throw IoError("write failed: " + path);
}

double elapsed_ms(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

void record_timing(const config::RunConfig& cfg, const std::string& stage, double ms) {
  const Artifacts a{cfg.out_dir};
  json t = json::object();
  if (fs::exists(a.timings())) {
    std::ifstream in(a.timings());
    t = json::parse(in, nullptr, false);
    if (t.is_discarded() || !t.is_object()) t = json::object();
  }
  t[stage + "_ms"] = ms;
  write_json(a.timings(), t);
}

std::vector<corpus::TrainingInstance> read_logs(const config::RunConfig& cfg, const std::string& path) {
  corpus::LogSchema schema;
  schema.T = cfg.logs.T;
  schema.n_items = cfg.corpus.n_items;
  schema.max_seq_len = cfg.estimator.m_mm;
  auto r = corpus::ingest_logs(path, schema);
  if (r.malformed) log("skipped " + std::to_string(r.malformed) + " malformed lines in " + path);
  return std::move(r.instances);
}

tree::IndexTree read_tree(const config::RunConfig& cfg, const mmembed::EmbeddingStore& store) {
  const Artifacts a{cfg.out_dir};
  require(a.tree(), "build-tree");
  auto t = tree::load_tree(a.tree());
  if (t.n_items() != store.size() || t.dim() != store.dim())
    throw DependencyError("tree does not match the embeddings; rerun 'build-tree'");
  return t;
}

mmembed::EmbeddingStore read_store(const config::RunConfig& cfg) {
  const Artifacts a{cfg.out_dir};
  require(a.embeddings(), "train-embed");
  return mmembed::load_embeddings(a.embeddings());
}

estimator::EstimatorParams read_model(const config::RunConfig& cfg, const tree::IndexTree& tree) {
  const Artifacts a{cfg.out_dir};
  require(a.model(), "train");
  auto p = estimator::load_checkpoint(a.model());
  if (p.node_emb.rows() != tree.n_nodes()) throw DependencyError("model does not match the tree; rerun 'train'");
  return p;
}

std::vector<corpus::TrainingInstance> read_train_logs(const config::RunConfig& cfg) {
  const Artifacts a{cfg.out_dir};
  require(a.train_logs(), "gen-data");
  return read_logs(cfg, a.train_logs());
}

estimator::EstimatorParams fit(const config::RunConfig& cfg, const estimator::EstimatorConfig& est,
                               std::span<const corpus::TrainingInstance> instances, const tree::IndexTree& tree,
                               const mmembed::EmbeddingStore& store, const training::CheckpointHook& hook,
                               std::vector<training::MetricsRow>* metrics) {
  auto init = estimator::EstimatorParams::init(est, tree.n_nodes(), stage_seed(cfg, kInitSeed));
  auto r = training::train(instances, tree, store, std::move(init), cfg.train, stage_seed(cfg, kTrainSeed), hook);
  if (metrics) *metrics = std::move(r.metrics);
  log("trained " + std::to_string(r.steps) + " steps");
  r.params.round_to_float();
  return std::move(r.params);
}

std::vector<retrieval::Query> to_queries(const std::vector<eval::EvalUser>& users) {
  std::vector<retrieval::Query> q;
  q.reserve(users.size());
  for (const auto& u : users) q.push_back({u.user, u.sequence});
  return q;
}

}  // namespace

void gen_data(const config::RunConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  prepare(cfg);
  const Artifacts a{cfg.out_dir};
  const auto items = corpus::generate_corpus(cfg.corpus, stage_seed(cfg, kCorpusSeed));
  corpus::save_corpus(items, a.corpus(), echo(cfg));
  const auto logs = corpus::generate_logs(items, cfg.logs, stage_seed(cfg, kLogsSeed));
  const auto split = corpus::split_holdout(logs.instances, cfg.holdout_events);
  corpus::write_logs(a.train_logs(), split.train, cfg.logs.T);
  corpus::write_logs(a.test_logs(), split.test, cfg.logs.T);
  log("generated " + std::to_string(items.n_items()) + " items, " + std::to_string(split.train.size()) +
      " training and " + std::to_string(split.test.size()) + " held-out events");
  record_timing(cfg, "gen_data", elapsed_ms(t0));
}

void train_embed(const config::RunConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  prepare(cfg);
  const Artifacts a{cfg.out_dir};
  require(a.corpus(), "gen-data");
  const auto items = corpus::load_corpus(a.corpus());
  const auto pairs = mmembed::build_pairs(items, cfg.embed.pairs_per_item, stage_seed(cfg, kPairsSeed));
  for (const auto& w : pairs.warnings) log("warning: " + w);
  const auto r = mmembed::train_embeddings(items, pairs, cfg.embed, stage_seed(cfg, kEmbedSeed));
  mmembed::save_embeddings(r.store, a.embeddings(), echo(cfg));
  mmembed::export_embeddings_csv(r.store, a.embeddings_csv());
  std::ofstream out(a.embed_loss(), std::ios::trunc);
  if (!out) throw IoError("cannot write " + a.embed_loss());
  out << "epoch,info_nce_loss\n";
  char buf[32];
  for (std::size_t e = 0; e < r.epoch_losses.size(); ++e) {
    std::snprintf(buf, sizeof(buf), "%.9g", r.epoch_losses[e]);
    out << e << ',' << buf << '\n';
  }
  if (!r.epoch_losses.empty()) log("embedding loss " + std::to_string(r.epoch_losses.front()) + " -> " +
                                   std::to_string(r.epoch_losses.back()));
  record_timing(cfg, "train_embed", elapsed_ms(t0));
}

void build_tree(const config::RunConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  prepare(cfg);
  const Artifacts a{cfg.out_dir};
  const auto store = read_store(cfg);
  const auto t = tree::build_tree(store, stage_seed(cfg, kTreeSeed));
  tree::save_tree(t, a.tree(), echo(cfg));
  log("built tree of height " + std::to_string(t.height()));
  record_timing(cfg, "build_tree", elapsed_ms(t0));
}

void train(const config::RunConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  prepare(cfg);
  const Artifacts a{cfg.out_dir};
  const auto store = read_store(cfg);
  const auto t = read_tree(cfg, store);
  const auto instances = read_train_logs(cfg);
  const std::string run = echo(cfg);
  training::CheckpointHook hook;
  if (cfg.train.checkpoint_every > 0) {
    fs::create_directories(a.checkpoints());
    hook = [&](long step, const estimator::EstimatorParams& p) {
      estimator::save_checkpoint(p, a.checkpoints() + "/ckpt_" + std::to_string(step) + ".bin", run);
    };
  }
  std::vector<training::MetricsRow> metrics;
  const auto params = fit(cfg, cfg.estimator, instances, t, store, hook, &metrics);
  estimator::save_checkpoint(params, a.model(), run);
  training::write_metrics_csv(a.train_metrics(), metrics, cfg.logs.T);
  record_timing(cfg, "train", elapsed_ms(t0));
}

std::vector<eval::EvalUser> load_eval_users(const config::RunConfig& cfg) {
  const Artifacts a{cfg.out_dir};
  require(a.test_logs(), "gen-data");
  const auto train_logs = read_train_logs(cfg);
  const auto test_logs = read_logs(cfg, a.test_logs());
  std::map<UserId, eval::EvalUser> users;
  for (const auto& in : test_logs) {
    auto& u = users[in.user];
    u.user = in.user;
    if (in.any_positive()) u.relevant.push_back(in.target);
  }
  for (const auto& in : train_logs) {
    auto it = users.find(in.user);
    if (it != users.end()) it->second.sequence.push_back(in.target);
  }
  std::vector<eval::EvalUser> out;
  out.reserve(users.size());
  const auto keep = static_cast<std::size_t>(cfg.estimator.m_mm);
  for (auto& [id, u] : users) {
    if (u.sequence.size() > keep) u.sequence.erase(u.sequence.begin(), u.sequence.end() - static_cast<long>(keep));
    out.push_back(std::move(u));
  }
  return out;
}

void retrieve(const config::RunConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  prepare(cfg);
  const Artifacts a{cfg.out_dir};
  const auto store = read_store(cfg);
  const auto t = read_tree(cfg, store);
  const auto params = read_model(cfg, t);
  const auto queries = to_queries(load_eval_users(cfg));
  const auto results = retrieval::retrieve_all(queries, params, t, store, cfg.beam_size, cfg.m_ret, cfg.threads);
  retrieval::write_jsonl(a.retrieval(), results);
  log("retrieved " + std::to_string(cfg.m_ret) + " items for " + std::to_string(results.size()) + " users");
  record_timing(cfg, "retrieve", elapsed_ms(t0));
}

eval::EvalReport evaluate(const config::RunConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  prepare(cfg);
  const Artifacts a{cfg.out_dir};
  const auto store = read_store(cfg);
  const auto t = read_tree(cfg, store);
  const auto params = read_model(cfg, t);
  const auto users = load_eval_users(cfg);
  auto rep = eval::evaluate(users, params, t, store, cfg.eval);
  json j;
  j["config"] = cfg.to_json();
  j["seed"] = cfg.seed;
  j["metrics"] = rep.metrics_json();
  write_json(a.report(), j);
  const int m = cfg.eval.recall_ks.back();
  log("Recall@" + std::to_string(m) + " = " + std::to_string(rep.recall[m].mean) + " +/- " +
      std::to_string(rep.recall[m].std) + " (random " + std::to_string(rep.random_recall[m].mean) + ")");
  record_timing(cfg, "eval", elapsed_ms(t0));
  return rep;
}

eval::AttentionDump export_attention(const config::RunConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  prepare(cfg);
  const Artifacts a{cfg.out_dir};
  const auto store = read_store(cfg);
  const auto t = read_tree(cfg, store);
  const auto params = read_model(cfg, t);
  std::vector<eval::AttentionQuery> queries;
  for (const auto& u : load_eval_users(cfg)) {
    if (static_cast<int>(queries.size()) >= cfg.attention_users) break;
    if (u.relevant.empty() || u.sequence.empty()) continue;
    queries.push_back({u.user, u.sequence, t.leaf_of(u.relevant.front())});
  }
  auto dump = eval::attention_scores(queries, params, t, store);
  eval::write_attention(dump, a.dir);
  json j;
  j["config"] = cfg.to_json();
  j["seed"] = cfg.seed;
  j["users"] = dump.users.size();
  j["co_mean_entropy"] = dump.co_mean_entropy;
  j["mm_mean_entropy"] = dump.mm_mean_entropy;
  write_json(a.attention_summary(), j);
  record_timing(cfg, "export_attention", elapsed_ms(t0));
  return dump;
}

json ablate(const config::RunConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  prepare(cfg);
  const Artifacts a{cfg.out_dir};
  const auto store = read_store(cfg);
  const auto mm_tree = read_tree(cfg, store);
  const auto instances = read_train_logs(cfg);
  const auto users = load_eval_users(cfg);

  json variants = json::object();
  std::map<std::string, double> score;
  const int m = cfg.eval.recall_ks.back();
  for (const auto& name : cfg.ablation_variants) {
    log("ablation variant " + name);
    auto est = cfg.estimator;
    const tree::IndexTree* t = &mm_tree;
    tree::IndexTree id_tree;
    if (name == "no_mm_gsu") {
      est.use_mm_gsu = false;
    } else if (name == "no_both_gsu") {
      est.use_co_gsu = false;
      est.use_mm_gsu = false;
    } else if (name == "id_tree") {
      // Learn ID embeddings on a random tree, then index items by them.
      auto id_est = est;
      id_est.use_co_gsu = false;
      id_est.use_mm_gsu = false;
      const auto random_tree = tree::build_random_tree(store, stage_seed(cfg, kIdTreeSeed));
      const auto id_params = fit(cfg, id_est, instances, random_tree, store, {}, nullptr);
      MatF id_table(store.size(), id_est.d_id);
      for (ItemId i = 0; i < store.size(); ++i) {
        Vec row = id_params.node_emb.row(random_tree.leaf_of(i)).transpose();
        const double norm = row.norm();
        if (norm > 0.0) row /= norm;
        id_table.row(i) = row.cast<float>().transpose();
      }
      const auto by_id = tree::build_tree(mmembed::EmbeddingStore(std::move(id_table)), stage_seed(cfg, kTreeSeed));
      std::vector<ItemId> leaf_items(tree::IndexTree::width_at(by_id.height()));
      for (std::size_t k = 0; k < leaf_items.size(); ++k)
        leaf_items[k] = by_id.item_at(tree::IndexTree::first_at(by_id.height()) + static_cast<NodeId>(k));
      id_tree = tree::IndexTree(by_id.height(), store.dim(), store.size());
      id_tree.assign_leaves(leaf_items, store.table());
      t = &id_tree;
    }
    const auto params = fit(cfg, est, instances, *t, store, {}, nullptr);
    const auto rep = eval::evaluate(users, params, *t, store, cfg.eval);
    variants[name] = rep.metrics_json();
    score[name] = rep.recall.at(m).mean;
    log(name + ": Recall@" + std::to_string(m) + " = " + std::to_string(score[name]));
  }
  json j;
  j["config"] = cfg.to_json();
  j["seed"] = cfg.seed;
  j["recall_k"] = m;
  j["variants"] = variants;
  json order = json::object();
  auto cmp = [&](const char* hi, const char* lo) {
    if (score.count(hi) && score.count(lo)) order[std::string(hi) + ">=" + lo] = score[hi] >= score[lo];
  };
  cmp("full", "no_mm_gsu");
  cmp("no_mm_gsu", "id_tree");
  cmp("full", "no_both_gsu");
  if (score.count("full") && score.count("id_tree") && score["id_tree"] > 0.0)
    order["full_over_id_tree_relative"] = score["full"] / score["id_tree"] - 1.0;
  j["ordering"] = order;
  write_json(a.ablation(), j);
  record_timing(cfg, "ablate", elapsed_ms(t0));
  return j;
}

void run_all(const config::RunConfig& cfg) {
  gen_data(cfg);
  train_embed(cfg);
  build_tree(cfg);
  train(cfg);
  retrieve(cfg);
  evaluate(cfg);
  export_attention(cfg);
  if (cfg.ablation_in_pipeline) ablate(cfg);
}

}  // namespace miss::pipeline
