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

#include "miss/corpus.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "miss/binary_io.hpp"

namespace miss::corpus {

Vec ItemCorpus::content(ItemId item) const {
  if (item < 0 || item >= n_items()) throw LookupError("unknown item " + std::to_string(item));
  Vec out(d_content());
  out.head(text.cols()) = text.row(item).transpose().cast<double>();
  out.tail(image.cols()) = image.row(item).transpose().cast<double>();
  return out;
}

ItemCorpus generate_corpus(const CorpusConfig& cfg, std::uint64_t seed) {
  if (cfg.n_items < 2) throw ConfigError("n_items must be >= 2");
  if (cfg.n_clusters < 1 || cfg.n_clusters > cfg.n_items)
    throw ConfigError("n_clusters must be in [1, n_items]");
  if (cfg.d_text < 1 || cfg.d_image < 1) throw ConfigError("content dims must be >= 1");
  if (!(cfg.content_noise >= 0.0)) throw ConfigError("content_noise must be >= 0");

  ItemCorpus c;
  c.config = cfg;
  c.seed = seed;
  Rng rng = make_rng(seed, 1);

  // Round-robin over a shuffled item order: equal cluster sizes when divisible,
  // no correlation between item id and cluster.
  std::vector<ItemId> order(cfg.n_items);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = order.size() - 1; i > 0; --i)
    std::swap(order[i], order[uniform_index(rng, i + 1)]);
  c.latent_cluster.assign(cfg.n_items, 0);
  c.cluster_members.assign(cfg.n_clusters, {});
  for (int k = 0; k < cfg.n_items; ++k) c.latent_cluster[order[k]] = k % cfg.n_clusters;
  for (int i = 0; i < cfg.n_items; ++i) c.cluster_members[c.latent_cluster[i]].push_back(i);

  Mat text_centroids(cfg.n_clusters, cfg.d_text);
  Mat image_centroids(cfg.n_clusters, cfg.d_image);
  for (int k = 0; k < cfg.n_clusters; ++k) {
    for (int j = 0; j < cfg.d_text; ++j) text_centroids(k, j) = standard_normal(rng);
    for (int j = 0; j < cfg.d_image; ++j) image_centroids(k, j) = standard_normal(rng);
  }
  c.text.resize(cfg.n_items, cfg.d_text);
  c.image.resize(cfg.n_items, cfg.d_image);
  for (int i = 0; i < cfg.n_items; ++i) {
    const int k = c.latent_cluster[i];
    for (int j = 0; j < cfg.d_text; ++j)
      c.text(i, j) = static_cast<float>(text_centroids(k, j) + cfg.content_noise * standard_normal(rng));
    for (int j = 0; j < cfg.d_image; ++j)
      c.image(i, j) = static_cast<float>(image_centroids(k, j) + cfg.content_noise * standard_normal(rng));
  }

  c.popularity.assign(cfg.n_items, 1.0);
  for (auto& members : c.cluster_members) {
    std::vector<std::size_t> rank(members.size());
    std::iota(rank.begin(), rank.end(), 0);
    for (std::size_t i = rank.size(); i > 1; --i) std::swap(rank[i - 1], rank[uniform_index(rng, i)]);
    for (std::size_t i = 0; i < members.size(); ++i)
      c.popularity[members[i]] = 1.0 / std::pow(static_cast<double>(rank[i] + 1), cfg.popularity_skew);
  }
  return c;
}

namespace {
constexpr std::string_view kCorpusMagic = "MCORP1";
}

void save_corpus(const ItemCorpus& c, const std::string& path, const std::string& config_json) {
  io::BinaryWriter w(path);
  w.bytes(kCorpusMagic);
  w.scalar<std::uint32_t>(static_cast<std::uint32_t>(c.n_items()));
  w.scalar<std::uint32_t>(static_cast<std::uint32_t>(c.n_clusters()));
  w.scalar<std::uint32_t>(static_cast<std::uint32_t>(c.text.cols()));
  w.scalar<std::uint32_t>(static_cast<std::uint32_t>(c.image.cols()));
  w.scalar<std::uint64_t>(c.seed);
  w.scalar<double>(c.config.content_noise);
  w.scalar<double>(c.config.popularity_skew);
  for (int i = 0; i < c.n_items(); ++i) {
    w.scalar<std::int32_t>(c.latent_cluster[i]);
    w.scalar<double>(c.popularity[i]);
    w.floats({c.text.row(i).data(), static_cast<std::size_t>(c.text.cols())});
    w.floats({c.image.row(i).data(), static_cast<std::size_t>(c.image.cols())});
  }
  io::write_config_trailer(w, config_json);
  w.close();
}

ItemCorpus load_corpus(const std::string& path) {
  io::BinaryReader r(path);
  r.expect_magic(kCorpusMagic);
  ItemCorpus c;
  const auto n = r.scalar<std::uint32_t>();
  const auto k = r.scalar<std::uint32_t>();
  const auto dt = r.scalar<std::uint32_t>();
  const auto di = r.scalar<std::uint32_t>();
  if (n < 2 || k < 1 || k > n || dt < 1 || di < 1 || n > (1u << 28) || dt > 4096 || di > 4096)
    throw FormatError(path + ": implausible corpus header");
  c.config.n_items = static_cast<int>(n);
  c.config.n_clusters = static_cast<int>(k);
  c.config.d_text = static_cast<int>(dt);
  c.config.d_image = static_cast<int>(di);
  c.seed = r.scalar<std::uint64_t>();
  c.config.content_noise = r.scalar<double>();
  c.config.popularity_skew = r.scalar<double>();
  c.text.resize(n, dt);
  c.image.resize(n, di);
  c.latent_cluster.resize(n);
  c.popularity.resize(n);
  c.cluster_members.assign(k, {});
  for (std::uint32_t i = 0; i < n; ++i) {
    const auto cl = r.scalar<std::int32_t>();
    if (cl < 0 || static_cast<std::uint32_t>(cl) >= k) throw FormatError(path + ": bad cluster id");
    c.latent_cluster[i] = cl;
    c.cluster_members[cl].push_back(static_cast<ItemId>(i));
    c.popularity[i] = r.scalar<double>();
    r.floats({c.text.row(i).data(), dt});
    r.floats({c.image.row(i).data(), di});
  }
  return c;
}

bool TrainingInstance::any_positive() const {
  return std::any_of(labels.begin(), labels.end(), [](std::uint8_t l) { return l != 0; });
}

namespace {

// Samples an index from unnormalized non-negative weights.
std::size_t sample_weighted(Rng& rng, const std::vector<double>& cumulative) {
  const double u = uniform01(rng) * cumulative.back();
  auto it = std::upper_bound(cumulative.begin(), cumulative.end(), u);
  if (it == cumulative.end()) --it;
  return static_cast<std::size_t>(it - cumulative.begin());
}

}  // namespace

GeneratedLogs generate_logs(const ItemCorpus& corpus, const LogConfig& cfg, std::uint64_t seed) {
  if (corpus.n_items() == 0) throw ConfigError("empty corpus");
  if (cfg.T < 1) throw ConfigError("T must be >= 1");
  if (static_cast<int>(cfg.label_rates.size()) != cfg.T)
    throw ConfigError("label_rates must have T entries");
  if (cfg.n_users < 1 || cfg.events_per_user < 1) throw ConfigError("n_users and events_per_user must be >= 1");
  if (cfg.n_interests < 1 || cfg.n_interests > corpus.n_clusters())
    throw ConfigError("n_interests must be in [1, n_clusters]");
  if (cfg.noise < 0.0 || cfg.noise > 1.0) throw ConfigError("noise must be in [0, 1]");
  if (cfg.max_seq_len < 1) throw ConfigError("max_seq_len must be >= 1");

  const int n_clusters = corpus.n_clusters();
  std::vector<std::vector<double>> member_cdf(n_clusters);
  for (int k = 0; k < n_clusters; ++k) {
    double acc = 0.0;
    for (ItemId i : corpus.cluster_members[k]) member_cdf[k].push_back(acc += corpus.popularity[i]);
  }

  GeneratedLogs out;
  out.users.reserve(cfg.n_users);
  out.instances.reserve(static_cast<std::size_t>(cfg.n_users) * cfg.events_per_user);
  for (int u = 0; u < cfg.n_users; ++u) {
    Rng rng = make_rng(seed, 1000 + static_cast<std::uint64_t>(u));
    UserProfile profile;
    profile.user = u;
    profile.affinity.assign(n_clusters, 0.0);
    std::vector<int> clusters(n_clusters);
    std::iota(clusters.begin(), clusters.end(), 0);
    double total = 0.0;
    for (int j = 0; j < cfg.n_interests; ++j) {
      const std::size_t pick = j + uniform_index(rng, n_clusters - j);
      std::swap(clusters[j], clusters[pick]);
      const double w = -std::log(1.0 - uniform01(rng));  // Exp(1) -> Dirichlet(1,...,1)
      profile.affinity[clusters[j]] = w;
      total += w;
    }
    for (double& a : profile.affinity) a /= total;

    std::vector<double> event_cdf(n_clusters);
    double acc = 0.0;
    for (int k = 0; k < n_clusters; ++k)
      event_cdf[k] = acc += (1.0 - cfg.noise) * profile.affinity[k] + cfg.noise / n_clusters;

    std::int64_t ts = static_cast<std::int64_t>(uniform_index(rng, 1000));
    BehaviorSequence history;
    for (int e = 0; e < cfg.events_per_user; ++e) {
      const auto k = static_cast<int>(sample_weighted(rng, event_cdf));
      const ItemId item = corpus.cluster_members[k][sample_weighted(rng, member_cdf[k])];
      const bool matched = profile.affinity[k] > 0.0;
      TrainingInstance inst;
      inst.user = u;
      inst.ts = ts;
      inst.target = item;
      inst.labels.resize(cfg.T);
      for (int t = 0; t < cfg.T; ++t) {
        const double rate = cfg.label_rates[t] * (matched ? 1.0 : cfg.mismatch_factor);
        inst.labels[t] = uniform01(rng) < rate ? 1 : 0;
      }
      const std::size_t keep = std::min<std::size_t>(history.size(), cfg.max_seq_len);
      inst.sequence.assign(history.end() - static_cast<std::ptrdiff_t>(keep), history.end());
      out.instances.push_back(std::move(inst));
      history.push_back(item);
      ts += 1 + static_cast<std::int64_t>(uniform_index(rng, 100));
    }
    out.users.push_back(std::move(profile));
  }
  std::stable_sort(out.instances.begin(), out.instances.end(), [](const auto& a, const auto& b) {
    return a.ts != b.ts ? a.ts < b.ts : a.user < b.user;
  });
  return out;
}

HoldoutSplit split_holdout(const std::vector<TrainingInstance>& instances, int holdout_events) {
  if (holdout_events < 0) throw ConfigError("holdout_events must be >= 0");
  std::map<UserId, std::vector<std::int64_t>> times;
  for (const auto& inst : instances) times[inst.user].push_back(inst.ts);
  std::map<UserId, std::int64_t> cutoff;  // first test timestamp per user
  for (auto& [user, ts] : times) {
    std::sort(ts.begin(), ts.end());
    if (holdout_events == 0) continue;
    const std::size_t n_test = std::min<std::size_t>(ts.size(), holdout_events);
    cutoff[user] = ts[ts.size() - n_test];
  }
  HoldoutSplit split;
  for (const auto& inst : instances) {
    auto it = cutoff.find(inst.user);
    if (it != cutoff.end() && inst.ts >= it->second)
      split.test.push_back(inst);
    else
      split.train.push_back(inst);
  }
  return split;
}

void write_logs(const std::string& path, const std::vector<TrainingInstance>& instances, int T) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << "user_id,ts,target_item,labels:" << T << ",seq_item_ids\n";
  std::string line;
  for (const auto& inst : instances) {
    if (static_cast<int>(inst.labels.size()) != T) throw ShapeError("instance label count != T");
    line.clear();
    line += std::to_string(inst.user);
    line += ',';
    line += std::to_string(inst.ts);
    line += ',';
    line += std::to_string(inst.target);
    for (auto l : inst.labels) {
      line += ',';
      line += l ? '1' : '0';
    }
    line += ',';
    for (std::size_t i = 0; i < inst.sequence.size(); ++i) {
      if (i) line += ';';
      line += std::to_string(inst.sequence[i]);
    }
    line += '\n';
    out << line;
  }
  out.flush();
  if (!out) throw IoError("write failed: " + path);
}

namespace {

template <class T>
bool parse_int(std::string_view s, T& v) {
  if (s.empty()) return false;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  return ec == std::errc() && p == s.data() + s.size();
}

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> parts;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= s.size(); ++i) {
    if (i == s.size() || s[i] == sep) {
      parts.push_back(s.substr(start, i - start));
      start = i + 1;
    }
  }
  return parts;
}

int parse_header(std::string_view header, const std::string& path) {
  auto cols = split(header, ',');
  if (cols.size() != 5 || cols[0] != "user_id" || cols[1] != "ts" || cols[2] != "target_item" ||
      cols[4] != "seq_item_ids" || !cols[3].starts_with("labels:"))
    throw IngestionError(path + ": bad header line");
  int T = 0;
  if (!parse_int(cols[3].substr(7), T) || T < 1) throw IngestionError(path + ": bad label count in header");
  return T;
}

bool parse_line(std::string_view line, int T, const LogSchema& schema, TrainingInstance& inst) {
  auto f = split(line, ',');
  if (f.size() != static_cast<std::size_t>(4 + T)) return false;
  if (!parse_int(f[0], inst.user) || !parse_int(f[1], inst.ts) || !parse_int(f[2], inst.target)) return false;
  if (inst.target < 0 || (schema.n_items > 0 && inst.target >= schema.n_items)) return false;
  inst.labels.resize(T);
  for (int t = 0; t < T; ++t) {
    if (f[3 + t] == "0") inst.labels[t] = 0;
    else if (f[3 + t] == "1") inst.labels[t] = 1;
    else return false;
  }
  inst.sequence.clear();
  const std::string_view seq = f[3 + T];
  if (!seq.empty()) {
    for (auto tok : split(seq, ';')) {
      ItemId id = 0;
      if (!parse_int(tok, id) || id < 0 || (schema.n_items > 0 && id >= schema.n_items)) return false;
      inst.sequence.push_back(id);
    }
  }
  if (schema.max_seq_len > 0 && static_cast<int>(inst.sequence.size()) > schema.max_seq_len) return false;
  return true;
}

}  // namespace

IngestResult ingest_logs(const std::string& path, const LogSchema& schema) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open log file: " + path);
  IngestResult result;
  std::string line;
  if (!std::getline(in, line)) {
    if (in.bad()) throw IoError("read failed: " + path);
    result.T = schema.T;
    return result;
  }
  if (!line.empty() && line.back() == '\r') line.pop_back();
  result.T = parse_header(line, path);
  if (schema.T > 0 && schema.T != result.T)
    throw IngestionError(path + ": header declares T=" + std::to_string(result.T) + ", expected " +
                         std::to_string(schema.T));
  TrainingInstance inst;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    ++result.lines;
    if (parse_line(line, result.T, schema, inst))
      result.instances.push_back(inst);
    else
      ++result.malformed;
  }
  if (in.bad()) throw IoError("read failed: " + path);
  if (result.lines > 0 &&
      static_cast<double>(result.malformed) > schema.max_malformed_fraction * static_cast<double>(result.lines))
    throw IngestionError(path + ": " + std::to_string(result.malformed) + " of " + std::to_string(result.lines) +
                         " lines malformed");
  return result;
}

}  // namespace miss::corpus
