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

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include <gtest/gtest.h>

#include "miss/corpus.hpp"

namespace miss::corpus {
namespace {

std::string temp_path(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "miss_corpus_test";
  std::filesystem::create_directories(dir);
  return (dir / name).string();
}

CorpusConfig small_corpus() {
  CorpusConfig c;
  c.n_items = 200;
  c.n_clusters = 10;
  c.d_text = 4;
  c.d_image = 3;
  return c;
}

TEST(Corpus, GeneratesRequestedShape) {
  const auto c = generate_corpus(small_corpus(), 1);
  EXPECT_EQ(c.n_items(), 200);
  EXPECT_EQ(c.n_clusters(), 10);
  EXPECT_EQ(c.d_content(), 7);
  std::size_t members = 0;
  for (int k = 0; k < c.n_clusters(); ++k) {
    members += c.cluster_members[k].size();
    for (ItemId i : c.cluster_members[k]) EXPECT_EQ(c.latent_cluster[i], k);
  }
  EXPECT_EQ(members, 200u);
  for (int i = 0; i < c.n_items(); ++i) {
    EXPECT_TRUE(c.content(i).allFinite());
    EXPECT_GT(c.popularity[i], 0.0);
  }
}

TEST(Corpus, SameSeedSameCorpusAndDifferentSeedDiffers) {
  const auto a = generate_corpus(small_corpus(), 5);
  const auto b = generate_corpus(small_corpus(), 5);
  const auto c = generate_corpus(small_corpus(), 6);
  EXPECT_EQ(a.text, b.text);
  EXPECT_EQ(a.latent_cluster, b.latent_cluster);
  EXPECT_NE(a.text, c.text);
}

TEST(Corpus, ZeroNoiseItemsSitOnTheirCentroid) {
  auto cfg = small_corpus();
  cfg.content_noise = 0.0;
  const auto c = generate_corpus(cfg, 3);
  for (const auto& members : c.cluster_members)
    for (ItemId i : members) EXPECT_EQ(c.content(i), c.content(members.front()));
}

TEST(Corpus, InvalidCountsAreConfigErrors) {
  auto cfg = small_corpus();
  cfg.n_items = 1;
  EXPECT_THROW(generate_corpus(cfg, 1), ConfigError);
  cfg = small_corpus();
  cfg.n_clusters = 0;
  EXPECT_THROW(generate_corpus(cfg, 1), ConfigError);
  cfg.n_clusters = 201;
  EXPECT_THROW(generate_corpus(cfg, 1), ConfigError);
  cfg = small_corpus();
  cfg.content_noise = -1.0;
  EXPECT_THROW(generate_corpus(cfg, 1), ConfigError);
}

TEST(Corpus, SaveLoadRoundTrip) {
  const auto c = generate_corpus(small_corpus(), 9);
  const auto path = temp_path("corpus.bin");
  save_corpus(c, path, R"({"k":1})");
  const auto d = load_corpus(path);
  EXPECT_EQ(c.text, d.text);
  EXPECT_EQ(c.image, d.image);
  EXPECT_EQ(c.latent_cluster, d.latent_cluster);
  EXPECT_EQ(c.cluster_members, d.cluster_members);
}

TEST(Corpus, CorruptedMagicIsFormatError) {
  const auto path = temp_path("bad_corpus.bin");
  std::ofstream(path, std::ios::binary) << "NOTACORPUS";
  EXPECT_THROW(load_corpus(path), FormatError);
  EXPECT_THROW(load_corpus(temp_path("does_not_exist.bin")), IoError);
}

LogConfig small_logs() {
  LogConfig l;
  l.n_users = 300;
  l.events_per_user = 30;
  l.n_interests = 2;
  l.max_seq_len = 16;
  return l;
}

TEST(Logs, AffinitySumsToOneAndEventsFollowIt) {
  const auto c = generate_corpus(small_corpus(), 2);
  const auto cfg = small_logs();
  const auto logs = generate_logs(c, cfg, 3);
  ASSERT_EQ(logs.users.size(), 300u);
  for (const auto& u : logs.users) {
    double s = 0.0;
    int support = 0;
    for (double a : u.affinity) {
      s += a;
      support += a > 0.0;
    }
    EXPECT_NEAR(s, 1.0, 1e-9);
    EXPECT_EQ(support, cfg.n_interests);
  }
  std::size_t matched = 0;
  for (const auto& in : logs.instances)
    matched += logs.users[in.user].affinity[c.latent_cluster[in.target]] > 0.0;
  EXPECT_GE(static_cast<double>(matched) / logs.instances.size(), 0.8);
}

TEST(Logs, SequencesAreStrictPrefixesInTimeOrder) {
  const auto c = generate_corpus(small_corpus(), 2);
  const auto cfg = small_logs();
  const auto logs = generate_logs(c, cfg, 4);
  ASSERT_EQ(logs.instances.size(), 300u * 30u);
  for (std::size_t i = 1; i < logs.instances.size(); ++i) {
    const auto& a = logs.instances[i - 1];
    const auto& b = logs.instances[i];
    EXPECT_TRUE(a.ts < b.ts || (a.ts == b.ts && a.user < b.user));
  }
  std::map<UserId, std::vector<ItemId>> history;
  for (const auto& in : logs.instances) {
    auto& h = history[in.user];
    const std::size_t keep = std::min<std::size_t>(h.size(), cfg.max_seq_len);
    EXPECT_EQ(in.sequence, std::vector<ItemId>(h.end() - keep, h.end()));
    EXPECT_LE(in.sequence.size(), static_cast<std::size_t>(cfg.max_seq_len));
    EXPECT_EQ(in.labels.size(), 3u);
    h.push_back(in.target);
  }
}

TEST(Logs, MatchedTargetsGetPositivesAtTheConfiguredRates) {
  const auto c = generate_corpus(small_corpus(), 2);
  auto cfg = small_logs();
  cfg.n_users = 600;
  const auto logs = generate_logs(c, cfg, 5);
  std::vector<double> pos_m(3, 0), pos_u(3, 0);
  double n_m = 0, n_u = 0;
  for (const auto& in : logs.instances) {
    const bool m = logs.users[in.user].affinity[c.latent_cluster[in.target]] > 0.0;
    (m ? n_m : n_u) += 1;
    for (int t = 0; t < 3; ++t) (m ? pos_m : pos_u)[t] += in.labels[t];
  }
  for (int t = 0; t < 3; ++t) {
    EXPECT_NEAR(pos_m[t] / n_m, cfg.label_rates[t], 0.03);
    EXPECT_NEAR(pos_u[t] / n_u, cfg.label_rates[t] * cfg.mismatch_factor, 0.03);
  }
}

TEST(Logs, EmptyCorpusAndBadCountsAreConfigErrors) {
  EXPECT_THROW(generate_logs(ItemCorpus{}, small_logs(), 1), ConfigError);
  const auto c = generate_corpus(small_corpus(), 2);
  auto cfg = small_logs();
  cfg.label_rates = {0.5};
  EXPECT_THROW(generate_logs(c, cfg, 1), ConfigError);
  cfg = small_logs();
  cfg.n_interests = 11;
  EXPECT_THROW(generate_logs(c, cfg, 1), ConfigError);
}

TEST(Logs, HoldoutTakesEachUsersLastEvents) {
  const auto c = generate_corpus(small_corpus(), 2);
  const auto logs = generate_logs(c, small_logs(), 6);
  const auto split = split_holdout(logs.instances, 5);
  EXPECT_EQ(split.test.size(), 300u * 5u);
  EXPECT_EQ(split.train.size(), 300u * 25u);
  std::map<UserId, std::int64_t> last_train;
  for (const auto& in : split.train) last_train[in.user] = std::max(last_train[in.user], in.ts);
  for (const auto& in : split.test) EXPECT_GT(in.ts, last_train[in.user]);
  EXPECT_THROW(split_holdout(logs.instances, -1), ConfigError);
}

TEST(Logs, CsvRoundTrip) {
  const auto c = generate_corpus(small_corpus(), 2);
  const auto logs = generate_logs(c, small_logs(), 7);
  const auto path = temp_path("logs.csv");
  write_logs(path, logs.instances, 3);
  const auto r = ingest_logs(path, {.T = 3, .n_items = 200, .max_seq_len = 16});
  EXPECT_EQ(r.T, 3);
  EXPECT_EQ(r.malformed, 0u);
  EXPECT_EQ(r.instances, logs.instances);
}

TEST(Logs, MalformedLinesAreSkippedUpToTheLimit) {
  const auto c = generate_corpus(small_corpus(), 2);
  const auto logs = generate_logs(c, small_logs(), 8);
  const auto path = temp_path("logs_bad.csv");
  write_logs(path, logs.instances, 3);
  {
    std::ofstream out(path, std::ios::app);
    out << "1,2,3,1,0\n";        // too few columns
    out << "x,2,3,1,0,1,\n";     // non-numeric user
    out << "1,2,999,1,0,1,\n";   // target outside the corpus
    out << "1,2,3,1,2,1,\n";     // label not in {0,1}
  }
  const auto r = ingest_logs(path, {.T = 3, .n_items = 200});
  EXPECT_EQ(r.malformed, 4u);
  EXPECT_EQ(r.instances.size(), logs.instances.size());

  const auto mostly_bad = temp_path("logs_mostly_bad.csv");
  {
    std::ofstream out(mostly_bad);
    out << "user_id,ts,target_item,labels:3,seq_item_ids\n";
    for (int i = 0; i < 50; ++i) out << "1,2,3,1,0,1,\n";
    for (int i = 0; i < 5; ++i) out << "garbage\n";
  }
  EXPECT_THROW(ingest_logs(mostly_bad, {.T = 3}), IngestionError);
}

TEST(Logs, EmptyFileYieldsNoInstancesAndMissingFileIsIoError) {
  const auto path = temp_path("empty.csv");
  std::ofstream(path).close();
  EXPECT_TRUE(ingest_logs(path).instances.empty());
  EXPECT_THROW(ingest_logs(temp_path("missing.csv")), IoError);
}

TEST(Logs, HeaderLabelCountMustMatchSchema) {
  const auto path = temp_path("t2.csv");
  std::ofstream(path) << "user_id,ts,target_item,labels:2,seq_item_ids\n1,2,3,1,0,\n";
  EXPECT_EQ(ingest_logs(path).T, 2);
  EXPECT_THROW(ingest_logs(path, {.T = 3}), IngestionError);
}

}  // namespace
}  // namespace miss::corpus
