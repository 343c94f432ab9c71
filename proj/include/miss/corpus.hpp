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

#ifndef MISS_CORPUS_HPP
#define MISS_CORPUS_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "miss/common.hpp"

namespace miss::corpus {

struct CorpusConfig {
  int n_items = 4096;
  int n_clusters = 64;
  int d_text = 16;
  int d_image = 16;
  double content_noise = 1.0;    // sigma of isotropic noise around centroids
  double popularity_skew = 0.8;  // Zipf exponent of within-cluster popularity
};

/// Item universe with synthetic content features.
///
/// Item i has text/image features row i of `text` / `image`. `latent_cluster`
/// is generator provenance only; models never read it.
struct ItemCorpus {
  CorpusConfig config;
  std::uint64_t seed = 0;
  MatF text;
  MatF image;
  std::vector<int> latent_cluster;
  std::vector<double> popularity;               // relative sampling weight
  std::vector<std::vector<ItemId>> cluster_members;

  int n_items() const { return static_cast<int>(latent_cluster.size()); }
  int n_clusters() const { return static_cast<int>(cluster_members.size()); }
  int d_content() const { return static_cast<int>(text.cols() + image.cols()); }

  // concat(text, image) for one item, in double precision.
  Vec content(ItemId item) const;
};

ItemCorpus generate_corpus(const CorpusConfig& cfg, std::uint64_t seed);

void save_corpus(const ItemCorpus& corpus, const std::string& path, const std::string& config_json = {});
ItemCorpus load_corpus(const std::string& path);

struct UserProfile {
  UserId user = 0;
  std::vector<double> affinity;  // over latent clusters, sums to 1
};

// Ordered item ids, oldest first.
using BehaviorSequence = std::vector<ItemId>;

struct TrainingInstance {
  UserId user = 0;
  std::int64_t ts = 0;
  ItemId target = 0;
  std::vector<std::uint8_t> labels;  // one {0,1} entry per objective
  BehaviorSequence sequence;         // events strictly before target

  bool any_positive() const;
  friend bool operator==(const TrainingInstance&, const TrainingInstance&) = default;
};

struct LogConfig {
  int n_users = 2000;
  int events_per_user = 40;
  int T = 3;
  std::vector<double> label_rates{0.5, 0.3, 0.1};  // matched-item rates per objective
  double mismatch_factor = 0.1;
  double noise = 0.1;     // probability an event ignores the user's affinity
  int n_interests = 3;    // clusters with non-zero affinity per user
  int max_seq_len = 128;  // M_mm
};

struct GeneratedLogs {
  std::vector<UserProfile> users;
  std::vector<TrainingInstance> instances;  // ordered by (ts, user)
};

GeneratedLogs generate_logs(const ItemCorpus& corpus, const LogConfig& cfg, std::uint64_t seed);

struct HoldoutSplit {
  std::vector<TrainingInstance> train;
  std::vector<TrainingInstance> test;
};

// Moves each user's last `holdout_events` instances (by timestamp) to test.
HoldoutSplit split_holdout(const std::vector<TrainingInstance>& instances, int holdout_events);

// ---------------------------------------------------------------------------
// Log file: header `user_id,ts,target_item,labels:<T>,seq_item_ids`, then one
// instance per line: `user,ts,target,l_1,...,l_T,s_1;s_2;...;s_M`.

struct LogSchema {
  int T = 0;            // 0: take from header
  int n_items = 0;      // 0: skip item-range validation
  int max_seq_len = 0;  // 0: no limit
  double max_malformed_fraction = 0.01;
};

struct IngestResult {
  std::vector<TrainingInstance> instances;
  int T = 0;
  std::size_t malformed = 0;
  std::size_t lines = 0;
};

void write_logs(const std::string& path, const std::vector<TrainingInstance>& instances, int T);
IngestResult ingest_logs(const std::string& path, const LogSchema& schema = {});

}  // namespace miss::corpus

#endif  // MISS_CORPUS_HPP
