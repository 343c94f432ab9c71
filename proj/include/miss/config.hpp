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

#ifndef MISS_CONFIG_HPP
#define MISS_CONFIG_HPP

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "miss/corpus.hpp"
#include "miss/estimator.hpp"
#include "miss/eval.hpp"
#include "miss/mmembed.hpp"
#include "miss/training.hpp"

namespace miss::config {

/// Parses the TOML subset used by run configs: [section] headers, key = value
/// pairs with integer, float, boolean, string or flat array values, and
/// '#' comments. Returns {section: {key: value}}; top-level keys go under "".
nlohmann::ordered_json parse_toml(const std::string& text);

/// Parses a single TOML value (the right-hand side of `key = value`).
nlohmann::ordered_json parse_toml_value(const std::string& text);

struct RunConfig {
  std::uint64_t seed = 42;
  int threads = 1;
  std::string out_dir = "out";

  corpus::CorpusConfig corpus;
  corpus::LogConfig logs;
  int holdout_events = 8;
  mmembed::EmbedTrainConfig embed;
  estimator::EstimatorConfig estimator;
  training::TrainConfig train;
  int beam_size = 64;
  int m_ret = 50;
  eval::EvalConfig eval;
  int attention_users = 100;
  std::vector<std::string> ablation_variants{"full", "no_mm_gsu", "no_both_gsu", "id_tree"};
  bool ablation_in_pipeline = false;

  // Copies shared values (T, sequence length, beam size, threads) into the
  // per-module configs and checks every field.
  void resolve();
  nlohmann::ordered_json to_json() const;
};

/// Applies {section: {key: value}} on top of `base`. Unknown sections or
/// keys and mistyped values raise ConfigError.
RunConfig apply(const RunConfig& base, const nlohmann::ordered_json& table);

/// Loads a config file, then applies `section.key=value` overrides.
RunConfig load(const std::string& path, const std::vector<std::string>& overrides = {});

}  // namespace miss::config

#endif  // MISS_CONFIG_HPP
