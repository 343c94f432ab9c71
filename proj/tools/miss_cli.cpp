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

// Command-line entry point: one subcommand per pipeline stage.

#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "miss/config.hpp"
#include "miss/pipeline.hpp"

namespace {

enum ExitCode : int {
  kOk = 0,
  kOther = 1,
  kConfig = 2,
  kIo = 3,
  kFormat = 4,
  kDependency = 5,
  kTraining = 6,
  kIngestion = 7,
  kInternal = 8,
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-modal tree-index retrieval: data, training, retrieval and evaluation"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::vector<std::string> overrides;
  long long seed = -1;
  int threads = 0;
  std::string out_dir;
  app.add_option("-c,--config", config_path, "TOML run config");
  app.add_option("--seed", seed, "global seed (overrides run.seed)");
  app.add_option("--threads", threads, "worker threads (overrides run.threads)");
  app.add_option("-o,--out", out_dir, "output directory (overrides run.out_dir)");
  app.add_option("--set", overrides, "override a config value: section.key=value");

  const std::vector<std::pair<std::string, std::string>> stages{
      {"gen-data", "generate the synthetic corpus and behavior logs"},
      {"train-embed", "train multi-modal item embeddings"},
      {"build-tree", "build the index tree from the embeddings"},
      {"train", "train the node estimator"},
      {"retrieve", "beam-search retrieval for every test user"},
      {"eval", "recall, hierarchical recall and overlap report"},
      {"export-attention", "dump search-unit attention scores"},
      {"ablate", "train and evaluate the ablation variants"},
      {"pipeline", "run every stage in order"},
  };
  for (const auto& [name, help] : stages) app.add_subcommand(name, help);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  try {
    if (seed >= 0) overrides.push_back("run.seed=" + std::to_string(seed));
    if (threads > 0) overrides.push_back("run.threads=" + std::to_string(threads));
    if (!out_dir.empty()) overrides.push_back("run.out_dir=\"" + out_dir + "\"");
    const auto cfg = miss::config::load(config_path, overrides);
    const std::string cmd = app.get_subcommands().front()->get_name();
    namespace p = miss::pipeline;
    if (cmd == "gen-data") p::gen_data(cfg);
    else if (cmd == "train-embed") p::train_embed(cfg);
    else if (cmd == "build-tree") p::build_tree(cfg);
    else if (cmd == "train") p::train(cfg);
    else if (cmd == "retrieve") p::retrieve(cfg);
    else if (cmd == "eval") p::evaluate(cfg);
    else if (cmd == "export-attention") p::export_attention(cfg);
    else if (cmd == "ablate") p::ablate(cfg);
    else if (cmd == "pipeline") p::run_all(cfg);
    return kOk;
  } catch (const miss::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const miss::IoError& e) {
    std::cerr << "I/O error: " << e.what() << '\n';
    return kIo;
  } catch (const miss::FormatError& e) {
    std::cerr << "format error: " << e.what() << '\n';
    return kFormat;
  } catch (const miss::DependencyError& e) {
    std::cerr << "dependency error: " << e.what() << '\n';
    return kDependency;
  } catch (const miss::TrainingError& e) {
    std::cerr << "training error: " << e.what() << '\n';
    return kTraining;
  } catch (const miss::IngestionError& e) {
    std::cerr << "ingestion error: " << e.what() << '\n';
    return kIngestion;
  } catch (const miss::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kInternal;
  } catch (const std::exception& e) {
    std::cerr << "unexpected error: " << e.what() << '\n';
    return kOther;
  }
}
