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

#include "miss/config.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>

namespace miss::config {

using json = nlohmann::ordered_json;

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// Removes a trailing '#' comment that is not inside a string.
std::string strip_comment(const std::string& line) {
  bool in_str = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"' && (i == 0 || line[i - 1] != '\\')) in_str = !in_str;
    if (line[i] == '#' && !in_str) return line.substr(0, i);
  }
  return line;
}

bool is_bare_key(const std::string& k) {
  return !k.empty() && std::all_of(k.begin(), k.end(), [](unsigned char c) {
    return std::isalnum(c) || c == '_' || c == '-';
  });
}

// Splits the body of an array on top-level commas.
std::vector<std::string> split_array(const std::string& body) {
  std::vector<std::string> parts;
  std::string cur;
  bool in_str = false;
  for (char c : body) {
    if (c == '"') in_str = !in_str;
    if (c == ',' && !in_str) {
      parts.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!trim(cur).empty()) parts.push_back(cur);
  return parts;
}

}  // namespace

json parse_toml_value(const std::string& raw) {
  const std::string v = trim(raw);
  if (v.empty()) throw ConfigError("missing value");
  if (v == "true") return true;
  if (v == "false") return false;
  if (v.front() == '"') {
    if (v.size() < 2 || v.back() != '"') throw ConfigError("unterminated string: " + v);
    std::string out;
    for (std::size_t i = 1; i + 1 < v.size(); ++i) {
      if (v[i] == '\\' && i + 2 < v.size()) {
        const char e = v[++i];
        out += e == 'n' ? '\n' : e == 't' ? '\t' : e;
      } else {
        out += v[i];
      }
    }
    return out;
  }
  if (v.front() == '[') {
    if (v.back() != ']') throw ConfigError("unterminated array: " + v);
    json arr = json::array();
    for (const auto& part : split_array(v.substr(1, v.size() - 2))) {
      if (trim(part).empty()) throw ConfigError("empty array element in " + v);
      arr.push_back(parse_toml_value(part));
    }
    return arr;
  }
  std::string num;
  for (char c : v)
    if (c != '_') num += c;
  const bool is_float = num.find_first_of(".eE") != std::string::npos || num == "inf" || num == "nan";
  std::size_t used = 0;
  try {
    if (is_float) {
      const double d = std::stod(num, &used);
      if (used == num.size()) return d;
    } else {
      const long long i = std::stoll(num, &used, 10);
      if (used == num.size()) return i;
    }
  } catch (const std::exception&) {
  }
  throw ConfigError("cannot parse value: " + v);
}

json parse_toml(const std::string& text) {
  json out = json::object();
  std::string section;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string s = trim(strip_comment(line));
    if (s.empty()) continue;
    const std::string where = "line " + std::to_string(lineno) + ": ";
    if (s.front() == '[') {
      if (s.back() != ']') throw ConfigError(where + "bad section header");
      section = trim(s.substr(1, s.size() - 2));
      if (!is_bare_key(section)) throw ConfigError(where + "bad section name '" + section + "'");
      if (out.contains(section)) throw ConfigError(where + "duplicate section [" + section + "]");
      out[section] = json::object();
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
    const std::string key = trim(s.substr(0, eq));
    if (!is_bare_key(key)) throw ConfigError(where + "bad key '" + key + "'");
    auto& sec = out[section];
    if (sec.is_null()) sec = json::object();
    if (sec.contains(key)) throw ConfigError(where + "duplicate key '" + key + "'");
    try {
      sec[key] = parse_toml_value(s.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
  return out;
}

json RunConfig::to_json() const {
  json j;
  j["run"] = {{"seed", seed}, {"threads", threads}, {"out_dir", out_dir}};
  j["corpus"] = {{"n_items", corpus.n_items},
                 {"n_clusters", corpus.n_clusters},
                 {"d_text", corpus.d_text},
                 {"d_image", corpus.d_image},
                 {"content_noise", corpus.content_noise},
                 {"popularity_skew", corpus.popularity_skew}};
  j["logs"] = {{"n_users", logs.n_users},
               {"events_per_user", logs.events_per_user},
               {"objectives", logs.T},
               {"label_rates", logs.label_rates},
               {"mismatch_factor", logs.mismatch_factor},
               {"noise", logs.noise},
               {"n_interests", logs.n_interests},
               {"holdout_events", holdout_events}};
  j["embed"] = {{"dim", embed.dim},
                {"hidden", embed.hidden},
                {"temperature", embed.temperature},
                {"lr", embed.lr},
                {"batch_size", embed.batch_size},
                {"epochs", embed.epochs},
                {"pairs_per_item", embed.pairs_per_item}};
  j["estimator"] = {{"d_id", estimator.d_id},
                    {"n_user_buckets", estimator.n_user_buckets},
                    {"n_experts", estimator.n_experts},
                    {"expert_hidden", estimator.expert_hidden},
                    {"expert_out", estimator.expert_out},
                    {"tower_hidden", estimator.tower_hidden},
                    {"k_esu", estimator.k_esu},
                    {"m_co", estimator.m_co},
                    {"m_mm", estimator.m_mm},
                    {"use_co_gsu", estimator.use_co_gsu},
                    {"use_mm_gsu", estimator.use_mm_gsu}};
  j["train"] = {{"negatives_per_level", train.negatives_per_level},
                {"lr", train.lr},
                {"batch_size", train.batch_size},
                {"epochs", train.epochs},
                {"max_steps", train.max_steps},
                {"log_every", train.log_every},
                {"checkpoint_every", train.checkpoint_every}};
  j["retrieval"] = {{"beam_size", beam_size}, {"m_ret", m_ret}};
  j["eval"] = {{"recall_ks", eval.recall_ks},
               {"hier_beam_sizes", eval.hier_beam_sizes},
               {"hier_levels", eval.hier_levels},
               {"n_splits", eval.n_splits},
               {"heap_users", eval.heap_users},
               {"heap_candidates", eval.heap_candidates},
               {"attention_users", attention_users}};
  j["ablation"] = {{"variants", ablation_variants}, {"in_pipeline", ablation_in_pipeline}};
  return j;
}

namespace {

void check(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError(msg);
}

bool same_kind(const json& def, const json& v) {
  if (def.is_boolean()) return v.is_boolean();
  if (def.is_string()) return v.is_string();
  if (def.is_number_integer()) return v.is_number_integer();
  if (def.is_number_float()) return v.is_number();
  if (def.is_array()) return v.is_array();
  return false;
}

template <class T>
void get(const json& sec, const char* key, T& out) {
  out = sec.at(key).get<T>();
}

RunConfig from_json(const json& j) {
  RunConfig c;
  const auto& run = j.at("run");
  const auto seed = run.at("seed");
  check(seed.is_number_unsigned() || (seed.is_number_integer() && seed.get<long long>() >= 0),
        "run.seed must be a non-negative integer");
  c.seed = seed.get<std::uint64_t>();
  get(run, "threads", c.threads);
  get(run, "out_dir", c.out_dir);

  const auto& co = j.at("corpus");
  get(co, "n_items", c.corpus.n_items);
  get(co, "n_clusters", c.corpus.n_clusters);
  get(co, "d_text", c.corpus.d_text);
  get(co, "d_image", c.corpus.d_image);
  get(co, "content_noise", c.corpus.content_noise);
  get(co, "popularity_skew", c.corpus.popularity_skew);

  const auto& lg = j.at("logs");
  get(lg, "n_users", c.logs.n_users);
  get(lg, "events_per_user", c.logs.events_per_user);
  get(lg, "objectives", c.logs.T);
  for (const auto& v : lg.at("label_rates")) check(v.is_number(), "logs.label_rates must be numbers");
  get(lg, "label_rates", c.logs.label_rates);
  get(lg, "mismatch_factor", c.logs.mismatch_factor);
  get(lg, "noise", c.logs.noise);
  get(lg, "n_interests", c.logs.n_interests);
  get(lg, "holdout_events", c.holdout_events);

  const auto& em = j.at("embed");
  get(em, "dim", c.embed.dim);
  get(em, "hidden", c.embed.hidden);
  get(em, "temperature", c.embed.temperature);
  get(em, "lr", c.embed.lr);
  get(em, "batch_size", c.embed.batch_size);
  get(em, "epochs", c.embed.epochs);
  get(em, "pairs_per_item", c.embed.pairs_per_item);

  const auto& es = j.at("estimator");
  get(es, "d_id", c.estimator.d_id);
  get(es, "n_user_buckets", c.estimator.n_user_buckets);
  get(es, "n_experts", c.estimator.n_experts);
  get(es, "expert_hidden", c.estimator.expert_hidden);
  get(es, "expert_out", c.estimator.expert_out);
  get(es, "tower_hidden", c.estimator.tower_hidden);
  get(es, "k_esu", c.estimator.k_esu);
  get(es, "m_co", c.estimator.m_co);
  get(es, "m_mm", c.estimator.m_mm);
  get(es, "use_co_gsu", c.estimator.use_co_gsu);
  get(es, "use_mm_gsu", c.estimator.use_mm_gsu);

  const auto& tr = j.at("train");
  get(tr, "negatives_per_level", c.train.negatives_per_level);
  get(tr, "lr", c.train.lr);
  get(tr, "batch_size", c.train.batch_size);
  get(tr, "epochs", c.train.epochs);
  get(tr, "max_steps", c.train.max_steps);
  get(tr, "log_every", c.train.log_every);
  get(tr, "checkpoint_every", c.train.checkpoint_every);

  const auto& re = j.at("retrieval");
  get(re, "beam_size", c.beam_size);
  get(re, "m_ret", c.m_ret);

  const auto& ev = j.at("eval");
  for (const char* key : {"recall_ks", "hier_beam_sizes", "hier_levels"})
    for (const auto& v : ev.at(key)) check(v.is_number_integer(), std::string("eval.") + key + " must be integers");
  get(ev, "recall_ks", c.eval.recall_ks);
  get(ev, "hier_beam_sizes", c.eval.hier_beam_sizes);
  get(ev, "hier_levels", c.eval.hier_levels);
  get(ev, "n_splits", c.eval.n_splits);
  get(ev, "heap_users", c.eval.heap_users);
  get(ev, "heap_candidates", c.eval.heap_candidates);
  get(ev, "attention_users", c.attention_users);

  const auto& ab = j.at("ablation");
  for (const auto& v : ab.at("variants")) check(v.is_string(), "ablation.variants must be strings");
  get(ab, "variants", c.ablation_variants);
  get(ab, "in_pipeline", c.ablation_in_pipeline);
  return c;
}

}  // namespace

void RunConfig::resolve() {
  check(threads >= 1, "run.threads must be >= 1");
  check(!out_dir.empty(), "run.out_dir must not be empty");
  check(corpus.n_items >= 2, "corpus.n_items must be >= 2");
  check(corpus.n_clusters >= 1 && corpus.n_clusters <= corpus.n_items, "corpus.n_clusters must be in [1, n_items]");
  check(corpus.d_text >= 1 && corpus.d_image >= 1, "corpus.d_text and corpus.d_image must be >= 1");
  check(corpus.content_noise >= 0.0, "corpus.content_noise must be >= 0");
  check(corpus.popularity_skew >= 0.0, "corpus.popularity_skew must be >= 0");
  check(logs.n_users >= 1 && logs.events_per_user >= 1, "logs.n_users and logs.events_per_user must be >= 1");
  check(logs.T >= 1, "logs.objectives must be >= 1");
  check(static_cast<int>(logs.label_rates.size()) == logs.T, "logs.label_rates must have one entry per objective");
  for (double r : logs.label_rates) check(r >= 0.0 && r <= 1.0, "logs.label_rates must be in [0, 1]");
  check(logs.mismatch_factor >= 0.0 && logs.mismatch_factor <= 1.0, "logs.mismatch_factor must be in [0, 1]");
  check(logs.noise >= 0.0 && logs.noise <= 1.0, "logs.noise must be in [0, 1]");
  check(logs.n_interests >= 1 && logs.n_interests <= corpus.n_clusters, "logs.n_interests must be in [1, n_clusters]");
  check(holdout_events >= 1 && holdout_events < logs.events_per_user,
        "logs.holdout_events must be in [1, events_per_user)");
  check(embed.dim >= 1 && embed.hidden >= 1, "embed dims must be >= 1");
  check(embed.temperature > 0.0, "embed.temperature must be > 0");
  check(embed.lr > 0.0, "embed.lr must be > 0");
  check(embed.batch_size >= 2, "embed.batch_size must be >= 2");
  check(embed.epochs >= 1, "embed.epochs must be >= 1");
  check(embed.pairs_per_item >= 1, "embed.pairs_per_item must be >= 1");
  check(train.negatives_per_level >= 0, "train.negatives_per_level must be >= 0");
  check(train.lr > 0.0, "train.lr must be > 0");
  check(train.batch_size >= 1, "train.batch_size must be >= 1");
  check(train.epochs >= 1, "train.epochs must be >= 1");
  check(train.max_steps == -1 || train.max_steps >= 1, "train.max_steps must be -1 or >= 1");
  check(train.log_every >= 1, "train.log_every must be >= 1");
  check(train.checkpoint_every >= 0, "train.checkpoint_every must be >= 0");
  check(beam_size >= 1, "retrieval.beam_size must be >= 1");
  check(m_ret >= 1 && m_ret <= beam_size, "retrieval.m_ret must be in [1, beam_size]");
  check(!eval.recall_ks.empty(), "eval.recall_ks must not be empty");
  for (int k : eval.recall_ks) check(k >= 1 && k <= beam_size, "eval.recall_ks must be in [1, beam_size]");
  for (int k : eval.hier_beam_sizes) check(k >= 1, "eval.hier_beam_sizes must be >= 1");
  for (int h : eval.hier_levels) check(h >= 0, "eval.hier_levels must be >= 0");
  check(eval.n_splits >= 1, "eval.n_splits must be >= 1");
  check(eval.heap_users >= 0 && eval.heap_candidates >= 1, "eval.heap_users >= 0 and eval.heap_candidates >= 1");
  check(attention_users >= 0, "eval.attention_users must be >= 0");
  const std::set<std::string> known{"full", "no_mm_gsu", "no_both_gsu", "id_tree"};
  std::set<std::string> seen;
  for (const auto& v : ablation_variants) {
    check(known.count(v) == 1, "unknown ablation variant '" + v + "'");
    check(seen.insert(v).second, "duplicate ablation variant '" + v + "'");
  }

  estimator.T = logs.T;
  logs.max_seq_len = estimator.m_mm;
  train.threads = threads;
  eval.beam_size = beam_size;
  eval.threads = threads;
  eval.seed = derive_seed(seed, 8);
  estimator.validate();
}

RunConfig apply(const RunConfig& base, const json& table) {
  json j = base.to_json();
  check(table.is_object(), "config must be a table");
  for (auto it = table.begin(); it != table.end(); ++it) {
    const std::string& section = it.key();
    const json& body = it.value();
    check(j.contains(section), "unknown config section [" + section + "]");
    check(body.is_object(), "[" + section + "] must be a table");
    for (auto kv = body.begin(); kv != body.end(); ++kv) {
      const std::string& key = kv.key();
      const json& value = kv.value();
      check(j[section].contains(key), "unknown config key " + section + "." + key);
      check(same_kind(j[section][key], value), "wrong type for " + section + "." + key);
      j[section][key] = value;
    }
  }
  RunConfig c;
  try {
    c = from_json(j);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid config value: ") + e.what());
  }
  c.resolve();
  return c;
}

RunConfig load(const std::string& path, const std::vector<std::string>& overrides) {
  json table = json::object();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read config file: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    table = parse_toml(ss.str());
  }
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    const auto dot = o.find('.');
    check(eq != std::string::npos && dot != std::string::npos && dot < eq,
          "override must look like section.key=value: " + o);
    const std::string section = trim(o.substr(0, dot));
    const std::string key = trim(o.substr(dot + 1, eq - dot - 1));
    table[section][key] = parse_toml_value(o.substr(eq + 1));
  }
  return config::apply(RunConfig{}, table);
}

}  // namespace miss::config
