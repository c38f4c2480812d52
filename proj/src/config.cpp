/*
 * Copyright 2026 The fedcar Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *      http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include "fedcar/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "fedcar/error.hpp"
#include "fedcar/metrics.hpp"

namespace fedcar {

namespace {

[[noreturn]] void bad(const std::string& key, const std::string& value, const std::string& want) {
  throw ConfigError(key + ": expected " + want + ", got '" + value + "'");
}

template <typename T>
T parse_number(const std::string& key, const std::string& v, const char* want) {
  T out{};
  const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || res.ec != std::errc{} || res.ptr != v.data() + v.size()) bad(key, v, want);
  return out;
}

int as_int(const std::string& k, const std::string& v) { return parse_number<int>(k, v, "an integer"); }
std::uint64_t as_u64(const std::string& k, const std::string& v) {
  return parse_number<std::uint64_t>(k, v, "an unsigned integer");
}
double as_double(const std::string& k, const std::string& v) { return parse_number<double>(k, v, "a number"); }

bool as_bool(const std::string& k, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  bad(k, v, "true or false");
}

template <typename T, typename F>
std::vector<T> as_list(const std::string& v, F&& one) {
  std::vector<T> out;
  if (v.empty()) return out;
  std::size_t start = 0;
  for (;;) {
    const auto comma = v.find(',', start);
    out.push_back(one(v.substr(start, comma - start)));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

std::string str(bool b) { return b ? "true" : "false"; }
std::string str(int v) { return std::to_string(v); }
std::string str(std::uint64_t v) { return std::to_string(v); }
std::string str(double v) { return format_double(v); }

template <typename T>
std::string str_list(const std::vector<T>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ',';
    s += str(v[i]);
  }
  return s;
}

struct Entry {
  ConfigKey key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

#define FEDCAR_NUM(name, field, conv, doc)                                              \
  Entry {                                                                               \
    {name, doc}, [](const RunConfig& c) { return str(c.field); },                       \
        [](RunConfig& c, const std::string& v) { c.field = conv(name, v); }             \
  }

const std::vector<Entry>& entries() {
  static const std::vector<Entry> table = {
      Entry{{"data.source", "synthetic (Gaussian blobs) or file (FCHS file at data.path)"},
            [](const RunConfig& c) { return std::string(c.data.source == DataSource::kFile ? "file" : "synthetic"); },
            [](RunConfig& c, const std::string& v) {
              if (v == "synthetic") c.data.source = DataSource::kSynthetic;
              else if (v == "file") c.data.source = DataSource::kFile;
              else bad("data.source", v, "synthetic or file");
            }},
      Entry{{"data.path", "FCHS dataset or hidden-state file (used when data.source = file)"},
            [](const RunConfig& c) { return c.data.path; },
            [](RunConfig& c, const std::string& v) { c.data.path = v; }},
      FEDCAR_NUM("data.n_per_class", data.n_per_class, as_int, "synthetic samples per class"),
      FEDCAR_NUM("data.classes", data.classes, as_int, "synthetic class count"),
      FEDCAR_NUM("data.dim", data.dim, as_int, "synthetic feature dimension (token width)"),
      FEDCAR_NUM("data.spread", data.spread, as_double, "synthetic within-class std (centers at radius 3)"),
      FEDCAR_NUM("data.seed", data.seed, as_u64, "seed for data generation and the holdout split"),
      FEDCAR_NUM("data.val_fraction", data.val_fraction, as_double, "fraction held out for validation"),
      Entry{{"encoder.kind", "synthetic (frozen tanh network) or precomputed (data file holds hidden states)"},
            [](const RunConfig& c) { return std::string(c.encoder.precomputed ? "precomputed" : "synthetic"); },
            [](RunConfig& c, const std::string& v) {
              if (v == "synthetic") c.encoder.precomputed = false;
              else if (v == "precomputed") c.encoder.precomputed = true;
              else bad("encoder.kind", v, "synthetic or precomputed");
            }},
      FEDCAR_NUM("encoder.d_hidden", encoder.d_hidden, as_int, "hidden width of the frozen network"),
      FEDCAR_NUM("encoder.depth", encoder.depth, as_int, "number of frozen tanh layers"),
      Entry{{"encoder.pooling", "mean or eos pooling of token states"},
            [](const RunConfig& c) { return std::string(c.encoder.pooling == Pooling::kEos ? "eos" : "mean"); },
            [](RunConfig& c, const std::string& v) {
              if (v == "mean") c.encoder.pooling = Pooling::kMean;
              else if (v == "eos") c.encoder.pooling = Pooling::kEos;
              else bad("encoder.pooling", v, "mean or eos");
            }},
      FEDCAR_NUM("encoder.seed", encoder.seed, as_u64, "seed of the frozen encoder weights"),
      Entry{{"train.kind", "simulated-fl or centralized (train command)"},
            [](const RunConfig& c) {
              return std::string(c.trainer == Trainer::kCentralized ? "centralized" : "simulated-fl");
            },
            [](RunConfig& c, const std::string& v) {
              if (v == "simulated-fl") c.trainer = Trainer::kSimulatedFl;
              else if (v == "centralized") c.trainer = Trainer::kCentralized;
              else bad("train.kind", v, "simulated-fl or centralized");
            }},
      FEDCAR_NUM("fed.clients", fed.clients, as_int, "number of clients m"),
      FEDCAR_NUM("fed.rounds", fed.rounds, as_int, "communication rounds T"),
      FEDCAR_NUM("fed.local_epochs", fed.local_epochs, as_int, "local epochs E per round"),
      FEDCAR_NUM("fed.batch_size", fed.batch_size, as_int, "minibatch size"),
      FEDCAR_NUM("fed.steps_per_round", fed.steps_per_round, as_int,
                 "0: local_epochs passes per round; k > 0: exactly k steps per round"),
      Entry{{"fed.weights", "proportional (n_i / n) or uniform (1 / m) aggregation weights"},
            [](const RunConfig& c) { return std::string(to_string(c.fed.weights)); },
            [](RunConfig& c, const std::string& v) { c.fed.weights = parse_weight_scheme(v); }},
      Entry{{"fed.mode", "adapter-classifier (joint) or classifier-only"},
            [](const RunConfig& c) { return std::string(to_string(c.fed.mode)); },
            [](RunConfig& c, const std::string& v) { c.fed.mode = parse_train_mode(v); }},
      FEDCAR_NUM("fed.seed", fed.seed, as_u64, "master seed for init, partition, batches, dropout, noise"),
      FEDCAR_NUM("fed.lr", lr, as_double, "learning rate; 0 = 1e-3 classifier-only, 1e-4 adapter-classifier"),
      FEDCAR_NUM("fed.parallel", fed.parallel, as_bool, "run simulated clients on threads"),
      FEDCAR_NUM("fed.pre_classifier", fed.pre_classifier, as_bool, "hidden tanh layer with dropout before the output"),
      FEDCAR_NUM("fed.dropout", fed.dropout, as_double, "dropout rate of the pre-classifier"),
      Entry{{"fed.proportions", "comma-separated shard fractions summing to 1; empty = even split"},
            [](const RunConfig& c) { return str_list(c.fed.proportions); },
            [](RunConfig& c, const std::string& v) {
              c.fed.proportions = as_list<double>(v, [](const std::string& s) { return as_double("fed.proportions", s); });
            }},
      FEDCAR_NUM("fed.trace", fed.record_trace, as_bool, "record gradient instrumentation (trace.log) for bound"),
      Entry{{"dp.mode", "off, fixed or adaptive local DP"},
            [](const RunConfig& c) { return std::string(to_string(c.fed.dp.mode)); },
            [](RunConfig& c, const std::string& v) { c.fed.dp.mode = parse_dp_mode(v); }},
      FEDCAR_NUM("dp.c0", fed.dp.c0, as_double, "clipping threshold (initial threshold when adaptive)"),
      FEDCAR_NUM("dp.sigma0", fed.dp.sigma0, as_double, "fixed DP noise multiplier (noise std sigma0 * C)"),
      FEDCAR_NUM("dp.beta", fed.dp.beta, as_double, "adaptive threshold moving-average rate in (0, 1]"),
      FEDCAR_NUM("dp.gamma", fed.dp.gamma, as_double, "adaptive threshold target multiple of the update norm"),
      FEDCAR_NUM("dp.z", fed.dp.z, as_double, "adaptive noise multiplier, 0 < z < m/10"),
      FEDCAR_NUM("dp.warmup_rounds", fed.dp.warmup_rounds, as_int, "rounds before DP switches on"),
      FEDCAR_NUM("dp.per_iteration", fed.dp.per_iteration, as_bool, "clip and noise after every local step"),
      FEDCAR_NUM("compare.lr_classifier_only", lr_classifier_only, as_double, "compare: classifier-only arm rate"),
      FEDCAR_NUM("compare.lr_joint", lr_joint, as_double, "compare: adapter-classifier arm rate"),
      Entry{{"eval.ks", "comma-separated K values for top-K accuracy"},
            [](const RunConfig& c) { return str_list(c.eval_ks); },
            [](RunConfig& c, const std::string& v) {
              c.eval_ks = as_list<int>(v, [](const std::string& s) { return as_int("eval.ks", s); });
            }},
      Entry{{"net.address", "aggregator host:port"},
            [](const RunConfig& c) { return c.address; },
            [](RunConfig& c, const std::string& v) { c.address = v; }},
      FEDCAR_NUM("net.round_timeout_s", round_timeout_s, as_double, "seconds to wait for all clients each round"),
      FEDCAR_NUM("net.connect_attempts", connect_attempts, as_int, "client connection attempts before giving up"),
      FEDCAR_NUM("bound.gamma1", bound_gamma1, as_double, "slack parameter Gamma1 > 1"),
      FEDCAR_NUM("bound.gamma2", bound_gamma2, as_double, "slack parameter Gamma2 > 1"),
      FEDCAR_NUM("bound.reference_epochs", bound_reference_epochs, as_int,
                 "epochs of the overtrained run used as the F* proxy"),
      Entry{{"out.dir", "output directory"},
            [](const RunConfig& c) { return c.out_dir; },
            [](RunConfig& c, const std::string& v) { c.out_dir = v; }},
  };
  return table;
}

#undef FEDCAR_NUM

const Entry& find_entry(const std::string& key) {
  for (const Entry& e : entries())
    if (e.key.name == key) return e;
  throw ConfigError("unknown config key '" + key + "'");
}

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace

FedConfig RunConfig::resolved_fed() const {
  FedConfig f = fed;
  f.lr = lr != 0.0 ? lr : (fed.mode == TrainMode::kClassifierOnly ? kDefaultLrClassifierOnly : kDefaultLrJoint);
  return f;
}

NetOptions RunConfig::net_options() const {
  NetOptions o;
  o.round_timeout = std::chrono::milliseconds(static_cast<long long>(round_timeout_s * 1000.0));
  o.connect_attempts = connect_attempts;
  return o;
}

void RunConfig::validate() const {
  if (data.source == DataSource::kSynthetic) {
    if (encoder.precomputed) throw ConfigError("encoder.kind = precomputed needs data.source = file");
    if (data.n_per_class < 1 || data.classes < 2 || data.dim < 1) {
      throw ConfigError("data.n_per_class >= 1, data.classes >= 2 and data.dim >= 1 required");
    }
    if (!(data.spread > 0.0)) throw ConfigError("data.spread must be > 0");
  } else if (data.path.empty()) {
    throw ConfigError("data.source = file needs data.path");
  }
  if (!(data.val_fraction > 0.0 && data.val_fraction < 1.0)) throw ConfigError("data.val_fraction must lie in (0, 1)");
  if (encoder.d_hidden < 1 || encoder.depth < 1) throw ConfigError("encoder.d_hidden and encoder.depth must be >= 1");
  if (encoder.precomputed && fed.mode != TrainMode::kClassifierOnly) {
    throw ConfigError("encoder.kind = precomputed requires fed.mode = classifier-only");
  }
  if (lr < 0.0) throw ConfigError("fed.lr must be >= 0");
  resolved_fed().validate();
  if (eval_ks.empty()) throw ConfigError("eval.ks must list at least one K");
  for (int k : eval_ks)
    if (k < 1) throw ConfigError("eval.ks values must be >= 1");
  if (data.source == DataSource::kSynthetic) {
    for (int k : eval_ks)
      if (k > data.classes) throw ConfigError("eval.ks value " + std::to_string(k) + " exceeds data.classes");
  }
  if (!(lr_classifier_only >= 0.0) || !(lr_joint >= 0.0)) throw ConfigError("compare learning rates must be >= 0");
  parse_endpoint(address);
  if (!(round_timeout_s > 0.0)) throw ConfigError("net.round_timeout_s must be > 0");
  if (connect_attempts < 1) throw ConfigError("net.connect_attempts must be >= 1");
  if (!(bound_gamma1 > 1.0) || !(bound_gamma2 > 1.0)) throw ConfigError("bound.gamma1 and bound.gamma2 must exceed 1");
  if (bound_reference_epochs < 1) throw ConfigError("bound.reference_epochs must be >= 1");
  if (out_dir.empty()) throw ConfigError("out.dir must not be empty");
}

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    for (const Entry& e : entries()) k.push_back(e.key);
    return k;
  }();
  return keys;
}

void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  find_entry(key).set(cfg, value);
}

std::string get_config_value(const RunConfig& cfg, const std::string& key) { return find_entry(key).get(cfg); }

RunConfig parse_config_text(const std::string& text, RunConfig base) {
  std::istringstream in(text);
  std::string line;
  std::set<std::string> seen;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (!seen.insert(key).second) throw ConfigError("config line " + std::to_string(lineno) + ": duplicate key " + key);
    try {
      set_config_value(base, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return base;
}

RunConfig load_config(const std::filesystem::path& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), std::move(base));
}

std::string config_snapshot(const RunConfig& cfg) {
  std::string out;
  for (const Entry& e : entries()) out += e.key.name + " = " + e.get(cfg) + "\n";
  return out;
}

std::string config_help() {
  const RunConfig defaults;
  std::ostringstream o;
  o << "Config keys (file lines 'key = value', or --set key=value):\n";
  for (const Entry& e : entries()) {
    std::string def = e.get(defaults);
    if (def.empty()) def = "(empty)";
    o << "  " << e.key.name << " [" << def << "]\n      " << e.key.doc << "\n";
  }
  return o.str();
}

RunData prepare_data(const RunConfig& cfg) {
  cfg.validate();
  Dataset all;
  if (cfg.data.source == DataSource::kSynthetic) {
    all = gen_synthetic(cfg.data.n_per_class, cfg.data.classes, cfg.data.dim, cfg.data.spread, cfg.data.seed);
  } else {
    all = load_hidden_states(cfg.data.path);
  }
  for (int k : cfg.eval_ks) {
    if (k > all.n_classes) throw ConfigError("eval.ks value " + std::to_string(k) + " exceeds the class count");
  }
  auto [train, val] = split_holdout(all, cfg.data.val_fraction, cfg.data.seed);
  if (cfg.encoder.precomputed) {
    return RunData{std::move(train), std::move(val), precomputed_encoder(all)};
  }
  Encoder enc = Encoder::synthetic(cfg.encoder.seed, all.dim, cfg.encoder.d_hidden, cfg.encoder.depth,
                                   cfg.encoder.pooling);
  return RunData{std::move(train), std::move(val), std::move(enc)};
}

}  // namespace fedcar
