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

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "fedcar/data.hpp"
#include "fedcar/federation.hpp"
#include "fedcar/retrieval.hpp"
#include "fedcar/transport.hpp"

namespace fedcar {

enum class DataSource { kSynthetic, kFile };
enum class Trainer { kSimulatedFl, kCentralized };

struct DataSpec {
  DataSource source = DataSource::kSynthetic;
  std::string path;  // FCHS file when source = file
  int n_per_class = 500;
  int classes = 2;
  int dim = 16;
  double spread = 0.75;
  std::uint64_t seed = 1;
  double val_fraction = 0.2;
};

struct EncoderSpec {
  bool precomputed = false;  // the data file already holds hidden states
  int d_hidden = 8;
  int depth = 2;
  Pooling pooling = Pooling::kMean;
  std::uint64_t seed = 7;
};

/// Everything a command needs, from a key=value file plus overrides.
struct RunConfig {
  DataSpec data;
  EncoderSpec encoder;
  FedConfig fed;
  double lr = 0.0;  // 0 picks the per-mode default
  Trainer trainer = Trainer::kSimulatedFl;
  double lr_classifier_only = 1e-3;
  double lr_joint = 1e-4;
  std::vector<int> eval_ks = {1};
  std::string address = "127.0.0.1:7070";
  double round_timeout_s = 120.0;
  int connect_attempts = 3;
  double bound_gamma1 = 2.0;
  double bound_gamma2 = 2.0;
  int bound_reference_epochs = 200;
  std::string out_dir = "run";

  /// The FedConfig actually trained: lr resolved from the mode default.
  FedConfig resolved_fed() const;
  NetOptions net_options() const;
  /// Throws ConfigError naming the offending key.
  void validate() const;
};

inline constexpr double kDefaultLrClassifierOnly = 1e-3;
inline constexpr double kDefaultLrJoint = 1e-4;

struct ConfigKey {
  std::string name;
  std::string doc;
};

/// Every accepted key with its documentation, in snapshot order.
const std::vector<ConfigKey>& config_keys();

/// Applies one key; throws ConfigError for unknown keys or bad values.
void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value);
std::string get_config_value(const RunConfig& cfg, const std::string& key);

/// "key = value" lines; '#' starts a comment. Duplicate keys are errors.
RunConfig parse_config_text(const std::string& text, RunConfig base = {});
RunConfig load_config(const std::filesystem::path& path, RunConfig base = {});

/// All keys with effective values; parse_config_text(snapshot(c)) == c.
std::string config_snapshot(const RunConfig& cfg);

/// Help text listing every key, its default and its meaning.
std::string config_help();

struct RunData {
  Dataset train;
  Dataset val;
  Encoder encoder;  // base encoder (synthetic, or precomputed over train + val)
};

/// Generates or loads the dataset, splits it and builds the encoder.
RunData prepare_data(const RunConfig& cfg);

}  // namespace fedcar
