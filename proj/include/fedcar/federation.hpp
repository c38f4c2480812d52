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

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedcar/data.hpp"
#include "fedcar/dp.hpp"
#include "fedcar/model.hpp"
#include "fedcar/rng.hpp"

namespace fedcar {

enum class WeightScheme { kProportional, kUniform };

std::string_view to_string(WeightScheme w);
WeightScheme parse_weight_scheme(std::string_view text);
std::string_view to_string(TrainMode mode);
TrainMode parse_train_mode(std::string_view text);

struct FedConfig {
  int clients = 2;
  int rounds = 5;
  int local_epochs = 2;
  int batch_size = 4;
  /// 0 runs `local_epochs` full passes per round; k > 0 runs exactly k
  /// minibatch steps per round instead (1 is the single-step round).
  int steps_per_round = 0;
  WeightScheme weights = WeightScheme::kProportional;
  TrainMode mode = TrainMode::kAdapterAndClassifier;
  std::uint64_t seed = 1;
  double lr = 1e-4;
  bool parallel = true;
  bool pre_classifier = false;
  double dropout = 0.1;
  /// Empty means an even split.
  std::vector<double> proportions;
  DpConfig dp;
  bool record_trace = false;

  void validate() const;
};

// ---------------------------------------------------------------------------
// Partitioning

/// Seeded shuffle of 0..n-1, then contiguous shards. Even: the first n mod m
/// shards get one extra sample. Proportions: floor(p_i n), remainder handed
/// out by largest fractional part (lower index first on ties).
std::vector<std::vector<std::size_t>> partition_indices(std::size_t n, int m, std::span<const double> proportions,
                                                         std::uint64_t seed);
std::vector<Dataset> partition(const Dataset& data, int m, std::span<const double> proportions, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Clients

struct ClientState {
  int id = 0;
  Dataset shard;
  double lr = 0.0;
  DpConfig dp_config;
  DpState dp;
  SplitMix64 batch_rng;
  SplitMix64 dropout_rng;
  SplitMix64 noise_rng;
  SplitMix64 probe_rng;  // minibatch draws for variance instrumentation only
};

/// Streams are derived from (seed, purpose, client id) only, so a client
/// rebuilt in another process draws the same numbers.
ClientState make_client(int id, Dataset shard, const FedConfig& cfg);
std::vector<ClientState> make_clients(const FedConfig& cfg, const Dataset& train);

struct ClientRecord {
  int round = 0;
  int client = 0;
  double loss = 0.0;       // mean minibatch loss during local training
  double accuracy = 0.0;   // top-1 on the minibatches seen
  double delta_norm = 0.0; // ||theta_local - theta_global|| before DP
  bool clipped = false;
  double clip_threshold = 0.0;  // threshold used this round (0 when DP is off)
  int steps = 0;
  double max_grad_norm = 0.0;  // largest minibatch gradient norm seen
  double compute_ms = 0.0;     // thread CPU time of the local update
};

/// Per-client instrumentation for constant estimation, taken at the
/// broadcast model of the round.
struct ClientTrace {
  Eigen::VectorXd local_grad;   // full-shard gradient, eval mode
  double local_loss = 0.0;
  double stochastic_variance = 0.0;  // mean ||g - grad F_i||^2 over one shuffled pass
  double max_grad_norm = 0.0;        // max ||g|| over training and probe minibatches
  double delta_norm = 0.0;
  double clip_threshold = 0.0;
  bool clipped = false;
  int steps = 0;
};

struct RoundTrace {
  int round = 0;
  Eigen::VectorXd theta;        // trainable parameters at the start of the round
  Eigen::VectorXd global_grad;  // sum_i w_i grad F_i(theta)
  double global_loss = 0.0;
  std::vector<ClientTrace> clients;
};

struct Trace {
  std::vector<RoundTrace> rounds;  // rounds[t] holds theta^t for t = 0..T, plus one final entry
  std::vector<double> weights;
  double lr = 0.0;
  int clients = 0;
};

struct LocalResult {
  Model model;
  ClientRecord record;
};

/// Local SGD from `global_model`, then DP at the round boundary (or after
/// every step when dp.per_iteration). Without active DP the locally trained
/// model is returned as is.
LocalResult local_update(ClientState& client, const Model& global_model, const FedConfig& cfg, const Encoder& enc,
                         int round);

ClientTrace probe_client(ClientState& client, const Model& global_model, const FedConfig& cfg, const Encoder& enc);

std::vector<double> aggregation_weights(const FedConfig& cfg, std::span<const std::size_t> shard_sizes);

/// sum_i w_i theta_i in ascending index order over trainable tensors; frozen
/// tensors are taken from models[0].
Model aggregate(std::span<const Model> models, std::span<const double> weights);

// ---------------------------------------------------------------------------
// Training loops

struct EvalStats {
  double loss = 0.0;
  double accuracy = 0.0;
};

EvalStats evaluate_loss(const Model& model, const Encoder& enc, const Dataset& data);

struct RoundRecord {
  int round = 0;
  std::vector<ClientRecord> clients;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
  double wall_ms = 0.0;
  double distributed_ms = 0.0;  // max client compute + aggregation
};

struct TrainingResult {
  Model model;
  std::vector<RoundRecord> records;
  std::optional<Trace> trace;
  double wall_ms = 0.0;
  double distributed_ms = 0.0;
};

Model initial_model(const FedConfig& cfg, const Encoder& enc, int n_classes);

/// Encoder actually used for training: in ClassifierOnly mode a synthetic
/// encoder is replaced by a table of hidden states of `train` and `val`,
/// computed once with the identity adapter.
Encoder training_encoder(const FedConfig& cfg, const Encoder& enc, const Dataset& train, const Dataset& val);

TrainingResult run_training(const FedConfig& cfg, const Encoder& enc, const Dataset& train, const Dataset& val);

/// Single-client SGD for rounds * local_epochs epochs with the same seeding
/// and batching rules as run_training; one record per epoch.
TrainingResult run_centralized(const FedConfig& cfg, const Encoder& enc, const Dataset& train, const Dataset& val);

/// Thread CPU time in milliseconds.
double thread_cpu_ms();

}  // namespace fedcar
