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

#include "fedcar/federation.hpp"

#include <time.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <exception>
#include <numeric>
#include <string>
#include <thread>

#include "fedcar/error.hpp"

namespace fedcar {

std::string_view to_string(WeightScheme w) { return w == WeightScheme::kUniform ? "uniform" : "proportional"; }

WeightScheme parse_weight_scheme(std::string_view text) {
  if (text == "proportional") return WeightScheme::kProportional;
  if (text == "uniform") return WeightScheme::kUniform;
  throw ConfigError("fed.weights must be proportional or uniform, got '" + std::string(text) + "'");
}

std::string_view to_string(TrainMode mode) {
  return mode == TrainMode::kClassifierOnly ? "classifier-only" : "adapter-classifier";
}

TrainMode parse_train_mode(std::string_view text) {
  if (text == "classifier-only") return TrainMode::kClassifierOnly;
  if (text == "adapter-classifier") return TrainMode::kAdapterAndClassifier;
  throw ConfigError("fed.mode must be adapter-classifier or classifier-only, got '" + std::string(text) + "'");
}

void FedConfig::validate() const {
  if (clients < 1) throw ConfigError("fed.clients must be >= 1");
  if (rounds < 1) throw ConfigError("fed.rounds must be >= 1");
  if (local_epochs < 1) throw ConfigError("fed.local_epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("fed.batch_size must be >= 1");
  if (steps_per_round < 0) throw ConfigError("fed.steps_per_round must be >= 0");
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("fed.lr must be finite and >= 0");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("fed.dropout must lie in [0, 1)");
  if (!proportions.empty() && static_cast<int>(proportions.size()) != clients) {
    throw ConfigError("fed.proportions has " + std::to_string(proportions.size()) + " entries for " +
                      std::to_string(clients) + " clients");
  }
  if (!proportions.empty()) {
    double total = 0.0;
    for (double p : proportions) {
      if (!(p >= 0.0)) throw ConfigError("fed.proportions must be >= 0");
      total += p;
    }
    if (std::abs(total - 1.0) > 1e-9) {
      throw ConfigError("fed.proportions sum to " + std::to_string(total) + ", expected 1 +- 1e-9");
    }
  }
  dp.validate(clients);
}

// ---------------------------------------------------------------------------

std::vector<std::vector<std::size_t>> partition_indices(std::size_t n, int m, std::span<const double> proportions,
                                                         std::uint64_t seed) {
  if (m < 1) throw ConfigError("partition needs at least one client");
  if (static_cast<std::size_t>(m) > n) {
    throw DataError("cannot split " + std::to_string(n) + " samples across " + std::to_string(m) + " clients");
  }
  std::vector<std::size_t> sizes(m);
  if (proportions.empty()) {
    for (int i = 0; i < m; ++i) sizes[i] = n / m + (static_cast<std::size_t>(i) < n % m ? 1 : 0);
  } else {
    if (static_cast<int>(proportions.size()) != m) throw ConfigError("one proportion per client required");
    double total = 0.0;
    for (double p : proportions) {
      if (!(p >= 0.0)) throw ConfigError("proportions must be >= 0");
      total += p;
    }
    if (std::abs(total - 1.0) > 1e-9) {
      throw ConfigError("proportions sum to " + std::to_string(total) + ", expected 1 +- 1e-9");
    }
    std::vector<double> frac(m);
    std::size_t assigned = 0;
    for (int i = 0; i < m; ++i) {
      const double exact = proportions[i] * static_cast<double>(n);
      sizes[i] = static_cast<std::size_t>(std::floor(exact));
      frac[i] = exact - std::floor(exact);
      assigned += sizes[i];
    }
    std::vector<int> order(m);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return frac[a] > frac[b]; });
    for (std::size_t k = 0; assigned + k < n; ++k) ++sizes[order[k % m]];
  }
  for (int i = 0; i < m; ++i) {
    if (sizes[i] == 0) throw DataError("client " + std::to_string(i) + " would receive an empty shard");
  }
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  SplitMix64 rng(derive_seed(seed, "partition", 0));
  shuffle(std::span<std::size_t>(perm), rng);
  std::vector<std::vector<std::size_t>> shards(m);
  std::size_t pos = 0;
  for (int i = 0; i < m; ++i) {
    shards[i].assign(perm.begin() + static_cast<std::ptrdiff_t>(pos),
                     perm.begin() + static_cast<std::ptrdiff_t>(pos + sizes[i]));
    pos += sizes[i];
  }
  return shards;
}

std::vector<Dataset> partition(const Dataset& data, int m, std::span<const double> proportions, std::uint64_t seed) {
  std::vector<Dataset> out;
  for (const auto& idx : partition_indices(data.size(), m, proportions, seed)) {
    Dataset shard{{}, data.n_classes, data.dim};
    shard.samples.reserve(idx.size());
    for (std::size_t i : idx) shard.samples.push_back(data.samples[i]);
    out.push_back(std::move(shard));
  }
  return out;
}

// ---------------------------------------------------------------------------

ClientState make_client(int id, Dataset shard, const FedConfig& cfg) {
  if (shard.empty()) throw DataError("client " + std::to_string(id) + " has an empty shard");
  ClientState c;
  c.id = id;
  c.shard = std::move(shard);
  c.lr = cfg.lr;
  c.dp_config = cfg.dp;
  c.dp = init_dp(cfg.dp, cfg.clients);
  const auto idx = static_cast<std::uint64_t>(id);
  c.batch_rng = SplitMix64(derive_seed(cfg.seed, "batch", idx));
  c.dropout_rng = SplitMix64(derive_seed(cfg.seed, "dropout", idx));
  c.noise_rng = SplitMix64(derive_seed(cfg.seed, "noise", idx));
  c.probe_rng = SplitMix64(derive_seed(cfg.seed, "probe", idx));
  return c;
}

std::vector<ClientState> make_clients(const FedConfig& cfg, const Dataset& train) {
  std::vector<ClientState> clients;
  auto shards = partition(train, cfg.clients, cfg.proportions, cfg.seed);
  for (int i = 0; i < cfg.clients; ++i) clients.push_back(make_client(i, std::move(shards[i]), cfg));
  return clients;
}

double thread_cpu_ms() {
  timespec ts{};
  clock_gettime(CLOCK_THREAD_CPUTIME_ID, &ts);
  return static_cast<double>(ts.tv_sec) * 1e3 + static_cast<double>(ts.tv_nsec) * 1e-6;
}

namespace {

double wall_ms_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
}

/// Yields the minibatches of one round: full shuffled passes, or exactly
/// `steps` batches drawn from consecutive shuffled passes.
class BatchSchedule {
 public:
  BatchSchedule(const Dataset& shard, int batch_size, SplitMix64& rng)
      : shard_(shard), batch_(static_cast<std::size_t>(batch_size)), rng_(rng) {
    order_.resize(shard.size());
  }

  std::vector<const Sample*> next() {
    if (pos_ >= order_.size() || !started_) reshuffle();
    const std::size_t end = std::min(order_.size(), pos_ + batch_);
    std::vector<const Sample*> b;
    b.reserve(end - pos_);
    for (std::size_t i = pos_; i < end; ++i) b.push_back(&shard_.samples[order_[i]]);
    pos_ = end;
    return b;
  }

  std::size_t batches_per_epoch() const { return (order_.size() + batch_ - 1) / batch_; }

 private:
  void reshuffle() {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    shuffle(std::span<std::size_t>(order_), rng_);
    pos_ = 0;
    started_ = true;
  }

  const Dataset& shard_;
  std::size_t batch_;
  SplitMix64& rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
  bool started_ = false;
};

}  // namespace

LocalResult local_update(ClientState& client, const Model& global_model, const FedConfig& cfg, const Encoder& enc,
                         int round) {
  const double cpu_start = thread_cpu_ms();
  LocalResult out;
  ClientRecord& rec = out.record;
  rec.round = round;
  rec.client = client.id;
  const bool dp_on = client.dp_config.active_in_round(round);
  rec.clip_threshold = dp_on ? client.dp.clip_threshold : 0.0;

  Model theta = global_model;
  BatchSchedule schedule(client.shard, cfg.batch_size, client.batch_rng);
  const std::size_t total_steps = cfg.steps_per_round > 0
                                      ? static_cast<std::size_t>(cfg.steps_per_round)
                                      : schedule.batches_per_epoch() * static_cast<std::size_t>(cfg.local_epochs);
  const bool per_step_dp = dp_on && client.dp_config.per_iteration;
  double loss_sum = 0.0;
  std::size_t seen = 0;
  std::size_t correct = 0;
  for (std::size_t step = 0; step < total_steps; ++step) {
    const auto batch = schedule.next();
    const LossAndGradients<double> lg = loss_and_gradients<double>(theta, enc, batch, client.dropout_rng);
    loss_sum += lg.loss * static_cast<double>(batch.size());
    seen += batch.size();
    correct += static_cast<std::size_t>(lg.correct);
    Eigen::VectorXd g = flatten(lg.grads);
    if (theta.mode == TrainMode::kClassifierOnly) g = g.tail(param_count(theta, ParamScope::kTrainable)).eval();
    rec.max_grad_norm = std::max(rec.max_grad_norm, g.norm());
    if (per_step_dp) {
      const Eigen::VectorXd before = flatten(theta, ParamScope::kTrainable);
      Model stepped = theta;
      sgd_step(stepped, lg.grads, client.lr);
      const Eigen::VectorXd delta = flatten(stepped, ParamScope::kTrainable) - before;
      DpOutcome o = dp_transform(theta, delta, client.dp, client.dp_config.mode, client.noise_rng);
      rec.clipped = rec.clipped || o.clipped;
      if (client.dp_config.mode == DpMode::kAdaptive) client.dp = adapt_threshold(client.dp, client.dp_config, o.delta_norm);
      theta = std::move(o.model);
    } else {
      sgd_step(theta, lg.grads, client.lr);
    }
  }
  rec.steps = static_cast<int>(total_steps);
  rec.loss = seen ? loss_sum / static_cast<double>(seen) : 0.0;
  rec.accuracy = seen ? static_cast<double>(correct) / static_cast<double>(seen) : 0.0;

  const Eigen::VectorXd delta = flatten(theta, ParamScope::kTrainable) - flatten(global_model, ParamScope::kTrainable);
  rec.delta_norm = delta.norm();
  if (dp_on && !per_step_dp) {
    DpOutcome o = dp_transform(global_model, delta, client.dp, client.dp_config.mode, client.noise_rng);
    rec.clipped = o.clipped;
    if (client.dp_config.mode == DpMode::kAdaptive) client.dp = adapt_threshold(client.dp, client.dp_config, o.delta_norm);
    out.model = std::move(o.model);
  } else {
    out.model = std::move(theta);
  }
  if (!flatten(out.model, ParamScope::kTrainable).allFinite()) {
    throw ModelError("client " + std::to_string(client.id) + " produced non-finite parameters in round " +
                     std::to_string(round) + "; lower fed.lr");
  }
  rec.compute_ms = thread_cpu_ms() - cpu_start;
  return out;
}

ClientTrace probe_client(ClientState& client, const Model& global_model, const FedConfig& cfg, const Encoder& enc) {
  ClientTrace t;
  const auto all = sample_pointers(client.shard);
  SplitMix64 unused(0);
  const auto full = loss_and_gradients<double>(global_model, enc, all, unused, false);
  const Eigen::Index n_train = param_count(global_model, ParamScope::kTrainable);
  t.local_grad = flatten(full.grads).tail(n_train);
  t.local_loss = full.loss;
  BatchSchedule schedule(client.shard, cfg.batch_size, client.probe_rng);
  const std::size_t batches = schedule.batches_per_epoch();
  double var_sum = 0.0;
  for (std::size_t b = 0; b < batches; ++b) {
    const auto batch = schedule.next();
    const auto lg = loss_and_gradients<double>(global_model, enc, batch, client.probe_rng);
    const Eigen::VectorXd g = flatten(lg.grads).tail(n_train);
    var_sum += (g - t.local_grad).squaredNorm();
    t.max_grad_norm = std::max(t.max_grad_norm, g.norm());
  }
  t.stochastic_variance = var_sum / static_cast<double>(batches);
  return t;
}

std::vector<double> aggregation_weights(const FedConfig& cfg, std::span<const std::size_t> shard_sizes) {
  const std::size_t m = shard_sizes.size();
  std::vector<double> w(m);
  if (cfg.weights == WeightScheme::kUniform) {
    std::fill(w.begin(), w.end(), 1.0 / static_cast<double>(m));
  } else {
    const double n = static_cast<double>(std::accumulate(shard_sizes.begin(), shard_sizes.end(), std::size_t{0}));
    for (std::size_t i = 0; i < m; ++i) w[i] = static_cast<double>(shard_sizes[i]) / n;
  }
  return w;
}

Model aggregate(std::span<const Model> models, std::span<const double> weights) {
  if (models.empty()) throw ModelError("aggregate needs at least one model");
  if (models.size() != weights.size()) throw ModelError("one aggregation weight per model required");
  double total = 0.0;
  for (double w : weights) total += w;
  if (std::abs(total - 1.0) > 1e-12) {
    throw ModelError("aggregation weights sum to " + std::to_string(total) + ", expected 1 +- 1e-12");
  }
  for (std::size_t i = 1; i < models.size(); ++i) {
    if (!same_shapes(models[0], models[i])) {
      throw ModelError("model " + std::to_string(i) + " has different tensor shapes");
    }
  }
  Eigen::VectorXd acc = weights[0] * flatten(models[0], ParamScope::kTrainable);
  for (std::size_t i = 1; i < models.size(); ++i) acc += weights[i] * flatten(models[i], ParamScope::kTrainable);
  Model out = models[0];
  assign_flat<double>(out, acc, ParamScope::kTrainable);
  return out;
}

// ---------------------------------------------------------------------------

EvalStats evaluate_loss(const Model& model, const Encoder& enc, const Dataset& data) {
  EvalStats s;
  if (data.empty()) return s;
  SplitMix64 unused(0);
  std::size_t correct = 0;
  double loss = 0.0;
  for (const Sample& sample : data.samples) {
    const Eigen::VectorXd logits = predict_logits(model, enc, sample);
    const double mx = logits.maxCoeff();
    loss += std::log((logits.array() - mx).exp().sum()) + mx - logits(sample.label);
    Eigen::Index arg = 0;
    logits.maxCoeff(&arg);
    correct += arg == sample.label;
  }
  s.loss = loss / static_cast<double>(data.size());
  s.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  return s;
}

Model initial_model(const FedConfig& cfg, const Encoder& enc, int n_classes) {
  return init_model<double>(enc.d_emb(), enc.d_hidden(), n_classes, cfg.pre_classifier, cfg.pre_classifier ? cfg.dropout : 0.0,
                            cfg.mode, derive_seed(cfg.seed, "init", 0));
}

Encoder training_encoder(const FedConfig& cfg, const Encoder& enc, const Dataset& train, const Dataset& val) {
  if (cfg.mode == TrainMode::kAdapterAndClassifier) {
    if (enc.is_precomputed()) {
      throw ConfigError("adapter training needs the synthetic encoder; use fed.mode = classifier-only");
    }
    return enc;
  }
  if (enc.is_precomputed()) return enc;
  const auto identity = AdapterParams<double>::identity(enc.d_emb());
  HiddenStateTable<double> table;
  for (const Dataset* d : {&train, &val}) {
    for (const Sample& s : compute_hidden_states(enc, identity, *d).samples) table.emplace(s.id, s.features);
  }
  return Encoder::precomputed(std::move(table), enc.d_hidden(), enc.d_emb());
}

namespace {

RoundTrace probe_round(std::vector<ClientState>& clients, const Model& model, const FedConfig& cfg, const Encoder& enc,
                       std::span<const double> weights, int round) {
  RoundTrace rt;
  rt.round = round;
  rt.theta = flatten(model, ParamScope::kTrainable);
  rt.global_grad = Eigen::VectorXd::Zero(rt.theta.size());
  for (std::size_t i = 0; i < clients.size(); ++i) {
    rt.clients.push_back(probe_client(clients[i], model, cfg, enc));
    rt.global_grad += weights[i] * rt.clients.back().local_grad;
    rt.global_loss += weights[i] * rt.clients.back().local_loss;
  }
  return rt;
}

}  // namespace

TrainingResult run_training(const FedConfig& cfg, const Encoder& base_enc, const Dataset& train, const Dataset& val) {
  cfg.validate();
  const auto wall_start = std::chrono::steady_clock::now();
  const Encoder enc = training_encoder(cfg, base_enc, train, val);
  std::vector<ClientState> clients = make_clients(cfg, train);
  std::vector<std::size_t> sizes;
  for (const auto& c : clients) sizes.push_back(c.shard.size());
  const std::vector<double> weights = aggregation_weights(cfg, sizes);

  TrainingResult result;
  result.model = initial_model(cfg, enc, train.n_classes);
  if (cfg.record_trace) {
    result.trace.emplace();
    result.trace->weights = weights;
    result.trace->lr = cfg.lr;
    result.trace->clients = cfg.clients;
  }

  for (int round = 0; round < cfg.rounds; ++round) {
    const auto round_start = std::chrono::steady_clock::now();
    if (result.trace) result.trace->rounds.push_back(probe_round(clients, result.model, cfg, enc, weights, round));

    std::vector<LocalResult> locals(clients.size());
    std::vector<std::exception_ptr> errors(clients.size());
    auto work = [&](std::size_t i) {
      try {
        locals[i] = local_update(clients[i], result.model, cfg, enc, round);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    };
    if (cfg.parallel && clients.size() > 1) {
      std::vector<std::thread> threads;
      for (std::size_t i = 0; i < clients.size(); ++i) threads.emplace_back(work, i);
      for (auto& t : threads) t.join();
    } else {
      for (std::size_t i = 0; i < clients.size(); ++i) work(i);
    }
    for (std::size_t i = 0; i < clients.size(); ++i) {
      if (!errors[i]) continue;
      try {
        std::rethrow_exception(errors[i]);
      } catch (const Error& e) {
        throw ModelError("round " + std::to_string(round) + " aborted: client " + std::to_string(i) + ": " + e.what());
      }
    }

    const auto agg_start = std::chrono::steady_clock::now();
    std::vector<Model> models;
    models.reserve(locals.size());
    RoundRecord rec;
    rec.round = round;
    double max_compute = 0.0;
    for (auto& l : locals) {
      models.push_back(std::move(l.model));
      max_compute = std::max(max_compute, l.record.compute_ms);
      rec.clients.push_back(l.record);
    }
    result.model = aggregate(models, weights);
    rec.distributed_ms = max_compute + wall_ms_since(agg_start);
    if (result.trace) {
      auto& rt = result.trace->rounds.back();
      for (std::size_t i = 0; i < clients.size(); ++i) {
        ClientTrace& ct = rt.clients[i];
        ct.delta_norm = rec.clients[i].delta_norm;
        ct.clip_threshold = rec.clients[i].clip_threshold;
        ct.clipped = rec.clients[i].clipped;
        ct.steps = rec.clients[i].steps;
        ct.max_grad_norm = std::max(ct.max_grad_norm, rec.clients[i].max_grad_norm);
      }
    }
    const EvalStats v = evaluate_loss(result.model, enc, val);
    rec.val_loss = v.loss;
    rec.val_accuracy = v.accuracy;
    rec.wall_ms = wall_ms_since(round_start);
    result.distributed_ms += rec.distributed_ms;
    result.records.push_back(std::move(rec));
  }
  if (result.trace) {
    result.trace->rounds.push_back(probe_round(clients, result.model, cfg, enc, weights, cfg.rounds));
  }
  result.wall_ms = wall_ms_since(wall_start);
  return result;
}

TrainingResult run_centralized(const FedConfig& cfg, const Encoder& base_enc, const Dataset& train,
                               const Dataset& val) {
  FedConfig c = cfg;
  c.clients = 1;
  c.proportions.clear();
  c.dp = DpConfig{};
  c.record_trace = false;
  if (c.steps_per_round == 0) {
    c.rounds = cfg.rounds * cfg.local_epochs;
    c.local_epochs = 1;
  }
  c.validate();
  const auto wall_start = std::chrono::steady_clock::now();
  const Encoder enc = training_encoder(c, base_enc, train, val);
  std::vector<ClientState> clients = make_clients(c, train);
  TrainingResult result;
  result.model = initial_model(c, enc, train.n_classes);
  for (int epoch = 0; epoch < c.rounds; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    LocalResult l = local_update(clients[0], result.model, c, enc, epoch);
    result.model = std::move(l.model);
    RoundRecord rec;
    rec.round = epoch;
    rec.distributed_ms = l.record.compute_ms;
    rec.clients.push_back(l.record);
    const EvalStats v = evaluate_loss(result.model, enc, val);
    rec.val_loss = v.loss;
    rec.val_accuracy = v.accuracy;
    rec.wall_ms = wall_ms_since(start);
    result.distributed_ms += rec.distributed_ms;
    result.records.push_back(std::move(rec));
  }
  result.wall_ms = wall_ms_since(wall_start);
  return result;
}

}  // namespace fedcar
