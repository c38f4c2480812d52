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

// Acceptance driver: `acceptance [N ...]` runs the listed criteria (all when
// none are given) and prints one PASS/FAIL line per criterion.

#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <future>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "fedcar/dp.hpp"
#include "fedcar/error.hpp"
#include "fedcar/federation.hpp"
#include "fedcar/metrics.hpp"
#include "fedcar/retrieval.hpp"
#include "fedcar/theory.hpp"
#include "fedcar/transport.hpp"
#include "fedcar/wire.hpp"
#include "test_util.hpp"

using namespace fedcar;
using namespace std::chrono_literals;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  int id;
  std::string title;
  double limit_s;
  std::function<Outcome()> run;
};

std::string fmt(double v, int prec = 4) {
  std::ostringstream o;
  o.precision(prec);
  o << v;
  return o.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

struct Blobs {
  Dataset train;
  Dataset val;
};

Blobs blobs(int n_per_class, int dim, double spread, std::uint64_t seed) {
  auto [train, val] = split_holdout(gen_synthetic(n_per_class, 2, dim, spread, seed), 0.2, seed + 1);
  return {std::move(train), std::move(val)};
}

double final_accuracy(const TrainingResult& r) { return r.records.back().val_accuracy; }

bool same_records(const std::vector<RoundRecord>& a, const std::vector<RoundRecord>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t r = 0; r < a.size(); ++r) {
    if (a[r].round != b[r].round || a[r].val_loss != b[r].val_loss || a[r].val_accuracy != b[r].val_accuracy ||
        a[r].clients.size() != b[r].clients.size()) {
      return false;
    }
    for (std::size_t i = 0; i < a[r].clients.size(); ++i) {
      ClientRecord x = a[r].clients[i];
      ClientRecord y = b[r].clients[i];
      x.compute_ms = y.compute_ms = 0.0;
      if (format_client_record(x) != format_client_record(y)) return false;
    }
  }
  return true;
}

// Runs serve_aggregator here and every client in its own forked process.
TrainingResult networked_run(const FedConfig& cfg, const Encoder& enc, const Dataset& train, const Dataset& val,
                             double* wall_s = nullptr) {
  const Encoder train_enc = training_encoder(cfg, enc, train, val);
  Listener listener = Listener::bind({"127.0.0.1", 0});
  NetOptions opts;
  opts.round_timeout = 300s;
  opts.connect_backoff = 50ms;
  std::vector<pid_t> children;
  std::cout.flush();
  for (int id = 0; id < cfg.clients; ++id) {
    const pid_t pid = fork();
    if (pid < 0) throw NetworkError("fork failed");
    if (pid == 0) {
      int code = 1;
      try {
        const Endpoint ep{"127.0.0.1", listener.port()};
        listener = Listener{};
        const int rounds = serve_client(
            id, ep, [&](const std::string&) { return make_session(id, cfg, enc, train, val); }, opts);
        code = rounds == cfg.rounds ? 0 : 1;
      } catch (const std::exception& e) {
        std::fprintf(stderr, "client %d: %s\n", id, e.what());
      }
      _exit(code);
    }
    children.push_back(pid);
  }
  const auto t0 = std::chrono::steady_clock::now();
  TrainingResult result;
  std::exception_ptr failure;
  try {
    result = serve_aggregator(AggregatorJob{cfg, &train_enc, &train, &val, "acceptance"}, listener, opts);
  } catch (...) {
    failure = std::current_exception();
  }
  if (wall_s) *wall_s = seconds_since(t0);
  bool clients_ok = true;
  for (pid_t pid : children) {
    int status = 0;
    waitpid(pid, &status, 0);
    clients_ok = clients_ok && WIFEXITED(status) && WEXITSTATUS(status) == 0;
  }
  if (failure) std::rethrow_exception(failure);
  if (!clients_ok) throw NetworkError("a client process failed");
  return result;
}

// ---------------------------------------------------------------------------

Outcome gradient_oracle() {
  SplitMix64 rng(20260);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto inst = testing_util::random_instance(rng);
    const auto batch = testing_util::pointers(inst.samples);
    worst = std::max(worst, testing_util::max_fd_relative_error(inst.model, inst.encoder, batch, 500 + trial));
  }
  return {worst < 1e-4, "worst relative error " + fmt(worst, 3) + " over 100 instances (limit 1e-4)"};
}

Outcome dp_laws() {
  std::ostringstream d;
  bool ok = true;

  SplitMix64 rng(7);
  double worst_clip = 0.0;
  for (int trial = 0; trial < 10000; ++trial) {
    const int n = 1 + static_cast<int>(rng.below(64));
    Eigen::VectorXd v(n);
    const double scale = std::pow(10.0, rng.uniform(-3, 3));
    for (int i = 0; i < n; ++i) v(i) = scale * rng.gaussian();
    const double c = std::pow(10.0, rng.uniform(-3, 3));
    const ClipResult r = clip_update(v, c);
    const double want = std::min(v.norm(), c);
    worst_clip = std::max(worst_clip, std::abs(r.update.norm() - want) / want);
    if (r.update.dot(v) < 0.0) ok = false;
  }
  ok = ok && worst_clip <= 4 * std::numeric_limits<double>::epsilon();
  d << "clip norm law worst rel " << fmt(worst_clip, 2) << "; ";

  auto moments = [&](double s0, double s1, double norm_sq, double expected) {
    constexpr int kN = 1000000;
    DpState s;
    s.sigma0_sq = s0;
    s.sigma1_sq = s1;
    SplitMix64 noise_rng(99);
    const Eigen::VectorXd x = sample_noise(kN, s, norm_sq, noise_rng);
    const double mean = x.mean();
    const double var = (x.array() - mean).square().sum() / (kN - 1);
    const double se_mean = std::sqrt(expected / kN);
    const double se_var = expected * std::sqrt(2.0 / (kN - 1));
    const bool pass = std::abs(mean) <= 4 * se_mean && std::abs(var - expected) <= 4 * se_var;
    d << "var " << fmt(var, 6) << " vs " << expected << (pass ? " ok" : " BAD") << "; ";
    return pass;
  };
  ok = moments(1.0, 0.0, 0.0, 1.0) && ok;
  ok = moments(1.0, 2.0, 3.0, 7.0) && ok;

  const double zd = delta_noise_multiplier(0.1, 2);
  ok = ok && std::abs(zd - 0.115470) <= 1e-6;
  d << "z_delta(m=2, z=0.1) = " << fmt(zd, 8);
  return {ok, d.str()};
}

Outcome degenerate_federation() {
  const Blobs b = blobs(80, 6, 1.0, 3);
  const Encoder enc = Encoder::synthetic(4, 6, 5, 2, Pooling::kMean);
  int checked = 0;
  bool ok = true;
  for (TrainMode mode : {TrainMode::kAdapterAndClassifier, TrainMode::kClassifierOnly}) {
    for (bool pre : {false, true}) {
      for (int epochs : {1, 2}) {
        FedConfig cfg;
        cfg.clients = 1;
        cfg.rounds = 3;
        cfg.local_epochs = epochs;
        cfg.mode = mode;
        cfg.pre_classifier = pre;
        cfg.lr = 0.05;
        cfg.seed = 11 + checked;
        const TrainingResult fl = run_training(cfg, enc, b.train, b.val);
        const TrainingResult central = run_centralized(cfg, enc, b.train, b.val);
        ok = ok && bitwise_equal(fl.model, central.model);
        ++checked;
      }
    }
  }
  return {ok, std::to_string(checked) + " configurations compared bitwise"};
}

Outcome ordering() {
  std::ostringstream d;
  bool ok = true;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const Blobs b = blobs(1000, 16, 0.75, seed);
    const Encoder enc = Encoder::synthetic(seed + 2, 16, 3, 3, Pooling::kMean);
    ComparisonConfig cc;
    cc.train.clients = 1;
    cc.train.rounds = 10;
    cc.train.local_epochs = 1;
    cc.train.seed = seed;
    cc.lr_classifier_only = 0.05;
    cc.lr_joint = 0.05;
    const ComparisonResult r = four_way_comparison(cc, enc, b.train, b.val);
    const bool pass = r.combined >= r.classifier_only - 0.005 && r.classifier_only - r.frozen_mips >= 0.10;
    ok = ok && pass;
    d << "seed " << seed << ": combined " << fmt(100 * r.combined) << " classifier " << fmt(100 * r.classifier_only)
      << " mips " << fmt(100 * r.frozen_mips) << (pass ? "" : " BAD") << "; ";
  }
  return {ok, d.str()};
}

FedConfig parity_config(std::uint64_t seed) {
  FedConfig cfg;
  cfg.clients = 2;
  cfg.rounds = 5;
  cfg.local_epochs = 2;
  cfg.seed = seed;
  cfg.lr = 0.05;
  return cfg;
}

Outcome parity() {
  std::ostringstream d;
  bool ok = true;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const Blobs b = blobs(1000, 16, 1.0, seed);
    const Encoder enc = Encoder::synthetic(seed + 2, 16, 3, 3, Pooling::kMean);
    const FedConfig cfg = parity_config(seed);
    const double fl = final_accuracy(run_training(cfg, enc, b.train, b.val));
    const double central = final_accuracy(run_centralized(cfg, enc, b.train, b.val));
    const bool pass = std::abs(fl - central) <= 0.02;
    ok = ok && pass;
    d << "seed " << seed << ": FL " << fmt(100 * fl) << " centralized " << fmt(100 * central) << (pass ? "" : " BAD")
      << "; ";
  }
  return {ok, d.str()};
}

Outcome speedup() {
  const unsigned cpus = std::thread::hardware_concurrency();
  const Blobs b = blobs(1500, 16, 1.0, 31);
  const Encoder enc = Encoder::synthetic(33, 16, 96, 6, Pooling::kMean);
  FedConfig cfg;
  cfg.clients = 3;
  cfg.rounds = 3;
  cfg.local_epochs = 1;
  cfg.seed = 31;
  cfg.lr = 0.05;
  cfg.parallel = true;

  auto t0 = std::chrono::steady_clock::now();
  const TrainingResult central = run_centralized(cfg, enc, b.train, b.val);
  const double central_s = seconds_since(t0);
  t0 = std::chrono::steady_clock::now();
  const TrainingResult fl = run_training(cfg, enc, b.train, b.val);
  const double fl_s = seconds_since(t0);
  double net_s = 0.0;
  const TrainingResult net = networked_run(cfg, enc, b.train, b.val, &net_s);

  const double in_process = central_s / fl_s;
  const double networked = central_s / net_s;
  const double ideal = central.distributed_ms / fl.distributed_ms;
  std::ostringstream d;
  d << "centralized " << fmt(central_s, 3) << " s, in-process " << fmt(fl_s, 3) << " s (x" << fmt(in_process, 3)
    << "), networked " << fmt(net_s, 3) << " s (x" << fmt(networked, 3) << "); hardware threads " << cpus
    << "; with one core per client the round critical path gives x" << fmt(ideal, 3);
  const bool ok = in_process >= 1.5 && networked >= 1.5 && bitwise_equal(net.model, fl.model);
  return {ok, d.str()};
}

Outcome dp_degradation() {
  std::ostringstream d;
  bool ok = true;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const Blobs b = blobs(1000, 16, 1.0, seed);
    const Encoder enc = Encoder::synthetic(seed + 2, 16, 3, 3, Pooling::kMean);
    FedConfig cfg = parity_config(seed);
    const double plain = final_accuracy(run_training(cfg, enc, b.train, b.val));
    cfg.dp.mode = DpMode::kAdaptive;
    cfg.dp.z = 0.1;
    const double private_acc = final_accuracy(run_training(cfg, enc, b.train, b.val));
    const bool pass = plain - private_acc <= 0.06;
    ok = ok && pass;
    d << "seed " << seed << ": no-DP " << fmt(100 * plain) << " adaptive-DP " << fmt(100 * private_acc)
      << (pass ? "" : " BAD") << "; ";
  }
  return {ok, d.str()};
}

Outcome clipping_dynamics() {
  std::ostringstream d;
  bool ok = true;
  int slowest = 0;
  for (double c0 : {0.01, 0.3, 1.0, 5.0, 50.0}) {
    for (double norm : {0.05, 0.5, 2.0}) {
      DpConfig cfg;
      cfg.mode = DpMode::kAdaptive;
      cfg.c0 = c0;
      cfg.beta = 0.1;
      cfg.gamma = 0.9;
      cfg.z = 0.1;
      DpState s = init_dp(cfg, 2);
      const double target = cfg.gamma * norm;
      int reached = -1;
      for (int t = 1; t <= 200 && reached < 0; ++t) {
        s = adapt_threshold(s, cfg, norm);
        if (std::abs(s.clip_threshold - target) <= 0.01 * target) reached = t;
      }
      if (reached < 0) {
        ok = false;
        d << "C0=" << c0 << " d=" << norm << " not within 1% after 200 steps; ";
      }
      slowest = std::max(slowest, reached);
    }
  }
  d << "slowest approach to gamma*d took " << slowest << " steps; ";

  // Trajectory bound over a spread of adaptive runs.
  const Blobs b = blobs(150, 8, 1.0, 41);
  const Encoder enc = Encoder::synthetic(42, 8, 6, 2, Pooling::kMean);
  int runs = 0;
  double worst = -std::numeric_limits<double>::infinity();
  for (int variant = 0; variant < 8; ++variant) {
    FedConfig cfg;
    cfg.clients = 1 + variant % 3;
    cfg.rounds = 6;
    cfg.local_epochs = 1 + variant % 2;
    cfg.lr = variant % 2 ? 0.05 : 0.01;
    cfg.seed = 40 + variant;
    cfg.pre_classifier = variant >= 4;
    cfg.mode = variant % 4 == 3 ? TrainMode::kClassifierOnly : TrainMode::kAdapterAndClassifier;
    cfg.dp.mode = DpMode::kAdaptive;
    cfg.dp.c0 = variant % 2 ? 0.2 : 2.0;
    cfg.dp.beta = variant < 4 ? 0.1 : 0.5;
    cfg.dp.z = 0.05;
    cfg.dp.warmup_rounds = variant == 6 ? 2 : 0;
    const TrainingResult r = run_training(cfg, enc, b.train, b.val);
    const RecursionCheck rc = check_threshold_recursion(r.records, cfg.dp, cfg.lr);
    worst = std::max(worst, rc.worst_single);
    ok = ok && rc.worst_single <= 1e-12;
    ++runs;
  }
  d << "trajectory bound checked on " << runs << " runs, worst C - bound = " << fmt(worst, 3);
  return {ok, d.str()};
}

Outcome certification() {
  std::ostringstream d;
  bool ok = true;
  const Blobs b = blobs(60, 8, 1.0, 11);
  const Encoder enc = Encoder::synthetic(13, 8, 3, 3, Pooling::kMean);
  for (DpMode mode : {DpMode::kFixed, DpMode::kAdaptive}) {
    FedConfig cfg;
    cfg.clients = 2;
    cfg.rounds = 40;
    cfg.steps_per_round = 1;
    cfg.batch_size = 8;
    cfg.weights = WeightScheme::kUniform;
    cfg.lr = 0.05;
    cfg.seed = 5;
    cfg.record_trace = true;
    cfg.dp.mode = mode;
    cfg.dp.c0 = mode == DpMode::kFixed ? 0.05 : 1.0;
    cfg.dp.sigma0 = 0.1;
    cfg.dp.z = 0.1;
    const TrainingResult r = run_training(cfg, enc, b.train, b.val);
    EstimateOptions o;
    o.reference_objective = overtrained_objective(cfg, enc, b.train, 200);
    const TheoryConstants c = estimate_constants(*r.trace, o);
    const int T = cfg.rounds - 1;
    const BoundValue bound = mode == DpMode::kFixed ? bound_fixed(c, cfg.dp.c0, cfg.dp.sigma0, cfg.lr, T)
                                                    : bound_adaptive(c, cfg.dp, cfg.clients, cfg.lr, T);
    const Verification v = verify_bound(*r.trace, bound);
    const bool certified = certificate_violation(*r.trace, c) <= 0.0;
    ok = ok && v.pass && certified;
    d << (mode == DpMode::kFixed ? "fixed-dp" : "adaptive-dp") << ": measured " << fmt(v.measured) << " <= bound "
      << fmt(v.bound.value) << (v.pass ? "" : " BAD") << (certified ? "" : " (constants not certified)") << "; ";
  }
  return {ok, d.str()};
}

Outcome wire_protocol() {
  std::ostringstream d;
  bool ok = true;
  SplitMix64 rng(1010);

  int round_trips = 0;
  for (int trial = 0; trial < 2000; ++trial) {
    WireMessage m;
    m.type = static_cast<MsgType>(1 + rng.below(7));
    m.payload.resize(rng.below(300));
    for (auto& byte : m.payload) byte = static_cast<std::uint8_t>(rng.below(256));
    ok = ok && decode_message(encode_message(m)) == m;
    std::vector<Tensor> tensors(rng.below(4));
    for (Tensor& t : tensors) {
      const int rank = static_cast<int>(rng.below(3));
      std::size_t size = 1;
      for (int k = 0; k < rank; ++k) {
        t.dims.push_back(static_cast<std::uint32_t>(rng.below(4)));
        size *= t.dims.back();
      }
      for (std::size_t k = 0; k < size; ++k) t.values.push_back(rng.gaussian());
    }
    const auto back = decode_tensors(encode_tensors(tensors));
    ok = ok && back.size() == tensors.size();
    for (std::size_t k = 0; ok && k < back.size(); ++k) {
      ok = back[k].dims == tensors[k].dims && back[k].values == tensors[k].values;
    }
    ++round_trips;
  }
  d << round_trips << " message and tensor round trips; ";

  // Random and mutated frames must decode to an equal re-encoding or throw WireError.
  int fuzzed = 0;
  int accepted = 0;
  for (int trial = 0; trial < 50000; ++trial) {
    bytes::Buffer frame;
    if (trial % 2 == 0) {
      frame.resize(rng.below(24));
      for (auto& byte : frame) byte = static_cast<std::uint8_t>(rng.below(256));
    } else {
      WireMessage m{static_cast<MsgType>(1 + rng.below(7)), bytes::Buffer(rng.below(16), 0xAB)};
      frame = encode_message(m);
      const int flips = 1 + static_cast<int>(rng.below(3));
      for (int f = 0; f < flips; ++f) frame[rng.below(frame.size())] ^= static_cast<std::uint8_t>(1 + rng.below(255));
      if (rng.below(4) == 0) frame.resize(rng.below(frame.size() + 1));
    }
    try {
      const WireMessage m = decode_message(frame);
      ok = ok && encode_message(m) == frame;
      ++accepted;
    } catch (const WireError&) {
    }
    ++fuzzed;
  }
  d << fuzzed << " fuzzed frames (" << accepted << " valid); ";

  const Blobs b = blobs(60, 6, 1.0, 51);
  const Encoder enc = Encoder::synthetic(52, 6, 5, 2, Pooling::kMean);
  FedConfig cfg;
  cfg.clients = 2;
  cfg.rounds = 4;
  cfg.local_epochs = 2;
  cfg.lr = 0.05;
  cfg.seed = 53;
  cfg.pre_classifier = true;
  cfg.dp.mode = DpMode::kAdaptive;
  cfg.dp.z = 0.1;
  const TrainingResult local = run_training(cfg, enc, b.train, b.val);
  const TrainingResult net = networked_run(cfg, enc, b.train, b.val);
  const bool equal = same_records(local.records, net.records) && bitwise_equal(local.model, net.model);
  ok = ok && equal;
  d << "networked m=2 run " << (equal ? "equals" : "DIFFERS from") << " the in-process run record for record";
  return {ok, d.str()};
}

const std::vector<Criterion>& criteria() {
  static const std::vector<Criterion> all = {
      {1, "gradient oracle", 10, gradient_oracle},
      {2, "DP mechanism laws", 30, dp_laws},
      {3, "degenerate federation equals centralized", 30, degenerate_federation},
      {4, "retrieval ordering (combined >= classifier-only >> frozen MIPS)", 300, ordering},
      {5, "two-client FL parity with centralized", 300, parity},
      {6, "parallel-client wall-clock speedup >= 1.5x", 600, speedup},
      {7, "adaptive-DP degradation within 6 points", 300, dp_degradation},
      {8, "adaptive clipping dynamics", 10, clipping_dynamics},
      {9, "convergence bound certification", 300, certification},
      {10, "wire protocol", 120, wire_protocol},
  };
  return all;
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<int> wanted;
  for (int i = 1; i < argc; ++i) {
    char* end = nullptr;
    const long v = std::strtol(argv[i], &end, 10);
    if (*end != '\0' || v < 1 || v > static_cast<long>(criteria().size())) {
      std::cerr << "usage: acceptance [criterion 1-" << criteria().size() << " ...]\n";
      return 2;
    }
    wanted.push_back(static_cast<int>(v));
  }
  if (wanted.empty()) {
    for (const Criterion& c : criteria()) wanted.push_back(c.id);
  }
  bool all_pass = true;
  for (int id : wanted) {
    const Criterion& c = criteria()[static_cast<std::size_t>(id - 1)];
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double s = seconds_since(t0);
    if (s > c.limit_s) {
      o.pass = false;
      o.detail += "; over the " + fmt(c.limit_s, 4) + " s budget";
    }
    all_pass = all_pass && o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " " << c.id << " " << c.title << " [" << fmt(s, 3) << " s]: " << o.detail
              << std::endl;
  }
  return all_pass ? 0 : 1;
}
