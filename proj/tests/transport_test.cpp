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

#include <gtest/gtest.h>

#include <future>
#include <thread>

#include "fedcar/error.hpp"
#include "fedcar/metrics.hpp"
#include "fedcar/transport.hpp"

namespace fedcar {
namespace {

using namespace std::chrono_literals;

struct Blobs {
  Dataset train;
  Dataset val;
  Encoder enc;
};

Blobs blobs() {
  auto [train, val] = split_holdout(gen_synthetic(30, 3, 4, 0.8, 5), 0.2, 6);
  return {std::move(train), std::move(val), Encoder::synthetic(7, 4, 5)};
}

FedConfig small_config(int clients) {
  FedConfig cfg;
  cfg.clients = clients;
  cfg.rounds = 3;
  cfg.local_epochs = 1;
  cfg.lr = 0.05;
  cfg.seed = 23;
  return cfg;
}

NetOptions quick() {
  NetOptions o;
  o.round_timeout = 20s;
  o.connect_backoff = 50ms;
  return o;
}

void expect_same_records(const std::vector<RoundRecord>& a, const std::vector<RoundRecord>& b) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t r = 0; r < a.size(); ++r) {
    EXPECT_EQ(a[r].val_loss, b[r].val_loss);
    EXPECT_EQ(a[r].val_accuracy, b[r].val_accuracy);
    ASSERT_EQ(a[r].clients.size(), b[r].clients.size());
    for (std::size_t i = 0; i < a[r].clients.size(); ++i) {
      ClientRecord x = a[r].clients[i];
      ClientRecord y = b[r].clients[i];
      x.compute_ms = y.compute_ms = 0.0;
      EXPECT_EQ(format_client_record(x), format_client_record(y));
    }
  }
}

struct Harness {
  Blobs data = blobs();
  FedConfig cfg;
  Encoder train_enc;
  Listener listener = Listener::bind({"127.0.0.1", 0});

  explicit Harness(FedConfig c) : cfg(c), train_enc(training_encoder(c, data.enc, data.train, data.val)) {}

  AggregatorJob job() const { return AggregatorJob{cfg, &train_enc, &data.train, &data.val, "init"}; }

  std::future<int> client(int id, NetOptions opts = quick()) {
    return std::async(std::launch::async, [this, id, opts] {
      return serve_client(id, {"127.0.0.1", listener.port()},
                          [&](const std::string&) { return make_session(id, cfg, data.enc, data.train, data.val); },
                          opts);
    });
  }
};

void check_equivalence(FedConfig cfg) {
  Harness h(cfg);
  const TrainingResult local = run_training(cfg, h.data.enc, h.data.train, h.data.val);
  std::vector<std::future<int>> clients;
  for (int i = cfg.clients - 1; i >= 0; --i) clients.push_back(h.client(i));
  const TrainingResult net = serve_aggregator(h.job(), h.listener, quick());
  for (auto& c : clients) EXPECT_EQ(c.get(), cfg.rounds);
  EXPECT_TRUE(bitwise_equal(net.model, local.model));
  expect_same_records(net.records, local.records);
}

TEST(Networked, SingleClientMatchesSimulator) { check_equivalence(small_config(1)); }

TEST(Networked, TwoClientsMatchSimulator) { check_equivalence(small_config(2)); }

TEST(Networked, AdaptiveDpWithPreClassifierMatchesSimulator) {
  FedConfig cfg = small_config(3);
  cfg.pre_classifier = true;
  cfg.dp.mode = DpMode::kAdaptive;
  cfg.dp.z = 0.1;
  cfg.weights = WeightScheme::kUniform;
  check_equivalence(cfg);
}

TEST(Networked, ClassifierOnlyMatchesSimulator) {
  FedConfig cfg = small_config(2);
  cfg.mode = TrainMode::kClassifierOnly;
  cfg.proportions = {0.3, 0.7};
  check_equivalence(cfg);
}

/// Speaks the protocol by hand: HELLO, then hands each received message to
/// `on_message` until it returns false.
std::future<void> raw_client(std::uint16_t port, std::uint32_t id,
                             std::function<bool(const Socket&, const WireMessage&)> on_message) {
  return std::async(std::launch::async, [=] {
    Socket s = connect_to({"127.0.0.1", port}, quick());
    bytes::Buffer hello;
    bytes::put_u32_le(hello, id);
    send_message(s, {MsgType::kHello, hello});
    while (auto m = receive_message(s, kDefaultMaxFrame, std::chrono::steady_clock::now() + 20s)) {
      if (!on_message(s, *m)) return;
    }
  });
}

TEST(Networked, WrongShapesAbortTheRound) {
  Harness h(small_config(2));
  auto good = h.client(0);
  auto bad = raw_client(h.listener.port(), 1, [](const Socket& s, const WireMessage& m) {
    if (m.type == MsgType::kGlobalModel) {
      const Model wrong = init_model<double>(2, 2, 2, false, 0.0, TrainMode::kAdapterAndClassifier, 1);
      send_message(s, {MsgType::kLocalModel, encode_model(wrong)});
    }
    return m.type != MsgType::kError;
  });
  try {
    serve_aggregator(h.job(), h.listener, quick());
    FAIL() << "aggregator finished";
  } catch (const ModelError& e) {
    EXPECT_NE(std::string(e.what()).find("round 0 aborted: client 1"), std::string::npos) << e.what();
  }
  EXPECT_THROW(good.get(), NetworkError);
  bad.get();
}

TEST(Networked, DisconnectMidRoundAborts) {
  Harness h(small_config(2));
  auto good = h.client(1);
  auto quitter = raw_client(h.listener.port(), 0, [](const Socket&, const WireMessage& m) {
    return m.type != MsgType::kGlobalModel;
  });
  try {
    serve_aggregator(h.job(), h.listener, quick());
    FAIL() << "aggregator finished";
  } catch (const NetworkError& e) {
    EXPECT_NE(std::string(e.what()).find("client 0"), std::string::npos) << e.what();
  }
  quitter.get();
  try {
    good.get();
    FAIL() << "client finished";
  } catch (const NetworkError& e) {
    EXPECT_NE(std::string(e.what()).find("aggregator reported"), std::string::npos) << e.what();
  }
}

TEST(Networked, SilentClientTimesOut) {
  Harness h(small_config(1));
  std::promise<void> release;
  auto released = release.get_future().share();
  auto silent = raw_client(h.listener.port(), 0, [released](const Socket&, const WireMessage& m) {
    if (m.type == MsgType::kGlobalModel) released.wait();
    return m.type != MsgType::kError && m.type != MsgType::kGlobalModel;
  });
  NetOptions o = quick();
  o.round_timeout = 300ms;
  try {
    serve_aggregator(h.job(), h.listener, o);
    FAIL() << "aggregator finished";
  } catch (const NetworkError& e) {
    EXPECT_NE(std::string(e.what()).find("timed out waiting for client(s) 0"), std::string::npos) << e.what();
  }
  release.set_value();
  silent.get();
}

TEST(Networked, OversizeFrameAborts) {
  Harness h(small_config(1));
  auto sender = raw_client(h.listener.port(), 0, [](const Socket& s, const WireMessage& m) {
    if (m.type == MsgType::kGlobalModel) send_message(s, {MsgType::kMetrics, bytes::Buffer(4096, 'a')});
    return m.type != MsgType::kError;
  });
  NetOptions o = quick();
  o.max_frame = 1024;
  EXPECT_THROW(serve_aggregator(h.job(), h.listener, o), NetworkError);
  sender.get();
}

TEST(Networked, BadHelloIsRejectedAndOthersStillJoin) {
  Harness h(small_config(1));
  auto agg = std::async(std::launch::async, [&] { return serve_aggregator(h.job(), h.listener, quick()); });
  auto intruder = raw_client(h.listener.port(), 7, [](const Socket&, const WireMessage& m) {
    EXPECT_EQ(m.type, MsgType::kError);
    return false;
  });
  intruder.get();
  auto c = h.client(0);
  const TrainingResult r = agg.get();
  EXPECT_EQ(c.get(), 3);
  EXPECT_EQ(r.records.size(), 3u);
}

TEST(Networked, ConnectGivesUpAfterConfiguredAttempts) {
  std::uint16_t port = 0;
  {
    Listener l = Listener::bind({"127.0.0.1", 0});
    port = l.port();
  }
  NetOptions o;
  o.connect_attempts = 2;
  o.connect_backoff = 10ms;
  try {
    connect_to({"127.0.0.1", port}, o);
    FAIL() << "connected";
  } catch (const NetworkError& e) {
    EXPECT_NE(std::string(e.what()).find("after 2 attempts"), std::string::npos) << e.what();
  }
}

TEST(Endpoint, Parsing) {
  const Endpoint e = parse_endpoint("localhost:9000");
  EXPECT_EQ(e.host, "localhost");
  EXPECT_EQ(e.port, 9000);
  EXPECT_THROW(parse_endpoint("9000"), ConfigError);
  EXPECT_THROW(parse_endpoint("h:70000"), ConfigError);
  EXPECT_THROW(parse_endpoint("h:9x"), ConfigError);
}

TEST(Metrics, ClientRecordRoundTripsExactly) {
  ClientRecord r{3, 1, 0.1 + 0.2, 2.0 / 3.0, 1e-300, true, 0.945, 17, 12.5, 3.25};
  const ClientRecord back = parse_client_record(format_client_record(r));
  EXPECT_EQ(back.loss, r.loss);
  EXPECT_EQ(back.accuracy, r.accuracy);
  EXPECT_EQ(back.delta_norm, r.delta_norm);
  EXPECT_EQ(format_client_record(back), format_client_record(r));
  EXPECT_THROW(parse_client_record("round=1 client=0"), DataError);
  EXPECT_THROW(parse_client_record("round=1 round=2"), DataError);
}

}  // namespace
}  // namespace fedcar
