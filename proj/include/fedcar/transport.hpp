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

#include <chrono>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>

#include "fedcar/federation.hpp"
#include "fedcar/wire.hpp"

namespace fedcar {

struct NetOptions {
  /// Deadline for all local updates of one round to arrive (also bounds
  /// the wait for clients to connect, and a client's wait between messages).
  std::chrono::milliseconds round_timeout{120000};
  int connect_attempts = 3;
  std::chrono::milliseconds connect_backoff{250};
  std::size_t max_frame = kDefaultMaxFrame;
};

/// Owning TCP socket descriptor.
class Socket {
 public:
  Socket() = default;
  explicit Socket(int fd) : fd_(fd) {}
  Socket(Socket&& o) noexcept : fd_(o.release()) {}
  Socket& operator=(Socket&& o) noexcept;
  Socket(const Socket&) = delete;
  Socket& operator=(const Socket&) = delete;
  ~Socket() { close(); }

  int fd() const { return fd_; }
  bool valid() const { return fd_ >= 0; }
  int release();
  void close();
  /// Wakes up any thread blocked reading this socket.
  void shutdown_both();

 private:
  int fd_ = -1;
};

void send_message(const Socket& s, const WireMessage& msg);

/// Blocks until a full frame arrives. Returns nullopt on a clean close
/// before the first header byte; throws WireError on a malformed frame and
/// NetworkError on a socket error, a mid-frame close or a missed deadline.
std::optional<WireMessage> receive_message(const Socket& s, std::size_t max_frame = kDefaultMaxFrame,
                                           std::optional<std::chrono::steady_clock::time_point> deadline = {});

/// "host:port"; port 0 binds an ephemeral port.
struct Endpoint {
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;
};

Endpoint parse_endpoint(const std::string& text);

class Listener {
 public:
  static Listener bind(const Endpoint& at);
  std::uint16_t port() const { return port_; }
  /// nullopt when the deadline passes first.
  std::optional<Socket> accept(std::chrono::steady_clock::time_point deadline);

 private:
  Socket sock_;
  std::uint16_t port_ = 0;
};

/// Retries with linear backoff; throws NetworkError after the last attempt.
Socket connect_to(const Endpoint& to, const NetOptions& opts);

// ---------------------------------------------------------------------------
// Aggregator and client roles

struct AggregatorJob {
  FedConfig cfg;
  const Encoder* encoder = nullptr;  // training encoder, used for validation
  const Dataset* train = nullptr;    // partitioned only to derive weights
  const Dataset* val = nullptr;
  std::string init_text;             // sent verbatim in INIT
};

/// Waits for cfg.clients HELLOs, sends INIT, then runs the rounds. Local
/// models are aggregated in client-id order, so the result matches
/// run_training bit for bit (timings aside). Any client failure, malformed
/// message or timeout aborts the run: remaining clients get ERROR and the
/// call throws.
TrainingResult serve_aggregator(const AggregatorJob& job, Listener& listener, const NetOptions& opts);

struct ClientSession {
  FedConfig cfg;
  Encoder encoder;  // training encoder
  ClientState state;
  Model shape;      // any model with the agreed tensor shapes
};

/// Builds the session of client `id` exactly as run_training would.
ClientSession make_session(int id, const FedConfig& cfg, const Encoder& base, const Dataset& train,
                           const Dataset& val);

using SessionFactory = std::function<ClientSession(const std::string& init_text)>;

/// Connects, says HELLO, builds its session from INIT, then answers every
/// GLOBAL_MODEL with LOCAL_MODEL and METRICS until SHUTDOWN. Returns the
/// number of rounds served.
int serve_client(int id, const Endpoint& aggregator, const SessionFactory& factory, const NetOptions& opts);

}  // namespace fedcar
