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

#include "fedcar/transport.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <condition_variable>
#include <cstring>
#include <deque>
#include <mutex>
#include <thread>

#include "fedcar/metrics.hpp"

namespace fedcar {

using Clock = std::chrono::steady_clock;

Socket& Socket::operator=(Socket&& o) noexcept {
  if (this != &o) {
    close();
    fd_ = o.release();
  }
  return *this;
}

int Socket::release() {
  const int fd = fd_;
  fd_ = -1;
  return fd;
}

void Socket::close() {
  if (fd_ >= 0) ::close(fd_);
  fd_ = -1;
}

void Socket::shutdown_both() {
  if (fd_ >= 0) ::shutdown(fd_, SHUT_RDWR);
}

namespace {

std::string errno_text(const char* what) { return std::string(what) + ": " + std::strerror(errno); }

/// Waits until fd is readable. False on deadline.
bool wait_readable(int fd, std::optional<Clock::time_point> deadline) {
  for (;;) {
    int timeout_ms = -1;
    if (deadline) {
      const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(*deadline - Clock::now()).count();
      if (left <= 0) return false;
      timeout_ms = static_cast<int>(std::min<long long>(left, 1 << 30));
    }
    pollfd p{fd, POLLIN, 0};
    const int rc = ::poll(&p, 1, timeout_ms);
    if (rc > 0) return true;
    if (rc == 0) continue;
    if (errno == EINTR) continue;
    throw NetworkError(errno_text("poll"));
  }
}

/// Reads exactly out.size() bytes; returns the count read before EOF.
std::size_t read_exact(int fd, std::span<std::uint8_t> out, std::optional<Clock::time_point> deadline) {
  std::size_t got = 0;
  while (got < out.size()) {
    if (!wait_readable(fd, deadline)) throw NetworkError("timed out waiting for data");
    const ssize_t n = ::recv(fd, out.data() + got, out.size() - got, 0);
    if (n == 0) return got;
    if (n < 0) {
      if (errno == EINTR || errno == EAGAIN) continue;
      throw NetworkError(errno_text("recv"));
    }
    got += static_cast<std::size_t>(n);
  }
  return got;
}

}  // namespace

void send_message(const Socket& s, const WireMessage& msg) {
  const bytes::Buffer frame = encode_message(msg);
  std::size_t sent = 0;
  while (sent < frame.size()) {
    const ssize_t n = ::send(s.fd(), frame.data() + sent, frame.size() - sent, MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw NetworkError(errno_text("send"));
    }
    sent += static_cast<std::size_t>(n);
  }
}

std::optional<WireMessage> receive_message(const Socket& s, std::size_t max_frame,
                                           std::optional<Clock::time_point> deadline) {
  std::uint8_t header[kFrameHeaderBytes];
  const std::size_t got = read_exact(s.fd(), header, deadline);
  if (got == 0) return std::nullopt;
  if (got < kFrameHeaderBytes) throw NetworkError("connection closed inside a frame header");
  const FrameHeader fh = decode_header(header, max_frame);
  WireMessage msg{fh.type, bytes::Buffer(fh.payload_len)};
  if (read_exact(s.fd(), msg.payload, deadline) < fh.payload_len) {
    throw NetworkError("connection closed inside a " + std::string(to_string(fh.type)) + " payload");
  }
  return msg;
}

Endpoint parse_endpoint(const std::string& text) {
  const auto colon = text.rfind(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 == text.size()) {
    throw ConfigError("endpoint must look like host:port, got '" + text + "'");
  }
  Endpoint e;
  e.host = text.substr(0, colon);
  const std::string port = text.substr(colon + 1);
  unsigned long v = 0;
  try {
    std::size_t used = 0;
    v = std::stoul(port, &used);
    if (used != port.size()) throw std::invalid_argument("port");
  } catch (const std::exception&) {
    throw ConfigError("bad port in endpoint '" + text + "'");
  }
  if (v > 65535) throw ConfigError("port out of range in endpoint '" + text + "'");
  e.port = static_cast<std::uint16_t>(v);
  return e;
}

namespace {

struct AddrInfo {
  addrinfo* head = nullptr;
  ~AddrInfo() {
    if (head) freeaddrinfo(head);
  }
};

void resolve(const Endpoint& e, bool passive, AddrInfo& out) {
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  if (passive) hints.ai_flags = AI_PASSIVE;
  const std::string port = std::to_string(e.port);
  const int rc = getaddrinfo(e.host.c_str(), port.c_str(), &hints, &out.head);
  if (rc != 0) throw NetworkError("cannot resolve " + e.host + ": " + gai_strerror(rc));
}

void set_nodelay(int fd) {
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
}

}  // namespace

Listener Listener::bind(const Endpoint& at) {
  AddrInfo ai;
  resolve(at, true, ai);
  std::string last = "no address";
  for (addrinfo* p = ai.head; p; p = p->ai_next) {
    Socket s(::socket(p->ai_family, p->ai_socktype, p->ai_protocol));
    if (!s.valid()) {
      last = errno_text("socket");
      continue;
    }
    int one = 1;
    ::setsockopt(s.fd(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    if (::bind(s.fd(), p->ai_addr, p->ai_addrlen) != 0 || ::listen(s.fd(), 64) != 0) {
      last = errno_text("bind");
      continue;
    }
    sockaddr_storage addr{};
    socklen_t len = sizeof addr;
    ::getsockname(s.fd(), reinterpret_cast<sockaddr*>(&addr), &len);
    Listener l;
    l.port_ = ntohs(addr.ss_family == AF_INET6 ? reinterpret_cast<sockaddr_in6*>(&addr)->sin6_port
                                               : reinterpret_cast<sockaddr_in*>(&addr)->sin_port);
    l.sock_ = std::move(s);
    return l;
  }
  throw NetworkError("cannot listen on " + at.host + ":" + std::to_string(at.port) + ": " + last);
}

std::optional<Socket> Listener::accept(Clock::time_point deadline) {
  for (;;) {
    if (!wait_readable(sock_.fd(), deadline)) return std::nullopt;
    const int fd = ::accept(sock_.fd(), nullptr, nullptr);
    if (fd >= 0) {
      set_nodelay(fd);
      return Socket(fd);
    }
    if (errno == EINTR || errno == ECONNABORTED || errno == EAGAIN) continue;
    throw NetworkError(errno_text("accept"));
  }
}

Socket connect_to(const Endpoint& to, const NetOptions& opts) {
  std::string last = "no attempt made";
  for (int attempt = 1; attempt <= opts.connect_attempts; ++attempt) {
    if (attempt > 1) std::this_thread::sleep_for(opts.connect_backoff * (attempt - 1));
    try {
      AddrInfo ai;
      resolve(to, false, ai);
      for (addrinfo* p = ai.head; p; p = p->ai_next) {
        Socket s(::socket(p->ai_family, p->ai_socktype, p->ai_protocol));
        if (!s.valid()) continue;
        if (::connect(s.fd(), p->ai_addr, p->ai_addrlen) == 0) {
          set_nodelay(s.fd());
          return s;
        }
        last = errno_text("connect");
      }
    } catch (const NetworkError& e) {
      last = e.what();
    }
  }
  throw NetworkError("cannot reach aggregator at " + to.host + ":" + std::to_string(to.port) + " after " +
                     std::to_string(opts.connect_attempts) + " attempts: " + last);
}

// ---------------------------------------------------------------------------

namespace {

WireMessage text_message(MsgType t, const std::string& text) {
  return WireMessage{t, bytes::Buffer(text.begin(), text.end())};
}

std::string payload_text(const WireMessage& m) { return std::string(m.payload.begin(), m.payload.end()); }

void try_send(const Socket& s, const WireMessage& m) {
  try {
    send_message(s, m);
  } catch (const Error&) {
  }
}

double ms_since(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

struct Event {
  int client = 0;
  std::optional<WireMessage> msg;
  std::string error;  // set when the connection failed
};

class EventQueue {
 public:
  void push(Event e) {
    {
      std::lock_guard lock(mu_);
      events_.push_back(std::move(e));
    }
    cv_.notify_one();
  }

  std::optional<Event> pop(Clock::time_point deadline) {
    std::unique_lock lock(mu_);
    if (!cv_.wait_until(lock, deadline, [&] { return !events_.empty(); })) return std::nullopt;
    Event e = std::move(events_.front());
    events_.pop_front();
    return e;
  }

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<Event> events_;
};

/// Connections of one run; closing wakes and joins the reader threads.
class ClientPool {
 public:
  explicit ClientPool(int m) : sockets_(m) {}
  ~ClientPool() { close(); }

  std::vector<Socket>& sockets() { return sockets_; }

  void start_readers(EventQueue& q, std::size_t max_frame) {
    for (int i = 0; i < static_cast<int>(sockets_.size()); ++i) {
      readers_.emplace_back([this, &q, i, max_frame] {
        for (;;) {
          Event e;
          e.client = i;
          try {
            e.msg = receive_message(sockets_[i], max_frame);
            if (!e.msg) e.error = "connection closed";
          } catch (const std::exception& ex) {
            e.error = ex.what();
          }
          const bool done = !e.msg;
          q.push(std::move(e));
          if (done) return;
        }
      });
    }
  }

  void broadcast(const WireMessage& m) {
    for (auto& s : sockets_) send_message(s, m);
  }

  void broadcast_error(const std::string& text) {
    const WireMessage m = text_message(MsgType::kError, text);
    for (auto& s : sockets_)
      if (s.valid()) try_send(s, m);
  }

  void close() {
    for (auto& s : sockets_) s.shutdown_both();
    for (auto& t : readers_) t.join();
    readers_.clear();
    for (auto& s : sockets_) s.close();
  }

 private:
  std::vector<Socket> sockets_;
  std::vector<std::thread> readers_;
};

template <typename E>
[[noreturn]] void abort_run(ClientPool& pool, const std::string& why) {
  pool.broadcast_error(why);
  pool.close();
  throw E(why);
}

}  // namespace

TrainingResult serve_aggregator(const AggregatorJob& job, Listener& listener, const NetOptions& opts) {
  if (!job.encoder || !job.train || !job.val) throw ConfigError("aggregator job is missing its data");
  const FedConfig& cfg = job.cfg;
  cfg.validate();
  const int m = cfg.clients;
  ClientPool pool(m);

  // Handshake: one HELLO with a distinct id in [0, m) per connection.
  const auto accept_deadline = Clock::now() + opts.round_timeout;
  int joined = 0;
  while (joined < m) {
    std::optional<Socket> s = listener.accept(accept_deadline);
    if (!s) {
      abort_run<NetworkError>(pool, "only " + std::to_string(joined) + " of " + std::to_string(m) +
                                        " clients connected before the deadline");
    }
    std::optional<WireMessage> hello;
    try {
      hello = receive_message(*s, opts.max_frame, accept_deadline);
    } catch (const Error& e) {
      try_send(*s, text_message(MsgType::kError, std::string("bad handshake: ") + e.what()));
      continue;
    }
    if (!hello || hello->type != MsgType::kHello || hello->payload.size() != 4) {
      if (hello) try_send(*s, text_message(MsgType::kError, "expected HELLO with a 4-byte client id"));
      continue;
    }
    const std::uint32_t id = bytes::get_u32_le(hello->payload.data());
    if (id >= static_cast<std::uint32_t>(m) || pool.sockets()[id].valid()) {
      try_send(*s, text_message(MsgType::kError, "client id " + std::to_string(id) + " is out of range or taken"));
      continue;
    }
    pool.sockets()[id] = std::move(*s);
    ++joined;
  }

  const auto wall_start = Clock::now();
  EventQueue queue;
  pool.start_readers(queue, opts.max_frame);

  const auto shards = partition_indices(job.train->size(), m, cfg.proportions, cfg.seed);
  std::vector<std::size_t> sizes;
  for (const auto& s : shards) sizes.push_back(s.size());
  const std::vector<double> weights = aggregation_weights(cfg, sizes);

  TrainingResult result;
  result.model = initial_model(cfg, *job.encoder, job.train->n_classes);
  try {
    pool.broadcast(text_message(MsgType::kInit, job.init_text));
  } catch (const NetworkError& e) {
    abort_run<NetworkError>(pool, std::string("sending INIT failed: ") + e.what());
  }

  for (int round = 0; round < cfg.rounds; ++round) {
    const auto round_start = Clock::now();
    const std::string where = "round " + std::to_string(round) + " aborted: ";
    try {
      pool.broadcast(WireMessage{MsgType::kGlobalModel, encode_model(result.model)});
    } catch (const NetworkError& e) {
      abort_run<NetworkError>(pool, where + "broadcast failed: " + e.what());
    }

    std::vector<std::optional<Model>> models(m);
    std::vector<std::optional<ClientRecord>> recs(m);
    int outstanding = 2 * m;
    const auto deadline = round_start + opts.round_timeout;
    while (outstanding > 0) {
      std::optional<Event> ev = queue.pop(deadline);
      if (!ev) {
        std::string missing;
        for (int i = 0; i < m; ++i)
          if (!models[i] || !recs[i]) missing += (missing.empty() ? "" : ",") + std::to_string(i);
        abort_run<NetworkError>(pool, where + "timed out waiting for client(s) " + missing);
      }
      const std::string who = "client " + std::to_string(ev->client) + ": ";
      if (!ev->msg) abort_run<NetworkError>(pool, where + who + ev->error);
      const WireMessage& msg = *ev->msg;
      switch (msg.type) {
        case MsgType::kLocalModel: {
          if (models[ev->client]) abort_run<NetworkError>(pool, where + who + "sent LOCAL_MODEL twice");
          try {
            models[ev->client] = decode_model_like(result.model, msg.payload);
          } catch (const Error& e) {
            abort_run<ModelError>(pool, where + who + "bad LOCAL_MODEL: " + e.what());
          }
          --outstanding;
          break;
        }
        case MsgType::kMetrics: {
          if (recs[ev->client]) abort_run<NetworkError>(pool, where + who + "sent METRICS twice");
          try {
            recs[ev->client] = parse_client_record(payload_text(msg));
          } catch (const Error& e) {
            abort_run<NetworkError>(pool, where + who + "bad METRICS: " + e.what());
          }
          if (recs[ev->client]->round != round || recs[ev->client]->client != ev->client) {
            abort_run<NetworkError>(pool, where + who + "METRICS for the wrong round or client");
          }
          --outstanding;
          break;
        }
        case MsgType::kError:
          abort_run<NetworkError>(pool, where + who + "reported " + payload_text(msg));
        default:
          abort_run<NetworkError>(pool, where + who + "unexpected " + std::string(to_string(msg.type)));
      }
    }

    const auto agg_start = Clock::now();
    std::vector<Model> locals;
    RoundRecord rec;
    rec.round = round;
    double max_compute = 0.0;
    for (int i = 0; i < m; ++i) {
      locals.push_back(std::move(*models[i]));
      max_compute = std::max(max_compute, recs[i]->compute_ms);
      rec.clients.push_back(*recs[i]);
    }
    result.model = aggregate(locals, weights);
    rec.distributed_ms = max_compute + ms_since(agg_start);
    const EvalStats v = evaluate_loss(result.model, *job.encoder, *job.val);
    rec.val_loss = v.loss;
    rec.val_accuracy = v.accuracy;
    rec.wall_ms = ms_since(round_start);
    result.distributed_ms += rec.distributed_ms;
    result.records.push_back(std::move(rec));
  }

  for (auto& s : pool.sockets()) try_send(s, WireMessage{MsgType::kShutdown, {}});
  pool.close();
  result.wall_ms = ms_since(wall_start);
  return result;
}

ClientSession make_session(int id, const FedConfig& cfg, const Encoder& base, const Dataset& train,
                           const Dataset& val) {
  cfg.validate();
  if (id < 0 || id >= cfg.clients) {
    throw ConfigError("client id " + std::to_string(id) + " outside [0, " + std::to_string(cfg.clients) + ")");
  }
  Encoder enc = training_encoder(cfg, base, train, val);
  Model shape = initial_model(cfg, enc, train.n_classes);
  auto shards = partition(train, cfg.clients, cfg.proportions, cfg.seed);
  ClientState state = make_client(id, std::move(shards[id]), cfg);
  return ClientSession{cfg, std::move(enc), std::move(state), std::move(shape)};
}

int serve_client(int id, const Endpoint& aggregator, const SessionFactory& factory, const NetOptions& opts) {
  Socket sock = connect_to(aggregator, opts);
  bytes::Buffer hello;
  bytes::put_u32_le(hello, static_cast<std::uint32_t>(id));
  send_message(sock, WireMessage{MsgType::kHello, hello});

  std::optional<ClientSession> session;
  int round = 0;
  for (;;) {
    // Between messages the client may wait for the slowest peer of a round
    // plus the handshake of the others.
    const auto deadline = Clock::now() + 2 * opts.round_timeout;
    std::optional<WireMessage> msg = receive_message(sock, opts.max_frame, deadline);
    if (!msg) throw NetworkError("aggregator closed the connection after " + std::to_string(round) + " rounds");
    switch (msg->type) {
      case MsgType::kInit:
        if (session) throw NetworkError("second INIT from aggregator");
        try {
          session.emplace(factory(payload_text(*msg)));
        } catch (const std::exception& e) {
          try_send(sock, text_message(MsgType::kError, std::string("client setup failed: ") + e.what()));
          throw;
        }
        break;
      case MsgType::kGlobalModel: {
        if (!session) throw NetworkError("GLOBAL_MODEL before INIT");
        LocalResult local;
        try {
          const Model global = decode_model_like(session->shape, msg->payload);
          local = local_update(session->state, global, session->cfg, session->encoder, round);
        } catch (const std::exception& e) {
          try_send(sock, text_message(MsgType::kError, e.what()));
          throw;
        }
        try {
          send_message(sock, WireMessage{MsgType::kLocalModel, encode_model(local.model)});
          send_message(sock, text_message(MsgType::kMetrics, format_client_record(local.record)));
        } catch (const NetworkError&) {
          // An aborting aggregator sends ERROR and then closes; surface its
          // reason rather than the broken pipe.
          std::optional<WireMessage> last;
          try {
            last = receive_message(sock, opts.max_frame, Clock::now() + std::chrono::milliseconds(200));
          } catch (const NetworkError&) {
          }
          if (last && last->type == MsgType::kError) {
            throw NetworkError("aggregator reported: " + payload_text(*last));
          }
          throw;
        }
        ++round;
        break;
      }
      case MsgType::kShutdown:
        return round;
      case MsgType::kError:
        throw NetworkError("aggregator reported: " + payload_text(*msg));
      default:
        throw NetworkError("unexpected " + std::string(to_string(msg->type)) + " from aggregator");
    }
  }
}

}  // namespace fedcar
