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

#include "fedcar/metrics.hpp"

#include <charconv>
#include <istream>
#include <ostream>
#include <sstream>

#include "fedcar/error.hpp"

namespace fedcar {

std::map<std::string, std::string> parse_kv_line(std::string_view line) {
  std::map<std::string, std::string> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
    if (i >= line.size()) break;
    std::size_t j = i;
    while (j < line.size() && line[j] != ' ' && line[j] != '\t' && line[j] != '\r') ++j;
    const std::string_view tok = line.substr(i, j - i);
    const auto eq = tok.find('=');
    if (eq == std::string_view::npos || eq == 0) throw DataError("malformed metrics token '" + std::string(tok) + "'");
    std::string key(tok.substr(0, eq));
    if (!out.emplace(key, std::string(tok.substr(eq + 1))).second) {
      throw DataError("duplicate metrics key '" + key + "'");
    }
    i = j;
  }
  return out;
}

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

namespace {

const std::string& require(const std::map<std::string, std::string>& kv, const std::string& key) {
  const auto it = kv.find(key);
  if (it == kv.end()) throw DataError("metrics line lacks '" + key + "'");
  return it->second;
}

}  // namespace

double kv_double(const std::map<std::string, std::string>& kv, const std::string& key) {
  const std::string& s = require(kv, key);
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
    throw DataError("metrics value " + key + "=" + s + " is not a number");
  }
  return v;
}

long long kv_int(const std::map<std::string, std::string>& kv, const std::string& key) {
  const std::string& s = require(kv, key);
  long long v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
    throw DataError("metrics value " + key + "=" + s + " is not an integer");
  }
  return v;
}

std::string format_client_record(const ClientRecord& r) {
  std::ostringstream o;
  o << "round=" << r.round << " client=" << r.client << " loss=" << format_double(r.loss)
    << " accuracy=" << format_double(r.accuracy) << " delta_norm=" << format_double(r.delta_norm)
    << " clipped=" << (r.clipped ? 1 : 0) << " clip_threshold=" << format_double(r.clip_threshold)
    << " steps=" << r.steps << " max_grad_norm=" << format_double(r.max_grad_norm)
    << " compute_ms=" << format_double(r.compute_ms);
  return o.str();
}

namespace {

ClientRecord client_from_kv(const std::map<std::string, std::string>& kv) {
  ClientRecord r;
  r.round = static_cast<int>(kv_int(kv, "round"));
  r.client = static_cast<int>(kv_int(kv, "client"));
  r.loss = kv_double(kv, "loss");
  r.accuracy = kv_double(kv, "accuracy");
  r.delta_norm = kv_double(kv, "delta_norm");
  r.clipped = kv_int(kv, "clipped") != 0;
  r.clip_threshold = kv_double(kv, "clip_threshold");
  r.steps = static_cast<int>(kv_int(kv, "steps"));
  r.max_grad_norm = kv_double(kv, "max_grad_norm");
  r.compute_ms = kv_double(kv, "compute_ms");
  return r;
}

}  // namespace

ClientRecord parse_client_record(std::string_view line) { return client_from_kv(parse_kv_line(line)); }

void write_metrics(std::ostream& out, const std::vector<RoundRecord>& records) {
  for (const RoundRecord& rec : records) {
    for (const ClientRecord& c : rec.clients) out << "kind=client " << format_client_record(c) << '\n';
    out << "kind=global round=" << rec.round << " val_loss=" << format_double(rec.val_loss)
        << " val_accuracy=" << format_double(rec.val_accuracy) << " wall_ms=" << format_double(rec.wall_ms)
        << " distributed_ms=" << format_double(rec.distributed_ms) << '\n';
  }
}

std::vector<RoundRecord> read_metrics(std::istream& in) {
  std::vector<RoundRecord> out;
  std::vector<ClientRecord> pending;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto kv = parse_kv_line(line);
      const std::string& kind = require(kv, "kind");
      if (kind == "client") {
        pending.push_back(client_from_kv(kv));
      } else if (kind == "global") {
        RoundRecord rec;
        rec.round = static_cast<int>(kv_int(kv, "round"));
        rec.val_loss = kv_double(kv, "val_loss");
        rec.val_accuracy = kv_double(kv, "val_accuracy");
        rec.wall_ms = kv_double(kv, "wall_ms");
        rec.distributed_ms = kv_double(kv, "distributed_ms");
        rec.clients = std::move(pending);
        pending.clear();
        out.push_back(std::move(rec));
      } else {
        throw DataError("unknown kind '" + kind + "'");
      }
    } catch (const DataError& e) {
      throw DataError("metrics line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (!pending.empty()) throw DataError("metrics end with client lines and no global line");
  return out;
}

}  // namespace fedcar
