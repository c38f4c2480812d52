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

#include <iosfwd>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "fedcar/federation.hpp"

namespace fedcar {

/// Space-separated key=value pairs. Keys are unique; values contain no
/// whitespace. Throws DataError on malformed input.
std::map<std::string, std::string> parse_kv_line(std::string_view line);

/// Shortest decimal text that parses back to the same double.
std::string format_double(double v);

double kv_double(const std::map<std::string, std::string>& kv, const std::string& key);
long long kv_int(const std::map<std::string, std::string>& kv, const std::string& key);

/// "round=.. client=.. loss=.. ..." (no kind= prefix).
std::string format_client_record(const ClientRecord& r);
ClientRecord parse_client_record(std::string_view line);

/// Lines of metrics.log: "kind=client ..." per client per round, then
/// "kind=global ..." for the round.
void write_metrics(std::ostream& out, const std::vector<RoundRecord>& records);
std::vector<RoundRecord> read_metrics(std::istream& in);

}  // namespace fedcar
