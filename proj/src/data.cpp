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

#include "fedcar/data.hpp"

#include <cmath>
#include <fstream>
#include <iterator>
#include <limits>
#include <numeric>
#include <string>

#include "fedcar/error.hpp"
#include "fedcar/rng.hpp"

namespace fedcar {

namespace {
constexpr double kMinCenterDistance = 2.0;
constexpr int kCenterAttempts = 64;
}  // namespace

std::vector<const Sample*> sample_pointers(const Dataset& data) {
  std::vector<const Sample*> out;
  out.reserve(data.samples.size());
  for (const Sample& s : data.samples) out.push_back(&s);
  return out;
}

Dataset gen_synthetic(int n_per_class, int n_classes, int dim, double spread, std::uint64_t seed) {
  if (n_per_class < 1 || n_classes < 1 || dim < 1) {
    throw ConfigError("gen_synthetic needs n_per_class, n_classes, dim >= 1");
  }
  if (!(spread > 0.0)) throw ConfigError("data.spread must be > 0");
  SplitMix64 rng(seed);
  auto draw_center = [&] {
    Eigen::VectorXd v(dim);
    double norm = 0.0;
    do {
      for (int j = 0; j < dim; ++j) v(j) = rng.gaussian();
      norm = v.norm();
    } while (norm < 1e-12);
    return Eigen::VectorXd(3.0 * v / norm);
  };
  // Centers closer than kMinCenterDistance are redrawn, up to
  // kCenterAttempts times; the best-separated candidate is kept otherwise.
  std::vector<Eigen::VectorXd> centers;
  for (int c = 0; c < n_classes; ++c) {
    Eigen::VectorXd best;
    double best_gap = -1.0;
    for (int attempt = 0; attempt < kCenterAttempts; ++attempt) {
      Eigen::VectorXd cand = draw_center();
      double gap = std::numeric_limits<double>::infinity();
      for (const auto& prev : centers) gap = std::min(gap, (cand - prev).norm());
      if (gap > best_gap) {
        best_gap = gap;
        best = std::move(cand);
      }
      if (best_gap >= kMinCenterDistance) break;
    }
    centers.push_back(std::move(best));
  }
  Dataset data;
  data.n_classes = n_classes;
  data.dim = dim;
  data.samples.reserve(static_cast<std::size_t>(n_per_class) * n_classes);
  std::uint32_t id = 0;
  for (int c = 0; c < n_classes; ++c) {
    for (int i = 0; i < n_per_class; ++i) {
      Eigen::VectorXd x(dim);
      for (int j = 0; j < dim; ++j) x(j) = centers[c](j) + spread * rng.gaussian();
      data.samples.push_back(Sample{id++, std::move(x), c});
    }
  }
  return data;
}

std::pair<Dataset, Dataset> split_holdout(const Dataset& data, double val_fraction, std::uint64_t seed) {
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw ConfigError("validation fraction must lie in [0, 1)");
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  SplitMix64 rng(seed);
  shuffle(std::span<std::size_t>(order), rng);
  const auto n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(data.size())));
  Dataset train{{}, data.n_classes, data.dim};
  Dataset val{{}, data.n_classes, data.dim};
  for (std::size_t i = 0; i < order.size(); ++i) {
    (i < n_val ? val : train).samples.push_back(data.samples[order[i]]);
  }
  if (train.empty()) throw DataError("holdout split leaves no training samples");
  return {std::move(train), std::move(val)};
}

bytes::Buffer encode_hidden_states(const Dataset& data) {
  bytes::Buffer out;
  out.reserve(kHiddenStateHeaderBytes + data.size() * (4 + 8 * static_cast<std::size_t>(data.dim)));
  for (char c : {'F', 'C', 'H', 'S'}) out.push_back(static_cast<std::uint8_t>(c));
  out.push_back(kHiddenStateVersion);
  bytes::put_u32_le(out, static_cast<std::uint32_t>(data.size()));
  bytes::put_u32_le(out, static_cast<std::uint32_t>(data.dim));
  bytes::put_u32_le(out, static_cast<std::uint32_t>(data.n_classes));
  for (const Sample& s : data.samples) {
    if (s.features.size() != data.dim) throw DataError("sample " + std::to_string(s.id) + " has wrong dimension");
    if (s.label < 0 || s.label >= data.n_classes) throw DataError("sample " + std::to_string(s.id) + " label out of range");
    bytes::put_u32_le(out, static_cast<std::uint32_t>(s.label));
    for (Eigen::Index j = 0; j < s.features.size(); ++j) bytes::put_f64_le(out, s.features(j));
  }
  return out;
}

Dataset decode_hidden_states(std::span<const std::uint8_t> raw) {
  bytes::Reader in(raw);
  std::uint8_t magic[5];
  if (!in.take(magic)) {
    throw DataError("hidden-state file truncated at byte offset " + std::to_string(raw.size()) + " (header)");
  }
  if (magic[0] != 'F' || magic[1] != 'C' || magic[2] != 'H' || magic[3] != 'S') {
    throw DataError("hidden-state file has bad magic (expected FCHS)");
  }
  if (magic[4] != kHiddenStateVersion) {
    throw DataError("hidden-state file has unsupported version " + std::to_string(magic[4]));
  }
  const auto n = in.u32_le();
  const auto d = in.u32_le();
  const auto k = in.u32_le();
  if (!n || !d || !k) {
    throw DataError("hidden-state file truncated at byte offset " + std::to_string(raw.size()) + " (header)");
  }
  Dataset data;
  data.dim = static_cast<int>(*d);
  data.n_classes = static_cast<int>(*k);
  data.samples.reserve(std::min<std::size_t>(*n, raw.size() / (4 + 8 * std::size_t{*d})));
  for (std::uint32_t i = 0; i < *n; ++i) {
    const std::size_t record_start = in.offset();
    const auto label = in.u32_le();
    if (!label) {
      throw DataError("hidden-state file truncated at byte offset " + std::to_string(in.offset()) + " in record " +
                      std::to_string(i) + " (starts at " + std::to_string(record_start) + ")");
    }
    if (*label >= *k) {
      throw DataError("hidden-state record " + std::to_string(i) + " at byte offset " + std::to_string(record_start) +
                      " has label " + std::to_string(*label) + " >= class count " + std::to_string(*k));
    }
    Eigen::VectorXd h(*d);
    for (std::uint32_t j = 0; j < *d; ++j) {
      const auto v = in.f64_le();
      if (!v) {
        throw DataError("hidden-state file truncated at byte offset " + std::to_string(in.offset()) +
                        " in record " + std::to_string(i) + " (starts at " + std::to_string(record_start) + ")");
      }
      h(j) = *v;
    }
    data.samples.push_back(Sample{i, std::move(h), static_cast<int>(*label)});
  }
  if (in.remaining() != 0) {
    throw DataError("hidden-state file has " + std::to_string(in.remaining()) + " trailing bytes after byte offset " +
                    std::to_string(in.offset()));
  }
  return data;
}

void save_hidden_states(const Dataset& data, const std::filesystem::path& path) {
  const bytes::Buffer buf = encode_hidden_states(data);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) throw DataError("write to " + path.string() + " failed");
}

Dataset load_hidden_states(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  const bytes::Buffer buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_hidden_states(buf);
}

Encoder precomputed_encoder(const Dataset& hidden_states, int d_emb) {
  HiddenStateTable<double> table;
  table.reserve(hidden_states.size());
  for (const Sample& s : hidden_states.samples) {
    if (!table.emplace(s.id, s.features).second) {
      throw DataError("duplicate sample id " + std::to_string(s.id) + " in hidden states");
    }
  }
  return Encoder::precomputed(std::move(table), hidden_states.dim, d_emb);
}

Dataset compute_hidden_states(const Encoder& enc, const AdapterParams<double>& adapter, const Dataset& data) {
  Dataset out{{}, data.n_classes, enc.d_hidden()};
  out.samples.reserve(data.size());
  for (const Sample& s : data.samples) out.samples.push_back(Sample{s.id, hidden_state(adapter, enc, s), s.label});
  return out;
}

}  // namespace fedcar
