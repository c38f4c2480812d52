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
#include <filesystem>
#include <span>
#include <utility>
#include <vector>

#include "fedcar/bytes.hpp"
#include "fedcar/model.hpp"

namespace fedcar {

struct Dataset {
  std::vector<Sample> samples;
  int n_classes = 0;
  int dim = 0;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
};

std::vector<const Sample*> sample_pointers(const Dataset& data);

/// Gaussian blobs. Class c is centered at a seeded direction on the unit
/// sphere scaled by 3, with isotropic std `spread`. A center landing within
/// distance 2 of an earlier one is redrawn (bounded attempts). Samples are
/// emitted class by class with ids 0..n-1. Draw order: all centers, then all
/// points.
Dataset gen_synthetic(int n_per_class, int n_classes, int dim, double spread, std::uint64_t seed);

/// Seeded shuffle, then the first round(val_fraction * n) samples form the
/// validation set. Ids are preserved.
std::pair<Dataset, Dataset> split_holdout(const Dataset& data, double val_fraction, std::uint64_t seed);

// Hidden-state files ("FCHS"): magic, version byte 1, u32 sample count n,
// u32 dim d, u32 class count, then n records of (u32 label, d f64 values).
// All integers and floats are little-endian. Sample ids are record positions.

inline constexpr std::uint8_t kHiddenStateVersion = 1;
inline constexpr std::size_t kHiddenStateHeaderBytes = 17;

bytes::Buffer encode_hidden_states(const Dataset& data);
Dataset decode_hidden_states(std::span<const std::uint8_t> bytes);
void save_hidden_states(const Dataset& data, const std::filesystem::path& path);
Dataset load_hidden_states(const std::filesystem::path& path);

/// Precomputed encoder whose table is the dataset's own feature vectors.
/// `d_emb` is the token width of the encoder that produced them, if known.
Encoder precomputed_encoder(const Dataset& hidden_states, int d_emb = 0);

/// Runs every sample through adapter + frozen network once and returns the
/// resulting hidden states as a dataset with the same ids and labels.
Dataset compute_hidden_states(const Encoder& enc, const AdapterParams<double>& adapter, const Dataset& data);

}  // namespace fedcar
