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

#include <span>
#include <vector>

#include "fedcar/data.hpp"
#include "fedcar/federation.hpp"
#include "fedcar/model.hpp"

namespace fedcar {

/// Class prototypes for inner-product search: row c is the mean pooled
/// hidden state of the training samples labeled c.
struct EmbeddingIndex {
  Eigen::MatrixXd doc_vectors;

  int n_classes() const { return static_cast<int>(doc_vectors.rows()); }
};

EmbeddingIndex build_index(const Encoder& enc, const AdapterParams<double>& adapter, const Dataset& train);

/// Labels by descending raw inner product; ties go to the lower label.
std::vector<int> mips_retrieve(const EmbeddingIndex& index, const Eigen::VectorXd& query, int k);

struct AccuracyTable {
  std::vector<int> ks;
  std::vector<double> accuracy;  // fraction with the true label in the top K

  double top1() const;
};

AccuracyTable evaluate(const Model& model, const Encoder& enc, const Dataset& eval_set, std::span<const int> ks);
AccuracyTable evaluate(const EmbeddingIndex& index, const Encoder& enc, const AdapterParams<double>& adapter,
                       const Dataset& eval_set, std::span<const int> ks);

struct ComparisonConfig {
  FedConfig train;  // clients, rounds, epochs, seeds; mode and lr are set per arm
  double lr_classifier_only = 1e-3;
  double lr_joint = 1e-4;
};

struct ComparisonResult {
  double frozen_mips = 0.0;       // identity adapter + MIPS
  double adapter_mips = 0.0;      // trained adapter + MIPS, classifier discarded
  double classifier_only = 0.0;   // identity adapter + trained classifier
  double combined = 0.0;          // trained adapter + trained classifier
};

/// Top-1 accuracies on `eval_set`. The adapter for the MIPS arm is the one
/// trained jointly with the classifier in the combined arm.
ComparisonResult four_way_comparison(const ComparisonConfig& cfg, const Encoder& enc, const Dataset& train,
                                     const Dataset& eval_set);

}  // namespace fedcar
