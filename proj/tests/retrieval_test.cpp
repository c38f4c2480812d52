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

#include <algorithm>
#include <numeric>

#include "fedcar/error.hpp"
#include "fedcar/retrieval.hpp"

namespace fedcar {
namespace {

Dataset table_dataset(const std::vector<std::vector<double>>& rows, const std::vector<int>& labels, int n_classes) {
  Dataset d;
  d.n_classes = n_classes;
  d.dim = static_cast<int>(rows.front().size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    d.samples.push_back(
        Sample{static_cast<std::uint32_t>(i), Eigen::Map<const Eigen::VectorXd>(rows[i].data(), d.dim), labels[i]});
  }
  return d;
}

AdapterParams<double> no_adapter(const Encoder& enc) { return AdapterParams<double>::identity(enc.d_hidden()); }

TEST(BuildIndex, ClassMeans) {
  const Dataset d = table_dataset({{1, 0}, {3, 2}, {0, -1}, {0, -3}}, {0, 0, 1, 1}, 2);
  const Encoder enc = precomputed_encoder(d);
  const EmbeddingIndex idx = build_index(enc, no_adapter(enc), d);
  ASSERT_EQ(idx.n_classes(), 2);
  EXPECT_DOUBLE_EQ(idx.doc_vectors(0, 0), 2.0);
  EXPECT_DOUBLE_EQ(idx.doc_vectors(0, 1), 1.0);
  EXPECT_DOUBLE_EQ(idx.doc_vectors(1, 0), 0.0);
  EXPECT_DOUBLE_EQ(idx.doc_vectors(1, 1), -2.0);
}

TEST(BuildIndex, EmptyClassIsAnError) {
  const Dataset d = table_dataset({{1, 0}, {0, 1}}, {0, 0}, 2);
  const Encoder enc = precomputed_encoder(d);
  EXPECT_THROW(build_index(enc, no_adapter(enc), d), DataError);
}

TEST(Mips, OrthonormalDocumentsReturnTheMatchingRow) {
  EmbeddingIndex idx{Eigen::MatrixXd::Identity(4, 4)};
  for (int c = 0; c < 4; ++c) {
    const Eigen::VectorXd q = 2.5 * Eigen::VectorXd::Unit(4, c);
    EXPECT_EQ(mips_retrieve(idx, q, 1), std::vector<int>{c});
  }
}

TEST(Mips, TiesGoToTheLowerLabel) {
  EmbeddingIndex idx{Eigen::MatrixXd::Identity(3, 3)};
  const Eigen::VectorXd q = Eigen::VectorXd::Zero(3);
  EXPECT_EQ(mips_retrieve(idx, q, 3), (std::vector<int>{0, 1, 2}));
  Eigen::VectorXd q2(3);
  q2 << 0.0, 1.0, 1.0;
  EXPECT_EQ(mips_retrieve(idx, q2, 2), (std::vector<int>{1, 2}));
}

TEST(Mips, MatchesBruteForceOnRandomIndexes) {
  SplitMix64 rng(99);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 1 + static_cast<int>(rng.next_u64() % 8);
    const int d = 1 + static_cast<int>(rng.next_u64() % 5);
    EmbeddingIndex idx{Eigen::MatrixXd(n, d)};
    for (Eigen::Index i = 0; i < idx.doc_vectors.size(); ++i) idx.doc_vectors(i) = rng.gaussian();
    Eigen::VectorXd q(d);
    for (int i = 0; i < d; ++i) q(i) = rng.gaussian();
    const int k = 1 + static_cast<int>(rng.next_u64() % n);

    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::vector<double> score(n);
    for (int c = 0; c < n; ++c) {
      score[c] = 0.0;
      for (int j = 0; j < d; ++j) score[c] += idx.doc_vectors(c, j) * q(j);
    }
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return score[a] > score[b]; });
    order.resize(k);
    EXPECT_EQ(mips_retrieve(idx, q, k), order) << "trial " << trial;
  }
}

TEST(Mips, DimensionMismatchThrows) {
  EmbeddingIndex idx{Eigen::MatrixXd::Identity(3, 3)};
  EXPECT_THROW(mips_retrieve(idx, Eigen::VectorXd::Zero(2), 1), ModelError);
}

TEST(Evaluate, ThreeSampleExample) {
  // Index rows e0, e1; queries e0 (label 0), e1 (label 1), e0 (label 1).
  const Dataset train = table_dataset({{1, 0}, {0, 1}}, {0, 1}, 2);
  const Dataset test = table_dataset({{1, 0}, {0, 1}, {1, 0}}, {0, 1, 1}, 2);
  const Encoder enc = precomputed_encoder(train);
  const EmbeddingIndex idx = build_index(enc, no_adapter(enc), train);
  const Encoder test_enc = precomputed_encoder(test);
  const int ks[] = {1, 2};
  const AccuracyTable t = evaluate(idx, test_enc, no_adapter(test_enc), test, ks);
  EXPECT_DOUBLE_EQ(t.accuracy[0], 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(t.accuracy[1], 1.0);
  EXPECT_DOUBLE_EQ(t.top1(), 2.0 / 3.0);
}

TEST(Evaluate, KRangeAndEmptySetAreErrors) {
  const Dataset d = table_dataset({{1, 0}, {0, 1}}, {0, 1}, 2);
  const Encoder enc = precomputed_encoder(d);
  const EmbeddingIndex idx = build_index(enc, no_adapter(enc), d);
  const int bad[] = {3};
  const int zero[] = {0};
  EXPECT_THROW(evaluate(idx, enc, no_adapter(enc), d, bad), ConfigError);
  EXPECT_THROW(evaluate(idx, enc, no_adapter(enc), d, zero), ConfigError);
  const int one[] = {1};
  EXPECT_THROW(evaluate(idx, enc, no_adapter(enc), Dataset{{}, 2, 2}, one), DataError);
}

TEST(Evaluate, MonotoneInKAndFullKIsPerfect) {
  auto [train, test] = split_holdout(gen_synthetic(20, 5, 4, 1.5, 8), 0.3, 9);
  const Encoder enc = Encoder::synthetic(4, 4, 3);
  const auto id = AdapterParams<double>::identity(4);
  const EmbeddingIndex idx = build_index(enc, id, train);
  const int ks[] = {1, 2, 3, 4, 5};
  const AccuracyTable t = evaluate(idx, enc, id, test, ks);
  for (std::size_t i = 1; i < t.accuracy.size(); ++i) EXPECT_GE(t.accuracy[i], t.accuracy[i - 1]);
  EXPECT_DOUBLE_EQ(t.accuracy.back(), 1.0);

  const Model m = init_model<double>(4, 3, 5, false, 0.0, TrainMode::kAdapterAndClassifier, 1);
  const AccuracyTable tm = evaluate(m, enc, test, ks);
  for (std::size_t i = 1; i < tm.accuracy.size(); ++i) EXPECT_GE(tm.accuracy[i], tm.accuracy[i - 1]);
  EXPECT_DOUBLE_EQ(tm.accuracy.back(), 1.0);
}

TEST(Evaluate, ClassifierWithIndexWeightsMatchesMips) {
  // A bias-free output layer whose rows are the class prototypes ranks
  // labels exactly as inner-product search does.
  auto [train, test] = split_holdout(gen_synthetic(15, 4, 3, 1.0, 21), 0.3, 22);
  const Encoder enc = Encoder::synthetic(5, 3, 4);
  const auto id = AdapterParams<double>::identity(3);
  const EmbeddingIndex idx = build_index(enc, id, train);
  Model m = init_model<double>(3, 4, 4, false, 0.0, TrainMode::kAdapterAndClassifier, 1);
  m.classifier.output_layer.weight = idx.doc_vectors;
  m.classifier.output_layer.bias.setZero();
  const int ks[] = {1, 2, 3};
  const AccuracyTable a = evaluate(idx, enc, id, test, ks);
  const AccuracyTable b = evaluate(m, enc, test, ks);
  EXPECT_EQ(a.accuracy, b.accuracy);
}

TEST(Evaluate, QueriesEqualToPrototypesArePerfect) {
  const Dataset train = table_dataset({{2, 0, 0}, {4, 0, 0}, {0, 3, 0}, {0, 0, 5}}, {0, 0, 1, 2}, 3);
  const Encoder enc = precomputed_encoder(train);
  const EmbeddingIndex idx = build_index(enc, no_adapter(enc), train);
  std::vector<std::vector<double>> rows;
  for (int c = 0; c < 3; ++c) {
    rows.emplace_back();
    for (int j = 0; j < 3; ++j) rows.back().push_back(idx.doc_vectors(c, j));
  }
  const Dataset q = table_dataset(rows, {0, 1, 2}, 3);
  const Encoder qenc = precomputed_encoder(q);
  const int one[] = {1};
  EXPECT_DOUBLE_EQ(evaluate(idx, qenc, no_adapter(qenc), q, one).top1(), 1.0);
}

TEST(FourWay, ZeroBudgetCollapsesArms) {
  auto [train, test] = split_holdout(gen_synthetic(20, 3, 4, 1.0, 5), 0.25, 6);
  const Encoder enc = Encoder::synthetic(7, 4, 3, 2, Pooling::kMean);
  ComparisonConfig cfg;
  cfg.train.clients = 2;
  cfg.train.rounds = 2;
  cfg.train.local_epochs = 1;
  cfg.lr_classifier_only = 0.0;
  cfg.lr_joint = 0.0;
  const ComparisonResult r = four_way_comparison(cfg, enc, train, test);
  EXPECT_DOUBLE_EQ(r.adapter_mips, r.frozen_mips);
  EXPECT_DOUBLE_EQ(r.combined, r.classifier_only);
}

TEST(FourWay, RejectsPrecomputedEncoder) {
  const Dataset d = table_dataset({{1, 0}, {0, 1}}, {0, 1}, 2);
  EXPECT_THROW(four_way_comparison(ComparisonConfig{}, precomputed_encoder(d), d, d), ConfigError);
}

}  // namespace
}  // namespace fedcar
