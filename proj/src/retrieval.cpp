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

#include "fedcar/retrieval.hpp"

#include <algorithm>
#include <string>

#include "fedcar/error.hpp"

namespace fedcar {

EmbeddingIndex build_index(const Encoder& enc, const AdapterParams<double>& adapter, const Dataset& train) {
  if (train.n_classes < 1) throw DataError("index needs at least one class");
  EmbeddingIndex index{Eigen::MatrixXd::Zero(train.n_classes, enc.d_hidden())};
  std::vector<int> counts(train.n_classes, 0);
  for (const Sample& s : train.samples) {
    if (s.label < 0 || s.label >= train.n_classes) throw DataError("label out of range while building index");
    index.doc_vectors.row(s.label) += hidden_state(adapter, enc, s).transpose();
    ++counts[s.label];
  }
  for (int c = 0; c < train.n_classes; ++c) {
    if (counts[c] == 0) throw DataError("class " + std::to_string(c) + " has no training samples");
    index.doc_vectors.row(c) /= static_cast<double>(counts[c]);
  }
  return index;
}

std::vector<int> mips_retrieve(const EmbeddingIndex& index, const Eigen::VectorXd& query, int k) {
  if (query.size() != index.doc_vectors.cols()) throw ModelError("query dimension does not match index");
  return top_k(index.doc_vectors * query, k);
}

double AccuracyTable::top1() const {
  for (std::size_t i = 0; i < ks.size(); ++i) {
    if (ks[i] == 1) return accuracy[i];
  }
  throw ModelError("accuracy table has no K = 1 entry");
}

namespace {

template <typename Rank>
AccuracyTable tabulate(const Dataset& eval_set, std::span<const int> ks, int n_classes, Rank&& rank) {
  if (eval_set.empty()) throw DataError("evaluation set is empty");
  if (ks.empty()) throw ConfigError("no K values to evaluate");
  const int k_max = *std::max_element(ks.begin(), ks.end());
  for (int k : ks) {
    if (k < 1 || k > n_classes) {
      throw ConfigError("K = " + std::to_string(k) + " outside [1, " + std::to_string(n_classes) + "]");
    }
  }
  AccuracyTable t;
  t.ks.assign(ks.begin(), ks.end());
  t.accuracy.assign(ks.size(), 0.0);
  for (const Sample& s : eval_set.samples) {
    const std::vector<int> ranked = rank(s, k_max);
    const auto pos = std::find(ranked.begin(), ranked.end(), s.label) - ranked.begin();
    for (std::size_t i = 0; i < ks.size(); ++i) {
      if (pos < ks[i]) t.accuracy[i] += 1.0;
    }
  }
  for (double& a : t.accuracy) a /= static_cast<double>(eval_set.size());
  return t;
}

}  // namespace

AccuracyTable evaluate(const Model& model, const Encoder& enc, const Dataset& eval_set, std::span<const int> ks) {
  return tabulate(eval_set, ks, model.classifier.n_classes(), [&](const Sample& s, int k) {
    return retrieve_topk<double>(predict_logits(model, enc, s), k);
  });
}

AccuracyTable evaluate(const EmbeddingIndex& index, const Encoder& enc, const AdapterParams<double>& adapter,
                       const Dataset& eval_set, std::span<const int> ks) {
  return tabulate(eval_set, ks, index.n_classes(), [&](const Sample& s, int k) {
    return mips_retrieve(index, hidden_state(adapter, enc, s), k);
  });
}

ComparisonResult four_way_comparison(const ComparisonConfig& cfg, const Encoder& enc, const Dataset& train,
                                     const Dataset& eval_set) {
  if (enc.is_precomputed()) throw ConfigError("the comparison trains an adapter and needs the synthetic encoder");
  const int top1[] = {1};
  ComparisonResult r;
  const auto identity = AdapterParams<double>::identity(enc.d_emb());
  r.frozen_mips = evaluate(build_index(enc, identity, train), enc, identity, eval_set, top1).top1();

  FedConfig cls_cfg = cfg.train;
  cls_cfg.mode = TrainMode::kClassifierOnly;
  cls_cfg.lr = cfg.lr_classifier_only;
  const TrainingResult cls = run_training(cls_cfg, enc, train, eval_set);
  r.classifier_only = evaluate(cls.model, enc, eval_set, top1).top1();

  FedConfig joint_cfg = cfg.train;
  joint_cfg.mode = TrainMode::kAdapterAndClassifier;
  joint_cfg.lr = cfg.lr_joint;
  const TrainingResult joint = run_training(joint_cfg, enc, train, eval_set);
  r.combined = evaluate(joint.model, enc, eval_set, top1).top1();
  r.adapter_mips =
      evaluate(build_index(enc, joint.model.adapter, train), enc, joint.model.adapter, eval_set, top1).top1();
  return r;
}

}  // namespace fedcar
