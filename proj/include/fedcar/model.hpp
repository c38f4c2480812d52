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

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedcar/encoder.hpp"
#include "fedcar/error.hpp"
#include "fedcar/rng.hpp"

namespace fedcar {

template <typename Scalar>
struct AffineLayer {
  MatrixX<Scalar> weight;  // out x in
  VectorX<Scalar> bias;    // out
};

/// Square matrix between the token embeddings and the frozen network.
template <typename Scalar>
struct AdapterParams {
  MatrixX<Scalar> weight;

  static AdapterParams identity(int d_emb) { return {MatrixX<Scalar>::Identity(d_emb, d_emb)}; }
};

/// logits = out(dropout(tanh(pre(h)))) with a pre-classifier, else out(h).
template <typename Scalar>
struct ClassifierParams {
  std::optional<AffineLayer<Scalar>> pre_classifier;
  double dropout_rate = 0.0;
  AffineLayer<Scalar> output_layer;

  int d_hidden() const { return static_cast<int>(output_layer.weight.cols()); }
  int n_classes() const { return static_cast<int>(output_layer.weight.rows()); }
};

enum class TrainMode { kAdapterAndClassifier, kClassifierOnly };

/// The trainable set exchanged between clients and the aggregator.
template <typename Scalar>
struct ModelParams {
  AdapterParams<Scalar> adapter;
  ClassifierParams<Scalar> classifier;
  TrainMode mode = TrainMode::kAdapterAndClassifier;
};

template <typename Scalar>
struct Gradients {
  MatrixX<Scalar> d_adapter;
  std::optional<AffineLayer<Scalar>> d_pre_classifier;
  AffineLayer<Scalar> d_output_layer;
};

enum class ParamScope { kAll, kTrainable };

// ---------------------------------------------------------------------------
// Tensor traversal. Canonical order: adapter, pre.weight, pre.bias,
// output.weight, output.bias. The adapter is skipped for kTrainable in
// ClassifierOnly mode.

template <typename Model, typename Fn>
void for_each_tensor(Model& model, ParamScope scope, Fn&& fn) {
  if (scope == ParamScope::kAll || model.mode == TrainMode::kAdapterAndClassifier) {
    fn(model.adapter.weight);
  }
  if (model.classifier.pre_classifier) {
    fn(model.classifier.pre_classifier->weight);
    fn(model.classifier.pre_classifier->bias);
  }
  fn(model.classifier.output_layer.weight);
  fn(model.classifier.output_layer.bias);
}

template <typename Grads, typename Fn>
void for_each_gradient(Grads& g, Fn&& fn) {
  fn(g.d_adapter);
  if (g.d_pre_classifier) {
    fn(g.d_pre_classifier->weight);
    fn(g.d_pre_classifier->bias);
  }
  fn(g.d_output_layer.weight);
  fn(g.d_output_layer.bias);
}

template <typename Scalar>
Eigen::Index param_count(const ModelParams<Scalar>& model, ParamScope scope = ParamScope::kAll) {
  Eigen::Index n = 0;
  for_each_tensor(model, scope, [&](const auto& t) { n += t.size(); });
  return n;
}

/// Row-major concatenation of the selected tensors.
template <typename Scalar>
VectorX<Scalar> flatten(const ModelParams<Scalar>& model, ParamScope scope = ParamScope::kAll) {
  VectorX<Scalar> flat(param_count(model, scope));
  Eigen::Index k = 0;
  for_each_tensor(model, scope, [&](const auto& t) {
    for (Eigen::Index r = 0; r < t.rows(); ++r)
      for (Eigen::Index c = 0; c < t.cols(); ++c) flat(k++) = t(r, c);
  });
  return flat;
}

template <typename Scalar>
VectorX<Scalar> flatten(const Gradients<Scalar>& g) {
  Eigen::Index n = 0;
  for_each_gradient(g, [&](const auto& t) { n += t.size(); });
  VectorX<Scalar> flat(n);
  Eigen::Index k = 0;
  for_each_gradient(g, [&](const auto& t) {
    for (Eigen::Index r = 0; r < t.rows(); ++r)
      for (Eigen::Index c = 0; c < t.cols(); ++c) flat(k++) = t(r, c);
  });
  return flat;
}

/// Inverse of flatten for the same scope.
template <typename Scalar>
void assign_flat(ModelParams<Scalar>& model, const Eigen::Ref<const VectorX<Scalar>>& flat,
                 ParamScope scope = ParamScope::kAll) {
  if (flat.size() != param_count(model, scope)) {
    throw ModelError("flat parameter vector has " + std::to_string(flat.size()) + " entries, model has " +
                     std::to_string(param_count(model, scope)));
  }
  Eigen::Index k = 0;
  for_each_tensor(model, scope, [&](auto& t) {
    for (Eigen::Index r = 0; r < t.rows(); ++r)
      for (Eigen::Index c = 0; c < t.cols(); ++c) t(r, c) = flat(k++);
  });
}

/// Shapes of every tensor in canonical order (bias tensors have one dim).
template <typename Scalar>
std::vector<std::vector<std::uint32_t>> tensor_shapes(const ModelParams<Scalar>& model) {
  std::vector<std::vector<std::uint32_t>> shapes;
  for_each_tensor(model, ParamScope::kAll, [&](const auto& t) {
    using T = std::decay_t<decltype(t)>;
    if constexpr (T::ColsAtCompileTime == 1) {
      shapes.push_back({static_cast<std::uint32_t>(t.rows())});
    } else {
      shapes.push_back({static_cast<std::uint32_t>(t.rows()), static_cast<std::uint32_t>(t.cols())});
    }
  });
  return shapes;
}

template <typename Scalar>
bool same_shapes(const ModelParams<Scalar>& a, const ModelParams<Scalar>& b) {
  return a.mode == b.mode && tensor_shapes(a) == tensor_shapes(b);
}

template <typename Scalar>
bool bitwise_equal(const ModelParams<Scalar>& a, const ModelParams<Scalar>& b) {
  if (!same_shapes(a, b)) return false;
  const VectorX<Scalar> fa = flatten(a);
  const VectorX<Scalar> fb = flatten(b);
  return std::memcmp(fa.data(), fb.data(), sizeof(Scalar) * fa.size()) == 0;
}

/// Identity adapter; classifier weights uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))
/// from SplitMix64(seed) (pre-classifier first, row-major), zero biases.
template <typename Scalar>
ModelParams<Scalar> init_model(int d_emb, int d_hidden, int n_classes, bool pre_classifier,
                               double dropout_rate, TrainMode mode, std::uint64_t seed) {
  if (d_hidden < 1 || n_classes < 2) throw ConfigError("model needs d_hidden >= 1 and n_classes >= 2");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("dropout rate must lie in [0, 1)");
  SplitMix64 rng(seed);
  auto layer = [&](int out, int in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    AffineLayer<Scalar> l{MatrixX<Scalar>(out, in), VectorX<Scalar>::Zero(out)};
    for (int r = 0; r < out; ++r)
      for (int c = 0; c < in; ++c) l.weight(r, c) = static_cast<Scalar>(rng.uniform(-bound, bound));
    return l;
  };
  ModelParams<Scalar> m;
  m.mode = mode;
  m.adapter = AdapterParams<Scalar>::identity(std::max(d_emb, 0));
  if (pre_classifier) {
    m.classifier.pre_classifier = layer(d_hidden, d_hidden);
    m.classifier.dropout_rate = dropout_rate;
  }
  m.classifier.output_layer = layer(n_classes, d_hidden);
  return m;
}

template <typename Scalar>
Gradients<Scalar> zero_gradients(const ModelParams<Scalar>& m) {
  Gradients<Scalar> g;
  g.d_adapter = MatrixX<Scalar>::Zero(m.adapter.weight.rows(), m.adapter.weight.cols());
  if (m.classifier.pre_classifier) {
    const auto& p = *m.classifier.pre_classifier;
    g.d_pre_classifier = AffineLayer<Scalar>{MatrixX<Scalar>::Zero(p.weight.rows(), p.weight.cols()),
                                             VectorX<Scalar>::Zero(p.bias.size())};
  }
  const auto& o = m.classifier.output_layer;
  g.d_output_layer = AffineLayer<Scalar>{MatrixX<Scalar>::Zero(o.weight.rows(), o.weight.cols()),
                                         VectorX<Scalar>::Zero(o.bias.size())};
  return g;
}

// ---------------------------------------------------------------------------
// Classifier head

template <typename Scalar>
struct ClassifierActivations {
  VectorX<Scalar> input;
  VectorX<Scalar> activated;  // tanh(pre(h)); empty without pre-classifier
  VectorX<Scalar> mask;       // inverted-dropout scale per unit
  VectorX<Scalar> logits;
};

template <typename Scalar>
VectorX<Scalar> classifier_forward(const ClassifierParams<Scalar>& cls, const VectorX<Scalar>& h,
                                   bool training, SplitMix64& rng,
                                   ClassifierActivations<Scalar>* acts = nullptr) {
  if (h.size() != cls.d_hidden()) {
    throw ModelError("hidden state has dimension " + std::to_string(h.size()) + ", classifier expects " +
                     std::to_string(cls.d_hidden()));
  }
  VectorX<Scalar> logits;
  if (cls.pre_classifier) {
    const auto& pre = *cls.pre_classifier;
    VectorX<Scalar> a = (pre.weight * h + pre.bias).array().tanh().matrix();
    VectorX<Scalar> mask = VectorX<Scalar>::Ones(a.size());
    if (training && cls.dropout_rate > 0.0) {
      const Scalar keep_scale = Scalar(1) / static_cast<Scalar>(1.0 - cls.dropout_rate);
      for (Eigen::Index i = 0; i < mask.size(); ++i) {
        mask(i) = rng.uniform() < cls.dropout_rate ? Scalar(0) : keep_scale;
      }
    }
    logits = cls.output_layer.weight * a.cwiseProduct(mask) + cls.output_layer.bias;
    if (acts) {
      acts->activated = std::move(a);
      acts->mask = std::move(mask);
    }
  } else {
    logits = cls.output_layer.weight * h + cls.output_layer.bias;
  }
  if (acts) {
    acts->input = h;
    acts->logits = logits;
  }
  return logits;
}

// ---------------------------------------------------------------------------
// Full pipeline

/// Pooled hidden state of one sample: lookup for a precomputed encoder,
/// otherwise tokens -> adapter -> frozen network -> pooling.
template <typename Scalar>
VectorX<Scalar> hidden_state(const AdapterParams<Scalar>& adapter, const FrozenEncoder<Scalar>& enc,
                             const BasicSample<Scalar>& sample, EncoderActivations<Scalar>* acts = nullptr,
                             TokenFeatures<Scalar>* tokens = nullptr) {
  if (enc.is_precomputed()) return enc.lookup(sample.id);
  TokenFeatures<Scalar> tf = encode_tokens<Scalar>(sample.features, enc);
  VectorX<Scalar> h = encoder_forward(enc, adapter_apply(adapter.weight, tf), acts);
  if (tokens) *tokens = std::move(tf);
  return h;
}

template <typename Scalar>
VectorX<Scalar> predict_logits(const ModelParams<Scalar>& model, const FrozenEncoder<Scalar>& enc,
                               const BasicSample<Scalar>& sample) {
  SplitMix64 unused(0);
  return classifier_forward(model.classifier, hidden_state(model.adapter, enc, sample), false, unused);
}

template <typename Scalar>
struct LossAndGradients {
  Scalar loss = 0;
  Gradients<Scalar> grads;
  int correct = 0;  // top-1 hits in the batch
};

/// Mean softmax cross-entropy of the batch and its exact gradient.
///
/// The adapter gradient is carried through the frozen network; it is left at
/// zero in ClassifierOnly mode. Dropout masks are drawn from `rng` in batch
/// order, so equal rng state gives bitwise-equal results.
template <typename Scalar>
LossAndGradients<Scalar> loss_and_gradients(const ModelParams<Scalar>& model, const FrozenEncoder<Scalar>& enc,
                                            std::span<const BasicSample<Scalar>* const> batch, SplitMix64& rng,
                                            bool training = true) {
  if (batch.empty()) throw ModelError("empty batch");
  const bool adapter_trainable = model.mode == TrainMode::kAdapterAndClassifier;
  if (adapter_trainable && enc.is_precomputed()) {
    throw ModelError("adapter training needs the synthetic encoder; precomputed states bypass the adapter");
  }
  const int n_classes = model.classifier.n_classes();
  const Scalar inv_batch = Scalar(1) / static_cast<Scalar>(batch.size());

  LossAndGradients<Scalar> out;
  out.grads = zero_gradients(model);
  EncoderActivations<Scalar> enc_acts;
  TokenFeatures<Scalar> tokens;
  ClassifierActivations<Scalar> cls_acts;

  for (const BasicSample<Scalar>* sample : batch) {
    if (sample->label < 0 || sample->label >= n_classes) {
      throw ModelError("label " + std::to_string(sample->label) + " outside [0, " + std::to_string(n_classes) + ")");
    }
    const VectorX<Scalar> h = hidden_state(model.adapter, enc, *sample, adapter_trainable ? &enc_acts : nullptr,
                                           adapter_trainable ? &tokens : nullptr);
    const VectorX<Scalar> logits = classifier_forward(model.classifier, h, training, rng, &cls_acts);

    const Scalar max_logit = logits.maxCoeff();
    const VectorX<Scalar> shifted = (logits.array() - max_logit).exp().matrix();
    const Scalar sum = shifted.sum();
    out.loss += (std::log(sum) + max_logit - logits(sample->label)) * inv_batch;
    Eigen::Index argmax = 0;
    logits.maxCoeff(&argmax);
    if (argmax == sample->label) ++out.correct;

    VectorX<Scalar> d_logits = shifted / sum;
    d_logits(sample->label) -= Scalar(1);
    d_logits *= inv_batch;

    const auto& cls = model.classifier;
    VectorX<Scalar> d_h;
    if (cls.pre_classifier) {
      const VectorX<Scalar> dropped = cls_acts.activated.cwiseProduct(cls_acts.mask);
      out.grads.d_output_layer.weight.noalias() += d_logits * dropped.transpose();
      out.grads.d_output_layer.bias += d_logits;
      const VectorX<Scalar> d_act = (cls.output_layer.weight.transpose() * d_logits).cwiseProduct(cls_acts.mask);
      const VectorX<Scalar> d_pre =
          (d_act.array() * (Scalar(1) - cls_acts.activated.array().square())).matrix();
      out.grads.d_pre_classifier->weight.noalias() += d_pre * h.transpose();
      out.grads.d_pre_classifier->bias += d_pre;
      if (adapter_trainable) d_h = cls.pre_classifier->weight.transpose() * d_pre;
    } else {
      out.grads.d_output_layer.weight.noalias() += d_logits * h.transpose();
      out.grads.d_output_layer.bias += d_logits;
      if (adapter_trainable) d_h = cls.output_layer.weight.transpose() * d_logits;
    }

    if (adapter_trainable) {
      // soft row s_t = A x_t, so dA = sum_t ds_t x_t^T = dS^T X.
      const MatrixX<Scalar> d_soft = encoder_backward(enc, enc_acts, d_h);
      out.grads.d_adapter.noalias() += d_soft.transpose() * tokens.tokens;
    }
  }
  return out;
}

template <typename Scalar>
Scalar batch_loss(const ModelParams<Scalar>& model, const FrozenEncoder<Scalar>& enc,
                  std::span<const BasicSample<Scalar>* const> batch, SplitMix64& rng, bool training = true) {
  const int n_classes = model.classifier.n_classes();
  Scalar loss = 0;
  for (const BasicSample<Scalar>* sample : batch) {
    if (sample->label < 0 || sample->label >= n_classes) throw ModelError("label out of range");
    const VectorX<Scalar> logits =
        classifier_forward(model.classifier, hidden_state(model.adapter, enc, *sample), training, rng);
    const Scalar max_logit = logits.maxCoeff();
    loss += std::log((logits.array() - max_logit).exp().sum()) + max_logit - logits(sample->label);
  }
  return loss / static_cast<Scalar>(batch.size());
}

/// theta <- theta - lr * g on the trainable tensors.
template <typename Scalar>
void sgd_step(ModelParams<Scalar>& model, const Gradients<Scalar>& g, Scalar lr) {
  if (model.mode == TrainMode::kAdapterAndClassifier) model.adapter.weight -= lr * g.d_adapter;
  if (model.classifier.pre_classifier) {
    model.classifier.pre_classifier->weight -= lr * g.d_pre_classifier->weight;
    model.classifier.pre_classifier->bias -= lr * g.d_pre_classifier->bias;
  }
  model.classifier.output_layer.weight -= lr * g.d_output_layer.weight;
  model.classifier.output_layer.bias -= lr * g.d_output_layer.bias;
}

// ---------------------------------------------------------------------------
// Retrieval

/// Indices of the K largest scores, descending; equal scores keep the lower
/// index first.
template <typename Derived>
std::vector<int> top_k(const Eigen::MatrixBase<Derived>& scores, int k) {
  const int n = static_cast<int>(scores.size());
  if (k < 1 || k > n) {
    throw ModelError("K = " + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
  }
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](int a, int b) {
    if (scores(a) != scores(b)) return scores(a) > scores(b);
    return a < b;
  });
  idx.resize(k);
  return idx;
}

template <typename Scalar>
std::vector<int> retrieve_topk(const VectorX<Scalar>& logits, int k) {
  return top_k(logits, k);
}

using Sample = BasicSample<double>;
using Model = ModelParams<double>;
using Encoder = FrozenEncoder<double>;
using Grads = Gradients<double>;

}  // namespace fedcar
