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

#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <variant>
#include <vector>

#include "fedcar/error.hpp"
#include "fedcar/rng.hpp"

namespace fedcar {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// Tokens produced per input by the synthetic tokenizer.
inline constexpr int kSeqLen = 8;
/// Positional offsets are uniform in [-kPositionalScale, kPositionalScale].
inline constexpr double kPositionalScale = 0.5;

enum class Pooling { kEos, kMean };

/// One labeled input. `features` is the raw feature vector for the synthetic
/// encoder, or the stored hidden state when the encoder is precomputed.
template <typename Scalar>
struct BasicSample {
  std::uint32_t id = 0;
  VectorX<Scalar> features;
  int label = 0;
};

/// Token embeddings of one input, one row per token. The last row plays the
/// role of the EOS position.
template <typename Scalar>
struct TokenFeatures {
  MatrixX<Scalar> tokens;

  Eigen::Index seq_len() const { return tokens.rows(); }
  Eigen::Index eos_index() const { return tokens.rows() - 1; }
};

/// Fixed rowwise network: `depth` layers of h <- tanh(W h + b), all of width
/// d_hidden, preceded by a per-position additive offset table.
///
/// Weights are drawn from one SplitMix64(seed) stream in this order:
///   1. positional offsets, kSeqLen x d_emb, row-major,
///      uniform(-kPositionalScale, kPositionalScale);
///   2. for each layer l: W_l row-major then b_l, both
///      uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
template <typename Scalar>
struct SyntheticNetwork {
  std::uint64_t seed = 0;
  MatrixX<Scalar> positional;
  std::vector<MatrixX<Scalar>> weights;
  std::vector<VectorX<Scalar>> biases;
};

template <typename Scalar>
using HiddenStateTable = std::unordered_map<std::uint32_t, VectorX<Scalar>>;

/// The frozen part of the retriever: tokenizer surrogate + transformer
/// surrogate, or a table of hidden states computed ahead of training.
template <typename Scalar>
class FrozenEncoder {
 public:
  static FrozenEncoder synthetic(std::uint64_t seed, int d_emb, int d_hidden,
                                 int depth = 2, Pooling pooling = Pooling::kMean) {
    if (d_emb < 1 || d_hidden < 1 || depth < 1) {
      throw ConfigError("synthetic encoder needs d_emb, d_hidden, depth >= 1");
    }
    SplitMix64 rng(seed);
    SyntheticNetwork<Scalar> net;
    net.seed = seed;
    net.positional.resize(kSeqLen, d_emb);
    for (int r = 0; r < kSeqLen; ++r) {
      for (int c = 0; c < d_emb; ++c) {
        net.positional(r, c) = static_cast<Scalar>(rng.uniform(-kPositionalScale, kPositionalScale));
      }
    }
    int fan_in = d_emb;
    for (int l = 0; l < depth; ++l) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      MatrixX<Scalar> w(d_hidden, fan_in);
      for (int r = 0; r < d_hidden; ++r) {
        for (int c = 0; c < fan_in; ++c) w(r, c) = static_cast<Scalar>(rng.uniform(-bound, bound));
      }
      VectorX<Scalar> b(d_hidden);
      for (int r = 0; r < d_hidden; ++r) b(r) = static_cast<Scalar>(rng.uniform(-bound, bound));
      net.weights.push_back(std::move(w));
      net.biases.push_back(std::move(b));
      fan_in = d_hidden;
    }
    return FrozenEncoder(std::move(net), d_emb, d_hidden, pooling);
  }

  /// `d_emb` records the token width of the encoder that produced the table
  /// (0 when unknown); it only sizes the untrained adapter.
  static FrozenEncoder precomputed(HiddenStateTable<Scalar> table, int d_hidden, int d_emb = 0) {
    for (const auto& [id, h] : table) {
      if (h.size() != d_hidden) {
        throw DataError("hidden state for sample " + std::to_string(id) + " has dimension " +
                        std::to_string(h.size()) + ", expected " + std::to_string(d_hidden));
      }
    }
    return FrozenEncoder(std::move(table), d_hidden, d_emb);
  }

  bool is_precomputed() const { return std::holds_alternative<HiddenStateTable<Scalar>>(variant_); }
  int d_emb() const { return d_emb_; }
  int d_hidden() const { return d_hidden_; }
  Pooling pooling() const { return pooling_; }

  const SyntheticNetwork<Scalar>& network() const {
    if (is_precomputed()) throw ModelError("precomputed encoder has no synthetic network");
    return std::get<SyntheticNetwork<Scalar>>(variant_);
  }

  const HiddenStateTable<Scalar>& table() const {
    if (!is_precomputed()) throw ModelError("synthetic encoder has no hidden-state table");
    return std::get<HiddenStateTable<Scalar>>(variant_);
  }

  const VectorX<Scalar>& lookup(std::uint32_t id) const {
    const auto& t = table();
    auto it = t.find(id);
    if (it == t.end()) throw DataError("unknown sample id " + std::to_string(id));
    return it->second;
  }

  /// Number of encoder_forward evaluations so far (shared by copies).
  std::uint64_t forward_calls() const { return calls_->load(std::memory_order_relaxed); }
  void note_forward_call() const { calls_->fetch_add(1, std::memory_order_relaxed); }

  /// Bitwise comparison of the frozen weights (the call counter is ignored).
  bool same_weights(const FrozenEncoder& other) const {
    if (d_emb_ != other.d_emb_ || d_hidden_ != other.d_hidden_ || pooling_ != other.pooling_ ||
        is_precomputed() != other.is_precomputed()) {
      return false;
    }
    auto eq = [](const auto& a, const auto& b) {
      return a.rows() == b.rows() && a.cols() == b.cols() &&
             (a.size() == 0 || std::memcmp(a.data(), b.data(), sizeof(Scalar) * a.size()) == 0);
    };
    if (is_precomputed()) {
      const auto& a = table();
      const auto& b = other.table();
      if (a.size() != b.size()) return false;
      for (const auto& [id, h] : a) {
        auto it = b.find(id);
        if (it == b.end() || !eq(h, it->second)) return false;
      }
      return true;
    }
    const auto& a = network();
    const auto& b = other.network();
    if (a.seed != b.seed || a.weights.size() != b.weights.size() || !eq(a.positional, b.positional)) {
      return false;
    }
    for (std::size_t l = 0; l < a.weights.size(); ++l) {
      if (!eq(a.weights[l], b.weights[l]) || !eq(a.biases[l], b.biases[l])) return false;
    }
    return true;
  }

 private:
  FrozenEncoder(SyntheticNetwork<Scalar> net, int d_emb, int d_hidden, Pooling pooling)
      : variant_(std::move(net)), d_emb_(d_emb), d_hidden_(d_hidden), pooling_(pooling) {}
  FrozenEncoder(HiddenStateTable<Scalar> table, int d_hidden, int d_emb)
      : variant_(std::move(table)), d_emb_(d_emb), d_hidden_(d_hidden), pooling_(Pooling::kMean) {}

  std::variant<SyntheticNetwork<Scalar>, HiddenStateTable<Scalar>> variant_;
  int d_emb_;
  int d_hidden_;
  Pooling pooling_;
  std::shared_ptr<std::atomic<std::uint64_t>> calls_ = std::make_shared<std::atomic<std::uint64_t>>(0);
};

/// Tokenizer surrogate: token row t = x + positional offset t.
template <typename Scalar>
TokenFeatures<Scalar> encode_tokens(const Eigen::Ref<const VectorX<Scalar>>& x,
                                    const FrozenEncoder<Scalar>& enc) {
  if (enc.is_precomputed()) {
    throw ModelError("precomputed encoder bypasses the token stage");
  }
  if (x.size() != enc.d_emb()) {
    throw ModelError("feature dimension " + std::to_string(x.size()) + " does not match d_emb " +
                     std::to_string(enc.d_emb()));
  }
  TokenFeatures<Scalar> tf;
  tf.tokens = enc.network().positional.rowwise() + x.transpose();
  return tf;
}

/// Soft embeddings: every token row t is replaced by A * t.
template <typename Scalar>
TokenFeatures<Scalar> adapter_apply(const MatrixX<Scalar>& adapter, const TokenFeatures<Scalar>& tf) {
  if (adapter.rows() != adapter.cols() || adapter.cols() != tf.tokens.cols()) {
    throw ModelError("adapter of shape " + std::to_string(adapter.rows()) + "x" +
                     std::to_string(adapter.cols()) + " does not fit tokens of width " +
                     std::to_string(tf.tokens.cols()));
  }
  TokenFeatures<Scalar> out;
  out.tokens.noalias() = tf.tokens * adapter.transpose();
  return out;
}

/// Per-layer rowwise activations kept for the backward pass;
/// layers[0] is the network input, layers[l + 1] the output of layer l.
template <typename Scalar>
struct EncoderActivations {
  std::vector<MatrixX<Scalar>> layers;
};

template <typename Scalar>
VectorX<Scalar> pool_rows(const MatrixX<Scalar>& rows, Pooling pooling) {
  if (pooling == Pooling::kEos) return rows.row(rows.rows() - 1).transpose();
  return rows.colwise().mean().transpose();
}

template <typename Scalar>
VectorX<Scalar> encoder_forward(const FrozenEncoder<Scalar>& enc, const TokenFeatures<Scalar>& soft,
                                EncoderActivations<Scalar>* acts = nullptr) {
  const auto& net = enc.network();
  if (soft.tokens.cols() != enc.d_emb() || soft.tokens.rows() < 1) {
    throw ModelError("encoder input has wrong shape");
  }
  enc.note_forward_call();
  MatrixX<Scalar> h = soft.tokens;
  if (acts) {
    acts->layers.clear();
    acts->layers.push_back(h);
  }
  for (std::size_t l = 0; l < net.weights.size(); ++l) {
    MatrixX<Scalar> z = h * net.weights[l].transpose();
    z.rowwise() += net.biases[l].transpose();
    h = z.array().tanh().matrix();
    if (acts) acts->layers.push_back(h);
  }
  VectorX<Scalar> pooled = pool_rows(h, enc.pooling());
  if (!pooled.allFinite()) {
    throw ModelError("non-finite encoder output; synthetic weights are mis-scaled");
  }
  return pooled;
}

/// Gradient with respect to the encoder input rows, given dLoss/dpooled.
template <typename Scalar>
MatrixX<Scalar> encoder_backward(const FrozenEncoder<Scalar>& enc, const EncoderActivations<Scalar>& acts,
                                 const VectorX<Scalar>& d_pooled) {
  const auto& net = enc.network();
  const Eigen::Index seq_len = acts.layers.front().rows();
  MatrixX<Scalar> d_h = MatrixX<Scalar>::Zero(seq_len, enc.d_hidden());
  if (enc.pooling() == Pooling::kEos) {
    d_h.row(seq_len - 1) = d_pooled.transpose();
  } else {
    d_h.rowwise() = d_pooled.transpose() / static_cast<Scalar>(seq_len);
  }
  for (std::size_t l = net.weights.size(); l-- > 0;) {
    const MatrixX<Scalar>& out = acts.layers[l + 1];
    MatrixX<Scalar> d_z = (d_h.array() * (Scalar(1) - out.array().square())).matrix();
    d_h = d_z * net.weights[l];
  }
  return d_h;
}

}  // namespace fedcar
