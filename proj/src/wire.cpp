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

#include "fedcar/wire.hpp"

#include <fstream>
#include <iterator>
#include <string>

namespace fedcar {

std::string_view to_string(MsgType t) {
  switch (t) {
    case MsgType::kHello: return "HELLO";
    case MsgType::kInit: return "INIT";
    case MsgType::kGlobalModel: return "GLOBAL_MODEL";
    case MsgType::kLocalModel: return "LOCAL_MODEL";
    case MsgType::kMetrics: return "METRICS";
    case MsgType::kShutdown: return "SHUTDOWN";
    case MsgType::kError: return "ERROR";
  }
  return "?";
}

std::string_view to_string(WireFault f) {
  switch (f) {
    case WireFault::kBadMagic: return "bad magic";
    case WireFault::kBadVersion: return "bad version";
    case WireFault::kUnknownType: return "unknown message type";
    case WireFault::kTruncated: return "truncated frame";
    case WireFault::kOversize: return "oversize frame";
    case WireFault::kTrailingBytes: return "trailing bytes";
    case WireFault::kBadPayload: return "bad payload";
  }
  return "?";
}

namespace {

[[noreturn]] void fail(WireFault f, const std::string& detail) {
  throw WireError(f, std::string(to_string(f)) + ": " + detail);
}

}  // namespace

bytes::Buffer encode_message(const WireMessage& msg) {
  if (msg.payload.size() > 0xFFFFFFFFu) fail(WireFault::kOversize, "payload exceeds 4 GiB");
  bytes::Buffer out;
  out.reserve(kFrameHeaderBytes + msg.payload.size());
  for (char c : {'F', 'C', 'A', 'R'}) out.push_back(static_cast<std::uint8_t>(c));
  out.push_back(kWireVersion);
  out.push_back(static_cast<std::uint8_t>(msg.type));
  bytes::put_u32_be(out, static_cast<std::uint32_t>(msg.payload.size()));
  out.insert(out.end(), msg.payload.begin(), msg.payload.end());
  return out;
}

FrameHeader decode_header(std::span<const std::uint8_t> h, std::size_t max_frame) {
  if (h.size() < kFrameHeaderBytes) {
    fail(WireFault::kTruncated, "header has " + std::to_string(h.size()) + " of 10 bytes");
  }
  if (h[0] != 'F' || h[1] != 'C' || h[2] != 'A' || h[3] != 'R') fail(WireFault::kBadMagic, "expected FCAR");
  if (h[4] != kWireVersion) fail(WireFault::kBadVersion, "got version " + std::to_string(h[4]));
  if (h[5] < 1 || h[5] > 7) fail(WireFault::kUnknownType, "type byte " + std::to_string(h[5]));
  FrameHeader fh;
  fh.type = static_cast<MsgType>(h[5]);
  fh.payload_len = bytes::get_u32_be(h.data() + 6);
  if (fh.payload_len > max_frame) {
    fail(WireFault::kOversize, "payload of " + std::to_string(fh.payload_len) + " bytes exceeds cap " +
                                   std::to_string(max_frame));
  }
  return fh;
}

WireMessage decode_message(std::span<const std::uint8_t> frame, std::size_t max_frame) {
  const FrameHeader fh = decode_header(frame, max_frame);
  const std::size_t want = kFrameHeaderBytes + fh.payload_len;
  if (frame.size() < want) {
    fail(WireFault::kTruncated, "frame has " + std::to_string(frame.size()) + " of " + std::to_string(want) + " bytes");
  }
  if (frame.size() > want) {
    fail(WireFault::kTrailingBytes, std::to_string(frame.size() - want) + " bytes after the payload");
  }
  return WireMessage{fh.type, bytes::Buffer(frame.begin() + kFrameHeaderBytes, frame.end())};
}

// ---------------------------------------------------------------------------

bytes::Buffer encode_tensors(std::span<const Tensor> tensors) {
  bytes::Buffer out;
  bytes::put_u32_le(out, static_cast<std::uint32_t>(tensors.size()));
  for (const Tensor& t : tensors) {
    std::size_t n = 1;
    for (std::uint32_t d : t.dims) n *= d;
    if (n != t.values.size()) throw ModelError("tensor values do not match its dims");
    bytes::put_u32_le(out, static_cast<std::uint32_t>(t.dims.size()));
    for (std::uint32_t d : t.dims) bytes::put_u32_le(out, d);
    for (double v : t.values) bytes::put_f64_le(out, v);
  }
  return out;
}

std::vector<Tensor> decode_tensors(std::span<const std::uint8_t> payload) {
  bytes::Reader in(payload);
  const auto count = in.u32_le();
  if (!count) fail(WireFault::kBadPayload, "missing tensor count");
  std::vector<Tensor> out;
  for (std::uint32_t i = 0; i < *count; ++i) {
    const auto rank = in.u32_le();
    if (!rank) fail(WireFault::kBadPayload, "tensor " + std::to_string(i) + " has no rank");
    if (*rank > 8) fail(WireFault::kBadPayload, "tensor " + std::to_string(i) + " has rank " + std::to_string(*rank));
    Tensor t;
    std::uint64_t n = 1;
    for (std::uint32_t r = 0; r < *rank; ++r) {
      const auto d = in.u32_le();
      if (!d) fail(WireFault::kBadPayload, "tensor " + std::to_string(i) + " dims truncated");
      t.dims.push_back(*d);
      n *= *d;
      if (n > in.remaining()) fail(WireFault::kBadPayload, "tensor " + std::to_string(i) + " larger than payload");
    }
    if (n * 8 > in.remaining()) fail(WireFault::kBadPayload, "tensor " + std::to_string(i) + " values truncated");
    t.values.reserve(static_cast<std::size_t>(n));
    for (std::uint64_t k = 0; k < n; ++k) t.values.push_back(*in.f64_le());
    out.push_back(std::move(t));
  }
  if (in.remaining() != 0) fail(WireFault::kBadPayload, std::to_string(in.remaining()) + " bytes after last tensor");
  return out;
}

namespace {

template <typename Derived>
Tensor to_tensor(const Eigen::MatrixBase<Derived>& m) {
  Tensor t;
  if constexpr (Derived::ColsAtCompileTime == 1) {
    t.dims = {static_cast<std::uint32_t>(m.size())};
  } else {
    t.dims = {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())};
  }
  t.values.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) t.values.push_back(m(r, c));
  return t;
}

Eigen::MatrixXd matrix_of(const Tensor& t, const char* what) {
  if (t.dims.size() != 2) throw ModelError(std::string(what) + " must be a rank-2 tensor");
  Eigen::MatrixXd m(t.dims[0], t.dims[1]);
  std::size_t k = 0;
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = t.values[k++];
  return m;
}

Eigen::VectorXd vector_of(const Tensor& t, const char* what) {
  if (t.dims.size() != 1) throw ModelError(std::string(what) + " must be a rank-1 tensor");
  return Eigen::Map<const Eigen::VectorXd>(t.values.data(), static_cast<Eigen::Index>(t.values.size()));
}

}  // namespace

std::vector<Tensor> model_tensors(const Model& model) {
  std::vector<Tensor> out;
  for_each_tensor(model, ParamScope::kAll, [&](const auto& t) { out.push_back(to_tensor(t)); });
  return out;
}

bytes::Buffer encode_model(const Model& model) { return encode_tensors(model_tensors(model)); }

Model model_from_tensors(const std::vector<Tensor>& t, TrainMode mode) {
  Model m;
  m.mode = mode;
  if (t.size() != 3 && t.size() != 5) {
    throw ModelError("model payload has " + std::to_string(t.size()) + " tensors, expected 3 or 5");
  }
  m.adapter.weight = matrix_of(t[0], "adapter");
  std::size_t k = 1;
  if (t.size() == 5) {
    m.classifier.pre_classifier = AffineLayer<double>{matrix_of(t[1], "pre-classifier weight"),
                                                      vector_of(t[2], "pre-classifier bias")};
    k = 3;
  }
  m.classifier.output_layer = AffineLayer<double>{matrix_of(t[k], "output weight"), vector_of(t[k + 1], "output bias")};
  const auto& o = m.classifier.output_layer;
  if (o.bias.size() != o.weight.rows()) throw ModelError("output bias does not match output weight");
  if (m.classifier.pre_classifier) {
    const auto& p = *m.classifier.pre_classifier;
    if (p.weight.rows() != p.weight.cols() || p.bias.size() != p.weight.rows() || o.weight.cols() != p.weight.rows()) {
      throw ModelError("pre-classifier shapes do not chain");
    }
  }
  if (m.adapter.weight.rows() != m.adapter.weight.cols()) throw ModelError("adapter must be square");
  return m;
}

Model decode_model_like(const Model& shape, std::span<const std::uint8_t> payload) {
  const std::vector<Tensor> tensors = decode_tensors(payload);
  const auto expected = tensor_shapes(shape);
  if (tensors.size() != expected.size()) {
    throw ModelError("model payload has " + std::to_string(tensors.size()) + " tensors, expected " +
                     std::to_string(expected.size()));
  }
  Eigen::VectorXd flat(param_count(shape));
  Eigen::Index pos = 0;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    if (tensors[i].dims != expected[i]) throw ModelError("tensor " + std::to_string(i) + " has the wrong shape");
    for (double v : tensors[i].values) flat(pos++) = v;
  }
  Model out = shape;
  assign_flat<double>(out, flat);
  return out;
}

void save_model(const Model& model, const std::filesystem::path& path) {
  const bytes::Buffer payload = encode_model(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
  if (!out) throw DataError("cannot write model file " + path.string());
}

Model load_model(const std::filesystem::path& path, TrainMode mode) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read model file " + path.string());
  const bytes::Buffer payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return model_from_tensors(decode_tensors(payload), mode);
  } catch (const WireError& e) {
    throw DataError("model file " + path.string() + ": " + e.what());
  }
}

}  // namespace fedcar
