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
#include <string>
#include <string_view>
#include <vector>

#include "fedcar/bytes.hpp"
#include "fedcar/error.hpp"
#include "fedcar/model.hpp"

namespace fedcar {

// Frame: "FCAR" | version (1 byte) | type (1 byte) | payload length (u32,
// big-endian) | payload. Numeric payload contents are little-endian.

inline constexpr std::uint8_t kWireVersion = 1;
inline constexpr std::size_t kFrameHeaderBytes = 10;
inline constexpr std::size_t kDefaultMaxFrame = std::size_t{256} << 20;

enum class MsgType : std::uint8_t {
  kHello = 1,
  kInit = 2,
  kGlobalModel = 3,
  kLocalModel = 4,
  kMetrics = 5,
  kShutdown = 6,
  kError = 7,
};

std::string_view to_string(MsgType t);

struct WireMessage {
  MsgType type = MsgType::kShutdown;
  bytes::Buffer payload;

  friend bool operator==(const WireMessage&, const WireMessage&) = default;
};

enum class WireFault {
  kBadMagic,
  kBadVersion,
  kUnknownType,
  kTruncated,
  kOversize,
  kTrailingBytes,
  kBadPayload,
};

std::string_view to_string(WireFault f);

class WireError : public NetworkError {
 public:
  WireError(WireFault fault, const std::string& what) : NetworkError(what), fault_(fault) {}
  WireFault fault() const { return fault_; }

 private:
  WireFault fault_;
};

struct FrameHeader {
  MsgType type = MsgType::kShutdown;
  std::uint32_t payload_len = 0;
};

bytes::Buffer encode_message(const WireMessage& msg);

/// Validates the 10 header bytes. Throws WireError.
FrameHeader decode_header(std::span<const std::uint8_t> header, std::size_t max_frame = kDefaultMaxFrame);

/// Decodes exactly one frame occupying all of `frame`. Throws WireError.
WireMessage decode_message(std::span<const std::uint8_t> frame, std::size_t max_frame = kDefaultMaxFrame);

// ---------------------------------------------------------------------------
// Tensor payloads: u32 count, then per tensor u32 rank, rank x u32 dims,
// prod(dims) f64 values in row-major order.

struct Tensor {
  std::vector<std::uint32_t> dims;
  std::vector<double> values;

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

bytes::Buffer encode_tensors(std::span<const Tensor> tensors);
std::vector<Tensor> decode_tensors(std::span<const std::uint8_t> payload);

/// All tensors of the model in canonical order (adapter, pre-classifier
/// weight and bias if present, output weight and bias).
std::vector<Tensor> model_tensors(const Model& model);
bytes::Buffer encode_model(const Model& model);

/// Fills a copy of `shape` from the payload; throws ModelError naming the
/// first tensor whose shape differs.
Model decode_model_like(const Model& shape, std::span<const std::uint8_t> payload);

/// Rebuilds a model from a standalone tensor list (3 tensors: no
/// pre-classifier; 5 tensors: with one).
Model model_from_tensors(const std::vector<Tensor>& tensors, TrainMode mode = TrainMode::kAdapterAndClassifier);

/// Model files hold exactly the tensor payload of a GLOBAL_MODEL frame.
void save_model(const Model& model, const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path, TrainMode mode = TrainMode::kAdapterAndClassifier);

}  // namespace fedcar
