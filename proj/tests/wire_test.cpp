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

#include "fedcar/rng.hpp"
#include "fedcar/wire.hpp"

namespace fedcar {
namespace {

WireFault fault_of(std::span<const std::uint8_t> frame, std::size_t cap = kDefaultMaxFrame) {
  try {
    decode_message(frame, cap);
  } catch (const WireError& e) {
    return e.fault();
  }
  ADD_FAILURE() << "frame decoded";
  return WireFault::kBadPayload;
}

TEST(Wire, ShutdownFrameBytes) {
  const bytes::Buffer f = encode_message({MsgType::kShutdown, {}});
  const bytes::Buffer want = {'F', 'C', 'A', 'R', 0x01, 0x06, 0x00, 0x00, 0x00, 0x00};
  EXPECT_EQ(f, want);
}

TEST(Wire, LengthIsBigEndian) {
  const bytes::Buffer f = encode_message({MsgType::kMetrics, bytes::Buffer(0x0102, 'x')});
  EXPECT_EQ(f[5], 0x05);
  EXPECT_EQ(f[6], 0x00);
  EXPECT_EQ(f[7], 0x00);
  EXPECT_EQ(f[8], 0x01);
  EXPECT_EQ(f[9], 0x02);
  EXPECT_EQ(f.size(), 10u + 0x0102);
}

TEST(Wire, RoundTripEveryType) {
  SplitMix64 rng(4);
  for (int t = 1; t <= 7; ++t) {
    bytes::Buffer payload(rng.next_u64() % 300);
    for (auto& b : payload) b = static_cast<std::uint8_t>(rng.next_u64());
    const WireMessage m{static_cast<MsgType>(t), payload};
    EXPECT_EQ(decode_message(encode_message(m)), m);
  }
}

TEST(Wire, DistinctFaults) {
  bytes::Buffer good = encode_message({MsgType::kHello, {1, 0, 0, 0}});

  auto magic = good;
  magic[0] = 'X';
  EXPECT_EQ(fault_of(magic), WireFault::kBadMagic);

  auto version = good;
  version[4] = 2;
  EXPECT_EQ(fault_of(version), WireFault::kBadVersion);

  auto type0 = good;
  type0[5] = 0;
  EXPECT_EQ(fault_of(type0), WireFault::kUnknownType);
  auto type8 = good;
  type8[5] = 8;
  EXPECT_EQ(fault_of(type8), WireFault::kUnknownType);

  EXPECT_EQ(fault_of(std::span(good).first(good.size() - 1)), WireFault::kTruncated);
  EXPECT_EQ(fault_of(std::span(good).first(7)), WireFault::kTruncated);

  EXPECT_EQ(fault_of(good, 3), WireFault::kOversize);
  auto huge = good;
  huge[6] = 0xFF;
  EXPECT_EQ(fault_of(huge), WireFault::kOversize);

  auto trailing = good;
  trailing.push_back(0);
  EXPECT_EQ(fault_of(trailing), WireFault::kTrailingBytes);
}

TEST(Wire, RandomHeadersNeverCrash) {
  SplitMix64 rng(77);
  for (int trial = 0; trial < 20000; ++trial) {
    bytes::Buffer f(rng.next_u64() % 24);
    for (auto& b : f) b = static_cast<std::uint8_t>(rng.next_u64());
    if (trial % 2 == 0 && f.size() >= 6) {
      f[0] = 'F';
      f[1] = 'C';
      f[2] = 'A';
      f[3] = 'R';
      f[4] = 1;
    }
    try {
      const WireMessage m = decode_message(f, 64);
      EXPECT_EQ(encode_message(m), f);
    } catch (const WireError&) {
    }
  }
}

TEST(Tensors, LayoutExample) {
  const std::vector<Tensor> t = {{{2}, {1.0, -2.0}}};
  const bytes::Buffer b = encode_tensors(t);
  ASSERT_EQ(b.size(), 4u + 4 + 4 + 16);
  EXPECT_EQ(bytes::get_u32_le(b.data()), 1u);
  EXPECT_EQ(bytes::get_u32_le(b.data() + 4), 1u);
  EXPECT_EQ(bytes::get_u32_le(b.data() + 8), 2u);
  EXPECT_EQ(bytes::get_f64_le(b.data() + 12), 1.0);
  EXPECT_EQ(bytes::get_f64_le(b.data() + 20), -2.0);
  EXPECT_EQ(decode_tensors(b), t);
}

TEST(Tensors, TruncationAndTrailingAreErrors) {
  const std::vector<Tensor> t = {{{2, 2}, {1, 2, 3, 4}}, {{1}, {5}}};
  const bytes::Buffer b = encode_tensors(t);
  for (std::size_t n = 0; n < b.size(); ++n) {
    EXPECT_THROW(decode_tensors(std::span(b).first(n)), WireError) << n;
  }
  auto extra = b;
  extra.push_back(0);
  EXPECT_THROW(decode_tensors(extra), WireError);
}

TEST(Tensors, ModelRoundTripIsBitwise) {
  for (bool pre : {false, true}) {
    const Model m = init_model<double>(4, 3, 5, pre, 0.1, TrainMode::kAdapterAndClassifier, 11);
    const bytes::Buffer b = encode_model(m);
    EXPECT_TRUE(bitwise_equal(decode_model_like(m, b), m));
    const Model rebuilt = model_from_tensors(decode_tensors(b));
    EXPECT_TRUE(bitwise_equal(rebuilt, m));
    EXPECT_EQ(rebuilt.classifier.pre_classifier.has_value(), pre);
  }
}

TEST(Tensors, WrongShapeIsAModelError) {
  const Model a = init_model<double>(4, 3, 5, false, 0.0, TrainMode::kAdapterAndClassifier, 1);
  const Model b = init_model<double>(4, 3, 4, false, 0.0, TrainMode::kAdapterAndClassifier, 1);
  EXPECT_THROW(decode_model_like(a, encode_model(b)), ModelError);
  const Model c = init_model<double>(4, 3, 5, true, 0.0, TrainMode::kAdapterAndClassifier, 1);
  EXPECT_THROW(decode_model_like(a, encode_model(c)), ModelError);
}

}  // namespace
}  // namespace fedcar
