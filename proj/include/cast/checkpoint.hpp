// Copyright 2026 The CAST Authors. All rights reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Binary checkpoints: "CASTCKPT", u32 version, u32 tensor count, then per
// tensor a u16 name length, the name, a u8 rank, u32 extents and raw f32
// data. All integers little-endian.

#pragma once

#include "cast/cast_loss.hpp"

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace cast {

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NamedTensor {
  std::string name;
  ad::TensorF value;
};

void save_tensors(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_tensors(const std::filesystem::path& path);

/// Query and key parameters, optimizer velocity, queue and counters.
std::vector<NamedTensor> pack_train_state(const TrainState& state);
/// Inverse of pack_train_state. `encoder` fixes the expected layout.
TrainState unpack_train_state(const std::vector<NamedTensor>& tensors, const EncoderConfig& encoder, float momentum);

void save_checkpoint(const std::filesystem::path& path, const TrainState& state);
TrainState load_checkpoint(const std::filesystem::path& path, const EncoderConfig& encoder, float momentum);

}  // namespace cast
