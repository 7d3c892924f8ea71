// SPDX-License-Identifier: Apache-2.0
//
// Named-tensor checkpoint container and content checksums.

#pragma once

#include <span>
#include <string>
#include <vector>

#include "invllava/tensor.hpp"

namespace invllava {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// Hex SHA-256 over the raw little-endian bytes of the values.
std::string sha256_hex(std::span<const double> values);
// Hex SHA-256 over names, shapes and values, in order.
std::string checksum(std::span<const NamedTensor> tensors);

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;
  std::string config_text;
  std::vector<NamedTensor> tensors;
};

// Binary layout (little-endian): "IVLLCKPT", u32 version, u64 config length,
// config bytes, u64 tensor count, then per tensor: u64 name length, name,
// u64 rank, u64 extents[rank], f64 values[numel].
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

// Copies values of same-named tensors from src into dst. Every dst name must
// be present in src with an identical shape.
void restore_tensors(std::span<const NamedTensor> src, std::span<NamedTensor> dst);

}  // namespace invllava
