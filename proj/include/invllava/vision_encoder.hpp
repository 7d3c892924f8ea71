// SPDX-License-Identifier: Apache-2.0
//
// Frozen stand-in for a pretrained vision backbone: a seeded two-stage
// tanh MLP applied to every patch independently.

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "invllava/config.hpp"
#include "invllava/tensor.hpp"

namespace invllava {

// p patches of raw_dim features each, stored patch-major.
struct PatchGrid {
  std::size_t n_patches = 0;
  std::size_t raw_dim = 0;
  std::vector<double> features;

  std::span<const double> patch(std::size_t i) const {
    return std::span<const double>(features).subspan(i * raw_dim, raw_dim);
  }
  bool operator==(const PatchGrid&) const = default;
};

enum class VisionStage { final, penultimate, both };

VisionStage vision_stage_for(const ModelConfig& cfg);

class VisionEncoder {
 public:
  VisionEncoder(std::size_t raw_dim, std::size_t encoder_dim,
                std::size_t n_patches, std::uint64_t seed);
  static VisionEncoder for_config(const ModelConfig& cfg, std::size_t raw_dim);

  // Visual embedding V_emb: encoder_dim x p, or 2*encoder_dim x p for
  // VisionStage::both (penultimate rows first, then final rows).
  Tensor encode(const PatchGrid& image, VisionStage stage) const;

  std::size_t raw_dim() const { return raw_dim_; }
  std::size_t encoder_dim() const { return encoder_dim_; }
  std::size_t n_patches() const { return n_patches_; }
  // First stage, encoder_dim x raw_dim; second stage, encoder_dim x encoder_dim.
  const std::vector<double>& stage1_weights() const { return w1_; }
  const std::vector<double>& stage2_weights() const { return w2_; }
  std::string checksum() const;

 private:
  std::size_t raw_dim_;
  std::size_t encoder_dim_;
  std::size_t n_patches_;
  std::vector<double> w1_;
  std::vector<double> w2_;
};

}  // namespace invllava
