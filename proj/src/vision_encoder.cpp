// SPDX-License-Identifier: Apache-2.0

#include "invllava/vision_encoder.hpp"

#include <cmath>

#include "invllava/checkpoint.hpp"
#include "invllava/random.hpp"

namespace invllava {

VisionStage vision_stage_for(const ModelConfig& cfg) {
  if (cfg.hd_mode) return VisionStage::both;
  return cfg.penultimate_features ? VisionStage::penultimate : VisionStage::final;
}

VisionEncoder::VisionEncoder(std::size_t raw_dim, std::size_t encoder_dim,
                             std::size_t n_patches, std::uint64_t seed)
    : raw_dim_(raw_dim),
      encoder_dim_(encoder_dim),
      n_patches_(n_patches),
      w1_(encoder_dim * raw_dim),
      w2_(encoder_dim * encoder_dim) {
  if (raw_dim == 0 || encoder_dim == 0) {
    throw DimensionError("VisionEncoder: dimensions must be positive");
  }
  Rng rng(seed, Stream::encoder);
  const double s1 = 1.0 / std::sqrt(static_cast<double>(raw_dim));
  const double s2 = 1.0 / std::sqrt(static_cast<double>(encoder_dim));
  for (double& w : w1_) w = rng.normal(s1);
  for (double& w : w2_) w = rng.normal(s2);
}

VisionEncoder VisionEncoder::for_config(const ModelConfig& cfg, std::size_t raw_dim) {
  return VisionEncoder(raw_dim, cfg.encoder_dim(), cfg.n_patches, cfg.seed);
}

Tensor VisionEncoder::encode(const PatchGrid& image, VisionStage stage) const {
  if (image.n_patches != n_patches_) {
    throw DimensionError("encode: image has " + std::to_string(image.n_patches) +
                         " patches, encoder expects " + std::to_string(n_patches_));
  }
  if (image.raw_dim != raw_dim_ || image.features.size() != n_patches_ * raw_dim_) {
    throw DimensionError("encode: patch feature size " + std::to_string(image.raw_dim) +
                         " does not match encoder input " + std::to_string(raw_dim_));
  }
  const std::size_t d = encoder_dim_, p = n_patches_;
  std::vector<double> hidden(d * p), out(d * p);
  for (std::size_t j = 0; j < p; ++j) {
    auto x = image.patch(j);
    for (std::size_t r = 0; r < d; ++r) {
      double acc = 0.0;
      for (std::size_t k = 0; k < raw_dim_; ++k) acc += w1_[r * raw_dim_ + k] * x[k];
      hidden[r * p + j] = std::tanh(acc);
    }
  }
  for (std::size_t j = 0; j < p; ++j) {
    for (std::size_t r = 0; r < d; ++r) {
      double acc = 0.0;
      for (std::size_t k = 0; k < d; ++k) acc += w2_[r * d + k] * hidden[k * p + j];
      out[r * p + j] = acc;
    }
  }
  switch (stage) {
    case VisionStage::final:
      return Tensor::from({d, p}, std::move(out));
    case VisionStage::penultimate:
      return Tensor::from({d, p}, std::move(hidden));
    case VisionStage::both:
      hidden.insert(hidden.end(), out.begin(), out.end());
      return Tensor::from({2 * d, p}, std::move(hidden));
  }
  throw ContractError("encode: unknown stage");
}

std::string VisionEncoder::checksum() const {
  std::vector<double> all(w1_);
  all.insert(all.end(), w2_.begin(), w2_.end());
  return sha256_hex(all);
}

}  // namespace invllava
