// SPDX-License-Identifier: Apache-2.0
//
// Conventional comparator: visual features are projected into the LM's
// hidden space and placed directly into the vision slots of the residual
// stream; every decoder layer stays standard.

#pragma once

#include <string>
#include <vector>

#include "invllava/fusion_transformer.hpp"
#include "invllava/synth_data.hpp"

namespace invllava {

struct ProjectorWeights {
  Tensor w1;  // d_h x d_v
  Tensor b1;  // d_h
  Tensor w2;  // d_h x d_h, unused in linear mode
  Tensor b2;  // d_h, unused in linear mode
  // Single affine map instead of the two-layer GELU MLP.
  bool linear = false;

  // The output layer starts at zero, so a fresh projector contributes
  // nothing to the residual stream.
  static ProjectorWeights init(std::size_t d_v, std::size_t d_h, bool linear, Rng& rng);
  std::vector<NamedTensor> named(const std::string& prefix) const;
};

// d_v x p -> d_h x p, applied per patch.
Tensor project_visual_to_text(const Tensor& v_emb, const ProjectorWeights& w);

class LlavaBaseline {
 public:
  // LoRA adapters sit on the same layers as in the inverse model (outside
  // the fusion layer set) with identical initial values.
  LlavaBaseline(const BaseLM& base, const VisionEncoder& encoder, bool linear_projector);

  const ModelConfig& config() const { return base_.config(); }
  const BaseLM& base() const { return base_; }
  const VisionEncoder& encoder() const { return encoder_; }
  ProjectorWeights& projector() { return projector_; }
  const ProjectorWeights& projector() const { return projector_; }
  std::vector<LayerLora>& lora() { return lora_; }
  const std::vector<LayerLora>& lora() const { return lora_; }

  Tensor encode(const PatchGrid& image) const;
  Tensor forward(const PatchGrid* image, std::span<const TokenId> tokens) const;
  Tensor forward_with_embedding(const Tensor& v_emb, std::span<const TokenId> tokens) const;

  std::vector<NamedTensor> projector_parameters() const;
  std::vector<NamedTensor> trainable() const;  // projector + LoRA
  std::vector<NamedTensor> frozen() const;
  ParameterCount count_parameters() const;
  MacEstimate mac_estimate(std::size_t n_positions) const;

 private:
  std::vector<LayerAdapters> adapters() const;

  BaseLM base_;
  VisionEncoder encoder_;
  ProjectorWeights projector_;
  std::vector<LayerLora> lora_;
};

struct StageReport {
  std::size_t align_steps = 0;
  std::size_t align_samples = 0;
  std::size_t instruct_steps = 0;
  std::size_t instruct_samples = 0;
  std::size_t total_samples() const { return align_samples + instruct_samples; }
  std::vector<double> align_losses;
  std::vector<double> instruct_losses;
};

}  // namespace invllava
