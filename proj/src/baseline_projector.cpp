// SPDX-License-Identifier: Apache-2.0

#include "invllava/baseline_projector.hpp"

#include <cmath>

namespace invllava {

ProjectorWeights ProjectorWeights::init(std::size_t d_v, std::size_t d_h, bool linear, Rng& rng) {
  ProjectorWeights w;
  w.linear = linear;
  if (linear) {
    w.w1 = Tensor::zeros({d_h, d_v}, true);
  } else {
    w.w1 = gaussian({d_h, d_v}, 1.0 / std::sqrt(static_cast<double>(d_v)), rng, true);
    w.w2 = Tensor::zeros({d_h, d_h}, true);
    w.b2 = Tensor::zeros({d_h}, true);
  }
  w.b1 = Tensor::zeros({d_h}, true);
  return w;
}

std::vector<NamedTensor> ProjectorWeights::named(const std::string& prefix) const {
  std::vector<NamedTensor> out = {{prefix + "w1", w1}, {prefix + "b1", b1}};
  if (!linear) {
    out.push_back({prefix + "w2", w2});
    out.push_back({prefix + "b2", b2});
  }
  return out;
}

Tensor project_visual_to_text(const Tensor& v_emb, const ProjectorWeights& w) {
  if (v_emb.rows() != w.w1.cols()) {
    throw DimensionError("project_visual_to_text: visual features " + shape_string(v_emb.shape()) +
                         " vs projector input " + shape_string(w.w1.shape()));
  }
  const Tensor first = add_column_bias(matmul(w.w1, v_emb), w.b1);
  if (w.linear) return first;
  return add_column_bias(matmul(w.w2, gelu(first)), w.b2);
}

LlavaBaseline::LlavaBaseline(const BaseLM& base, const VisionEncoder& encoder,
                             bool linear_projector)
    : base_(base), encoder_(encoder) {
  const auto& cfg = base.config();
  Rng rng(cfg.seed, Stream::projector);
  projector_ = ProjectorWeights::init(cfg.d_v, cfg.d_h, linear_projector, rng);
  lora_.resize(cfg.n_layers);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    if (cfg.is_fusion_layer(l + 1)) continue;
    Rng lr(cfg.seed, Stream::lora, l);
    lora_[l].q = LoraAdapter::init(cfg.d_h, cfg.lora_rank, cfg.lora_scale(), lr);
    lora_[l].v = LoraAdapter::init(cfg.d_h, cfg.lora_rank, cfg.lora_scale(), lr);
  }
}

std::vector<LayerAdapters> LlavaBaseline::adapters() const {
  std::vector<LayerAdapters> out(lora_.size());
  for (std::size_t l = 0; l < lora_.size(); ++l) {
    if (lora_[l].q.a.defined()) out[l].lora = &lora_[l];
  }
  return out;
}

Tensor LlavaBaseline::encode(const PatchGrid& image) const {
  return encoder_.encode(image, vision_stage_for(config()));
}

Tensor LlavaBaseline::forward(const PatchGrid* image, std::span<const TokenId> tokens) const {
  if (image == nullptr) {
    base_.check_tokens(tokens, 0);
    const SlotLayout layout = build_slot_layout(0, tokens.size());
    const auto ads = adapters();
    return base_.decode(base_.initial_hidden(tokens, layout), layout, ads);
  }
  return forward_with_embedding(encode(*image), tokens);
}

Tensor LlavaBaseline::forward_with_embedding(const Tensor& v_emb,
                                             std::span<const TokenId> tokens) const {
  base_.check_tokens(tokens, v_emb.cols());
  const SlotLayout layout = build_slot_layout(v_emb.cols(), tokens.size());
  const Tensor visual = project_visual_to_text(v_emb, projector_);
  const Tensor h0 =
      add(base_.initial_hidden(tokens, layout), scatter_columns(visual, layout.vis, layout.total));
  const auto ads = adapters();
  return base_.decode(h0, layout, ads);
}

std::vector<NamedTensor> LlavaBaseline::projector_parameters() const {
  return projector_.named("projector.");
}

std::vector<NamedTensor> LlavaBaseline::trainable() const {
  auto out = projector_parameters();
  for (std::size_t l = 0; l < lora_.size(); ++l) {
    auto part = lora_[l].named("layer" + std::to_string(l + 1) + ".");
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

std::vector<NamedTensor> LlavaBaseline::frozen() const { return base_.named(); }

ParameterCount LlavaBaseline::count_parameters() const {
  ParameterCount c;
  for (const auto& nt : trainable()) c.trainable += nt.tensor.numel();
  for (const auto& nt : frozen()) c.frozen += nt.tensor.numel();
  return c;
}

MacEstimate LlavaBaseline::mac_estimate(std::size_t n) const {
  const auto& cfg = config();
  const std::uint64_t d = cfg.d_h, dv = cfg.d_v, N = n, r = cfg.lora_rank, p = cfg.n_patches;
  MacEstimate m;
  m.per_standard_layer = 4 * d * d * N + 2 * d * N * N + 8 * d * d * N;
  // The projector runs once per image, ahead of the decoder.
  m.fusion_extra_per_layer = 0;
  m.lora_per_layer = 2 * (2 * r * d * N);
  m.lm_head = cfg.vocab_size * d * N;
  const std::uint64_t projector = dv * d * p + (projector_.linear ? 0 : d * d * p);
  std::uint64_t with_lora = 0;
  for (const auto& l : lora_) with_lora += l.q.a.defined() ? 1 : 0;
  m.total = cfg.n_layers * m.per_standard_layer + with_lora * m.lora_per_layer + m.lm_head +
            projector;
  return m;
}

}  // namespace invllava
