// SPDX-License-Identifier: Apache-2.0
//
// Decoder-only LM with vision fused into the Q/K/V projections of selected
// layers. Hidden states are feature-major: d_h x N, one column per position.
//
// Position indices are 0-based here; the vision slots come first
// (0..p-1) and the text slots follow (p..N-1).

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "invllava/checkpoint.hpp"
#include "invllava/config.hpp"
#include "invllava/random.hpp"
#include "invllava/tensor.hpp"
#include "invllava/vision_encoder.hpp"

namespace invllava {

class CapacityError : public Error {
 public:
  using Error::Error;
};

struct SlotLayout {
  std::size_t total = 0;
  std::vector<std::size_t> vis;
  std::vector<std::size_t> text;
};

SlotLayout build_slot_layout(std::size_t n_patches, std::size_t n_text);

// Vision slots see each other; text slots see earlier text and all vision;
// vision never sees text.
AttentionMask build_attention_mask(const SlotLayout& layout);

struct PaddedStreams {
  Tensor t_pad;  // d_v x N, zero at vision slots
  Tensor v_pad;  // d_v x N, zero at text slots
};

PaddedStreams build_padded_streams(const Tensor& t_proj, const Tensor& v_emb,
                                   const SlotLayout& layout);

struct FusionLayerParams {
  Tensor w_t2v;       // d_v x d_h
  Tensor b_t2v;       // d_v
  Tensor w_concat_q;  // d_h x 2d_v
  Tensor w_concat_k;
  Tensor w_concat_v;
  Tensor alpha_q;  // scalars
  Tensor alpha_k;
  Tensor alpha_v;

  // W_t2v ~ N(0, 1/sqrt(d_h)), W_concat = 0, alpha = 1.
  static FusionLayerParams init(std::size_t d_h, std::size_t d_v, Rng& rng);
  std::vector<NamedTensor> named(const std::string& prefix) const;
};

// W_t2v . H + b_t2v over every column.
Tensor project_text_to_visual(const Tensor& h, const FusionLayerParams& fp);

struct LoraAdapter {
  Tensor a;  // r x d_h
  Tensor b;  // d_h x r, zero at init
  double scale = 1.0;

  static LoraAdapter init(std::size_t d_h, std::size_t rank, double scale, Rng& rng);
  // scale . B . (A . x)
  Tensor apply(const Tensor& x) const;
};

// Adapters on W_Q and W_V of one layer.
struct LayerLora {
  LoraAdapter q;
  LoraAdapter v;
  std::vector<NamedTensor> named(const std::string& prefix) const;
};

struct BaseLayerWeights {
  Tensor ln1_gain, ln1_bias;
  Tensor w_q, w_k, w_v, w_o;
  Tensor ln2_gain, ln2_bias;
  Tensor w_ff1, b_ff1;  // 4d_h x d_h, 4d_h
  Tensor w_ff2, b_ff2;  // d_h x 4d_h, d_h

  std::vector<NamedTensor> named(const std::string& prefix) const;
};

struct Projections {
  Tensor q, k, v;
};

// Q = W_Q X + alpha_Q W_concat_Q [T_pad; V_pad], likewise K and V.
Projections fused_qkv(const Tensor& x, const PaddedStreams& streams, const BaseLayerWeights& base,
                      const FusionLayerParams& fp);

// Multi-head scaled dot-product attention mixed by W_O. A row with no
// visible key falls back to attending to its own position.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionMask& mask,
                 std::size_t n_heads, const Tensor& w_o);

// Sinusoidal encodings, d_h x n_positions.
Tensor sinusoidal_positions(std::size_t d_h, std::size_t n_positions);

// Hook fired on every fusion layer (1-based, as in fusion_layers) with the
// padded streams it consumed.
class ForwardObserver {
 public:
  virtual ~ForwardObserver() = default;
  virtual void on_streams(std::size_t layer, const SlotLayout& layout,
                          const PaddedStreams& streams) = 0;
};

// Per-layer additions to the frozen decoder; null members are absent.
struct LayerAdapters {
  const FusionLayerParams* fusion = nullptr;
  const LayerLora* lora = nullptr;
};

class BaseLM {
 public:
  BaseLM() = default;
  explicit BaseLM(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }
  const Tensor& token_embedding() const { return embedding_; }
  const Tensor& positions() const { return positions_; }
  const std::vector<BaseLayerWeights>& layers() const { return layers_; }
  const Tensor& lm_head() const { return lm_head_; }
  const Tensor& lm_head_bias() const { return lm_head_bias_; }

  // Marks every weight trainable (pretraining) or frozen.
  void set_trainable(bool on);
  std::vector<NamedTensor> named() const;
  std::vector<Tensor> parameters() const;
  std::size_t parameter_count() const;
  std::string checksum() const;

  // d_h x N: token embeddings at text slots plus positional encodings at all
  // slots, so vision slots start out content-free.
  Tensor initial_hidden(std::span<const TokenId> tokens, const SlotLayout& layout) const;
  // Runs the decoder stack over h0 and returns |V| x N logits.
  Tensor decode(const Tensor& h0, const SlotLayout& layout, std::span<const LayerAdapters> adapters,
                const Tensor* v_emb = nullptr, ForwardObserver* observer = nullptr) const;
  // Plain text run with n_vision_slots content-free slots in front.
  Tensor forward_text(std::span<const TokenId> tokens, std::size_t n_vision_slots = 0) const;

  void check_tokens(std::span<const TokenId> tokens, std::size_t n_vision_slots) const;

 private:
  ModelConfig cfg_;
  Tensor embedding_;  // |V| x d_h
  Tensor positions_;  // d_h x N_max, fixed
  std::vector<BaseLayerWeights> layers_;
  Tensor lm_head_;       // |V| x d_h
  Tensor lm_head_bias_;  // |V|
};

struct ParameterCount {
  std::size_t trainable = 0;
  std::size_t frozen = 0;
  std::size_t total() const { return trainable + frozen; }
};

// Multiply-accumulates of one forward pass over N positions.
struct MacEstimate {
  std::uint64_t per_standard_layer = 0;
  std::uint64_t fusion_extra_per_layer = 0;
  std::uint64_t lora_per_layer = 0;
  std::uint64_t lm_head = 0;
  std::uint64_t total = 0;
};

class InverseLlava {
 public:
  // Shares the frozen base weights; fusion and LoRA parameters are freshly
  // seeded from the config seed.
  InverseLlava(const BaseLM& base, const VisionEncoder& encoder);

  const ModelConfig& config() const { return base_.config(); }
  const BaseLM& base() const { return base_; }
  const VisionEncoder& encoder() const { return encoder_; }
  std::vector<FusionLayerParams>& fusion() { return fusion_; }
  const std::vector<FusionLayerParams>& fusion() const { return fusion_; }
  // Indexed by layer; empty adapters on fusion layers.
  std::vector<LayerLora>& lora() { return lora_; }
  const std::vector<LayerLora>& lora() const { return lora_; }

  Tensor encode(const PatchGrid& image) const;
  // |V| x N logits; a null image gives the p = 0 layout.
  Tensor forward(const PatchGrid* image, std::span<const TokenId> tokens,
                 ForwardObserver* observer = nullptr) const;
  // Same, with a caller-supplied visual embedding (e.g. a probe leaf).
  Tensor forward_with_embedding(const Tensor& v_emb, std::span<const TokenId> tokens,
                                ForwardObserver* observer = nullptr) const;

  std::vector<NamedTensor> trainable() const;
  std::vector<NamedTensor> frozen() const;
  ParameterCount count_parameters() const;
  MacEstimate mac_estimate(std::size_t n_positions) const;

 private:
  std::vector<LayerAdapters> adapters() const;

  BaseLM base_;
  VisionEncoder encoder_;
  std::vector<FusionLayerParams> fusion_;
  std::vector<LayerLora> lora_;
};

// Cross-entropy of next-token prediction over text slots; the target of
// text slot i is token i+1, counted when loss_mask[i+1] is set.
Tensor next_token_loss(const Tensor& logits, const SlotLayout& layout,
                       std::span<const TokenId> tokens, const std::vector<bool>& loss_mask);

// Greedy prediction of every masked target; true when all are correct.
bool predicts_answer(const Tensor& logits, const SlotLayout& layout,
                     std::span<const TokenId> tokens, const std::vector<bool>& loss_mask);

}  // namespace invllava
