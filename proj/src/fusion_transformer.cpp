// SPDX-License-Identifier: Apache-2.0

#include "invllava/fusion_transformer.hpp"

#include <algorithm>
#include <cmath>

namespace invllava {

SlotLayout build_slot_layout(std::size_t n_patches, std::size_t n_text) {
  if (n_text == 0) throw ContractError("build_slot_layout: at least one text position required");
  SlotLayout layout;
  layout.total = n_patches + n_text;
  layout.vis.resize(n_patches);
  layout.text.resize(n_text);
  for (std::size_t i = 0; i < n_patches; ++i) layout.vis[i] = i;
  for (std::size_t i = 0; i < n_text; ++i) layout.text[i] = n_patches + i;
  return layout;
}

AttentionMask build_attention_mask(const SlotLayout& layout) {
  AttentionMask mask(layout.total);
  for (auto q : layout.vis) {
    for (auto k : layout.vis) mask.set(q, k, true);
  }
  for (std::size_t i = 0; i < layout.text.size(); ++i) {
    const auto q = layout.text[i];
    for (auto k : layout.vis) mask.set(q, k, true);
    for (std::size_t j = 0; j <= i; ++j) mask.set(q, layout.text[j], true);
  }
  return mask;
}

PaddedStreams build_padded_streams(const Tensor& t_proj, const Tensor& v_emb,
                                   const SlotLayout& layout) {
  if (t_proj.cols() != layout.total) {
    throw DimensionError("build_padded_streams: projected text has " +
                         std::to_string(t_proj.cols()) + " columns, layout has " +
                         std::to_string(layout.total));
  }
  if (v_emb.cols() != layout.vis.size()) {
    throw DimensionError("build_padded_streams: " + std::to_string(v_emb.cols()) +
                         " visual tokens for " + std::to_string(layout.vis.size()) +
                         " vision slots");
  }
  if (v_emb.rows() != t_proj.rows()) {
    throw DimensionError("build_padded_streams: visual width " + shape_string(v_emb.shape()) +
                         " vs projected text " + shape_string(t_proj.shape()));
  }
  PaddedStreams s;
  s.t_pad = scatter_columns(gather_columns(t_proj, layout.text), layout.text, layout.total);
  s.v_pad = scatter_columns(v_emb, layout.vis, layout.total);
  return s;
}

FusionLayerParams FusionLayerParams::init(std::size_t d_h, std::size_t d_v, Rng& rng) {
  FusionLayerParams fp;
  fp.w_t2v = gaussian({d_v, d_h}, 1.0 / std::sqrt(static_cast<double>(d_h)), rng, true);
  fp.b_t2v = Tensor::zeros({d_v}, true);
  fp.w_concat_q = Tensor::zeros({d_h, 2 * d_v}, true);
  fp.w_concat_k = Tensor::zeros({d_h, 2 * d_v}, true);
  fp.w_concat_v = Tensor::zeros({d_h, 2 * d_v}, true);
  fp.alpha_q = Tensor::scalar(1.0, true);
  fp.alpha_k = Tensor::scalar(1.0, true);
  fp.alpha_v = Tensor::scalar(1.0, true);
  return fp;
}

std::vector<NamedTensor> FusionLayerParams::named(const std::string& prefix) const {
  return {{prefix + "w_t2v", w_t2v},           {prefix + "b_t2v", b_t2v},
          {prefix + "w_concat_q", w_concat_q}, {prefix + "w_concat_k", w_concat_k},
          {prefix + "w_concat_v", w_concat_v}, {prefix + "alpha_q", alpha_q},
          {prefix + "alpha_k", alpha_k},       {prefix + "alpha_v", alpha_v}};
}

Tensor project_text_to_visual(const Tensor& h, const FusionLayerParams& fp) {
  return add_column_bias(matmul(fp.w_t2v, h), fp.b_t2v);
}

LoraAdapter LoraAdapter::init(std::size_t d_h, std::size_t rank, double scale, Rng& rng) {
  LoraAdapter ad;
  ad.a = gaussian({rank, d_h}, 1.0 / std::sqrt(static_cast<double>(d_h)), rng, true);
  ad.b = Tensor::zeros({d_h, rank}, true);
  ad.scale = scale;
  return ad;
}

Tensor LoraAdapter::apply(const Tensor& x) const {
  return invllava::scale(matmul(b, matmul(a, x)), scale);
}

std::vector<NamedTensor> LayerLora::named(const std::string& prefix) const {
  if (!q.a.defined()) return {};
  return {{prefix + "lora_q_a", q.a},
          {prefix + "lora_q_b", q.b},
          {prefix + "lora_v_a", v.a},
          {prefix + "lora_v_b", v.b}};
}

std::vector<NamedTensor> BaseLayerWeights::named(const std::string& prefix) const {
  return {{prefix + "ln1_gain", ln1_gain}, {prefix + "ln1_bias", ln1_bias},
          {prefix + "w_q", w_q},           {prefix + "w_k", w_k},
          {prefix + "w_v", w_v},           {prefix + "w_o", w_o},
          {prefix + "ln2_gain", ln2_gain}, {prefix + "ln2_bias", ln2_bias},
          {prefix + "w_ff1", w_ff1},       {prefix + "b_ff1", b_ff1},
          {prefix + "w_ff2", w_ff2},       {prefix + "b_ff2", b_ff2}};
}

Projections fused_qkv(const Tensor& x, const PaddedStreams& streams, const BaseLayerWeights& base,
                      const FusionLayerParams& fp) {
  const Tensor joint = concat_features(streams.t_pad, streams.v_pad);
  Projections out;
  out.q = add(matmul(base.w_q, x), scale_by(fp.alpha_q, matmul(fp.w_concat_q, joint)));
  out.k = add(matmul(base.w_k, x), scale_by(fp.alpha_k, matmul(fp.w_concat_k, joint)));
  out.v = add(matmul(base.w_v, x), scale_by(fp.alpha_v, matmul(fp.w_concat_v, joint)));
  return out;
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionMask& mask,
                 std::size_t n_heads, const Tensor& w_o) {
  const std::size_t d = q.rows();
  if (n_heads == 0 || d % n_heads != 0) {
    throw DimensionError("attention: " + std::to_string(n_heads) + " heads do not divide " +
                         std::to_string(d));
  }
  if (k.shape() != q.shape() || v.shape() != q.shape()) {
    throw DimensionError("attention: Q/K/V shapes differ");
  }
  const std::size_t dk = d / n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dk));
  std::vector<Tensor> heads;
  heads.reserve(n_heads);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const Tensor qh = slice_rows(q, h * dk, dk);
    const Tensor kh = slice_rows(k, h * dk, dk);
    const Tensor vh = slice_rows(v, h * dk, dk);
    // scores[query, key]
    const Tensor scores = scale(matmul(transpose(qh), kh), inv_sqrt);
    const Tensor probs = masked_softmax_rows(scores, mask);
    heads.push_back(matmul(vh, transpose(probs)));
  }
  return matmul(w_o, concat_rows(heads));
}

Tensor sinusoidal_positions(std::size_t d_h, std::size_t n_positions) {
  std::vector<double> v(d_h * n_positions);
  for (std::size_t pos = 0; pos < n_positions; ++pos) {
    for (std::size_t i = 0; i < d_h; ++i) {
      const double freq =
          std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(d_h));
      const double angle = static_cast<double>(pos) * freq;
      v[i * n_positions + pos] = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return Tensor::from({d_h, n_positions}, std::move(v));
}

// ---- base LM ----

BaseLM::BaseLM(const ModelConfig& cfg) : cfg_(cfg) {
  require_valid(cfg);
  const std::size_t d = cfg.d_h, f = 4 * cfg.d_h, V = cfg.vocab_size;
  Rng rng(cfg.seed, Stream::base_lm);
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  const double sf = 1.0 / std::sqrt(static_cast<double>(f));
  embedding_ = gaussian({V, d}, 1.0, rng);
  positions_ = sinusoidal_positions(d, cfg.max_positions());
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    BaseLayerWeights w;
    w.ln1_gain = Tensor::full({d}, 1.0);
    w.ln1_bias = Tensor::zeros({d});
    w.w_q = gaussian({d, d}, sd, rng);
    w.w_k = gaussian({d, d}, sd, rng);
    w.w_v = gaussian({d, d}, sd, rng);
    w.w_o = gaussian({d, d}, sd, rng);
    w.ln2_gain = Tensor::full({d}, 1.0);
    w.ln2_bias = Tensor::zeros({d});
    w.w_ff1 = gaussian({f, d}, sd, rng);
    w.b_ff1 = Tensor::zeros({f});
    w.w_ff2 = gaussian({d, f}, sf, rng);
    w.b_ff2 = Tensor::zeros({d});
    layers_.push_back(std::move(w));
  }
  lm_head_ = gaussian({V, d}, sd, rng);
  lm_head_bias_ = Tensor::zeros({V});
}

void BaseLM::set_trainable(bool on) {
  for (auto& nt : named()) nt.tensor.set_requires_grad(on);
}

std::vector<NamedTensor> BaseLM::named() const {
  std::vector<NamedTensor> out = {{"embedding", embedding_}};
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    auto part = layers_[l].named("layer" + std::to_string(l + 1) + ".");
    out.insert(out.end(), part.begin(), part.end());
  }
  out.push_back({"lm_head", lm_head_});
  out.push_back({"lm_head_bias", lm_head_bias_});
  return out;
}

std::vector<Tensor> BaseLM::parameters() const {
  std::vector<Tensor> out;
  for (auto& nt : named()) out.push_back(nt.tensor);
  return out;
}

std::size_t BaseLM::parameter_count() const {
  std::size_t n = 0;
  for (const auto& nt : named()) n += nt.tensor.numel();
  return n;
}

std::string BaseLM::checksum() const { return invllava::checksum(named()); }

void BaseLM::check_tokens(std::span<const TokenId> tokens, std::size_t n_vision_slots) const {
  if (tokens.empty()) throw ContractError("forward: empty token sequence");
  if (tokens.size() > cfg_.max_text_len || n_vision_slots > cfg_.n_patches) {
    throw CapacityError("forward: " + std::to_string(n_vision_slots) + " vision + " +
                        std::to_string(tokens.size()) + " text positions exceed capacity " +
                        std::to_string(cfg_.n_patches) + " + " +
                        std::to_string(cfg_.max_text_len));
  }
  for (auto t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= cfg_.vocab_size) {
      throw IndexError("forward: token id " + std::to_string(t) + " outside vocabulary of " +
                       std::to_string(cfg_.vocab_size));
    }
  }
}

Tensor BaseLM::initial_hidden(std::span<const TokenId> tokens, const SlotLayout& layout) const {
  std::vector<std::size_t> cols(layout.total);
  for (std::size_t i = 0; i < cols.size(); ++i) cols[i] = i;
  const Tensor pos = gather_columns(positions_, cols);
  const Tensor text = scatter_columns(embedding(embedding_, tokens), layout.text, layout.total);
  return add(text, pos);
}

Tensor BaseLM::decode(const Tensor& h0, const SlotLayout& layout,
                      std::span<const LayerAdapters> adapters, const Tensor* v_emb,
                      ForwardObserver* observer) const {
  if (!adapters.empty() && adapters.size() != layers_.size()) {
    throw ContractError("decode: adapter list does not match the layer count");
  }
  const AttentionMask mask = build_attention_mask(layout);
  Tensor h = h0;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& w = layers_[l];
    const LayerAdapters ad = adapters.empty() ? LayerAdapters{} : adapters[l];
    const Tensor x = layer_norm(h, w.ln1_gain, w.ln1_bias);
    Projections p;
    if (ad.fusion != nullptr) {
      const Tensor t_proj = project_text_to_visual(x, *ad.fusion);
      const Tensor vis = v_emb != nullptr ? *v_emb : Tensor::zeros({t_proj.rows(), 0});
      const PaddedStreams streams = build_padded_streams(t_proj, vis, layout);
      if (observer != nullptr) observer->on_streams(l + 1, layout, streams);
      p = fused_qkv(x, streams, w, *ad.fusion);
    } else {
      p.q = matmul(w.w_q, x);
      p.k = matmul(w.w_k, x);
      p.v = matmul(w.w_v, x);
      if (ad.lora != nullptr && ad.lora->q.a.defined()) {
        p.q = add(p.q, ad.lora->q.apply(x));
        p.v = add(p.v, ad.lora->v.apply(x));
      }
    }
    h = add(h, attention(p.q, p.k, p.v, mask, cfg_.n_heads, w.w_o));
    const Tensor x2 = layer_norm(h, w.ln2_gain, w.ln2_bias);
    const Tensor ff = add_column_bias(
        matmul(w.w_ff2, gelu(add_column_bias(matmul(w.w_ff1, x2), w.b_ff1))), w.b_ff2);
    h = add(h, ff);
  }
  return add_column_bias(matmul(lm_head_, h), lm_head_bias_);
}

Tensor BaseLM::forward_text(std::span<const TokenId> tokens, std::size_t n_vision_slots) const {
  check_tokens(tokens, n_vision_slots);
  const SlotLayout layout = build_slot_layout(n_vision_slots, tokens.size());
  return decode(initial_hidden(tokens, layout), layout, {});
}

// ---- inverse model ----

InverseLlava::InverseLlava(const BaseLM& base, const VisionEncoder& encoder)
    : base_(base), encoder_(encoder) {
  const auto& cfg = base.config();
  if (encoder.n_patches() != cfg.n_patches) {
    throw DimensionError("InverseLlava: encoder patch count differs from config");
  }
  const std::size_t enc_rows =
      vision_stage_for(cfg) == VisionStage::both ? 2 * encoder.encoder_dim() : encoder.encoder_dim();
  if (enc_rows != cfg.d_v) {
    throw DimensionError("InverseLlava: encoder emits " + std::to_string(enc_rows) +
                         " features, d_v is " + std::to_string(cfg.d_v));
  }
  lora_.resize(cfg.n_layers);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    if (cfg.is_fusion_layer(l + 1)) {
      Rng rng(cfg.seed, Stream::fusion, l);
      fusion_.push_back(FusionLayerParams::init(cfg.d_h, cfg.d_v, rng));
    } else {
      Rng rng(cfg.seed, Stream::lora, l);
      lora_[l].q = LoraAdapter::init(cfg.d_h, cfg.lora_rank, cfg.lora_scale(), rng);
      lora_[l].v = LoraAdapter::init(cfg.d_h, cfg.lora_rank, cfg.lora_scale(), rng);
    }
  }
}

std::vector<LayerAdapters> InverseLlava::adapters() const {
  const auto& cfg = config();
  std::vector<LayerAdapters> out(cfg.n_layers);
  std::size_t f = 0;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    if (cfg.is_fusion_layer(l + 1)) {
      out[l].fusion = &fusion_[f++];
    } else {
      out[l].lora = &lora_[l];
    }
  }
  return out;
}

Tensor InverseLlava::encode(const PatchGrid& image) const {
  return encoder_.encode(image, vision_stage_for(config()));
}

Tensor InverseLlava::forward(const PatchGrid* image, std::span<const TokenId> tokens,
                             ForwardObserver* observer) const {
  if (image == nullptr) {
    base_.check_tokens(tokens, 0);
    const SlotLayout layout = build_slot_layout(0, tokens.size());
    const auto ads = adapters();
    return base_.decode(base_.initial_hidden(tokens, layout), layout, ads, nullptr, observer);
  }
  return forward_with_embedding(encode(*image), tokens, observer);
}

Tensor InverseLlava::forward_with_embedding(const Tensor& v_emb, std::span<const TokenId> tokens,
                                            ForwardObserver* observer) const {
  if (v_emb.rows() != config().d_v) {
    throw DimensionError("forward: visual embedding " + shape_string(v_emb.shape()) +
                         " does not have d_v rows");
  }
  base_.check_tokens(tokens, v_emb.cols());
  const SlotLayout layout = build_slot_layout(v_emb.cols(), tokens.size());
  const auto ads = adapters();
  return base_.decode(base_.initial_hidden(tokens, layout), layout, ads, &v_emb, observer);
}

std::vector<NamedTensor> InverseLlava::trainable() const {
  const auto& cfg = config();
  std::vector<NamedTensor> out;
  std::size_t f = 0;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string prefix = "layer" + std::to_string(l + 1) + ".";
    auto part = cfg.is_fusion_layer(l + 1) ? fusion_[f++].named(prefix) : lora_[l].named(prefix);
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

std::vector<NamedTensor> InverseLlava::frozen() const { return base_.named(); }

ParameterCount InverseLlava::count_parameters() const {
  ParameterCount c;
  for (const auto& nt : trainable()) c.trainable += nt.tensor.numel();
  for (const auto& nt : frozen()) c.frozen += nt.tensor.numel();
  return c;
}

MacEstimate InverseLlava::mac_estimate(std::size_t n) const {
  const auto& cfg = config();
  const std::uint64_t d = cfg.d_h, dv = cfg.d_v, N = n, r = cfg.lora_rank;
  MacEstimate m;
  m.per_standard_layer = 4 * d * d * N + 2 * d * N * N + 8 * d * d * N;
  m.fusion_extra_per_layer = dv * d * N + 6 * d * dv * N;
  m.lora_per_layer = 2 * (2 * r * d * N);
  m.lm_head = cfg.vocab_size * d * N;
  const std::uint64_t n_fusion = cfg.fusion_layers.size();
  m.total = cfg.n_layers * m.per_standard_layer + n_fusion * m.fusion_extra_per_layer +
            (cfg.n_layers - n_fusion) * m.lora_per_layer + m.lm_head;
  return m;
}

// ---- loss and prediction ----

namespace {

struct TargetView {
  std::vector<std::size_t> cols;
  std::vector<TokenId> targets;
  std::vector<bool> mask;
};

TargetView next_token_targets(const SlotLayout& layout, std::span<const TokenId> tokens,
                              const std::vector<bool>& loss_mask) {
  if (tokens.size() != layout.text.size() || loss_mask.size() != tokens.size()) {
    throw DimensionError("next-token targets: " + std::to_string(tokens.size()) + " tokens, " +
                         std::to_string(loss_mask.size()) + " mask entries, " +
                         std::to_string(layout.text.size()) + " text slots");
  }
  TargetView tv;
  for (std::size_t i = 0; i + 1 < tokens.size(); ++i) {
    tv.cols.push_back(layout.text[i]);
    tv.targets.push_back(tokens[i + 1]);
    tv.mask.push_back(loss_mask[i + 1]);
  }
  return tv;
}

}  // namespace

Tensor next_token_loss(const Tensor& logits, const SlotLayout& layout,
                       std::span<const TokenId> tokens, const std::vector<bool>& loss_mask) {
  const TargetView tv = next_token_targets(layout, tokens, loss_mask);
  if (tv.cols.empty()) throw DegenerateLossError("next_token_loss: sequence has no targets");
  return cross_entropy(gather_columns(logits, tv.cols), tv.targets, tv.mask);
}

bool predicts_answer(const Tensor& logits, const SlotLayout& layout,
                     std::span<const TokenId> tokens, const std::vector<bool>& loss_mask) {
  const TargetView tv = next_token_targets(layout, tokens, loss_mask);
  const std::size_t V = logits.rows(), N = logits.cols();
  auto lv = logits.values();
  bool any = false;
  for (std::size_t i = 0; i < tv.cols.size(); ++i) {
    if (!tv.mask[i]) continue;
    any = true;
    std::size_t best = 0;
    for (std::size_t v = 1; v < V; ++v) {
      if (lv[v * N + tv.cols[i]] > lv[best * N + tv.cols[i]]) best = v;
    }
    if (static_cast<TokenId>(best) != tv.targets[i]) return false;
  }
  if (!any) throw DegenerateLossError("predicts_answer: no answer positions");
  return true;
}

}  // namespace invllava
