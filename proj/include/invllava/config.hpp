// SPDX-License-Identifier: Apache-2.0
//
// Hyperparameter records and the flat key=value config file format.

#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "invllava/tensor.hpp"

namespace invllava {

// Thrown with every violation joined, one per line.
class ConfigError : public Error {
 public:
  explicit ConfigError(std::vector<std::string> issues);
  const std::vector<std::string>& issues() const { return issues_; }

 private:
  std::vector<std::string> issues_;
};

struct ModelConfig {
  std::size_t d_h = 64;
  std::size_t d_v = 32;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t vocab_size = 64;
  std::size_t n_patches = 16;
  std::size_t max_text_len = 24;
  // 1-based layer indices carrying the vision-fused Q/K/V path.
  std::vector<std::size_t> fusion_layers = {1};
  std::size_t lora_rank = 4;
  double lora_alpha = 8.0;
  // Feed both encoder stages (d_v split evenly between them).
  bool hd_mode = false;
  // Outside hd_mode: take the penultimate encoder stage instead of the final.
  bool penultimate_features = false;
  std::uint64_t seed = 13;

  std::size_t head_dim() const { return d_h / n_heads; }
  std::size_t max_positions() const { return n_patches + max_text_len; }
  // Width of one encoder stage.
  std::size_t encoder_dim() const { return hd_mode ? d_v / 2 : d_v; }
  std::size_t grid_size() const;
  bool is_fusion_layer(std::size_t layer) const;
  double lora_scale() const { return lora_alpha / static_cast<double>(lora_rank); }

  bool operator==(const ModelConfig&) const = default;
};

struct TrainConfig {
  double learning_rate = 2e-4;
  double warmup_ratio = 0.03;
  std::size_t total_steps = 3000;
  std::size_t batch_size = 8;
  double weight_decay = 0.0;
  // Global gradient-norm clip; 0 disables clipping.
  double grad_clip = 0.0;
  std::size_t eval_every = 250;

  bool operator==(const TrainConfig&) const = default;
};

struct DataConfig {
  std::size_t train_samples = 4000;
  std::size_t eval_samples = 400;
  bool task_count = true;
  bool task_existence = true;
  bool task_color = false;
  std::size_t max_count = 4;
  std::size_t n_colors = 4;

  bool operator==(const DataConfig&) const = default;
};

// Everything one experiment needs; the unit the config file describes.
struct RunConfig {
  ModelConfig model;
  // Desk-scale peak rate; the TrainConfig default of 2e-4 learns too slowly
  // here with the small LoRA rank and batch.
  TrainConfig train{5e-3, 0.03, 3000, 8, 0.0, 0.0, 250};
  TrainConfig pretrain{3e-3, 0.05, 4000, 8, 0.0, 1.0, 500};
  double pretrain_target_accuracy = 0.99;
  DataConfig data;
  // Baseline alignment stage length; 0 skips it.
  std::size_t align_steps = 1000;
  bool projector_linear = false;
  // Sample-budget accounting units (thousands of samples).
  std::size_t align_units = 558;
  std::size_t instruct_units = 665;
  bool compare_train = false;
  double gradcheck_eps = 1e-5;
  std::size_t gradcheck_max_coords = 64;

  bool operator==(const RunConfig&) const = default;
};

// Every violated invariant, in a stable order. Empty means valid.
std::vector<std::string> validate(const ModelConfig& cfg);
std::vector<std::string> validate(const TrainConfig& cfg);
std::vector<std::string> validate(const RunConfig& cfg);
// Soft guidance (e.g. d_v outside [d_h/4, d_h]); never fatal.
std::vector<std::string> recommendations(const ModelConfig& cfg);

// Throws ConfigError listing all violations.
void require_valid(const ModelConfig& cfg);
void require_valid(const RunConfig& cfg);

// key=value text, '#' comments. Unknown keys are errors.
RunConfig parse_config(std::string_view text);
RunConfig load_config(const std::string& path);
// Applies one "key=value" override.
void apply_override(RunConfig& cfg, std::string_view assignment);
// Canonical serialization: every key, fixed order, round-trip exact.
std::string serialize_config(const RunConfig& cfg);

}  // namespace invllava
