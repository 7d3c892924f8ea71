// SPDX-License-Identifier: Apache-2.0
//
// AdamW with warmup + cosine schedule, masked next-token training over
// per-sample tapes, base-LM pretraining and the multimodal runs.

#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "invllava/baseline_projector.hpp"
#include "invllava/checkpoint.hpp"
#include "invllava/config.hpp"
#include "invllava/fusion_transformer.hpp"
#include "invllava/synth_data.hpp"

namespace invllava {

class TrainingFailure : public Error {
 public:
  TrainingFailure(const std::string& what, std::vector<double> losses, std::string dump = {})
      : Error(what), losses_(std::move(losses)), dump_(std::move(dump)) {}
  const std::vector<double>& losses() const { return losses_; }
  // Offending batch as JSON lines, when the failure is tied to one.
  const std::string& dump() const { return dump_; }

 private:
  std::vector<double> losses_;
  std::string dump_;
};

enum class ExecMode { reference, throughput };

// Linear warmup from 0 over ceil(warmup_ratio * total) steps, then cosine
// decay towards 0 at step `total`.
struct LrSchedule {
  double peak = 0.0;
  std::size_t total_steps = 0;
  std::size_t warmup_steps = 0;

  static LrSchedule from(const TrainConfig& cfg);
  double at(std::size_t step) const;
};

class AdamW {
 public:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

  AdamW(std::vector<Tensor> params, double weight_decay);

  // grads[i] matches params[i] in size; an empty vector means zero.
  void step(const std::vector<std::vector<double>>& grads, double lr);
  std::size_t steps() const { return t_; }
  const std::vector<Tensor>& params() const { return params_; }
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  double weight_decay_;
  std::size_t t_ = 0;
};

// Per-sample loss; the index is the sample's position in its dataset.
using SampleLoss = std::function<Tensor(const Sample&, std::size_t)>;

struct TokenScore {
  std::size_t correct = 0;
  std::size_t total = 0;
};
using SampleScore = std::function<TokenScore(const Sample&, std::size_t)>;

struct StepResult {
  double loss = 0.0;
  double grad_norm = 0.0;  // before clipping
  double lr = 0.0;
};

// Mean loss over the batch; gradients reach only `params`. Throughput mode
// runs sample tapes on worker threads and still sums in sample order.
StepResult train_step(const std::vector<const Sample*>& batch,
                      const std::vector<std::size_t>& indices, const SampleLoss& loss_fn,
                      AdamW& opt, double lr, double grad_clip, ExecMode mode);

struct EvalResult {
  std::size_t samples = 0;
  double accuracy = 0.0;        // whole answer correct
  double token_accuracy = 0.0;  // answer tokens correct
  std::map<std::string, double> accuracy_by_kind;
};

EvalResult evaluate(const std::vector<Sample>& set, const SampleScore& score, ExecMode mode);

struct EvalRecord {
  std::size_t step = 0;
  double train_loss = 0.0;  // mean over the steps since the previous record
  EvalResult result;
};

struct LoopOptions {
  TrainConfig train;
  ExecMode mode = ExecMode::reference;
  std::uint64_t seed = 0;
  // Distinguishes the batch order of different stages of one run.
  std::uint64_t stage = 0;
  // Rank evaluations by token accuracy instead of whole-answer accuracy.
  bool select_on_tokens = false;
  // Evaluation is skipped when null.
  const std::vector<Sample>* eval_set = nullptr;
  std::function<void(const EvalRecord&)> on_eval;
};

struct LoopResult {
  std::vector<double> losses;
  std::vector<EvalRecord> evals;
  std::size_t samples_consumed = 0;
  // Parameter values at the best evaluation (ties go to the earlier step).
  // best_accuracy is the ranking metric.
  std::size_t best_step = 0;
  double best_accuracy = -1.0;
  std::vector<std::vector<double>> best_values;
};

LoopResult train_loop(const std::vector<Tensor>& params, const std::vector<Sample>& train_set,
                      const SampleLoss& loss_fn, const SampleScore& score,
                      const LoopOptions& options);

// ---- models as training targets ----

// Loss of one sample under a logits function.
Tensor sample_loss(const Tensor& logits, const Sample& s, std::size_t n_vision_slots);
TokenScore sample_score(const Tensor& logits, const Sample& s, std::size_t n_vision_slots);

// Copy-task samples alternate between no vision slots and n_patches
// content-free vision slots, so the frozen LM is familiar with both layouts.
std::size_t pretrain_vision_slots(const ModelConfig& cfg, std::size_t index);

struct PretrainReport {
  std::vector<double> losses;
  std::vector<EvalRecord> evals;
  std::size_t steps = 0;
  double token_accuracy = 0.0;
  std::string checksum;
};

// Trains every base weight on the copy task, then freezes them. Throws
// TrainingFailure when the held-out token accuracy stays below the target.
PretrainReport pretrain_base_lm(BaseLM& base, const RunConfig& cfg, ExecMode mode,
                                const std::function<void(const EvalRecord&)>& on_eval = {});

struct DatasetPair {
  std::vector<Sample> train;
  std::vector<Sample> eval;
};
DatasetPair multimodal_datasets(const RunConfig& cfg);
DatasetPair copy_datasets(const RunConfig& cfg);

struct RunReport {
  std::string model;
  std::size_t alignment_samples = 0;
  std::size_t instruction_samples = 0;
  std::size_t steps = 0;
  std::size_t batch_size = 0;
  std::vector<double> losses;
  std::vector<EvalRecord> evals;
  ParameterCount parameters;
  std::map<std::string, double> majority_by_kind;
  double majority_overall = 0.0;
  std::size_t best_step = 0;
  double best_accuracy = 0.0;
  EvalResult final_eval;
  std::uint64_t seed = 0;
  std::string config_text;
  std::string base_checksum_before;
  std::string base_checksum_after;
  std::string encoder_checksum_before;
  std::string encoder_checksum_after;
  double wall_seconds = 0.0;
};

// Single multimodal stage over fusion and LoRA parameters only. The best
// evaluated parameters are restored into the model at the end.
RunReport train_inverse(InverseLlava& model, const DatasetPair& data, const RunConfig& cfg,
                        ExecMode mode, const std::function<void(const EvalRecord&)>& on_eval = {});

// Stage 1 trains the projector on captions (skipped when align_steps = 0);
// stage 2 trains projector and LoRA on the instruction tasks.
RunReport run_two_stage(LlavaBaseline& model, const std::vector<Sample>& align_set,
                        const DatasetPair& instruct, const RunConfig& cfg, ExecMode mode,
                        StageReport* stages = nullptr,
                        const std::function<void(const EvalRecord&)>& on_eval = {});

struct PipelineSummary {
  std::string model;
  std::size_t alignment_units = 0;
  std::size_t instruction_units = 0;
  std::size_t total_units() const { return alignment_units + instruction_units; }
  std::size_t trainable_parameters = 0;
  std::uint64_t forward_macs_per_sample = 0;
  std::uint64_t macs_per_step = 0;
  std::optional<RunReport> run;
};

struct ComparisonReport {
  PipelineSummary inverse;
  PipelineSummary baseline;
  std::size_t sequence_length = 0;
  // 100 * (1 - inverse_total / baseline_total), rounded to 0.1.
  double sample_reduction_pct = 0.0;
  std::string base_checksum;
};

double sample_reduction_pct(std::size_t inverse_total, std::size_t baseline_total);

// Refuses (ContractError) unless both models share the same frozen base.
// Trains both when cfg.compare_train is set; otherwise reports accounting only.
ComparisonReport compare_pipelines(InverseLlava& inverse, LlavaBaseline& baseline,
                                   const RunConfig& cfg, ExecMode mode);

// Summary JSON (no wall-clock) and one JSON line per evaluation record.
std::string summary_json(const RunReport& report);
std::string eval_jsonl(const RunReport& report);
std::string comparison_json(const ComparisonReport& report);
std::string comparison_csv(const ComparisonReport& report);
std::string pretrain_summary_json(const PretrainReport& report);

}  // namespace invllava
