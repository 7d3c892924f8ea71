// SPDX-License-Identifier: Apache-2.0

#include "invllava/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <json.hpp>
#include <numbers>
#include <sstream>
#include <thread>

#include "invllava/random.hpp"

namespace invllava {

using Json = nlohmann::ordered_json;

// ---- schedule and optimizer ----

LrSchedule LrSchedule::from(const TrainConfig& cfg) {
  LrSchedule s;
  s.peak = cfg.learning_rate;
  s.total_steps = cfg.total_steps;
  s.warmup_steps =
      static_cast<std::size_t>(std::ceil(cfg.warmup_ratio * static_cast<double>(cfg.total_steps)));
  return s;
}

double LrSchedule::at(std::size_t step) const {
  if (step < warmup_steps) {
    return peak * static_cast<double>(step) / static_cast<double>(warmup_steps);
  }
  if (total_steps <= warmup_steps) return peak;
  const double progress = static_cast<double>(step - warmup_steps) /
                          static_cast<double>(total_steps - warmup_steps);
  return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(progress, 1.0)));
}

AdamW::AdamW(std::vector<Tensor> params, double weight_decay)
    : params_(std::move(params)), weight_decay_(weight_decay) {
  for (const auto& p : params_) {
    if (!p.is_leaf() || !p.requires_grad()) {
      throw ContractError("AdamW: parameters must be trainable leaves");
    }
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void AdamW::step(const std::vector<std::vector<double>>& grads, double lr) {
  if (grads.size() != params_.size()) {
    throw ContractError("AdamW::step: gradient count does not match parameters");
  }
  ++t_;
  const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto w = params_[i].mutable_values();
    const auto& g = grads[i];
    if (!g.empty() && g.size() != w.size()) {
      throw DimensionError("AdamW::step: gradient size mismatch");
    }
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g.empty() ? 0.0 : g[j];
      m[j] = kBeta1 * m[j] + (1.0 - kBeta1) * gj;
      v[j] = kBeta2 * v[j] + (1.0 - kBeta2) * gj * gj;
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      w[j] -= lr * (mhat / (std::sqrt(vhat) + kEps) + weight_decay_ * w[j]);
    }
  }
}

// ---- steps ----

namespace {

std::size_t worker_count(ExecMode mode, std::size_t jobs) {
  if (mode == ExecMode::reference) return 1;
  const std::size_t hw = std::max(1u, std::thread::hardware_concurrency());
  return std::max<std::size_t>(1, std::min(hw, jobs));
}

// Runs fn(i) for i in [0, n) on contiguous chunks.
template <typename Fn>
void parallel_for(std::size_t n, ExecMode mode, Fn fn) {
  const std::size_t workers = worker_count(mode, n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> threads;
  std::vector<std::exception_ptr> errors(workers);
  const std::size_t chunk = (n + workers - 1) / workers;
  for (std::size_t w = 0; w < workers; ++w) {
    threads.emplace_back([&, w] {
      try {
        for (std::size_t i = w * chunk; i < std::min(n, (w + 1) * chunk); ++i) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

std::string dump_batch(const std::vector<const Sample*>& batch) {
  std::vector<Sample> copy;
  for (const auto* s : batch) copy.push_back(*s);
  return dump_jsonl(copy);
}

}  // namespace

StepResult train_step(const std::vector<const Sample*>& batch,
                      const std::vector<std::size_t>& indices, const SampleLoss& loss_fn,
                      AdamW& opt, double lr, double grad_clip, ExecMode mode) {
  if (batch.empty()) throw ContractError("train_step: empty batch");
  if (indices.size() != batch.size()) throw ContractError("train_step: index count mismatch");
  const auto& params = opt.params();
  const std::size_t B = batch.size();

  std::vector<double> losses(B);
  std::vector<GradientMap> maps(B);
  parallel_for(B, mode, [&](std::size_t i) {
    Tensor loss = loss_fn(*batch[i], indices[i]);
    losses[i] = loss.item();
    if (std::isfinite(losses[i])) maps[i] = backward_to_map(loss);
  });

  StepResult r;
  r.lr = lr;
  for (double l : losses) r.loss += l;
  r.loss /= static_cast<double>(B);
  if (!std::isfinite(r.loss)) {
    throw TrainingFailure("non-finite loss at optimizer step " + std::to_string(opt.steps()), {},
                          dump_batch(batch));
  }

  std::vector<std::vector<double>> grads(params.size());
  const double inv_b = 1.0 / static_cast<double>(B);
  for (std::size_t i = 0; i < B; ++i) {
    for (std::size_t p = 0; p < params.size(); ++p) {
      auto it = maps[i].find(params[p].node());
      if (it == maps[i].end()) continue;
      if (grads[p].empty()) grads[p].assign(params[p].numel(), 0.0);
      for (std::size_t j = 0; j < grads[p].size(); ++j) grads[p][j] += it->second[j] * inv_b;
    }
  }
  double sq = 0.0;
  for (const auto& g : grads) {
    for (double x : g) sq += x * x;
  }
  r.grad_norm = std::sqrt(sq);
  if (!std::isfinite(r.grad_norm)) {
    throw TrainingFailure("non-finite gradient norm at optimizer step " +
                              std::to_string(opt.steps()),
                          {}, dump_batch(batch));
  }
  if (grad_clip > 0.0 && r.grad_norm > grad_clip) {
    const double f = grad_clip / r.grad_norm;
    for (auto& g : grads) {
      for (double& x : g) x *= f;
    }
  }
  opt.step(grads, lr);
  return r;
}

EvalResult evaluate(const std::vector<Sample>& set, const SampleScore& score, ExecMode mode) {
  std::vector<TokenScore> scores(set.size());
  parallel_for(set.size(), mode, [&](std::size_t i) {
    NoGradGuard guard;
    scores[i] = score(set[i], i);
  });
  EvalResult r;
  r.samples = set.size();
  std::size_t right = 0, tok_right = 0, tok_total = 0;
  std::map<std::string, std::pair<std::size_t, std::size_t>> by_kind;
  for (std::size_t i = 0; i < set.size(); ++i) {
    const bool ok = scores[i].total > 0 && scores[i].correct == scores[i].total;
    right += ok ? 1 : 0;
    tok_right += scores[i].correct;
    tok_total += scores[i].total;
    auto& k = by_kind[task_name(set[i].kind)];
    k.first += ok ? 1 : 0;
    ++k.second;
  }
  if (!set.empty()) r.accuracy = static_cast<double>(right) / static_cast<double>(set.size());
  if (tok_total) r.token_accuracy = static_cast<double>(tok_right) / static_cast<double>(tok_total);
  for (const auto& [kind, c] : by_kind) {
    r.accuracy_by_kind[kind] = static_cast<double>(c.first) / static_cast<double>(c.second);
  }
  return r;
}

LoopResult train_loop(const std::vector<Tensor>& params, const std::vector<Sample>& train_set,
                      const SampleLoss& loss_fn, const SampleScore& score,
                      const LoopOptions& options) {
  const auto& tc = options.train;
  if (train_set.empty()) throw ContractError("train_loop: empty training set");
  {
    auto issues = validate(tc);
    if (!issues.empty()) throw ConfigError(issues);
  }
  AdamW opt(params, tc.weight_decay);
  const LrSchedule sched = LrSchedule::from(tc);
  Rng order_rng(options.seed, Stream::batching, options.stage);
  std::vector<std::size_t> order(train_set.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), order_rng.engine());
  std::size_t cursor = 0;

  LoopResult res;
  double since_eval = 0.0;
  std::size_t since_count = 0;
  auto snapshot = [&] {
    res.best_values.clear();
    for (const auto& p : params) {
      res.best_values.emplace_back(p.values().begin(), p.values().end());
    }
  };
  for (std::size_t step = 0; step < tc.total_steps; ++step) {
    std::vector<const Sample*> batch;
    std::vector<std::size_t> idx;
    for (std::size_t b = 0; b < tc.batch_size; ++b) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), order_rng.engine());
        cursor = 0;
      }
      idx.push_back(order[cursor]);
      batch.push_back(&train_set[order[cursor]]);
      ++cursor;
    }
    StepResult sr;
    try {
      sr = train_step(batch, idx, loss_fn, opt, sched.at(step), tc.grad_clip, options.mode);
    } catch (const TrainingFailure& e) {
      throw TrainingFailure(e.what(), res.losses, e.dump());
    }
    res.losses.push_back(sr.loss);
    res.samples_consumed += batch.size();
    since_eval += sr.loss;
    ++since_count;

    const bool last = step + 1 == tc.total_steps;
    const bool due = tc.eval_every > 0 && (step + 1) % tc.eval_every == 0;
    if (options.eval_set != nullptr && (due || last)) {
      EvalRecord rec;
      rec.step = step + 1;
      rec.train_loss = since_eval / static_cast<double>(since_count);
      rec.result = evaluate(*options.eval_set, score, options.mode);
      since_eval = 0.0;
      since_count = 0;
      const double metric =
          options.select_on_tokens ? rec.result.token_accuracy : rec.result.accuracy;
      if (metric > res.best_accuracy) {
        res.best_accuracy = metric;
        res.best_step = rec.step;
        snapshot();
      }
      res.evals.push_back(rec);
      if (options.on_eval) options.on_eval(rec);
    }
  }
  if (options.eval_set == nullptr) {
    res.best_step = tc.total_steps;
    snapshot();
  }
  return res;
}

namespace {

void restore_values(const std::vector<Tensor>& params,
                    const std::vector<std::vector<double>>& values) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto dst = Tensor(params[i]).mutable_values();
    std::copy(values[i].begin(), values[i].end(), dst.begin());
  }
}

std::vector<Tensor> tensors_of(const std::vector<NamedTensor>& named) {
  std::vector<Tensor> out;
  for (const auto& nt : named) out.push_back(nt.tensor);
  return out;
}

std::size_t vision_slots_of(const Sample& s) { return s.image ? s.image->n_patches : 0; }

}  // namespace

// ---- per-sample loss and score ----

Tensor sample_loss(const Tensor& logits, const Sample& s, std::size_t n_vision_slots) {
  const auto tokens = s.tokens();
  const SlotLayout layout = build_slot_layout(n_vision_slots, tokens.size());
  return next_token_loss(logits, layout, tokens, s.loss_mask);
}

TokenScore sample_score(const Tensor& logits, const Sample& s, std::size_t n_vision_slots) {
  const auto tokens = s.tokens();
  const SlotLayout layout = build_slot_layout(n_vision_slots, tokens.size());
  const std::size_t V = logits.rows(), N = logits.cols();
  auto lv = logits.values();
  TokenScore score;
  for (std::size_t i = 0; i + 1 < tokens.size(); ++i) {
    if (!s.loss_mask[i + 1]) continue;
    const std::size_t col = layout.text[i];
    std::size_t best = 0;
    for (std::size_t v = 1; v < V; ++v) {
      if (lv[v * N + col] > lv[best * N + col]) best = v;
    }
    ++score.total;
    score.correct += static_cast<TokenId>(best) == tokens[i + 1] ? 1 : 0;
  }
  return score;
}

std::size_t pretrain_vision_slots(const ModelConfig& cfg, std::size_t index) {
  return index % 2 == 0 ? 0 : cfg.n_patches;
}

// ---- datasets ----

DatasetPair multimodal_datasets(const RunConfig& cfg) {
  const TaskSpec spec = task_spec_for(cfg);
  const auto kinds = enabled_tasks(cfg.data);
  if (kinds.empty()) throw ConfigError({"no multimodal task enabled"});
  return {generate_mixture(spec, kinds, cfg.data.train_samples, spec.train_seed),
          generate_mixture(spec, kinds, cfg.data.eval_samples, spec.eval_seed)};
}

DatasetPair copy_datasets(const RunConfig& cfg) {
  TaskSpec spec = task_spec_for(cfg);
  spec.kind = TaskKind::text_copy;
  const std::uint64_t train_seed = Rng(cfg.model.seed, Stream::pretrain_data, 0).engine()();
  const std::uint64_t eval_seed = Rng(cfg.model.seed, Stream::pretrain_data, 1).engine()();
  // One fresh sample per optimizer slot.
  const std::size_t n_train = std::max<std::size_t>(
      1, cfg.pretrain.total_steps * cfg.pretrain.batch_size);
  return {generate(spec, n_train, train_seed),
          generate(spec, std::max<std::size_t>(1, cfg.data.eval_samples), eval_seed)};
}

// ---- base LM pretraining ----

PretrainReport pretrain_base_lm(BaseLM& base, const RunConfig& cfg, ExecMode mode,
                                const std::function<void(const EvalRecord&)>& on_eval) {
  const DatasetPair data = copy_datasets(cfg);
  base.set_trainable(true);
  const auto params = base.parameters();
  const auto& mc = cfg.model;
  SampleLoss loss_fn = [&](const Sample& s, std::size_t i) {
    const std::size_t nv = pretrain_vision_slots(mc, i);
    return sample_loss(base.forward_text(s.tokens(), nv), s, nv);
  };
  SampleScore score = [&](const Sample& s, std::size_t i) {
    const std::size_t nv = pretrain_vision_slots(mc, i);
    return sample_score(base.forward_text(s.tokens(), nv), s, nv);
  };
  LoopOptions opt;
  opt.train = cfg.pretrain;
  opt.mode = mode;
  opt.seed = mc.seed;
  opt.stage = 0;
  opt.select_on_tokens = true;
  opt.eval_set = &data.eval;
  opt.on_eval = on_eval;

  LoopResult res;
  try {
    res = train_loop(params, data.train, loss_fn, score, opt);
  } catch (...) {
    base.set_trainable(false);
    throw;
  }
  restore_values(params, res.best_values);
  PretrainReport rep;
  rep.losses = res.losses;
  rep.evals = res.evals;
  rep.steps = res.losses.size();
  rep.token_accuracy = std::max(0.0, res.best_accuracy);
  base.set_trainable(false);
  rep.checksum = base.checksum();
  if (rep.token_accuracy < cfg.pretrain_target_accuracy) {
    std::ostringstream os;
    os << "base LM reached copy-task token accuracy " << rep.token_accuracy << " < target "
       << cfg.pretrain_target_accuracy << " after " << rep.steps << " steps";
    throw TrainingFailure(os.str(), rep.losses);
  }
  return rep;
}

// ---- multimodal runs ----

namespace {

RunReport start_report(const std::string& model, const RunConfig& cfg, const DatasetPair& data,
                       const BaseLM& base, const VisionEncoder& enc) {
  RunReport rep;
  rep.model = model;
  rep.seed = cfg.model.seed;
  rep.config_text = serialize_config(cfg);
  rep.batch_size = cfg.train.batch_size;
  rep.base_checksum_before = base.checksum();
  rep.encoder_checksum_before = enc.checksum();
  const ClassStats stats = majority_baseline(data.eval);
  rep.majority_by_kind = stats.majority_by_kind;
  rep.majority_overall = stats.majority_overall;
  return rep;
}

}  // namespace

RunReport train_inverse(InverseLlava& model, const DatasetPair& data, const RunConfig& cfg,
                        ExecMode mode, const std::function<void(const EvalRecord&)>& on_eval) {
  const auto t0 = std::chrono::steady_clock::now();
  RunReport rep = start_report("inverse", cfg, data, model.base(), model.encoder());
  const auto params = tensors_of(model.trainable());
  SampleLoss loss_fn = [&](const Sample& s, std::size_t) {
    return sample_loss(model.forward(s.image ? &*s.image : nullptr, s.tokens()), s,
                       vision_slots_of(s));
  };
  SampleScore score = [&](const Sample& s, std::size_t) {
    return sample_score(model.forward(s.image ? &*s.image : nullptr, s.tokens()), s,
                        vision_slots_of(s));
  };
  LoopOptions opt;
  opt.train = cfg.train;
  opt.mode = mode;
  opt.seed = cfg.model.seed;
  opt.stage = 1;
  opt.eval_set = &data.eval;
  opt.on_eval = on_eval;
  const LoopResult res = train_loop(params, data.train, loss_fn, score, opt);
  restore_values(params, res.best_values);

  rep.alignment_samples = 0;
  rep.instruction_samples = res.samples_consumed;
  rep.steps = res.losses.size();
  rep.losses = res.losses;
  rep.evals = res.evals;
  rep.best_step = res.best_step;
  rep.best_accuracy = std::max(0.0, res.best_accuracy);
  rep.final_eval = evaluate(data.eval, score, mode);
  rep.parameters = model.count_parameters();
  rep.base_checksum_after = model.base().checksum();
  rep.encoder_checksum_after = model.encoder().checksum();
  rep.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (rep.alignment_samples != 0) throw ContractError("inverse run consumed alignment samples");
  return rep;
}

RunReport run_two_stage(LlavaBaseline& model, const std::vector<Sample>& align_set,
                        const DatasetPair& instruct, const RunConfig& cfg, ExecMode mode,
                        StageReport* stages,
                        const std::function<void(const EvalRecord&)>& on_eval) {
  if (instruct.train.empty()) throw ContractError("run_two_stage: empty instruction set");
  if (cfg.align_steps > 0 && align_set.empty()) {
    throw ContractError("run_two_stage: empty alignment set");
  }
  const auto t0 = std::chrono::steady_clock::now();
  RunReport rep = start_report("baseline", cfg, instruct, model.base(), model.encoder());
  SampleLoss loss_fn = [&](const Sample& s, std::size_t) {
    return sample_loss(model.forward(s.image ? &*s.image : nullptr, s.tokens()), s,
                       vision_slots_of(s));
  };
  SampleScore score = [&](const Sample& s, std::size_t) {
    return sample_score(model.forward(s.image ? &*s.image : nullptr, s.tokens()), s,
                        vision_slots_of(s));
  };
  StageReport sr;
  if (cfg.align_steps > 0) {
    LoopOptions opt;
    opt.train = cfg.train;
    opt.train.total_steps = cfg.align_steps;
    opt.mode = mode;
    opt.seed = cfg.model.seed;
    opt.stage = 2;
    const auto res = train_loop(tensors_of(model.projector_parameters()), align_set, loss_fn,
                                score, opt);
    sr.align_steps = res.losses.size();
    sr.align_samples = res.samples_consumed;
    sr.align_losses = res.losses;
  }
  const auto params = tensors_of(model.trainable());
  LoopOptions opt;
  opt.train = cfg.train;
  opt.mode = mode;
  opt.seed = cfg.model.seed;
  opt.stage = 3;
  opt.eval_set = &instruct.eval;
  opt.on_eval = on_eval;
  const LoopResult res = train_loop(params, instruct.train, loss_fn, score, opt);
  restore_values(params, res.best_values);
  sr.instruct_steps = res.losses.size();
  sr.instruct_samples = res.samples_consumed;
  sr.instruct_losses = res.losses;

  rep.alignment_samples = sr.align_samples;
  rep.instruction_samples = sr.instruct_samples;
  rep.steps = sr.align_steps + sr.instruct_steps;
  rep.losses = sr.align_losses;
  rep.losses.insert(rep.losses.end(), res.losses.begin(), res.losses.end());
  rep.evals = res.evals;
  rep.best_step = res.best_step;
  rep.best_accuracy = std::max(0.0, res.best_accuracy);
  rep.final_eval = evaluate(instruct.eval, score, mode);
  rep.parameters = model.count_parameters();
  rep.base_checksum_after = model.base().checksum();
  rep.encoder_checksum_after = model.encoder().checksum();
  rep.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (stages != nullptr) *stages = sr;
  return rep;
}

double sample_reduction_pct(std::size_t inverse_total, std::size_t baseline_total) {
  if (baseline_total == 0) throw ContractError("sample_reduction_pct: empty baseline budget");
  const double r =
      1.0 - static_cast<double>(inverse_total) / static_cast<double>(baseline_total);
  return std::round(r * 1000.0) / 10.0;
}

ComparisonReport compare_pipelines(InverseLlava& inverse, LlavaBaseline& baseline,
                                   const RunConfig& cfg, ExecMode mode) {
  ComparisonReport rep;
  rep.base_checksum = inverse.base().checksum();
  if (rep.base_checksum != baseline.base().checksum()) {
    throw ContractError("comparison refused: the two models do not share a base LM checksum");
  }
  const DatasetPair data = multimodal_datasets(cfg);
  std::size_t longest = 0;
  for (const auto& s : data.eval) longest = std::max(longest, s.tokens().size());
  rep.sequence_length = cfg.model.n_patches + longest;
  const std::uint64_t step_factor = 3 * cfg.train.batch_size;

  rep.inverse.model = "inverse";
  rep.inverse.alignment_units = 0;
  rep.inverse.instruction_units = cfg.instruct_units;
  rep.inverse.trainable_parameters = inverse.count_parameters().trainable;
  rep.inverse.forward_macs_per_sample = inverse.mac_estimate(rep.sequence_length).total;
  rep.inverse.macs_per_step = step_factor * rep.inverse.forward_macs_per_sample;

  rep.baseline.model = "baseline";
  rep.baseline.alignment_units = cfg.align_steps > 0 ? cfg.align_units : 0;
  rep.baseline.instruction_units = cfg.instruct_units;
  rep.baseline.trainable_parameters = baseline.count_parameters().trainable;
  rep.baseline.forward_macs_per_sample = baseline.mac_estimate(rep.sequence_length).total;
  rep.baseline.macs_per_step = step_factor * rep.baseline.forward_macs_per_sample;

  rep.sample_reduction_pct =
      sample_reduction_pct(rep.inverse.total_units(), rep.baseline.total_units());

  if (cfg.compare_train) {
    rep.inverse.run = train_inverse(inverse, data, cfg, mode);
    TaskSpec spec = task_spec_for(cfg);
    const std::uint64_t caption_seed = Rng(cfg.model.seed, Stream::train_data, 1).engine()();
    std::vector<Sample> captions;
    if (cfg.align_steps > 0) {
      captions = generate_captions(spec, cfg.align_steps * cfg.train.batch_size, caption_seed);
    }
    rep.baseline.run = run_two_stage(baseline, captions, data, cfg, mode);
  }
  return rep;
}

// ---- reports ----

namespace {

Json eval_json(const EvalResult& r) {
  Json j;
  j["samples"] = r.samples;
  j["accuracy"] = r.accuracy;
  j["token_accuracy"] = r.token_accuracy;
  Json kinds = Json::object();
  for (const auto& [k, v] : r.accuracy_by_kind) kinds[k] = v;
  j["accuracy_by_kind"] = kinds;
  return j;
}

Json record_json(const EvalRecord& rec) {
  Json j;
  j["step"] = rec.step;
  j["train_loss"] = rec.train_loss;
  j["eval"] = eval_json(rec.result);
  return j;
}

Json run_json(const RunReport& r) {
  Json j;
  j["model"] = r.model;
  j["seed"] = r.seed;
  j["optimizer"] = {{"name", "adamw"},
                    {"beta1", AdamW::kBeta1},
                    {"beta2", AdamW::kBeta2},
                    {"eps", AdamW::kEps}};
  j["schedule"] = "linear warmup then cosine decay";
  j["alignment_samples"] = r.alignment_samples;
  j["instruction_samples"] = r.instruction_samples;
  j["steps"] = r.steps;
  j["batch_size"] = r.batch_size;
  j["parameters"] = {{"trainable", r.parameters.trainable},
                     {"frozen", r.parameters.frozen},
                     {"total", r.parameters.total()}};
  Json maj = Json::object();
  for (const auto& [k, v] : r.majority_by_kind) maj[k] = v;
  j["majority_baseline"] = {{"overall", r.majority_overall}, {"by_kind", maj}};
  j["best_step"] = r.best_step;
  j["best_accuracy"] = r.best_accuracy;
  j["final_eval"] = eval_json(r.final_eval);
  j["checksums"] = {{"base_before", r.base_checksum_before},
                    {"base_after", r.base_checksum_after},
                    {"encoder_before", r.encoder_checksum_before},
                    {"encoder_after", r.encoder_checksum_after}};
  j["losses"] = r.losses;
  j["config"] = r.config_text;
  return j;
}

Json pipeline_json(const PipelineSummary& p) {
  Json j;
  j["model"] = p.model;
  j["alignment_units"] = p.alignment_units;
  j["instruction_units"] = p.instruction_units;
  j["total_units"] = p.total_units();
  j["trainable_parameters"] = p.trainable_parameters;
  j["forward_macs_per_sample"] = p.forward_macs_per_sample;
  j["macs_per_step"] = p.macs_per_step;
  if (p.run) {
    j["samples_consumed"] = {{"alignment", p.run->alignment_samples},
                             {"instruction", p.run->instruction_samples}};
    j["final_eval"] = eval_json(p.run->final_eval);
  }
  return j;
}

}  // namespace

std::string summary_json(const RunReport& report) { return run_json(report).dump(2) + "\n"; }

std::string eval_jsonl(const RunReport& report) {
  std::string out;
  for (const auto& rec : report.evals) out += record_json(rec).dump() + "\n";
  return out;
}

std::string comparison_json(const ComparisonReport& report) {
  Json j;
  j["inverse"] = pipeline_json(report.inverse);
  j["baseline"] = pipeline_json(report.baseline);
  j["sequence_length"] = report.sequence_length;
  j["base_checksum"] = report.base_checksum;
  j["sample_reduction_pct"] = report.sample_reduction_pct;
  return j.dump(2) + "\n";
}

std::string comparison_csv(const ComparisonReport& report) {
  std::ostringstream os;
  os << "model,alignment_units,instruction_units,total_units,trainable_parameters,"
        "forward_macs_per_sample,macs_per_step,final_accuracy\n";
  for (const auto* p : {&report.inverse, &report.baseline}) {
    os << p->model << ',' << p->alignment_units << ',' << p->instruction_units << ','
       << p->total_units() << ',' << p->trainable_parameters << ','
       << p->forward_macs_per_sample << ',' << p->macs_per_step << ',';
    if (p->run) os << p->run->final_eval.accuracy;
    os << '\n';
  }
  return os.str();
}

std::string pretrain_summary_json(const PretrainReport& report) {
  Json j;
  j["steps"] = report.steps;
  j["token_accuracy"] = report.token_accuracy;
  j["checksum"] = report.checksum;
  Json evals = Json::array();
  for (const auto& rec : report.evals) evals.push_back(record_json(rec));
  j["evals"] = evals;
  j["losses"] = report.losses;
  return j.dump(2) + "\n";
}

}  // namespace invllava
