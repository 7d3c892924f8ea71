// SPDX-License-Identifier: Apache-2.0

#include "invllava/cli.hpp"

#include <CLI11.hpp>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <json.hpp>
#include <optional>
#include <set>
#include <sstream>

#include "invllava/baseline_projector.hpp"
#include "invllava/checkpoint.hpp"
#include "invllava/config.hpp"
#include "invllava/fusion_transformer.hpp"
#include "invllava/random.hpp"
#include "invllava/synth_data.hpp"
#include "invllava/trainer.hpp"

namespace fs = std::filesystem;

namespace invllava {

namespace {

using Json = nlohmann::ordered_json;

struct Options {
  std::string command;
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir;
  std::string base_dir;
  std::string run_dir;
  bool force = false;
  std::string mode = "reference";
};

class UsageError : public Error {
 public:
  using Error::Error;
};

// Files are staged in a sibling directory and renamed into place on commit.
class RunDirectory {
 public:
  RunDirectory(const std::string& target, bool force) : target_(target), force_(force) {
    if (target_.empty()) throw UsageError("--out is required for this command");
    if (fs::exists(target_) && !force_) {
      throw UsageError("output directory '" + target_.string() +
                       "' already exists (use --force to replace it)");
    }
    staging_ = target_;
    staging_ += ".partial";
    fs::remove_all(staging_);
    fs::create_directories(staging_);
  }
  ~RunDirectory() {
    if (!committed_) {
      std::error_code ec;
      fs::remove_all(staging_, ec);
    }
  }
  RunDirectory(const RunDirectory&) = delete;
  RunDirectory& operator=(const RunDirectory&) = delete;

  std::string path(const std::string& name) const { return (staging_ / name).string(); }
  void write(const std::string& name, const std::string& text) const {
    std::ofstream f(path(name), std::ios::binary | std::ios::trunc);
    f << text;
    if (!f) throw Error("cannot write '" + path(name) + "'");
  }
  void commit() {
    if (fs::exists(target_)) {
      if (!force_) throw UsageError("output directory '" + target_.string() + "' appeared");
      fs::remove_all(target_);
    }
    if (target_.has_parent_path()) fs::create_directories(target_.parent_path());
    fs::rename(staging_, target_);
    committed_ = true;
  }

 private:
  fs::path target_;
  fs::path staging_;
  bool force_;
  bool committed_ = false;
};

std::string read_file(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw Error("cannot read '" + p.string() + "'");
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

RunConfig resolve_config(const Options& o) {
  RunConfig cfg = o.config_path.empty() ? RunConfig{} : load_config(o.config_path);
  for (const auto& kv : o.overrides) apply_override(cfg, kv);
  require_valid(cfg);
  return cfg;
}

ExecMode exec_mode(const Options& o) {
  return o.mode == "throughput" ? ExecMode::throughput : ExecMode::reference;
}

VisionEncoder make_encoder(const RunConfig& cfg) {
  return VisionEncoder::for_config(cfg.model, kPatchRawDim);
}

Json manifest(const std::string& command, const RunConfig& cfg, const Json& checksums) {
  Json j;
  j["command"] = command;
  j["code_version"] = kCodeVersion;
  j["seed"] = cfg.model.seed;
  j["config"] = serialize_config(cfg);
  j["checksums"] = checksums;
  return j;
}

Checkpoint make_checkpoint(const RunConfig& cfg, std::vector<NamedTensor> tensors) {
  Checkpoint c;
  c.config_text = serialize_config(cfg);
  c.tensors = std::move(tensors);
  return c;
}

BaseLM load_base(const fs::path& dir, const RunConfig& cfg) {
  const Checkpoint ckpt = load_checkpoint((dir / "base.ckpt").string());
  const RunConfig saved = parse_config(ckpt.config_text);
  if (!(saved.model == cfg.model)) {
    throw ConfigError({"base checkpoint in '" + dir.string() +
                       "' was trained with a different model configuration"});
  }
  BaseLM base(cfg.model);
  auto dst = base.named();
  restore_tensors(ckpt.tensors, dst);
  return base;
}

void print_eval(std::ostream& out, const std::string& tag, const EvalRecord& rec) {
  out << tag << " step " << rec.step << "  loss " << std::setprecision(5) << rec.train_loss
      << "  acc " << rec.result.accuracy << "  token_acc " << rec.result.token_accuracy;
  for (const auto& [k, v] : rec.result.accuracy_by_kind) out << "  " << k << ' ' << v;
  out << '\n' << std::flush;
}

// Pretrains a base LM unless one is supplied.
BaseLM obtain_base(const Options& o, const RunConfig& cfg, std::ostream& out,
                   std::optional<PretrainReport>* report = nullptr) {
  if (!o.base_dir.empty()) return load_base(o.base_dir, cfg);
  BaseLM base(cfg.model);
  auto rep = pretrain_base_lm(base, cfg, exec_mode(o),
                              [&](const EvalRecord& r) { print_eval(out, "pretrain", r); });
  if (report != nullptr) *report = rep;
  return base;
}

std::string evals_csv(const RunReport& r) {
  std::set<std::string> kinds;
  for (const auto& rec : r.evals) {
    for (const auto& [k, v] : rec.result.accuracy_by_kind) kinds.insert(k);
  }
  std::ostringstream os;
  os << std::setprecision(17) << "step,train_loss,accuracy,token_accuracy";
  for (const auto& k : kinds) os << ',' << k;
  os << '\n';
  for (const auto& rec : r.evals) {
    os << rec.step << ',' << rec.train_loss << ',' << rec.result.accuracy << ','
       << rec.result.token_accuracy;
    for (const auto& k : kinds) {
      auto it = rec.result.accuracy_by_kind.find(k);
      os << ',' << (it == rec.result.accuracy_by_kind.end() ? 0.0 : it->second);
    }
    os << '\n';
  }
  return os.str();
}

std::string timing_json(double seconds) {
  Json j;
  j["wall_seconds"] = seconds;
  return j.dump(2) + "\n";
}

// ---- commands ----

int cmd_pretrain(const Options& o, std::ostream& out) {
  const RunConfig cfg = resolve_config(o);
  RunDirectory dir(o.out_dir, o.force);
  const auto t0 = std::chrono::steady_clock::now();
  BaseLM base(cfg.model);
  const auto rep = pretrain_base_lm(base, cfg, exec_mode(o),
                                    [&](const EvalRecord& r) { print_eval(out, "pretrain", r); });
  save_checkpoint(dir.path("base.ckpt"), make_checkpoint(cfg, base.named()));
  dir.write("summary.json", pretrain_summary_json(rep));
  dir.write("timing.json", timing_json(std::chrono::duration<double>(
                                           std::chrono::steady_clock::now() - t0)
                                           .count()));
  dir.write("manifest.json",
            manifest("pretrain-lm", cfg,
                     {{"base", rep.checksum}, {"encoder", make_encoder(cfg).checksum()}})
                    .dump(2) +
                "\n");
  dir.commit();
  out << "copy-task token accuracy " << rep.token_accuracy << "\nbase checksum " << rep.checksum
      << '\n';
  return 0;
}

int cmd_train_inverse(const Options& o, std::ostream& out) {
  const RunConfig cfg = resolve_config(o);
  RunDirectory dir(o.out_dir, o.force);
  const BaseLM base = obtain_base(o, cfg, out);
  InverseLlava model(base, make_encoder(cfg));
  const DatasetPair data = multimodal_datasets(cfg);
  const RunReport rep = train_inverse(model, data, cfg, exec_mode(o),
                                      [&](const EvalRecord& r) { print_eval(out, "inverse", r); });
  save_checkpoint(dir.path("base.ckpt"), make_checkpoint(cfg, base.named()));
  save_checkpoint(dir.path("model.ckpt"), make_checkpoint(cfg, model.trainable()));
  dir.write("summary.json", summary_json(rep));
  dir.write("evals.jsonl", eval_jsonl(rep));
  dir.write("evals.csv", evals_csv(rep));
  dir.write("timing.json", timing_json(rep.wall_seconds));
  dir.write("manifest.json", manifest("train-inverse", cfg,
                                      {{"base", rep.base_checksum_after},
                                       {"encoder", rep.encoder_checksum_after},
                                       {"trainable", checksum(model.trainable())}})
                                     .dump(2) +
                                 "\n");
  dir.commit();
  out << "accuracy " << rep.final_eval.accuracy << " (best step " << rep.best_step
      << ", majority " << rep.majority_overall << ")\n";
  return 0;
}

int cmd_train_baseline(const Options& o, std::ostream& out) {
  const RunConfig cfg = resolve_config(o);
  RunDirectory dir(o.out_dir, o.force);
  const BaseLM base = obtain_base(o, cfg, out);
  LlavaBaseline model(base, make_encoder(cfg), cfg.projector_linear);
  const DatasetPair data = multimodal_datasets(cfg);
  std::vector<Sample> captions;
  if (cfg.align_steps > 0) {
    const std::uint64_t seed = Rng(cfg.model.seed, Stream::train_data, 1).engine()();
    captions = generate_captions(task_spec_for(cfg), cfg.align_steps * cfg.train.batch_size, seed);
  }
  StageReport stages;
  const RunReport rep =
      run_two_stage(model, captions, data, cfg, exec_mode(o), &stages,
                    [&](const EvalRecord& r) { print_eval(out, "baseline", r); });
  save_checkpoint(dir.path("base.ckpt"), make_checkpoint(cfg, base.named()));
  save_checkpoint(dir.path("model.ckpt"), make_checkpoint(cfg, model.trainable()));
  dir.write("summary.json", summary_json(rep));
  Json st;
  st["align_steps"] = stages.align_steps;
  st["align_samples"] = stages.align_samples;
  st["instruct_steps"] = stages.instruct_steps;
  st["instruct_samples"] = stages.instruct_samples;
  st["total_samples"] = stages.total_samples();
  dir.write("stages.json", st.dump(2) + "\n");
  dir.write("evals.jsonl", eval_jsonl(rep));
  dir.write("evals.csv", evals_csv(rep));
  dir.write("timing.json", timing_json(rep.wall_seconds));
  dir.write("manifest.json", manifest("train-baseline", cfg,
                                      {{"base", rep.base_checksum_after},
                                       {"encoder", rep.encoder_checksum_after},
                                       {"trainable", checksum(model.trainable())}})
                                     .dump(2) +
                                 "\n");
  dir.commit();
  out << "accuracy " << rep.final_eval.accuracy << " (alignment samples "
      << rep.alignment_samples << ", instruction samples " << rep.instruction_samples << ")\n";
  return 0;
}

int cmd_eval(const Options& o, std::ostream& out) {
  if (o.run_dir.empty()) throw UsageError("eval requires --run DIR");
  const fs::path run = o.run_dir;
  const Json man = Json::parse(read_file(run / "manifest.json"));
  RunConfig cfg = parse_config(man.at("config").get<std::string>());
  for (const auto& kv : o.overrides) apply_override(cfg, kv);
  require_valid(cfg);
  const std::string command = man.at("command").get<std::string>();
  const BaseLM base = load_base(run, cfg);
  const Checkpoint trained = load_checkpoint((run / "model.ckpt").string());
  const DatasetPair data = multimodal_datasets(cfg);
  EvalResult res;
  auto score_with = [&](auto& model) {
    auto dst = model.trainable();
    restore_tensors(trained.tensors, dst);
    return evaluate(
        data.eval,
        [&](const Sample& s, std::size_t) {
          return sample_score(model.forward(s.image ? &*s.image : nullptr, s.tokens()), s,
                              s.image ? s.image->n_patches : 0);
        },
        exec_mode(o));
  };
  if (command == "train-inverse") {
    InverseLlava model(base, make_encoder(cfg));
    res = score_with(model);
  } else if (command == "train-baseline") {
    LlavaBaseline model(base, make_encoder(cfg), cfg.projector_linear);
    res = score_with(model);
  } else {
    throw UsageError("eval: run directory holds a '" + command + "' run, not a trained model");
  }
  Json j;
  j["accuracy"] = res.accuracy;
  j["token_accuracy"] = res.token_accuracy;
  Json kinds = Json::object();
  for (const auto& [k, v] : res.accuracy_by_kind) kinds[k] = v;
  j["accuracy_by_kind"] = kinds;
  const fs::path summary = run / "summary.json";
  if (fs::exists(summary)) {
    const Json rep = Json::parse(read_file(summary));
    j["matches_report"] = rep.at("final_eval").at("accuracy").get<double>() == res.accuracy;
  }
  out << j.dump(2) << '\n';
  return 0;
}

struct GradcheckOutcome {
  GradCheckResult result;
  std::vector<std::string> names;
};

GradcheckOutcome gradcheck(const RunConfig& cfg) {
  const BaseLM base(cfg.model);
  InverseLlava model(base, make_encoder(cfg));
  Rng rng(cfg.model.seed, Stream::probe);
  // Move every trainable tensor off its initial value so that zero-initialized
  // paths carry nonzero gradients.
  std::vector<Tensor> params;
  GradcheckOutcome outcome;
  for (auto& nt : model.trainable()) {
    for (double& v : nt.tensor.mutable_values()) v += rng.normal(0.2);
    params.push_back(nt.tensor);
    outcome.names.push_back(nt.name);
  }
  const std::size_t p = cfg.model.n_patches, n = cfg.model.max_text_len;
  PatchGrid image;
  image.n_patches = p;
  image.raw_dim = kPatchRawDim;
  for (std::size_t i = 0; i < p * kPatchRawDim; ++i) image.features.push_back(rng.uniform(0, 1));
  std::vector<TokenId> tokens(n);
  for (auto& t : tokens) t = static_cast<TokenId>(rng.below(cfg.model.vocab_size));
  std::vector<bool> mask(n, false);
  for (std::size_t i = n / 2; i < n; ++i) mask[i] = true;
  if (n == 1) mask[0] = true;
  const SlotLayout layout = build_slot_layout(p, n);
  auto loss_fn = [&] {
    return next_token_loss(model.forward(&image, tokens), layout, tokens, mask);
  };
  outcome.result = finite_diff_check(loss_fn, params, cfg.gradcheck_eps, cfg.gradcheck_max_coords);
  return outcome;
}

int cmd_gradcheck(const Options& o, std::ostream& out) {
  const RunConfig cfg = resolve_config(o);
  std::optional<RunDirectory> dir;
  if (!o.out_dir.empty()) dir.emplace(o.out_dir, o.force);
  const GradcheckOutcome g = gradcheck(cfg);
  const bool pass = g.result.max_relative_error < kGradcheckGate;
  out << "max relative error " << std::setprecision(6) << g.result.max_relative_error << " over "
      << g.result.coordinates_checked << " coordinates (worst: "
      << g.names[g.result.worst_tensor] << "[" << g.result.worst_index << "])\n"
      << (pass ? "PASS" : "FAIL") << '\n';
  if (dir) {
    Json j;
    j["max_relative_error"] = g.result.max_relative_error;
    j["coordinates_checked"] = g.result.coordinates_checked;
    j["worst_tensor"] = g.names[g.result.worst_tensor];
    j["worst_index"] = g.result.worst_index;
    j["eps"] = cfg.gradcheck_eps;
    j["pass"] = pass;
    dir->write("gradcheck.json", j.dump(2) + "\n");
    dir->write("manifest.json", manifest("gradcheck", cfg, Json::object()).dump(2) + "\n");
    dir->commit();
  }
  return pass ? 0 : 2;
}

int cmd_compare(const Options& o, std::ostream& out) {
  const RunConfig cfg = resolve_config(o);
  std::optional<RunDirectory> dir;
  if (!o.out_dir.empty()) dir.emplace(o.out_dir, o.force);
  // Accounting alone needs no trained base.
  const BaseLM base = (cfg.compare_train || !o.base_dir.empty()) ? obtain_base(o, cfg, out)
                                                                 : BaseLM(cfg.model);
  const VisionEncoder enc = make_encoder(cfg);
  InverseLlava inverse(base, enc);
  LlavaBaseline baseline(base, enc, cfg.projector_linear);
  const ComparisonReport rep = compare_pipelines(inverse, baseline, cfg, exec_mode(o));
  const std::string text = comparison_json(rep);
  if (dir) {
    dir->write("comparison.json", text);
    dir->write("comparison.csv", comparison_csv(rep));
    dir->write("manifest.json",
               manifest("compare", cfg, {{"base", rep.base_checksum}, {"encoder", enc.checksum()}})
                       .dump(2) +
                   "\n");
    dir->commit();
  }
  out << text;
  return 0;
}

int cmd_dump_data(const Options& o, std::ostream& out) {
  const RunConfig cfg = resolve_config(o);
  RunDirectory dir(o.out_dir, o.force);
  const DatasetPair mm = multimodal_datasets(cfg);
  const DatasetPair copy = copy_datasets(cfg);
  const std::uint64_t seed = Rng(cfg.model.seed, Stream::train_data, 1).engine()();
  const auto captions = generate_captions(task_spec_for(cfg), cfg.data.eval_samples, seed);
  dir.write("train.jsonl", dump_jsonl(mm.train));
  dir.write("eval.jsonl", dump_jsonl(mm.eval));
  dir.write("copy_eval.jsonl", dump_jsonl(copy.eval));
  dir.write("captions.jsonl", dump_jsonl(captions));
  std::size_t solved = 0;
  for (const auto& s : mm.eval) solved += solve(s) == s.answer ? 1 : 0;
  const ClassStats stats = majority_baseline(mm.eval);
  Json j;
  j["train_samples"] = mm.train.size();
  j["eval_samples"] = mm.eval.size();
  j["solver_accuracy"] = static_cast<double>(solved) / static_cast<double>(mm.eval.size());
  Json maj = Json::object();
  for (const auto& [k, v] : stats.majority_by_kind) maj[k] = v;
  j["majority_baseline"] = {{"overall", stats.majority_overall}, {"by_kind", maj}};
  dir.write("stats.json", j.dump(2) + "\n");
  dir.write("manifest.json", manifest("dump-data", cfg, Json::object()).dump(2) + "\n");
  dir.commit();
  out << j.dump(2) << '\n';
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Options o;
  CLI::App app{"Inverse vision-language fusion experiments", "invllava"};
  app.require_subcommand(1, 1);
  app.set_version_flag("--version", kCodeVersion);

  struct Sub {
    const char* name;
    const char* help;
  };
  const Sub subs[] = {
      {"pretrain-lm", "Pretrain the text-only base LM on the copy task"},
      {"train-inverse", "Single-stage multimodal training of the inverse model"},
      {"train-baseline", "Two-stage training of the projector baseline"},
      {"eval", "Re-evaluate a trained run directory"},
      {"gradcheck", "Finite-difference check of all trainable parameters"},
      {"compare", "Compare sample budgets, parameters and MACs of both pipelines"},
      {"dump-data", "Write the generated datasets as JSON lines"},
  };
  for (const auto& s : subs) {
    auto* sub = app.add_subcommand(s.name, s.help);
    sub->add_option("--config", o.config_path, "Config file (key=value lines)");
    sub->add_option("--set", o.overrides, "Override one config key, KEY=VALUE")
        ->allow_extra_args(false)
        ->take_all();
    sub->add_option("--out", o.out_dir, "Output directory");
    sub->add_flag("--force", o.force, "Replace an existing output directory");
    sub->add_option("--mode", o.mode, "Execution mode")
        ->check(CLI::IsMember({"reference", "throughput"}));
    sub->add_option("--base", o.base_dir, "Directory holding a pretrained base.ckpt");
    sub->add_option("--run", o.run_dir, "Run directory to evaluate");
    sub->callback([&o, name = std::string(s.name)] { o.command = name; });
  }

  std::vector<const char*> argv = {"invllava"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForVersion&) {
    out << kCodeVersion << '\n';
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    if (o.command == "pretrain-lm") return cmd_pretrain(o, out);
    if (o.command == "train-inverse") return cmd_train_inverse(o, out);
    if (o.command == "train-baseline") return cmd_train_baseline(o, out);
    if (o.command == "eval") return cmd_eval(o, out);
    if (o.command == "gradcheck") return cmd_gradcheck(o, out);
    if (o.command == "compare") return cmd_compare(o, out);
    if (o.command == "dump-data") return cmd_dump_data(o, out);
    err << app.help();
    return 1;
  } catch (const ConfigError& e) {
    err << "config error:\n" << e.what() << '\n';
    return 1;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const TrainingFailure& e) {
    err << "training failure: " << e.what() << '\n';
    if (!e.losses().empty()) {
      // Mean loss per window keeps the curve readable for long runs.
      const std::size_t n = e.losses().size();
      const std::size_t window = std::max<std::size_t>(1, n / 20);
      err << "loss curve (" << n << " steps, mean per " << window << "):";
      for (std::size_t i = 0; i < n; i += window) {
        double s = 0.0;
        const std::size_t end = std::min(n, i + window);
        for (std::size_t j = i; j < end; ++j) s += e.losses()[j];
        err << ' ' << s / static_cast<double>(end - i);
      }
      err << '\n';
    }
    if (!e.dump().empty()) err << "offending batch:\n" << e.dump();
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace invllava
