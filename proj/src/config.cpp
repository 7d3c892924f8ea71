// SPDX-License-Identifier: Apache-2.0

#include "invllava/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

namespace invllava {

namespace {

std::string join_lines(const std::vector<std::string>& issues) {
  std::string out;
  for (const auto& s : issues) {
    if (!out.empty()) out += '\n';
    out += s;
  }
  return out;
}

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

std::size_t parse_size(std::string_view key, std::string_view v) {
  std::size_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError({std::string(key) + ": expected a non-negative integer, got '" +
                       std::string(v) + "'"});
  }
  return out;
}

std::uint64_t parse_u64(std::string_view key, std::string_view v) {
  std::uint64_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError({std::string(key) + ": expected a non-negative integer, got '" +
                       std::string(v) + "'"});
  }
  return out;
}

double parse_real(std::string_view key, std::string_view v) {
  std::string s(v);
  char* end = nullptr;
  const double out = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size()) {
    throw ConfigError({std::string(key) + ": expected a real number, got '" + s + "'"});
  }
  return out;
}

bool parse_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError({std::string(key) + ": expected true or false, got '" +
                     std::string(v) + "'"});
}

std::vector<std::size_t> parse_list(std::string_view key, std::string_view v) {
  std::vector<std::size_t> out;
  while (!v.empty()) {
    const auto comma = v.find(',');
    out.push_back(parse_size(key, trim(v.substr(0, comma))));
    if (comma == std::string_view::npos) break;
    v.remove_prefix(comma + 1);
  }
  return out;
}

std::string format_real(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string format_list(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(v[i]);
  }
  return out;
}

struct Field {
  const char* key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, std::string_view)> set;
};

#define INVLLAVA_FIELD(KIND, KEY, EXPR)                                            \
  Field {                                                                          \
    KEY, [](const RunConfig& c) { return KIND##_out(c.EXPR); },                    \
        [](RunConfig& c, std::string_view v) { c.EXPR = KIND##_in(KEY, v); }       \
  }

std::string size_out(std::size_t v) { return std::to_string(v); }
std::string u64_out(std::uint64_t v) { return std::to_string(v); }
std::string real_out(double v) { return format_real(v); }
std::string bool_out(bool v) { return v ? "true" : "false"; }
std::string list_out(const std::vector<std::size_t>& v) { return format_list(v); }
std::size_t size_in(std::string_view k, std::string_view v) { return parse_size(k, v); }
std::uint64_t u64_in(std::string_view k, std::string_view v) { return parse_u64(k, v); }
double real_in(std::string_view k, std::string_view v) { return parse_real(k, v); }
bool bool_in(std::string_view k, std::string_view v) { return parse_bool(k, v); }
std::vector<std::size_t> list_in(std::string_view k, std::string_view v) {
  return parse_list(k, v);
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      INVLLAVA_FIELD(size, "d_h", model.d_h),
      INVLLAVA_FIELD(size, "d_v", model.d_v),
      INVLLAVA_FIELD(size, "n_layers", model.n_layers),
      INVLLAVA_FIELD(size, "n_heads", model.n_heads),
      INVLLAVA_FIELD(size, "vocab_size", model.vocab_size),
      INVLLAVA_FIELD(size, "n_patches", model.n_patches),
      INVLLAVA_FIELD(size, "max_text_len", model.max_text_len),
      INVLLAVA_FIELD(list, "fusion_layers", model.fusion_layers),
      INVLLAVA_FIELD(size, "lora_rank", model.lora_rank),
      INVLLAVA_FIELD(real, "lora_alpha", model.lora_alpha),
      INVLLAVA_FIELD(bool, "hd_mode", model.hd_mode),
      INVLLAVA_FIELD(bool, "penultimate_features", model.penultimate_features),
      INVLLAVA_FIELD(u64, "seed", model.seed),
      INVLLAVA_FIELD(real, "learning_rate", train.learning_rate),
      INVLLAVA_FIELD(real, "warmup_ratio", train.warmup_ratio),
      INVLLAVA_FIELD(size, "total_steps", train.total_steps),
      INVLLAVA_FIELD(size, "batch_size", train.batch_size),
      INVLLAVA_FIELD(real, "weight_decay", train.weight_decay),
      INVLLAVA_FIELD(real, "grad_clip", train.grad_clip),
      INVLLAVA_FIELD(size, "eval_every", train.eval_every),
      INVLLAVA_FIELD(real, "pretrain_learning_rate", pretrain.learning_rate),
      INVLLAVA_FIELD(real, "pretrain_warmup_ratio", pretrain.warmup_ratio),
      INVLLAVA_FIELD(size, "pretrain_steps", pretrain.total_steps),
      INVLLAVA_FIELD(size, "pretrain_batch_size", pretrain.batch_size),
      INVLLAVA_FIELD(real, "pretrain_weight_decay", pretrain.weight_decay),
      INVLLAVA_FIELD(real, "pretrain_grad_clip", pretrain.grad_clip),
      INVLLAVA_FIELD(size, "pretrain_eval_every", pretrain.eval_every),
      INVLLAVA_FIELD(real, "pretrain_target_accuracy", pretrain_target_accuracy),
      INVLLAVA_FIELD(size, "train_samples", data.train_samples),
      INVLLAVA_FIELD(size, "eval_samples", data.eval_samples),
      INVLLAVA_FIELD(bool, "task_count", data.task_count),
      INVLLAVA_FIELD(bool, "task_existence", data.task_existence),
      INVLLAVA_FIELD(bool, "task_color", data.task_color),
      INVLLAVA_FIELD(size, "max_count", data.max_count),
      INVLLAVA_FIELD(size, "n_colors", data.n_colors),
      INVLLAVA_FIELD(size, "align_steps", align_steps),
      INVLLAVA_FIELD(bool, "projector_linear", projector_linear),
      INVLLAVA_FIELD(size, "align_units", align_units),
      INVLLAVA_FIELD(size, "instruct_units", instruct_units),
      INVLLAVA_FIELD(bool, "compare_train", compare_train),
      INVLLAVA_FIELD(real, "gradcheck_eps", gradcheck_eps),
      INVLLAVA_FIELD(size, "gradcheck_max_coords", gradcheck_max_coords),
  };
  return table;
}

#undef INVLLAVA_FIELD

const Field* find_field(std::string_view key) {
  for (const auto& f : fields()) {
    if (key == f.key) return &f;
  }
  return nullptr;
}

}  // namespace

ConfigError::ConfigError(std::vector<std::string> issues)
    : Error(join_lines(issues)), issues_(std::move(issues)) {}

std::size_t ModelConfig::grid_size() const {
  const auto g = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(n_patches))));
  return g;
}

bool ModelConfig::is_fusion_layer(std::size_t layer) const {
  return std::find(fusion_layers.begin(), fusion_layers.end(), layer) !=
         fusion_layers.end();
}

std::vector<std::string> validate(const ModelConfig& cfg) {
  std::vector<std::string> issues;
  if (cfg.d_h == 0) issues.push_back("d_h must be positive");
  if (cfg.d_v < 1) issues.push_back("d_v must be at least 1");
  if (cfg.n_layers == 0) issues.push_back("n_layers must be positive");
  if (cfg.n_heads == 0 || (cfg.d_h % cfg.n_heads) != 0) {
    issues.push_back("heads must divide d_h");
  }
  if (cfg.vocab_size == 0) issues.push_back("vocab_size must be positive");
  if (cfg.max_text_len < 2) issues.push_back("max_text_len must be at least 2");
  if (cfg.fusion_layers.empty()) issues.push_back("fusion layer set is empty");
  for (std::size_t i = 0; i < cfg.fusion_layers.size(); ++i) {
    const auto l = cfg.fusion_layers[i];
    if (l < 1 || l > cfg.n_layers) {
      issues.push_back("fusion layer out of range: " + std::to_string(l) +
                       " not in 1.." + std::to_string(cfg.n_layers));
    }
    if (i > 0 && cfg.fusion_layers[i - 1] >= l) {
      issues.push_back("fusion layers must be strictly increasing");
    }
  }
  if (cfg.hd_mode && cfg.d_v % 2 != 0) {
    issues.push_back("hd_mode requires an even d_v");
  }
  if (cfg.hd_mode && cfg.penultimate_features) {
    issues.push_back("penultimate_features conflicts with hd_mode");
  }
  const bool needs_lora = cfg.fusion_layers.size() < cfg.n_layers;
  if (needs_lora && cfg.lora_rank == 0) {
    issues.push_back("lora_rank must be positive when non-fusion layers exist");
  }
  if (!(cfg.lora_alpha >= 0.0) || !std::isfinite(cfg.lora_alpha)) {
    issues.push_back("lora_alpha must be finite and non-negative");
  }
  return issues;
}

std::vector<std::string> validate(const TrainConfig& cfg) {
  std::vector<std::string> issues;
  if (!(cfg.learning_rate > 0.0) || !std::isfinite(cfg.learning_rate)) {
    issues.push_back("learning_rate must be positive");
  }
  if (!(cfg.warmup_ratio >= 0.0 && cfg.warmup_ratio < 1.0)) {
    issues.push_back("warmup_ratio must lie in [0, 1)");
  }
  if (cfg.total_steps == 0) issues.push_back("total_steps must be positive");
  if (cfg.batch_size == 0) issues.push_back("batch_size must be positive");
  if (!(cfg.weight_decay >= 0.0)) issues.push_back("weight_decay must be non-negative");
  if (!(cfg.grad_clip >= 0.0)) issues.push_back("grad_clip must be non-negative");
  return issues;
}

std::vector<std::string> validate(const RunConfig& cfg) {
  auto issues = validate(cfg.model);
  for (auto& s : validate(cfg.train)) issues.push_back(s);
  for (auto& s : validate(cfg.pretrain)) issues.push_back("pretrain: " + s);
  if (!(cfg.pretrain_target_accuracy > 0.0 && cfg.pretrain_target_accuracy <= 1.0)) {
    issues.push_back("pretrain_target_accuracy must lie in (0, 1]");
  }
  // The task images are g x g cell grids, one patch per cell.
  const auto g = cfg.model.grid_size();
  if (g * g != cfg.model.n_patches) {
    issues.push_back("n_patches must be a perfect square (g x g grid)");
  }
  if (cfg.data.train_samples == 0) issues.push_back("train_samples must be positive");
  if (cfg.data.eval_samples == 0) issues.push_back("eval_samples must be positive");
  if (!cfg.data.task_count && !cfg.data.task_existence && !cfg.data.task_color) {
    issues.push_back("at least one task kind must be enabled");
  }
  if (cfg.data.max_count > cfg.model.n_patches) {
    issues.push_back("max_count exceeds n_patches");
  }
  if (cfg.data.n_colors < 2) issues.push_back("n_colors must be at least 2");
  if (cfg.instruct_units == 0) issues.push_back("instruct_units must be positive");
  if (!(cfg.gradcheck_eps > 0.0)) issues.push_back("gradcheck_eps must be positive");
  return issues;
}

std::vector<std::string> recommendations(const ModelConfig& cfg) {
  std::vector<std::string> notes;
  if (cfg.d_v * 4 < cfg.d_h || cfg.d_v > cfg.d_h) {
    notes.push_back("d_v outside the recommended range [d_h/4, d_h]");
  }
  if (cfg.fusion_layers.size() > 1) {
    notes.push_back("multi-layer fusion is experimental and may train unstably");
  }
  return notes;
}

void require_valid(const ModelConfig& cfg) {
  auto issues = validate(cfg);
  if (!issues.empty()) throw ConfigError(std::move(issues));
}

void require_valid(const RunConfig& cfg) {
  auto issues = validate(cfg);
  if (!issues.empty()) throw ConfigError(std::move(issues));
}

void apply_override(RunConfig& cfg, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos) {
    throw ConfigError({"expected key=value, got '" + std::string(assignment) + "'"});
  }
  const auto key = trim(assignment.substr(0, eq));
  const auto value = trim(assignment.substr(eq + 1));
  const Field* field = find_field(key);
  if (field == nullptr) throw ConfigError({"unknown key '" + std::string(key) + "'"});
  field->set(cfg, value);
}

RunConfig parse_config(std::string_view text) {
  RunConfig cfg;
  std::vector<std::string> issues;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    auto line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) {
      line = line.substr(0, hash);
    }
    line = trim(line);
    if (line.empty()) continue;
    try {
      apply_override(cfg, line);
    } catch (const ConfigError& e) {
      for (const auto& issue : e.issues()) {
        issues.push_back("line " + std::to_string(line_no) + ": " + issue);
      }
    }
  }
  if (!issues.empty()) throw ConfigError(std::move(issues));
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError({"cannot read config file '" + path + "'"});
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string serialize_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& f : fields()) {
    out += f.key;
    out += '=';
    out += f.get(cfg);
    out += '\n';
  }
  return out;
}

}  // namespace invllava
