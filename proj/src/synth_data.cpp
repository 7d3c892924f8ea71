// SPDX-License-Identifier: Apache-2.0

#include "invllava/synth_data.hpp"

#include <algorithm>
#include <array>
#include <json.hpp>

#include "invllava/random.hpp"

namespace invllava {

namespace {

constexpr double kPixelNoise = 0.05;

constexpr std::array<std::array<double, 3>, vocab::kPaletteSize> kPalette = {{
    {0.0, 0.0, 0.0},  // black
    {1.0, 0.0, 0.0},  // red
    {0.0, 1.0, 0.0},  // green
    {0.0, 0.0, 1.0},  // blue
    {1.0, 1.0, 0.0},  // yellow
    {0.6, 0.0, 0.8},  // purple
    {1.0, 0.5, 0.0},  // orange
    {1.0, 1.0, 1.0},  // white
}};

constexpr std::array<const char*, vocab::kPaletteSize> kColorNames = {
    "black", "red", "green", "blue", "yellow", "purple", "orange", "white"};

// Per-kind stream ids so the same (seed, index) differs across kinds.
std::uint64_t kind_stream(TaskKind kind) {
  return 100 + static_cast<std::uint64_t>(kind);
}

std::size_t class_count(const TaskSpec& spec) {
  switch (spec.kind) {
    case TaskKind::count: return spec.max_count + 1;
    case TaskKind::existence: return 2;
    case TaskKind::color_at_cell: return spec.n_colors + 1;
    case TaskKind::text_copy:
    case TaskKind::caption: return 1;
  }
  return 1;
}

std::size_t palette_index_of(TokenId id) {
  return static_cast<std::size_t>(id - vocab::kFirstColor);
}

std::size_t digit_of(TokenId id) { return static_cast<std::size_t>(id - vocab::kFirstDigit); }

void finish(Sample& s) {
  s.loss_mask.assign(s.prompt.size() + s.answer.size(), false);
  std::fill(s.loss_mask.begin() + static_cast<std::ptrdiff_t>(s.prompt.size()),
            s.loss_mask.end(), true);
}

// Random filler colors from the palette, never equal to `avoid` (if set).
std::size_t filler(Rng& rng, std::size_t n_colors, std::optional<std::size_t> avoid) {
  while (true) {
    const auto c = rng.below(n_colors + 1);
    if (!avoid || c != *avoid) return c;
  }
}

std::vector<std::size_t> grid_with_count(Rng& rng, const TaskSpec& spec, std::size_t target,
                                         std::size_t k) {
  const std::size_t p = spec.grid * spec.grid;
  std::vector<std::size_t> cells(p);
  for (auto& c : cells) c = filler(rng, spec.n_colors, target);
  std::vector<std::size_t> order(p);
  for (std::size_t i = 0; i < p; ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng.engine());
  for (std::size_t i = 0; i < k; ++i) cells[order[i]] = target;
  return cells;
}

Sample make_sample(const TaskSpec& spec, std::size_t cls, Rng& rng) {
  Sample s;
  s.kind = spec.kind;
  const std::size_t p = spec.grid * spec.grid;
  switch (spec.kind) {
    case TaskKind::count: {
      const std::size_t target = 1 + rng.below(spec.n_colors);
      s.cells = grid_with_count(rng, spec, target, cls);
      s.prompt = {vocab::kBos, vocab::kHow, vocab::kMany, vocab::color(target),
                  vocab::kQuestion};
      s.answer = {vocab::digit(cls)};
      break;
    }
    case TaskKind::existence: {
      const std::size_t target = 1 + rng.below(spec.n_colors);
      const bool present = cls == 0;
      const std::size_t k = present ? 1 + rng.below(std::max<std::size_t>(spec.max_count, 1)) : 0;
      s.cells = grid_with_count(rng, spec, target, k);
      s.prompt = {vocab::kBos, vocab::kIs, vocab::kThere, vocab::color(target),
                  vocab::kQuestion};
      s.answer = {present ? vocab::kYes : vocab::kNo};
      break;
    }
    case TaskKind::color_at_cell: {
      const std::size_t cell = rng.below(p);
      s.cells.resize(p);
      for (auto& c : s.cells) c = filler(rng, spec.n_colors, std::nullopt);
      s.cells[cell] = cls;
      s.prompt = {vocab::kBos, vocab::kWhat, vocab::kColor, vocab::kCell,
                  vocab::digit(cell), vocab::kQuestion};
      s.answer = {vocab::color(cls)};
      break;
    }
    case TaskKind::caption: {
      s.cells.resize(p);
      for (auto& c : s.cells) c = filler(rng, spec.n_colors, std::nullopt);
      s.prompt = {vocab::kBos};
      s.answer = {vocab::kCell, vocab::digit(0)};
      for (auto c : s.cells) s.answer.push_back(vocab::color(c));
      break;
    }
    case TaskKind::text_copy: {
      std::vector<TokenId> content = {vocab::kYes, vocab::kNo};
      for (std::size_t d = 0; d < vocab::kDigits; ++d) content.push_back(vocab::digit(d));
      for (std::size_t c = 0; c <= spec.n_colors; ++c) content.push_back(vocab::color(c));
      const std::size_t max_k = (spec.max_text_len - 3) / 2;
      const std::size_t k = 1 + rng.below(max_k);
      std::vector<TokenId> payload(k);
      for (auto& t : payload) t = content[rng.below(content.size())];
      s.prompt = {vocab::kBos, vocab::kCopy};
      s.prompt.insert(s.prompt.end(), payload.begin(), payload.end());
      s.prompt.push_back(vocab::kSep);
      s.answer = payload;
      break;
    }
  }
  if (!s.cells.empty()) {
    s.image = rasterize(s.cells, kPixelNoise, rng.engine()());
  }
  finish(s);
  return s;
}

std::size_t longest_sequence(const TaskSpec& spec) {
  const std::size_t p = spec.grid * spec.grid;
  switch (spec.kind) {
    case TaskKind::count:
    case TaskKind::existence: return 6;
    case TaskKind::color_at_cell: return 7;
    case TaskKind::caption: return 3 + p;
    case TaskKind::text_copy: return spec.max_text_len;
  }
  return 0;
}

}  // namespace

std::string task_name(TaskKind kind) {
  switch (kind) {
    case TaskKind::count: return "count";
    case TaskKind::existence: return "existence";
    case TaskKind::color_at_cell: return "color";
    case TaskKind::text_copy: return "copy";
    case TaskKind::caption: return "caption";
  }
  return "unknown";
}

TaskKind task_from_name(const std::string& name) {
  for (auto k : {TaskKind::count, TaskKind::existence, TaskKind::color_at_cell,
                 TaskKind::text_copy, TaskKind::caption}) {
    if (task_name(k) == name) return k;
  }
  throw ConfigError({"unknown task kind '" + name + "'"});
}

namespace vocab {

TokenId digit(std::size_t n) {
  if (n >= kDigits) throw IndexError("no digit token for " + std::to_string(n));
  return kFirstDigit + static_cast<TokenId>(n);
}

TokenId color(std::size_t palette_index) {
  if (palette_index >= kPaletteSize) {
    throw IndexError("no color token for palette index " + std::to_string(palette_index));
  }
  return kFirstColor + static_cast<TokenId>(palette_index);
}

std::string token_name(TokenId id) {
  static constexpr std::array<const char*, 14> kWords = {
      "<pad>", "<bos>", "<sep>", "?", "how", "many", "is", "there",
      "what", "color", "cell", "copy", "yes", "no"};
  if (id >= 0 && id < kFirstDigit) return kWords[static_cast<std::size_t>(id)];
  if (id >= kFirstDigit && id < kFirstColor) return std::to_string(id - kFirstDigit);
  if (id >= kFirstColor && id < kFirstColor + static_cast<TokenId>(kPaletteSize)) {
    return kColorNames[static_cast<std::size_t>(id - kFirstColor)];
  }
  return "<tok" + std::to_string(id) + ">";
}

std::size_t required_size(std::size_t n_colors) {
  return static_cast<std::size_t>(kFirstColor) + 1 + n_colors;
}

}  // namespace vocab

std::vector<TokenId> Sample::tokens() const {
  std::vector<TokenId> out(prompt);
  out.insert(out.end(), answer.begin(), answer.end());
  return out;
}

void check_task_spec(const TaskSpec& spec) {
  std::vector<std::string> issues;
  const std::size_t p = spec.grid * spec.grid;
  if (spec.grid == 0) issues.push_back("grid must be positive");
  if (spec.n_colors < 1 || spec.n_colors + 1 > vocab::kPaletteSize) {
    issues.push_back("n_colors must lie in 1.." + std::to_string(vocab::kPaletteSize - 1));
  }
  if (spec.vocab_size < vocab::required_size(spec.n_colors)) {
    issues.push_back("vocabulary too small for task alphabet: need " +
                     std::to_string(vocab::required_size(spec.n_colors)) + " tokens, have " +
                     std::to_string(spec.vocab_size));
  }
  if (spec.max_count > p) issues.push_back("max_count exceeds the number of cells");
  if (spec.max_count + 1 > vocab::kDigits || p > vocab::kDigits) {
    issues.push_back("grid too large for the digit tokens");
  }
  if (spec.kind == TaskKind::text_copy && spec.max_text_len < 5) {
    issues.push_back("max_text_len too short for the copy task");
  }
  if (longest_sequence(spec) > spec.max_text_len) {
    issues.push_back(task_name(spec.kind) + " sequences need " +
                     std::to_string(longest_sequence(spec)) + " tokens, max_text_len is " +
                     std::to_string(spec.max_text_len));
  }
  if (spec.train_seed == spec.eval_seed) {
    issues.push_back("train and eval seeds must differ");
  }
  if (!issues.empty()) throw ConfigError(std::move(issues));
}

std::vector<Sample> generate(const TaskSpec& spec, std::size_t count, std::uint64_t seed) {
  if (count == 0) throw ContractError("generate: count must be at least 1");
  check_task_spec(spec);
  const std::size_t n_classes = class_count(spec);
  std::vector<std::size_t> classes(count);
  for (std::size_t i = 0; i < count; ++i) classes[i] = i % n_classes;
  Rng balance(seed, kind_stream(spec.kind), ~std::uint64_t{0});
  std::shuffle(classes.begin(), classes.end(), balance.engine());

  std::vector<Sample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng(seed, kind_stream(spec.kind), i);
    out.push_back(make_sample(spec, classes[i], rng));
  }
  return out;
}

std::vector<Sample> generate_mixture(const TaskSpec& base, const std::vector<TaskKind>& kinds,
                                     std::size_t count, std::uint64_t seed) {
  if (kinds.empty()) throw ContractError("generate_mixture: no task kinds");
  std::vector<std::vector<Sample>> per_kind;
  for (std::size_t k = 0; k < kinds.size(); ++k) {
    TaskSpec spec = base;
    spec.kind = kinds[k];
    const std::size_t n = count / kinds.size() + (k < count % kinds.size() ? 1 : 0);
    per_kind.push_back(n ? generate(spec, n, seed) : std::vector<Sample>{});
  }
  std::vector<Sample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    out.push_back(std::move(per_kind[i % kinds.size()][i / kinds.size()]));
  }
  return out;
}

std::vector<Sample> generate_captions(const TaskSpec& spec, std::size_t count,
                                      std::uint64_t seed) {
  TaskSpec s = spec;
  s.kind = TaskKind::caption;
  return generate(s, count, seed);
}

PatchGrid rasterize(const std::vector<std::size_t>& cells, double noise, std::uint64_t seed) {
  Rng rng(seed);
  PatchGrid img;
  img.n_patches = cells.size();
  img.raw_dim = kPatchRawDim;
  img.features.reserve(cells.size() * kPatchRawDim);
  for (auto c : cells) {
    if (c >= vocab::kPaletteSize) throw IndexError("rasterize: palette index out of range");
    for (std::size_t px = 0; px < kCellPixels * kCellPixels; ++px) {
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const double jitter = noise > 0.0 ? rng.uniform(-noise, noise) : 0.0;
        img.features.push_back(kPalette[c][ch] + jitter);
      }
    }
  }
  return img;
}

std::vector<std::size_t> read_cells(const PatchGrid& image) {
  std::vector<std::size_t> cells(image.n_patches);
  const std::size_t pixels = image.raw_dim / 3;
  for (std::size_t j = 0; j < image.n_patches; ++j) {
    auto patch = image.patch(j);
    std::array<double, 3> mean{};
    for (std::size_t px = 0; px < pixels; ++px) {
      for (std::size_t ch = 0; ch < 3; ++ch) mean[ch] += patch[px * 3 + ch];
    }
    for (double& m : mean) m /= static_cast<double>(pixels);
    double best = 1e300;
    for (std::size_t c = 0; c < vocab::kPaletteSize; ++c) {
      double dist = 0.0;
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const double t = mean[ch] - kPalette[c][ch];
        dist += t * t;
      }
      if (dist < best) {
        best = dist;
        cells[j] = c;
      }
    }
  }
  return cells;
}

std::vector<TokenId> solve(const Sample& sample) {
  switch (sample.kind) {
    case TaskKind::text_copy: {
      return std::vector<TokenId>(sample.prompt.begin() + 2, sample.prompt.end() - 1);
    }
    case TaskKind::count:
    case TaskKind::existence:
    case TaskKind::color_at_cell:
    case TaskKind::caption:
      break;
  }
  if (!sample.image) throw ContractError("solve: visual task without an image");
  const auto cells = read_cells(*sample.image);
  switch (sample.kind) {
    case TaskKind::count: {
      const auto target = palette_index_of(sample.prompt[3]);
      return {vocab::digit(static_cast<std::size_t>(std::count(cells.begin(), cells.end(), target)))};
    }
    case TaskKind::existence: {
      const auto target = palette_index_of(sample.prompt[3]);
      const bool present = std::find(cells.begin(), cells.end(), target) != cells.end();
      return {present ? vocab::kYes : vocab::kNo};
    }
    case TaskKind::color_at_cell:
      return {vocab::color(cells[digit_of(sample.prompt[4])])};
    case TaskKind::caption: {
      std::vector<TokenId> out = {vocab::kCell, vocab::digit(0)};
      for (auto c : cells) out.push_back(vocab::color(c));
      return out;
    }
    case TaskKind::text_copy: break;
  }
  return {};
}

ClassStats majority_baseline(const std::vector<Sample>& samples) {
  std::map<std::string, std::map<std::vector<TokenId>, std::size_t>> by_kind;
  std::map<std::vector<TokenId>, std::size_t> overall;
  std::map<std::string, std::size_t> totals;
  for (const auto& s : samples) {
    ++by_kind[task_name(s.kind)][s.answer];
    ++overall[s.answer];
    ++totals[task_name(s.kind)];
  }
  ClassStats stats;
  for (const auto& [kind, counts] : by_kind) {
    std::size_t best = 0;
    for (const auto& [answer, n] : counts) best = std::max(best, n);
    stats.majority_by_kind[kind] = static_cast<double>(best) / static_cast<double>(totals[kind]);
  }
  std::size_t best = 0;
  for (const auto& [answer, n] : overall) best = std::max(best, n);
  stats.majority_overall =
      samples.empty() ? 0.0 : static_cast<double>(best) / static_cast<double>(samples.size());
  return stats;
}

std::vector<TaskKind> enabled_tasks(const DataConfig& data) {
  std::vector<TaskKind> kinds;
  if (data.task_count) kinds.push_back(TaskKind::count);
  if (data.task_existence) kinds.push_back(TaskKind::existence);
  if (data.task_color) kinds.push_back(TaskKind::color_at_cell);
  return kinds;
}

TaskSpec task_spec_for(const RunConfig& cfg) {
  TaskSpec spec;
  spec.grid = cfg.model.grid_size();
  spec.n_colors = cfg.data.n_colors;
  spec.max_count = cfg.data.max_count;
  spec.max_text_len = cfg.model.max_text_len;
  spec.vocab_size = cfg.model.vocab_size;
  spec.train_seed = Rng(cfg.model.seed, Stream::train_data).engine()();
  spec.eval_seed = Rng(cfg.model.seed, Stream::eval_data).engine()();
  return spec;
}

std::string dump_jsonl(const std::vector<Sample>& samples) {
  std::string out;
  for (const auto& s : samples) {
    nlohmann::json j;
    j["kind"] = task_name(s.kind);
    j["prompt"] = s.prompt;
    j["answer"] = s.answer;
    j["loss_mask"] = s.loss_mask;
    if (s.image) {
      j["n_patches"] = s.image->n_patches;
      j["patch_dim"] = s.image->raw_dim;
      j["image"] = s.image->features;
      j["cells"] = s.cells;
    } else {
      j["image"] = nullptr;
    }
    out += j.dump();
    out += '\n';
  }
  return out;
}

}  // namespace invllava
