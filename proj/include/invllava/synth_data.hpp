// SPDX-License-Identifier: Apache-2.0
//
// Deterministic synthetic multimodal tasks over colored g x g cell grids.
//
// Every sample draws from its own random stream derived from
// (seed, sample index), so generation can be split across workers in any
// way and still reproduce the same samples.

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "invllava/config.hpp"
#include "invllava/tensor.hpp"
#include "invllava/vision_encoder.hpp"

namespace invllava {

enum class TaskKind { count, existence, color_at_cell, text_copy, caption };

std::string task_name(TaskKind kind);
TaskKind task_from_name(const std::string& name);

// Fixed token layout shared by every task.
namespace vocab {
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kSep = 2;
inline constexpr TokenId kQuestion = 3;
inline constexpr TokenId kHow = 4;
inline constexpr TokenId kMany = 5;
inline constexpr TokenId kIs = 6;
inline constexpr TokenId kThere = 7;
inline constexpr TokenId kWhat = 8;
inline constexpr TokenId kColor = 9;
inline constexpr TokenId kCell = 10;
inline constexpr TokenId kCopy = 11;
inline constexpr TokenId kYes = 12;
inline constexpr TokenId kNo = 13;
inline constexpr TokenId kFirstDigit = 14;
inline constexpr std::size_t kDigits = 17;  // "0" .. "16"
inline constexpr TokenId kFirstColor = kFirstDigit + static_cast<TokenId>(kDigits);
// Palette index 0 is the black background; 1.. are foreground colors.
inline constexpr std::size_t kPaletteSize = 8;

TokenId digit(std::size_t n);
TokenId color(std::size_t palette_index);
std::string token_name(TokenId id);
// Smallest vocabulary that covers tasks using n_colors foreground colors.
std::size_t required_size(std::size_t n_colors);
}  // namespace vocab

inline constexpr std::size_t kCellPixels = 2;
// Raw patch features: kCellPixels^2 RGB pixels.
inline constexpr std::size_t kPatchRawDim = kCellPixels * kCellPixels * 3;

struct TaskSpec {
  TaskKind kind = TaskKind::count;
  std::size_t grid = 4;
  std::size_t n_colors = 4;
  std::size_t max_count = 4;
  std::size_t max_text_len = 24;
  std::size_t vocab_size = 64;
  std::uint64_t train_seed = 1;
  std::uint64_t eval_seed = 2;
};

struct Sample {
  TaskKind kind = TaskKind::count;
  std::optional<PatchGrid> image;
  // Ground-truth palette index per cell; empty for text-only samples.
  std::vector<std::size_t> cells;
  std::vector<TokenId> prompt;
  std::vector<TokenId> answer;
  // Over prompt followed by answer; true exactly on answer positions.
  std::vector<bool> loss_mask;

  std::vector<TokenId> tokens() const;
};

// Throws ConfigError if the TaskSpec cannot be realized (vocabulary too small,
// prompts too long, overlapping split seeds...).
void check_task_spec(const TaskSpec& spec);

std::vector<Sample> generate(const TaskSpec& spec, std::size_t count, std::uint64_t seed);
// Interleaves several task kinds (sample i uses kinds[i % kinds.size()])
// and balances answer classes within each kind.
std::vector<Sample> generate_mixture(const TaskSpec& base, const std::vector<TaskKind>& kinds,
                                     std::size_t count, std::uint64_t seed);
// Alignment-stage image/caption pairs: "cell 0" followed by every cell
// color in raster order.
std::vector<Sample> generate_captions(const TaskSpec& spec, std::size_t count,
                                      std::uint64_t seed);

// Rasterizes a cell-color grid into patches; noise is uniform in
// [-noise, noise] per pixel channel.
PatchGrid rasterize(const std::vector<std::size_t>& cells, double noise, std::uint64_t seed);
// Reads the cell colors back from pixels (nearest palette color).
std::vector<std::size_t> read_cells(const PatchGrid& image);

// Rule-based solver that answers from the image pixels alone.
std::vector<TokenId> solve(const Sample& sample);

struct ClassStats {
  std::map<std::string, double> majority_by_kind;
  double majority_overall = 0.0;
};
ClassStats majority_baseline(const std::vector<Sample>& samples);

// Task kinds enabled in the run's data section.
std::vector<TaskKind> enabled_tasks(const DataConfig& data);
TaskSpec task_spec_for(const RunConfig& cfg);

// One JSON object per line: kind, prompt, answer, loss_mask, image.
std::string dump_jsonl(const std::vector<Sample>& samples);

}  // namespace invllava
