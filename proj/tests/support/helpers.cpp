// SPDX-License-Identifier: Apache-2.0

#include "helpers.hpp"

#include <cmath>
#include <limits>

namespace testutil {

using namespace invllava;

ModelConfig micro_config() {
  ModelConfig cfg;
  cfg.d_h = 8;
  cfg.d_v = 4;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.vocab_size = 16;
  cfg.n_patches = 2;
  cfg.max_text_len = 4;
  cfg.fusion_layers = {1};
  cfg.lora_rank = 2;
  cfg.lora_alpha = 4.0;
  cfg.seed = 5;
  return cfg;
}

void perturb(const std::vector<NamedTensor>& tensors, double stddev, std::uint64_t seed) {
  Rng rng(seed, Stream::probe, 77);
  for (const auto& nt : tensors) {
    Tensor t = nt.tensor;
    for (double& v : t.mutable_values()) v += rng.normal(stddev);
  }
}

std::vector<TokenId> random_tokens(std::size_t n, std::size_t vocab, Rng& rng) {
  std::vector<TokenId> out(n);
  for (auto& t : out) t = static_cast<TokenId>(rng.below(vocab));
  return out;
}

refimpl::Mat random_matrix(std::size_t rows, std::size_t cols, Rng& rng) {
  refimpl::Mat m(rows, std::vector<double>(cols));
  for (auto& row : m) {
    for (double& v : row) v = rng.normal(1.0);
  }
  return m;
}

Tensor to_tensor(const refimpl::Mat& m) {
  const std::size_t r = m.size(), c = m.empty() ? 0 : m[0].size();
  std::vector<double> flat;
  flat.reserve(r * c);
  for (const auto& row : m) flat.insert(flat.end(), row.begin(), row.end());
  return Tensor::from({r, c}, std::move(flat));
}

PatchGrid random_image(std::size_t p, Rng& rng) {
  PatchGrid g;
  g.n_patches = p;
  g.raw_dim = kPatchRawDim;
  g.features.resize(p * kPatchRawDim);
  for (double& v : g.features) v = rng.uniform(0.0, 1.0);
  return g;
}

refimpl::Mat columns(const Tensor& t, std::size_t begin, std::size_t end) {
  const refimpl::Mat all = refimpl::to_mat(t);
  refimpl::Mat out(all.size());
  for (std::size_t r = 0; r < all.size(); ++r) {
    out[r].assign(all[r].begin() + static_cast<std::ptrdiff_t>(begin),
                  all[r].begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

double max_abs_diff(const refimpl::Mat& a, const refimpl::Mat& b) {
  if (a.size() != b.size()) return std::numeric_limits<double>::infinity();
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].size() != b[i].size()) return std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < a[i].size(); ++j) {
      worst = std::max(worst, std::abs(a[i][j] - b[i][j]));
    }
  }
  return worst;
}

}  // namespace testutil
