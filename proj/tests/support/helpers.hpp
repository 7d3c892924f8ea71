// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <vector>

#include "invllava/checkpoint.hpp"
#include "invllava/config.hpp"
#include "invllava/random.hpp"
#include "invllava/synth_data.hpp"
#include "reference_model.hpp"

namespace testutil {

// d_h=8, d_v=4, L=2, S={1}, 2 heads, |V|=16, p=2, n=4.
invllava::ModelConfig micro_config();

// Adds N(0, stddev) noise to every value of every tensor.
void perturb(const std::vector<invllava::NamedTensor>& tensors, double stddev,
             std::uint64_t seed);

std::vector<invllava::TokenId> random_tokens(std::size_t n, std::size_t vocab,
                                             invllava::Rng& rng);
refimpl::Mat random_matrix(std::size_t rows, std::size_t cols, invllava::Rng& rng);
invllava::Tensor to_tensor(const refimpl::Mat& m);

// Random raw patch grid with p patches.
invllava::PatchGrid random_image(std::size_t p, invllava::Rng& rng);

// Columns [begin, end) of a logits tensor as a nested matrix.
refimpl::Mat columns(const invllava::Tensor& t, std::size_t begin, std::size_t end);
double max_abs_diff(const refimpl::Mat& a, const refimpl::Mat& b);

}  // namespace testutil
