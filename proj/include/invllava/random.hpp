// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <random>

#include "invllava/tensor.hpp"

namespace invllava {

// Independent random streams derived from the run seed. Every consumer of
// randomness owns one stream id so adding a consumer never perturbs another.
enum class Stream : std::uint64_t {
  base_lm = 1,
  encoder = 2,
  fusion = 3,
  lora = 4,
  projector = 5,
  pretrain_data = 6,
  train_data = 7,
  eval_data = 8,
  batching = 9,
  probe = 10,
};

class Rng {
 public:
  explicit Rng(std::uint64_t seed);
  Rng(std::uint64_t seed, Stream stream, std::uint64_t index = 0);
  Rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t index);

  double normal(double stddev = 1.0);
  double uniform(double lo, double hi);
  // Uniform integer in [0, n).
  std::size_t below(std::size_t n);
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

Tensor gaussian(Shape shape, double stddev, Rng& rng, bool requires_grad = false);

}  // namespace invllava
