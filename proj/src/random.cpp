// SPDX-License-Identifier: Apache-2.0

#include "invllava/random.hpp"

#include <numeric>

namespace invllava {

namespace {

std::mt19937_64 seeded(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  return std::mt19937_64(seq);
}

}  // namespace

Rng::Rng(std::uint64_t seed) : engine_(seeded(seed, 0, 0)) {}

Rng::Rng(std::uint64_t seed, Stream stream, std::uint64_t index)
    : engine_(seeded(seed, static_cast<std::uint64_t>(stream), index)) {}

Rng::Rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t index)
    : engine_(seeded(seed, stream, index)) {}

double Rng::normal(double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  return dist(engine_);
}

double Rng::uniform(double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  return dist(engine_);
}

std::size_t Rng::below(std::size_t n) {
  if (n == 0) throw ContractError("Rng::below(0)");
  std::uniform_int_distribution<std::size_t> dist(0, n - 1);
  return dist(engine_);
}

Tensor gaussian(Shape shape, double stddev, Rng& rng, bool requires_grad) {
  auto t = Tensor::zeros(std::move(shape), requires_grad);
  for (double& v : t.mutable_values()) v = rng.normal(stddev);
  return t;
}

}  // namespace invllava
