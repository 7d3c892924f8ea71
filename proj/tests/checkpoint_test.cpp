// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "helpers.hpp"
#include "invllava/checkpoint.hpp"
#include "invllava/fusion_transformer.hpp"

using namespace invllava;

namespace {

std::filesystem::path temp_file(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "invllava_ckpt_test";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitwiseExact) {
  Rng rng(1);
  Checkpoint ck;
  ck.config_text = "d_h=8\n";
  ck.tensors = {{"a", gaussian({3, 4}, 1.0, rng)},
                {"b", Tensor::from({3}, {0.1, -0.0, std::nextafter(1.0, 2.0)})},
                {"s", Tensor::scalar(1e-300)}};
  const auto path = temp_file("round_trip.ckpt");
  save_checkpoint(path.string(), ck);
  Checkpoint back = load_checkpoint(path.string());
  EXPECT_EQ(back.config_text, ck.config_text);
  ASSERT_EQ(back.tensors.size(), ck.tensors.size());
  for (std::size_t i = 0; i < ck.tensors.size(); ++i) {
    EXPECT_EQ(back.tensors[i].name, ck.tensors[i].name);
    EXPECT_EQ(back.tensors[i].tensor.shape(), ck.tensors[i].tensor.shape());
    const auto a = ck.tensors[i].tensor.values(), b = back.tensors[i].tensor.values();
    EXPECT_EQ(std::memcmp(a.data(), b.data(), a.size() * sizeof(double)), 0);
  }
  EXPECT_EQ(checksum(back.tensors), checksum(ck.tensors));
}

TEST(Checkpoint, ModelWeightsRestoreExactly) {
  ModelConfig cfg = testutil::micro_config();
  BaseLM a(cfg);
  cfg.seed = 99;
  BaseLM b(cfg);
  ASSERT_NE(a.checksum(), b.checksum());
  const auto path = temp_file("model.ckpt");
  save_checkpoint(path.string(), {"", a.named()});
  auto dst = b.named();
  restore_tensors(load_checkpoint(path.string()).tensors, dst);
  EXPECT_EQ(a.checksum(), b.checksum());
}

TEST(Checkpoint, CorruptAndMismatchedFilesRejected) {
  const auto path = temp_file("garbage.ckpt");
  {
    std::ofstream f(path, std::ios::binary);
    f << "not a checkpoint";
  }
  EXPECT_THROW(load_checkpoint(path.string()), Error);
  EXPECT_THROW(load_checkpoint(temp_file("missing.ckpt").string()), Error);

  std::vector<NamedTensor> src{{"w", Tensor::zeros({2, 2})}};
  std::vector<NamedTensor> wrong_shape{{"w", Tensor::zeros({2, 3})}};
  std::vector<NamedTensor> wrong_name{{"v", Tensor::zeros({2, 2})}};
  EXPECT_THROW(restore_tensors(src, wrong_shape), Error);
  EXPECT_THROW(restore_tensors(src, wrong_name), Error);
}

TEST(Checkpoint, ChecksumSeesNamesAndValues) {
  std::vector<NamedTensor> a{{"w", Tensor::from({2}, {1, 2})}};
  std::vector<NamedTensor> b{{"v", Tensor::from({2}, {1, 2})}};
  std::vector<NamedTensor> c{{"w", Tensor::from({2}, {1, 2.0000000000000004})}};
  EXPECT_NE(checksum(a), checksum(b));
  EXPECT_NE(checksum(a), checksum(c));
  EXPECT_EQ(sha256_hex(std::vector<double>{}),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}
