// SPDX-License-Identifier: Apache-2.0

#include "invllava/checkpoint.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <memory>
#include <unordered_map>

namespace invllava {

static_assert(std::endian::native == std::endian::little,
              "checkpoint and checksum byte layouts assume a little-endian host");

namespace {

constexpr char kMagic[8] = {'I', 'V', 'L', 'L', 'C', 'K', 'P', 'T'};

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new(), &EVP_MD_CTX_free) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr) != 1) {
      throw Error("sha256: digest initialization failed");
    }
  }
  void update(const void* data, std::size_t len) {
    EVP_DigestUpdate(ctx_.get(), data, len);
  }
  template <typename T>
  void update_value(const T& v) { update(&v, sizeof(T)); }
  std::string hex() {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx_.get(), digest, &len);
    static constexpr char kHex[] = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
      out += kHex[digest[i] >> 4];
      out += kHex[digest[i] & 0xf];
    }
    return out;
  }

 private:
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx_;
};

void write_u64(std::ostream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::uint64_t read_u64(std::istream& in) {
  std::uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!in) throw Error("checkpoint: truncated file");
  return v;
}

std::string read_bytes(std::istream& in, std::uint64_t len) {
  if (len > (1ULL << 32)) throw Error("checkpoint: implausible field length");
  std::string s(len, '\0');
  in.read(s.data(), static_cast<std::streamsize>(len));
  if (!in) throw Error("checkpoint: truncated file");
  return s;
}

}  // namespace

std::string sha256_hex(std::span<const double> values) {
  Sha256 h;
  h.update(values.data(), values.size_bytes());
  return h.hex();
}

std::string checksum(std::span<const NamedTensor> tensors) {
  Sha256 h;
  for (const auto& nt : tensors) {
    h.update(nt.name.data(), nt.name.size());
    for (auto e : nt.tensor.shape()) h.update_value(static_cast<std::uint64_t>(e));
    auto v = nt.tensor.values();
    h.update(v.data(), v.size_bytes());
  }
  return h.hex();
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("checkpoint: cannot open '" + path + "' for writing");
  out.write(kMagic, sizeof(kMagic));
  const std::uint32_t version = Checkpoint::kVersion;
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  write_u64(out, ckpt.config_text.size());
  out.write(ckpt.config_text.data(), static_cast<std::streamsize>(ckpt.config_text.size()));
  write_u64(out, ckpt.tensors.size());
  for (const auto& nt : ckpt.tensors) {
    write_u64(out, nt.name.size());
    out.write(nt.name.data(), static_cast<std::streamsize>(nt.name.size()));
    const auto& shape = nt.tensor.shape();
    write_u64(out, shape.size());
    for (auto e : shape) write_u64(out, e);
    auto v = nt.tensor.values();
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size_bytes()));
  }
  if (!out) throw Error("checkpoint: write to '" + path + "' failed");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("checkpoint: cannot open '" + path + "'");
  char magic[sizeof(kMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw Error("checkpoint: '" + path + "' is not a checkpoint file");
  }
  std::uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  if (!in || version != Checkpoint::kVersion) {
    throw Error("checkpoint: unsupported version " + std::to_string(version));
  }
  Checkpoint ckpt;
  ckpt.config_text = read_bytes(in, read_u64(in));
  const auto count = read_u64(in);
  for (std::uint64_t i = 0; i < count; ++i) {
    NamedTensor nt;
    nt.name = read_bytes(in, read_u64(in));
    const auto rank = read_u64(in);
    if (rank > 8) throw Error("checkpoint: implausible tensor rank");
    Shape shape(rank);
    std::size_t numel = 1;
    for (auto& e : shape) {
      e = read_u64(in);
      numel *= e;
    }
    std::vector<double> values(numel);
    in.read(reinterpret_cast<char*>(values.data()),
            static_cast<std::streamsize>(numel * sizeof(double)));
    if (!in) throw Error("checkpoint: truncated tensor '" + nt.name + "'");
    nt.tensor = Tensor::from(std::move(shape), std::move(values));
    ckpt.tensors.push_back(std::move(nt));
  }
  return ckpt;
}

void restore_tensors(std::span<const NamedTensor> src, std::span<NamedTensor> dst) {
  std::unordered_map<std::string, const Tensor*> by_name;
  for (const auto& nt : src) by_name[nt.name] = &nt.tensor;
  for (auto& nt : dst) {
    auto it = by_name.find(nt.name);
    if (it == by_name.end()) throw Error("checkpoint: missing tensor '" + nt.name + "'");
    if (it->second->shape() != nt.tensor.shape()) {
      throw DimensionError("checkpoint: tensor '" + nt.name + "' has shape " +
                           shape_string(it->second->shape()) + ", expected " +
                           shape_string(nt.tensor.shape()));
    }
    auto from = it->second->values();
    auto to = nt.tensor.mutable_values();
    std::copy(from.begin(), from.end(), to.begin());
  }
}

}  // namespace invllava
