// SPDX-License-Identifier: Apache-2.0
//
// Little-endian binary container shared by every persisted artifact.
//
//   offset 0   4 bytes   magic "MDSE"
//   offset 4   u32       container version (kContainerVersion)
//   offset 8   u32       payload kind (ArtifactKind)
//   offset 12  ...       payload
//
// Integers are unsigned little-endian, reals are IEEE-754 binary64
// little-endian. docs/model_format.md describes each payload.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "mdse/error.hpp"

namespace mdse::io {

inline constexpr char kMagic[4] = {'M', 'D', 'S', 'E'};
inline constexpr std::uint32_t kContainerVersion = 1;

enum class ArtifactKind : std::uint32_t {
  mlp = 1,
  mode_model = 2,
  pretrain = 3,
  dataset = 4,
};

inline const char* to_string(ArtifactKind k) {
  switch (k) {
    case ArtifactKind::mlp: return "mlp";
    case ArtifactKind::mode_model: return "mode-model";
    case ArtifactKind::pretrain: return "pretrain";
    case ArtifactKind::dataset: return "dataset";
  }
  return "unknown";
}

class Writer {
 public:
  explicit Writer(ArtifactKind kind) {
    bytes_.append(kMagic, 4);
    u32(kContainerVersion);
    u32(static_cast<std::uint32_t>(kind));
  }

  void u8(std::uint8_t v) { bytes_.push_back(char(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(char((v >> (8 * i)) & 0xff));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes_.push_back(char((v >> (8 * i)) & 0xff));
  }
  void i32(std::int32_t v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u32(std::uint32_t(s.size()));
    bytes_.append(s);
  }
  template <class Range>
  void f64s(const Range& r) {
    for (auto v : r) f64(double(v));
  }

  const std::string& bytes() const { return bytes_; }

  void save(const std::filesystem::path& path) const {
    // Written to <path>.tmp then renamed; a failed save leaves nothing at path.
    auto tmp = path;
    tmp += ".tmp";
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      if (!out) throw DataError("cannot open for writing: " + tmp.string());
      out.write(bytes_.data(), std::streamsize(bytes_.size()));
      if (!out) throw DataError("write failed: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
  }

 private:
  std::string bytes_;
};

class Reader {
 public:
  Reader(std::string bytes, ArtifactKind expected, std::string name)
      : bytes_(std::move(bytes)), name_(std::move(name)) {
    if (bytes_.size() < 12 || std::memcmp(bytes_.data(), kMagic, 4) != 0)
      throw FormatError(name_ + ": bad magic bytes (not an MDSE artifact)");
    pos_ = 4;
    const auto version = u32();
    if (version != kContainerVersion)
      throw FormatError(name_ + ": unsupported container version " + std::to_string(version) +
                        " (this build reads version " + std::to_string(kContainerVersion) + ")");
    const auto kind = u32();
    if (kind != static_cast<std::uint32_t>(expected))
      throw FormatError(name_ + ": artifact kind " + std::to_string(kind) + " is not a " +
                        to_string(expected));
  }

  static Reader open(const std::filesystem::path& path, ArtifactKind expected) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open artifact: " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return Reader(std::move(bytes), expected, path.string());
  }

  std::uint8_t u8() { return std::uint8_t(take(1)[0]); }
  std::uint32_t u32() {
    const auto* p = reinterpret_cast<const unsigned char*>(take(4));
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(p[i]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    const auto* p = reinterpret_cast<const unsigned char*>(take(8));
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(p[i]) << (8 * i);
    return v;
  }
  std::int32_t i32() { return std::bit_cast<std::int32_t>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    const auto n = u32();
    const char* p = take(n);
    return std::string(p, n);
  }

  /// Bounded count read; rejects sizes the remaining bytes cannot hold.
  std::uint64_t count(std::uint64_t element_bytes) {
    const auto n = u64();
    if (element_bytes > 0 && n > remaining() / element_bytes)
      throw FormatError(name_ + ": truncated or corrupt (declared " + std::to_string(n) + " elements)");
    return n;
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }

  void expect_end() const {
    if (pos_ != bytes_.size())
      throw FormatError(name_ + ": " + std::to_string(remaining()) + " trailing bytes after payload");
  }

  const std::string& name() const { return name_; }

 private:
  const char* take(std::size_t n) {
    if (n > remaining()) throw FormatError(name_ + ": truncated file");
    const char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }

  std::string bytes_;
  std::string name_;
  std::size_t pos_ = 0;
};

/// FNV-1a, used for configuration fingerprints.
inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace mdse::io
