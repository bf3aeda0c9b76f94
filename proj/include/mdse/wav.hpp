// SPDX-License-Identifier: Apache-2.0
//
// 16-bit PCM mono RIFF/WAVE reading and writing.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "mdse/dsp.hpp"
#include "mdse/error.hpp"

namespace mdse::wav {

namespace detail {

inline std::uint32_t le32(const unsigned char* p) {
  return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) |
         (std::uint32_t(p[2]) << 16) | (std::uint32_t(p[3]) << 24);
}
inline std::uint16_t le16(const unsigned char* p) {
  return std::uint16_t(p[0] | (p[1] << 8));
}
inline void put32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}
inline void put16(std::string& out, std::uint16_t v) {
  out.push_back(char(v & 0xff));
  out.push_back(char(v >> 8));
}

}  // namespace detail

/// Quantize one sample to signed 16-bit, full scale 32768.
inline std::int16_t to_pcm16(double x) {
  const double q = std::nearbyint(x * 32768.0);
  return std::int16_t(std::clamp(q, -32768.0, 32767.0));
}

/// Decode an in-memory WAV image. Only PCM16 mono at `expected_rate` is
/// accepted; anything else is rejected with a message naming the mismatch.
inline dsp::Waveform decode(const std::vector<unsigned char>& bytes,
                            int expected_rate = 16000,
                            const std::string& name = "<memory>") {
  using detail::le16;
  using detail::le32;
  auto fail = [&](const std::string& why) {
    throw DataError(name + ": " + why);
  };
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0)
    fail("not a RIFF/WAVE file");

  bool have_fmt = false;
  int channels = 0, rate = 0, bits = 0;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const unsigned char* chunk = bytes.data() + pos;
    const std::uint32_t size = le32(chunk + 4);
    const std::size_t body = pos + 8;
    if (body + size > bytes.size()) fail("truncated chunk");
    if (std::memcmp(chunk, "fmt ", 4) == 0) {
      if (size < 16) fail("fmt chunk too short");
      const std::uint16_t format = le16(bytes.data() + body);
      channels = le16(bytes.data() + body + 2);
      rate = int(le32(bytes.data() + body + 4));
      bits = le16(bytes.data() + body + 14);
      if (format != 1) fail("only PCM (format 1) is supported, got format " + std::to_string(format));
      have_fmt = true;
    } else if (std::memcmp(chunk, "data", 4) == 0) {
      if (!have_fmt) fail("data chunk before fmt chunk");
      if (channels != 1) fail("expected mono, got " + std::to_string(channels) + " channels");
      if (bits != 16) fail("expected 16-bit samples, got " + std::to_string(bits));
      if (rate != expected_rate)
        fail("sample rate " + std::to_string(rate) + " Hz is not supported (expected " +
             std::to_string(expected_rate) + " Hz; resample first)");
      dsp::Waveform w;
      w.sample_rate = rate;
      w.samples.resize(size / 2);
      for (std::size_t i = 0; i < w.samples.size(); ++i)
        w.samples[i] = double(std::int16_t(le16(bytes.data() + body + 2 * i))) / 32768.0;
      return w;
    }
    pos = body + size + (size & 1);
  }
  fail("no data chunk");
  return {};
}

inline std::vector<unsigned char> encode(const dsp::Waveform& w) {
  const auto n = std::uint32_t(w.samples.size());
  std::string out;
  out.reserve(44 + 2 * n);
  out.append("RIFF");
  detail::put32(out, 36 + 2 * n);
  out.append("WAVEfmt ");
  detail::put32(out, 16);
  detail::put16(out, 1);
  detail::put16(out, 1);
  detail::put32(out, std::uint32_t(w.sample_rate));
  detail::put32(out, std::uint32_t(w.sample_rate) * 2);
  detail::put16(out, 2);
  detail::put16(out, 16);
  out.append("data");
  detail::put32(out, 2 * n);
  for (double x : w.samples) detail::put16(out, std::uint16_t(to_pcm16(x)));
  return {out.begin(), out.end()};
}

inline dsp::Waveform read(const std::filesystem::path& path, int expected_rate = 16000) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open WAV file: " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  return decode(bytes, expected_rate, path.string());
}

inline void write(const std::filesystem::path& path, const dsp::Waveform& w) {
  const auto bytes = encode(w);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write WAV file: " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!out) throw DataError("write failed: " + path.string());
}

/// Round every sample through the 16-bit grid, as writing then reading would.
inline dsp::Waveform quantize(dsp::Waveform w) {
  for (double& x : w.samples) x = double(to_pcm16(x)) / 32768.0;
  return w;
}

}  // namespace mdse::wav
