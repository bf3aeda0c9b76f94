// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>

#include "mdse/wav.hpp"
#include "support.hpp"

using namespace mdse;

TEST(Wav, RoundTripIsLosslessOnTheGrid) {
  const auto dir = testing_support::scratch_dir("wav");
  const auto w = wav::quantize(testing_support::random_wave(1234, 1, 0.9));
  wav::write(dir / "a.wav", w);
  const auto r = wav::read(dir / "a.wav");
  EXPECT_EQ(r.sample_rate, 16000);
  EXPECT_EQ(r.samples, w.samples);
}

TEST(Wav, QuantizationClampsFullScale) {
  EXPECT_EQ(wav::to_pcm16(1.0), 32767);
  EXPECT_EQ(wav::to_pcm16(-1.0), -32768);
  EXPECT_EQ(wav::to_pcm16(-2.0), -32768);
  EXPECT_EQ(wav::to_pcm16(0.5 / 32768.0 * 0.9), 0);
}

TEST(Wav, RejectsWrongRate) {
  dsp::Waveform w;
  w.sample_rate = 8000;
  w.samples.assign(10, 0.1);
  const auto bytes = wav::encode(w);
  try {
    wav::decode(bytes, 16000, "x.wav");
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("8000"), std::string::npos);
  }
}

TEST(Wav, RejectsStereoAndGarbage) {
  dsp::Waveform w;
  w.samples.assign(10, 0.1);
  auto bytes = wav::encode(w);
  bytes[22] = 2;  // channel count
  EXPECT_THROW(wav::decode(bytes), DataError);
  EXPECT_THROW(wav::decode({'R', 'I', 'F', 'F'}), DataError);
  auto truncated = wav::encode(w);
  truncated.resize(truncated.size() - 5);
  EXPECT_THROW(wav::decode(truncated), DataError);
}

TEST(Wav, SkipsUnknownChunks) {
  dsp::Waveform w;
  w.samples = {0.25, -0.5};
  auto bytes = wav::encode(w);
  const std::vector<unsigned char> extra = {'L', 'I', 'S', 'T', 3, 0, 0, 0, 'a', 'b', 'c', 0};
  bytes.insert(bytes.begin() + 36, extra.begin(), extra.end());
  const auto r = wav::decode(bytes);
  EXPECT_EQ(r.samples, w.samples);
}

TEST(Wav, MissingFile) { EXPECT_THROW(wav::read("/nonexistent/none.wav"), DataError); }
