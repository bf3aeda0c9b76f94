// SPDX-License-Identifier: Apache-2.0
//
// Time-frequency analysis and synthesis, log-spectrum and MFCC features,
// per-utterance mean/variance normalization.

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "mdse/error.hpp"
#include "mdse/fft.hpp"

namespace mdse::dsp {

using ComplexMatrix =
    Eigen::Matrix<std::complex<double>, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RealMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Waveform {
  std::vector<double> samples;
  int sample_rate = 16000;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
};

enum class Window : std::uint8_t { hann = 0 };

inline std::string to_string(Window w) {
  switch (w) {
    case Window::hann:
      return "hann";
  }
  return "unknown";
}

struct StftConfig {
  int frame_len = 512;
  int hop = 256;
  Window window = Window::hann;
  double magnitude_floor = 1e-8;
  int n_mels = 40;
  int n_mfcc = 13;
  int sample_rate = 16000;

  int num_bins() const { return frame_len / 2 + 1; }
};

/// Periodic Hann window of length n.
inline std::vector<double> make_window(Window kind, int n) {
  std::vector<double> w(n);
  switch (kind) {
    case Window::hann:
      for (int i = 0; i < n; ++i) w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / n);
      break;
  }
  return w;
}

/// Overlap-added window sum, or 0 when the (window, hop) pair is not COLA.
inline double cola_constant(Window kind, int frame_len, int hop) {
  if (hop <= 0 || hop > frame_len) return 0.0;
  const auto w = make_window(kind, frame_len);
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (int n = 0; n < hop; ++n) {
    double s = 0.0;
    for (int i = n; i < frame_len; i += hop) s += w[i];
    lo = std::min(lo, s);
    hi = std::max(hi, s);
  }
  if (hi <= 0.0 || hi - lo > 1e-9 * hi) return 0.0;
  return 0.5 * (lo + hi);
}

inline void validate(const StftConfig& cfg) {
  using mdse::detail::require;
  require<ConfigError>(cfg.frame_len > 0 && cfg.frame_len % 2 == 0,
                       "frame_len must be a positive even number, got " + std::to_string(cfg.frame_len));
  require<ConfigError>(cfg.hop > 0 && cfg.hop <= cfg.frame_len,
                       "hop must satisfy 0 < hop <= frame_len, got " + std::to_string(cfg.hop));
  require<ConfigError>(cfg.magnitude_floor > 0.0, "magnitude_floor must be positive");
  require<ConfigError>(cfg.n_mels >= 1, "n_mels must be >= 1");
  require<ConfigError>(cfg.n_mfcc >= 1 && cfg.n_mfcc <= cfg.n_mels, "n_mfcc must be in [1, n_mels]");
  require<ConfigError>(cfg.sample_rate > 0, "sample_rate must be positive");
  require<ConfigError>(cola_constant(cfg.window, cfg.frame_len, cfg.hop) > 0.0,
                       "window " + to_string(cfg.window) + " with frame_len " +
                           std::to_string(cfg.frame_len) + " and hop " + std::to_string(cfg.hop) +
                           " does not satisfy constant overlap-add");
}

/// One-sided complex STFT. `num_samples` is the length of the analysed
/// signal; istft trims its output back to it.
struct Spectrogram {
  ComplexMatrix frames;  // num_frames x (frame_len/2 + 1)
  int frame_len = 512;
  int hop = 256;
  Window window = Window::hann;
  int sample_rate = 16000;
  std::size_t num_samples = 0;

  Eigen::Index num_frames() const { return frames.rows(); }
  Eigen::Index num_bins() const { return frames.cols(); }
};

/// Leading zero padding. Every original sample then lies where all
/// overlapping frames exist, so the window sum is the COLA constant.
inline int front_padding(int frame_len, int hop) { return frame_len - hop; }

inline Spectrogram stft(const Waveform& w, const StftConfig& cfg) {
  validate(cfg);
  if (w.empty()) throw DataError("stft: empty waveform");
  const int L = cfg.frame_len, hop = cfg.hop;
  const long n = long(w.size());
  const long pad = front_padding(L, hop);
  const long num_frames = (pad + n - 1) / hop + 1;
  const auto window = make_window(cfg.window, L);

  Spectrogram s;
  s.frame_len = L;
  s.hop = hop;
  s.window = cfg.window;
  s.sample_rate = w.sample_rate;
  s.num_samples = w.size();
  s.frames.resize(num_frames, L / 2 + 1);

  std::vector<double> seg(L);
  std::vector<std::complex<double>> spec(L / 2 + 1);
  for (long t = 0; t < num_frames; ++t) {
    for (int i = 0; i < L; ++i) {
      const long src = t * hop + i - pad;
      seg[i] = (src >= 0 && src < n) ? w.samples[src] * window[i] : 0.0;
    }
    fft::rfft(seg, spec);
    for (int k = 0; k <= L / 2; ++k) s.frames(t, k) = spec[k];
  }
  return s;
}

inline Waveform istft(const Spectrogram& s) {
  const double cola = cola_constant(s.window, s.frame_len, s.hop);
  if (cola <= 0.0 || s.frame_len % 2 != 0)
    throw ConfigError("istft: spectrogram was produced with a non-COLA window/hop pair");
  if (s.num_bins() != s.frame_len / 2 + 1) throw ConfigError("istft: bin count does not match frame_len");
  const int L = s.frame_len, hop = s.hop;
  const long pad = front_padding(L, hop);
  const long total = (s.num_frames() > 0) ? (s.num_frames() - 1) * hop + L : 0;

  std::vector<double> acc(std::max<long>(total, pad + long(s.num_samples)), 0.0);
  std::vector<std::complex<double>> spec(L / 2 + 1);
  std::vector<double> frame(L);
  for (Eigen::Index t = 0; t < s.num_frames(); ++t) {
    for (int k = 0; k <= L / 2; ++k) spec[k] = s.frames(t, k);
    fft::irfft(spec, frame);
    for (int i = 0; i < L; ++i) acc[t * hop + i] += frame[i];
  }
  Waveform out;
  out.sample_rate = s.sample_rate;
  out.samples.assign(acc.begin() + pad, acc.begin() + pad + long(s.num_samples));
  for (double& x : out.samples) x /= cola;
  return out;
}

/// ln(max(|X|, floor)) per bin; rows are frames.
inline RealMatrix log_spectrum(const Spectrogram& s, double magnitude_floor) {
  RealMatrix out(s.num_frames(), s.num_bins());
  for (Eigen::Index t = 0; t < s.num_frames(); ++t)
    for (Eigen::Index k = 0; k < s.num_bins(); ++k)
      out(t, k) = std::log(std::max(std::abs(s.frames(t, k)), magnitude_floor));
  return out;
}

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

/// Triangular mel filters spanning [0, fs/2]. Each filter's weights sum to
/// one, so a flat power spectrum maps to equal band energies.
inline RealMatrix mel_filterbank(const StftConfig& cfg) {
  const int bins = cfg.num_bins();
  const double nyquist = 0.5 * cfg.sample_rate;
  const double mel_max = hz_to_mel(nyquist);
  std::vector<double> edges(cfg.n_mels + 2);
  for (int j = 0; j < cfg.n_mels + 2; ++j) edges[j] = mel_to_hz(mel_max * j / (cfg.n_mels + 1));

  RealMatrix fb = RealMatrix::Zero(cfg.n_mels, bins);
  const double bin_hz = double(cfg.sample_rate) / cfg.frame_len;
  for (int j = 0; j < cfg.n_mels; ++j) {
    const double lo = edges[j], mid = edges[j + 1], hi = edges[j + 2];
    for (int k = 0; k < bins; ++k) {
      const double f = k * bin_hz;
      double v = 0.0;
      if (f > lo && f <= mid) v = (f - lo) / (mid - lo);
      else if (f > mid && f < hi) v = (hi - f) / (hi - mid);
      fb(j, k) = v;
    }
    double sum = fb.row(j).sum();
    if (sum <= 0.0) {
      // Band narrower than one bin: take the nearest bin.
      const int k = std::clamp(int(std::lround(mid / bin_hz)), 0, bins - 1);
      fb(j, k) = 1.0;
      sum = 1.0;
    }
    fb.row(j) /= sum;
  }
  return fb;
}

/// DCT-II with c_0 equal to the mean of the input and c_q (q >= 1) scaled by
/// 2/N, the normalization whose inverse is a plain cosine series.
inline RealMatrix dct_matrix(int n_out, int n_in) {
  RealMatrix d(n_out, n_in);
  for (int q = 0; q < n_out; ++q)
    for (int j = 0; j < n_in; ++j)
      d(q, j) = (q == 0 ? 1.0 : 2.0) / n_in *
                std::cos(std::numbers::pi * q * (j + 0.5) / n_in);
  return d;
}

/// MFCC per frame: power spectrum, mel filterbank, natural log floored at
/// magnitude_floor^2, DCT-II truncated to n_mfcc coefficients.
inline RealMatrix mfcc(const Spectrogram& s, const StftConfig& cfg) {
  if (s.num_bins() != cfg.num_bins()) throw ConfigError("mfcc: spectrogram does not match config");
  const RealMatrix fb = mel_filterbank(cfg);
  const RealMatrix dct = dct_matrix(cfg.n_mfcc, cfg.n_mels);
  const RealMatrix power = s.frames.cwiseAbs2();
  const double floor = cfg.magnitude_floor * cfg.magnitude_floor;
  RealMatrix logmel = (power * fb.transpose()).unaryExpr([floor](double e) {
    return std::log(std::max(e, floor));
  });
  return logmel * dct.transpose();
}

/// Per-coordinate zero mean and unit (population) variance over the rows of
/// one utterance. Coordinates with variance below 1e-12 are only centered.
inline RealMatrix cmvn(const RealMatrix& frames) {
  if (frames.rows() < 2) throw DataError("cmvn: need at least 2 frames, got " + std::to_string(frames.rows()));
  const Eigen::RowVectorXd mean = frames.colwise().mean();
  RealMatrix out = frames.rowwise() - mean;
  const Eigen::RowVectorXd var = out.cwiseAbs2().colwise().mean();
  for (Eigen::Index j = 0; j < out.cols(); ++j)
    if (var(j) >= 1e-12) out.col(j) /= std::sqrt(var(j));
  return out;
}

}  // namespace mdse::dsp
