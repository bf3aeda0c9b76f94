// SPDX-License-Identifier: Apache-2.0
//
// Ideal ratio mask targets and mask-driven spectral enhancement.

#pragma once

#include <cmath>
#include <numbers>
#include <string>

#include "mdse/dsp.hpp"
#include "mdse/error.hpp"

namespace mdse::mask {

/// Rows are frames, columns frequency bins; every value in [0, 1].
using MaskMatrix = dsp::RealMatrix;

/// exp(-beta) = 10^(-20/20): at most 20 dB of attenuation.
inline const double kDefaultBeta = std::numbers::ln10;
inline constexpr double kDefaultGamma = 0.5;

struct EnhanceConfig {
  double beta = kDefaultBeta;
  double gamma = kDefaultGamma;
};

inline void validate(const EnhanceConfig& cfg) {
  mdse::detail::require<ConfigError>(cfg.beta > 0.0, "beta must be positive");
  mdse::detail::require<ConfigError>(cfg.gamma > 0.0 && cfg.gamma <= 1.0, "gamma must be in (0, 1]");
}

/// IRM_k = (|S_k|^2 / (|S_k|^2 + |N_k|^2))^gamma, and 0 where both are zero.
template <class CleanRow, class NoiseRow>
Eigen::RowVectorXd compute_irm(const CleanRow& clean, const NoiseRow& noise, double gamma = kDefaultGamma) {
  if (clean.size() != noise.size())
    throw DataError("compute_irm: frame lengths differ (" + std::to_string(clean.size()) + " vs " +
                    std::to_string(noise.size()) + ")");
  mdse::detail::require<ConfigError>(gamma > 0.0 && gamma <= 1.0, "gamma must be in (0, 1]");
  Eigen::RowVectorXd out(clean.size());
  for (Eigen::Index k = 0; k < clean.size(); ++k) {
    const double ps = std::norm(std::complex<double>(clean(k)));
    const double pn = std::norm(std::complex<double>(noise(k)));
    const double den = ps + pn;
    out(k) = den > 0.0 ? std::pow(ps / den, gamma) : 0.0;
  }
  return out;
}

/// Frame-by-frame IRM of a whole utterance.
inline MaskMatrix compute_irm(const dsp::Spectrogram& clean, const dsp::Spectrogram& noise,
                              double gamma = kDefaultGamma) {
  if (clean.num_frames() != noise.num_frames() || clean.num_bins() != noise.num_bins())
    throw DataError("compute_irm: spectrogram shapes differ");
  MaskMatrix m(clean.num_frames(), clean.num_bins());
  for (Eigen::Index t = 0; t < m.rows(); ++t) m.row(t) = compute_irm(clean.frames.row(t), noise.frames.row(t), gamma);
  return m;
}

namespace detail {

inline void check_shape(const dsp::Spectrogram& s, const MaskMatrix& m, const char* who) {
  if (m.rows() != s.num_frames() || m.cols() != s.num_bins())
    throw DataError(std::string(who) + ": mask is " + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) +
                    " but spectrogram is " + std::to_string(s.num_frames()) + "x" + std::to_string(s.num_bins()));
}

template <class Gain>
dsp::Spectrogram apply_gain(dsp::Spectrogram s, const MaskMatrix& m, Gain gain) {
  for (Eigen::Index t = 0; t < m.rows(); ++t)
    for (Eigen::Index k = 0; k < m.cols(); ++k) s.frames(t, k) *= gain(m(t, k));
  return s;
}

}  // namespace detail

/// Element-wise X * rho. Phase is untouched since rho is real.
inline dsp::Spectrogram hard_enhance(const dsp::Spectrogram& noisy, const MaskMatrix& m) {
  detail::check_shape(noisy, m, "hard_enhance");
  return detail::apply_gain(noisy, m, [](double rho) { return rho; });
}

/// Per-bin gain exp(-(1 - rho) * beta), which lies in [exp(-beta), 1].
inline double soft_gain(double rho, double beta) { return std::exp(-(1.0 - rho) * beta); }

inline dsp::Spectrogram soft_enhance(const dsp::Spectrogram& noisy, const MaskMatrix& m,
                                     double beta = kDefaultBeta) {
  detail::check_shape(noisy, m, "soft_enhance");
  mdse::detail::require<ConfigError>(beta > 0.0, "soft_enhance: beta must be positive");
  return detail::apply_gain(noisy, m, [beta](double rho) { return soft_gain(rho, beta); });
}

}  // namespace mdse::mask
