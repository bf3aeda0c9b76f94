// SPDX-License-Identifier: Apache-2.0
//
// Real-input FFT of arbitrary length backed by FFTW. Plans are created once per
// length under a lock and executed with the new-array interface, which FFTW
// documents as thread-safe.

#pragma once

#include <fftw3.h>

#include <complex>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <vector>

#include "mdse/error.hpp"

namespace mdse::fft {

namespace detail {

struct PlanPair {
  fftw_plan forward = nullptr;
  fftw_plan inverse = nullptr;
};

class PlanCache {
 public:
  static PlanCache& instance() {
    static PlanCache cache;
    return cache;
  }

  PlanPair get(int n) {
    std::lock_guard<std::mutex> lock(mutex_);
    auto it = plans_.find(n);
    if (it != plans_.end()) return it->second;
    std::vector<double> real(n);
    std::vector<std::complex<double>> spec(n / 2 + 1);
    auto* c = reinterpret_cast<fftw_complex*>(spec.data());
    const unsigned flags = FFTW_ESTIMATE | FFTW_UNALIGNED;
    PlanPair p;
    p.forward = fftw_plan_dft_r2c_1d(n, real.data(), c, flags);
    p.inverse = fftw_plan_dft_c2r_1d(n, c, real.data(), flags);
    if (!p.forward || !p.inverse) throw ConfigError("FFTW failed to plan length " + std::to_string(n));
    plans_.emplace(n, p);
    return p;
  }

  ~PlanCache() {
    for (auto& [n, p] : plans_) {
      fftw_destroy_plan(p.forward);
      fftw_destroy_plan(p.inverse);
    }
  }

 private:
  std::mutex mutex_;
  std::map<int, PlanPair> plans_;
};

}  // namespace detail

/// One-sided DFT: out[k] = sum_n in[n] exp(-2 pi i k n / N), k = 0..N/2.
inline void rfft(std::span<const double> in, std::span<std::complex<double>> out) {
  const int n = int(in.size());
  if (out.size() != std::size_t(n / 2 + 1)) throw ConfigError("rfft: output size mismatch");
  auto plan = detail::PlanCache::instance().get(n);
  std::vector<double> buf(in.begin(), in.end());
  fftw_execute_dft_r2c(plan.forward, buf.data(), reinterpret_cast<fftw_complex*>(out.data()));
}

/// Inverse of rfft, normalized so that irfft(rfft(x)) == x.
inline void irfft(std::span<const std::complex<double>> in, std::span<double> out) {
  const int n = int(out.size());
  if (in.size() != std::size_t(n / 2 + 1)) throw ConfigError("irfft: input size mismatch");
  auto plan = detail::PlanCache::instance().get(n);
  // c2r overwrites its input.
  std::vector<std::complex<double>> buf(in.begin(), in.end());
  fftw_execute_dft_c2r(plan.inverse, reinterpret_cast<fftw_complex*>(buf.data()), out.data());
  const double scale = 1.0 / n;
  for (double& x : out) x *= scale;
}

}  // namespace mdse::fft
