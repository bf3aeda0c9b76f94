// SPDX-License-Identifier: Apache-2.0
//
// Central-difference gradient oracle shared by the unit and acceptance tests.

#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <random>
#include <span>
#include <utility>
#include <vector>

#include "mdse/mode.hpp"
#include "mdse/nn.hpp"
#include "support.hpp"

namespace gradcheck {

struct Result {
  double max_rel = 0.0;
  double max_abs = 0.0;
  std::size_t checked = 0;
};

/// Compares `grads` with central differences of `loss()` over the entries of
/// `params` (which must alias the model that `loss` evaluates). At most
/// `max_samples` entries are drawn without replacement; 0 means all.
template <class LossFn>
Result compare(const std::vector<std::span<double>>& params, const std::vector<std::span<double>>& grads,
               LossFn&& loss, std::size_t max_samples, std::uint64_t seed, double h = 1e-5) {
  std::vector<std::pair<std::size_t, std::size_t>> idx;
  for (std::size_t t = 0; t < params.size(); ++t)
    for (std::size_t j = 0; j < params[t].size(); ++j) idx.emplace_back(t, j);
  if (max_samples > 0 && idx.size() > max_samples) {
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(max_samples);
  }
  Result r;
  for (auto [t, j] : idx) {
    double& p = params[t][j];
    const double saved = p;
    p = saved + h;
    const double up = loss();
    p = saved - h;
    const double down = loss();
    p = saved;
    const double numeric = (up - down) / (2.0 * h);
    const double analytic = grads[t][j];
    r.max_rel = std::max(r.max_rel, testing_support::rel_err(analytic, numeric));
    r.max_abs = std::max(r.max_abs, std::abs(analytic - numeric));
    ++r.checked;
  }
  return r;
}

inline std::vector<std::span<double>> model_parameters(mdse::mode::ModeModel<double>& m) {
  auto out = mdse::nn::parameters(m.gate);
  for (auto& e : m.experts) {
    auto p = mdse::nn::parameters(e);
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

inline std::vector<std::span<double>> model_gradients(mdse::mode::ModeGradients<double>& g) {
  auto out = mdse::nn::gradient_spans(g.gate);
  for (auto& e : g.experts) {
    auto p = mdse::nn::gradient_spans(e);
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

inline mdse::nn::Matrix<double> random_matrix(long rows, long cols, std::mt19937_64& rng, double lo = -1.0,
                                              double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  mdse::nn::Matrix<double> m(rows, cols);
  for (long i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

/// Random small MoDE with non-trivial batchnorm parameters.
inline mdse::mode::ModeModel<double> small_model(int m, long x_dim, long v_dim, long k, std::vector<long> hidden,
                                                 bool batchnorm, std::uint64_t seed) {
  mdse::mode::Architecture a;
  a.expert_input_dim = x_dim;
  a.gate_input_dim = v_dim;
  a.mask_dim = k;
  a.num_experts = m;
  a.expert_hidden = hidden;
  a.gate_hidden = hidden;
  a.batchnorm = batchnorm;
  auto model = mdse::mode::make_model<double>(a, seed);
  std::mt19937_64 rng(seed ^ 0xabcdef);
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  auto perturb = [&](mdse::nn::Mlp<double>& net) {
    for (auto& l : net.layers) {
      for (long i = 0; i < l.bias.size(); ++i) l.bias(i) = u(rng);
      if (l.batchnorm) {
        for (long i = 0; i < l.bias.size(); ++i) {
          l.batchnorm->gamma(i) = 1.0 + u(rng);
          l.batchnorm->beta(i) = u(rng);
        }
      }
    }
  };
  perturb(model.gate);
  for (auto& e : model.experts) perturb(e);
  return model;
}

}  // namespace gradcheck
