// SPDX-License-Identifier: Apache-2.0
//
// Mixture of deep experts for mask estimation.
//
// A softmax gate fed with context-stacked MFCCs produces per-frame expert
// probabilities p_i; each expert maps context-stacked log-spectra to a
// sigmoid mask. The training objective per frame is
//
//   loss = -log sum_i p_i exp(-d_i),   d_i = 0.5 * ||rho - rho_hat_i||^2
//
// whose gradient routes through the posterior w_i = p_i e^{-d_i} / sum_j p_j e^{-d_j}:
// expert i sees w_i (rho_hat_i - rho), and the gate logits see p - w.

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "mdse/binary_io.hpp"
#include "mdse/error.hpp"
#include "mdse/nn.hpp"

namespace mdse::mode {

using nn::Index;
template <class T>
using Matrix = nn::Matrix<T>;

struct Architecture {
  Index expert_input_dim = 0;
  Index gate_input_dim = 0;
  Index mask_dim = 0;
  int num_experts = 5;
  std::vector<Index> expert_hidden{512, 512, 512};
  std::vector<Index> gate_hidden{512, 512, 512};
  bool batchnorm = true;
  int context = 4;
  std::uint64_t feature_hash = 0;
};

template <class T>
struct ModeModel {
  nn::Mlp<T> gate;
  std::vector<nn::Mlp<T>> experts;
  int context = 4;
  std::uint64_t feature_hash = 0;

  int num_experts() const { return int(experts.size()); }
  Index expert_input_dim() const { return experts.empty() ? 0 : experts.front().input_dim(); }
  Index gate_input_dim() const { return gate.input_dim(); }
  Index mask_dim() const { return experts.empty() ? 0 : experts.front().output_dim(); }
};

template <class T>
void validate(const ModeModel<T>& m) {
  using mdse::detail::require;
  require<ConfigError>(m.num_experts() >= 1, "model needs at least one expert");
  require<ConfigError>(m.gate.output_dim() == m.num_experts(), "gate output must equal the expert count");
  require<ConfigError>(!m.gate.layers.empty() && m.gate.layers.back().activation == nn::Activation::softmax,
                       "gate must end in softmax");
  for (const auto& e : m.experts) {
    require<ConfigError>(e.layers.size() == m.experts.front().layers.size(), "experts must share one shape");
    for (std::size_t l = 0; l < e.layers.size(); ++l)
      require<ConfigError>(e.layers[l].in_dim() == m.experts.front().layers[l].in_dim() &&
                               e.layers[l].out_dim() == m.experts.front().layers[l].out_dim(),
                           "experts must share one shape");
    require<ConfigError>(e.layers.back().activation == nn::Activation::sigmoid, "experts must end in sigmoid");
  }
}

/// Seeds derive from `seed` so that the gate and each expert draw
/// independent, reproducible initial weights.
template <class T>
ModeModel<T> make_model(const Architecture& a, std::uint64_t seed) {
  mdse::detail::require<ConfigError>(a.num_experts >= 1, "num_experts must be >= 1");
  mdse::detail::require<ConfigError>(a.expert_input_dim > 0 && a.gate_input_dim > 0 && a.mask_dim > 0,
                               "architecture dimensions must be positive");
  ModeModel<T> m;
  m.context = a.context;
  m.feature_hash = a.feature_hash;
  std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32), std::uint32_t(0x6d6f6465)};
  std::vector<std::uint32_t> seeds(std::size_t(2 * (a.num_experts + 1)));
  seq.generate(seeds.begin(), seeds.end());
  auto seed_at = [&](int i) { return (std::uint64_t(seeds[2 * i]) << 32) | seeds[2 * i + 1]; };
  m.gate = nn::make_mlp<T>(a.gate_input_dim,
                           nn::stack_spec(a.gate_hidden, nn::Activation::relu, a.num_experts,
                                          nn::Activation::softmax, a.batchnorm),
                           seed_at(0));
  for (int i = 0; i < a.num_experts; ++i)
    m.experts.push_back(nn::make_mlp<T>(a.expert_input_dim,
                                        nn::stack_spec(a.expert_hidden, nn::Activation::relu, a.mask_dim,
                                                       nn::Activation::sigmoid, a.batchnorm),
                                        seed_at(i + 1)));
  return m;
}

template <class T>
struct ForwardResult {
  Matrix<T> gate_probs;                // B x m
  std::vector<Matrix<T>> expert_masks; // m of B x K
  Matrix<T> combined;                  // B x K, sum_i p_i rho_hat_i
  nn::ForwardCache<T> gate_cache;
  std::vector<nn::ForwardCache<T>> expert_caches;
};

namespace detail {

template <class T>
void check_inputs(const ModeModel<T>& m, const Matrix<T>& x, const Matrix<T>& v) {
  if (x.rows() != v.rows())
    throw DataError("expert and gate inputs have different frame counts (" + std::to_string(x.rows()) + " vs " +
                    std::to_string(v.rows()) + ")");
  if (x.cols() != m.expert_input_dim())
    throw DataError("expert input has " + std::to_string(x.cols()) + " columns, model expects " +
                    std::to_string(m.expert_input_dim()));
  if (v.cols() != m.gate_input_dim())
    throw DataError("gate input has " + std::to_string(v.cols()) + " columns, model expects " +
                    std::to_string(m.gate_input_dim()));
}

template <class T>
Matrix<T> combine(const Matrix<T>& probs, const std::vector<Matrix<T>>& masks) {
  Matrix<T> out = Matrix<T>::Zero(masks.front().rows(), masks.front().cols());
  for (std::size_t i = 0; i < masks.size(); ++i)
    out += (masks[i].array().colwise() * probs.col(Index(i)).array()).matrix();
  return out;
}

template <class T>
void check_probs(const Matrix<T>& p) {
  for (Index b = 0; b < p.rows(); ++b) {
    if ((p.row(b).array() < T(0)).any()) throw DataError("gate probabilities must be nonnegative");
    if (std::abs(double(p.row(b).sum()) - 1.0) > 1e-6) throw DataError("gate probabilities must sum to 1");
  }
}

}  // namespace detail

template <class T>
ForwardResult<T> mode_forward(ModeModel<T>& m, const Matrix<T>& x, const Matrix<T>& v, nn::Mode mode) {
  detail::check_inputs(m, x, v);
  ForwardResult<T> r;
  r.gate_cache = nn::forward(m.gate, v, mode);
  r.gate_probs = r.gate_cache.output();
  for (auto& e : m.experts) {
    r.expert_caches.push_back(nn::forward(e, x, mode));
    r.expert_masks.push_back(r.expert_caches.back().output());
  }
  r.combined = detail::combine(r.gate_probs, r.expert_masks);
  return r;
}

/// d(b, i) = 0.5 * ||target_b - mask_i,b||^2.
template <class T>
Matrix<T> distances(const std::vector<Matrix<T>>& expert_masks, const Matrix<T>& target) {
  Matrix<T> d(target.rows(), Index(expert_masks.size()));
  for (std::size_t i = 0; i < expert_masks.size(); ++i) {
    if (expert_masks[i].rows() != target.rows() || expert_masks[i].cols() != target.cols())
      throw DataError("expert mask and target shapes differ");
    d.col(Index(i)) = T(0.5) * (expert_masks[i] - target).rowwise().squaredNorm();
  }
  return d;
}

/// Per-frame loss -log sum_i p_i exp(-d_i), evaluated as a shifted log-sum-exp.
template <class T>
Eigen::Matrix<T, Eigen::Dynamic, 1> mode_loss_per_frame(const Matrix<T>& gate_probs, const Matrix<T>& dist) {
  detail::check_probs(gate_probs);
  if (gate_probs.rows() != dist.rows() || gate_probs.cols() != dist.cols())
    throw DataError("gate probabilities and distances differ in shape");
  Eigen::Matrix<T, Eigen::Dynamic, 1> out(gate_probs.rows());
  for (Index b = 0; b < gate_probs.rows(); ++b) {
    T shift = -std::numeric_limits<T>::infinity();
    for (Index i = 0; i < dist.cols(); ++i)
      if (gate_probs(b, i) > T(0)) shift = std::max(shift, std::log(gate_probs(b, i)) - dist(b, i));
    T sum = T(0);
    for (Index i = 0; i < dist.cols(); ++i)
      if (gate_probs(b, i) > T(0)) sum += std::exp(std::log(gate_probs(b, i)) - dist(b, i) - shift);
    out(b) = -(shift + std::log(sum));
  }
  return out;
}

/// Batch mean of the specialization loss.
template <class T>
T mode_loss(const Matrix<T>& gate_probs, const std::vector<Matrix<T>>& expert_masks, const Matrix<T>& target) {
  if (expert_masks.empty()) throw DataError("mode_loss: no experts");
  const auto per = mode_loss_per_frame(gate_probs, distances(expert_masks, target));
  return per.size() > 0 ? per.mean() : T(0);
}

/// w_i = p_i e^{-d_i} / sum_j p_j e^{-d_j}, max-shifted so it never
/// underflows to 0/0.
template <class T>
Matrix<T> posterior_weights(const Matrix<T>& gate_probs, const Matrix<T>& dist) {
  detail::check_probs(gate_probs);
  if (gate_probs.rows() != dist.rows() || gate_probs.cols() != dist.cols())
    throw DataError("gate probabilities and distances differ in shape");
  Matrix<T> w = Matrix<T>::Zero(gate_probs.rows(), gate_probs.cols());
  for (Index b = 0; b < gate_probs.rows(); ++b) {
    T shift = -std::numeric_limits<T>::infinity();
    for (Index i = 0; i < w.cols(); ++i)
      if (gate_probs(b, i) > T(0)) shift = std::max(shift, std::log(gate_probs(b, i)) - dist(b, i));
    for (Index i = 0; i < w.cols(); ++i)
      if (gate_probs(b, i) > T(0)) w(b, i) = std::exp(std::log(gate_probs(b, i)) - dist(b, i) - shift);
    w.row(b) /= w.row(b).sum();
  }
  return w;
}

template <class T>
struct ModeGradients {
  nn::Gradients<T> gate;
  std::vector<nn::Gradients<T>> experts;
  Matrix<T> posteriors;  // B x m, the w used to weight the experts
};

/// Gradient of the batch-mean loss. Expert i receives w_i (rho_hat_i - rho)/B
/// at its output; the gate receives (p - w)/B at its softmax logits.
template <class T>
ModeGradients<T> mode_backward(const ModeModel<T>& m, const ForwardResult<T>& r, const Matrix<T>& target) {
  if (r.expert_caches.size() != m.experts.size() || r.expert_masks.size() != m.experts.size())
    throw DataError("mode_backward: forward result does not match model");
  if (target.rows() != r.gate_probs.rows() || target.cols() != m.mask_dim())
    throw DataError("mode_backward: target shape mismatch");
  const T inv_b = T(1) / T(std::max<Index>(target.rows(), 1));
  ModeGradients<T> g;
  g.posteriors = posterior_weights(r.gate_probs, distances(r.expert_masks, target));
  for (std::size_t i = 0; i < m.experts.size(); ++i) {
    Matrix<T> out_grad = (r.expert_masks[i] - target).array().colwise() *
                         (g.posteriors.col(Index(i)).array() * inv_b);
    g.experts.push_back(nn::backward(m.experts[i], r.expert_caches[i], out_grad));
  }
  const Matrix<T> logit_grad = (r.gate_probs - g.posteriors) * inv_b;
  g.gate = nn::backward(m.gate, r.gate_cache, logit_grad, nn::GradientAt::pre_activation);
  return g;
}

enum class Strategy { full, top1 };

inline std::string to_string(Strategy s) { return s == Strategy::full ? "full" : "top1"; }

inline Strategy parse_strategy(const std::string& s) {
  if (s == "full") return Strategy::full;
  if (s == "top1") return Strategy::top1;
  throw ConfigError("unknown inference strategy '" + s + "' (expected full or top1)");
}

template <class T>
struct Inference {
  Matrix<T> mask;        // N x K
  Matrix<T> gate_probs;  // N x m
  std::vector<int> selected;  // argmax expert per frame
  std::size_t expert_evaluations = 0;  // expert forward passes, counted per frame
};

/// `full` mixes every expert by the gate; `top1` runs only the argmax expert
/// of each frame, so exactly N expert evaluations happen for N frames.
template <class T>
Inference<T> infer_mask(const ModeModel<T>& m, const Matrix<T>& x, const Matrix<T>& v, Strategy strategy) {
  detail::check_inputs(m, x, v);
  Inference<T> out;
  out.gate_probs = nn::predict(m.gate, v);
  const Index n = x.rows();
  out.selected.resize(std::size_t(n));
  for (Index b = 0; b < n; ++b) {
    Index best = 0;
    out.gate_probs.row(b).maxCoeff(&best);
    out.selected[std::size_t(b)] = int(best);
  }
  if (strategy == Strategy::full) {
    std::vector<Matrix<T>> masks;
    for (const auto& e : m.experts) {
      masks.push_back(nn::predict(e, x));
      out.expert_evaluations += std::size_t(n);
    }
    out.mask = detail::combine(out.gate_probs, masks);
    return out;
  }
  out.mask.resize(n, m.mask_dim());
  for (int i = 0; i < m.num_experts(); ++i) {
    std::vector<Index> rows;
    for (Index b = 0; b < n; ++b)
      if (out.selected[std::size_t(b)] == i) rows.push_back(b);
    if (rows.empty()) continue;
    const Matrix<T> sub = x(rows, Eigen::all);
    out.mask(rows, Eigen::all) = nn::predict(m.experts[std::size_t(i)], sub);
    out.expert_evaluations += rows.size();
  }
  return out;
}

// Payload after the container header:
//   u32 num_experts, i32 context, u64 feature_hash,
//   u64 expert_input_dim, u64 gate_input_dim, u64 mask_dim,
//   gate network, then each expert network (nn serialization).

template <class T>
void write_model(io::Writer& w, const ModeModel<T>& m) {
  w.u32(std::uint32_t(m.num_experts()));
  w.i32(m.context);
  w.u64(m.feature_hash);
  w.u64(std::uint64_t(m.expert_input_dim()));
  w.u64(std::uint64_t(m.gate_input_dim()));
  w.u64(std::uint64_t(m.mask_dim()));
  nn::write_mlp(w, m.gate);
  for (const auto& e : m.experts) nn::write_mlp(w, e);
}

template <class T>
ModeModel<T> read_model(io::Reader& r) {
  const auto n = r.u32();
  if (n == 0 || n > 4096) throw FormatError(r.name() + ": implausible expert count " + std::to_string(n));
  ModeModel<T> m;
  m.context = r.i32();
  m.feature_hash = r.u64();
  const auto x_dim = r.u64(), v_dim = r.u64(), k_dim = r.u64();
  m.gate = nn::read_mlp<T>(r);
  for (std::uint32_t i = 0; i < n; ++i) m.experts.push_back(nn::read_mlp<T>(r));
  if (std::uint64_t(m.expert_input_dim()) != x_dim || std::uint64_t(m.gate_input_dim()) != v_dim ||
      std::uint64_t(m.mask_dim()) != k_dim)
    throw FormatError(r.name() + ": header dimensions disagree with stored networks");
  try {
    validate(m);
  } catch (const ConfigError& e) {
    throw FormatError(r.name() + ": " + e.what());
  }
  return m;
}

template <class T>
void save_model(const ModeModel<T>& m, const std::filesystem::path& path) {
  io::Writer w(io::ArtifactKind::mode_model);
  write_model(w, m);
  w.save(path);
}

template <class T>
ModeModel<T> load_model(const std::filesystem::path& path) {
  auto r = io::Reader::open(path, io::ArtifactKind::mode_model);
  auto m = read_model<T>(r);
  r.expect_end();
  return m;
}

}  // namespace mdse::mode
