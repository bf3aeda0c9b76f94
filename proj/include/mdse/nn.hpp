// SPDX-License-Identifier: Apache-2.0
//
// Small feedforward network engine: dense layers with optional batch
// normalization, exact backpropagation, Adam, and the losses used by the
// experts, the gate and the autoencoder.
//
// Batches are matrices with one example per row.

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mdse/binary_io.hpp"
#include "mdse/error.hpp"

namespace mdse::nn {

using Index = Eigen::Index;
template <class T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <class T>
using Vector = Eigen::Matrix<T, Eigen::Dynamic, 1>;
template <class T>
using RowVector = Eigen::Matrix<T, 1, Eigen::Dynamic>;

enum class Activation : std::uint8_t { linear = 0, relu = 1, sigmoid = 2, softmax = 3 };
enum class Mode { train, infer };

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::linear: return "linear";
    case Activation::relu: return "relu";
    case Activation::sigmoid: return "sigmoid";
    case Activation::softmax: return "softmax";
  }
  return "unknown";
}

template <class T>
struct BatchNorm {
  Vector<T> gamma, beta;
  Vector<T> running_mean, running_var;
  T momentum = T(0.1);
  T epsilon = T(1e-5);
};

/// y = act(BN(W x + b)); BN is optional.
template <class T>
struct Layer {
  Matrix<T> weights;  // out x in
  Vector<T> bias;
  std::optional<BatchNorm<T>> batchnorm;
  Activation activation = Activation::linear;

  Index in_dim() const { return weights.cols(); }
  Index out_dim() const { return weights.rows(); }
};

template <class T>
struct Mlp {
  std::vector<Layer<T>> layers;

  Index input_dim() const { return layers.empty() ? 0 : layers.front().in_dim(); }
  Index output_dim() const { return layers.empty() ? 0 : layers.back().out_dim(); }
};

struct LayerSpec {
  Index units = 0;
  Activation activation = Activation::linear;
  bool batchnorm = false;
};

/// `hidden.size()` hidden layers followed by one output layer. Batch
/// normalization, when enabled, goes on hidden layers only.
inline std::vector<LayerSpec> stack_spec(const std::vector<Index>& hidden, Activation hidden_act,
                                         Index output_units, Activation output_act, bool batchnorm) {
  std::vector<LayerSpec> spec;
  for (Index h : hidden) spec.push_back({h, hidden_act, batchnorm});
  spec.push_back({output_units, output_act, false});
  return spec;
}

/// He-uniform weights for ReLU layers, Xavier-uniform otherwise, zero biases.
template <class T>
Mlp<T> make_mlp(Index input_dim, const std::vector<LayerSpec>& spec, std::uint64_t seed) {
  mdse::detail::require<ConfigError>(input_dim > 0, "make_mlp: input_dim must be positive");
  mdse::detail::require<ConfigError>(!spec.empty(), "make_mlp: at least one layer required");
  std::mt19937_64 rng(seed);
  Mlp<T> m;
  Index in = input_dim;
  for (const auto& s : spec) {
    mdse::detail::require<ConfigError>(s.units > 0, "make_mlp: layer width must be positive");
    Layer<T> layer;
    const double limit = s.activation == Activation::relu ? std::sqrt(6.0 / double(in))
                                                          : std::sqrt(6.0 / double(in + s.units));
    std::uniform_real_distribution<double> dist(-limit, limit);
    layer.weights.resize(s.units, in);
    for (Index r = 0; r < s.units; ++r)
      for (Index c = 0; c < in; ++c) layer.weights(r, c) = T(dist(rng));
    layer.bias = Vector<T>::Zero(s.units);
    layer.activation = s.activation;
    if (s.batchnorm) {
      BatchNorm<T> bn;
      bn.gamma = Vector<T>::Ones(s.units);
      bn.beta = Vector<T>::Zero(s.units);
      bn.running_mean = Vector<T>::Zero(s.units);
      bn.running_var = Vector<T>::Ones(s.units);
      layer.batchnorm = std::move(bn);
    }
    m.layers.push_back(std::move(layer));
    in = s.units;
  }
  return m;
}

template <class T>
Matrix<T> activate(Activation a, const Matrix<T>& z) {
  switch (a) {
    case Activation::linear:
      return z;
    case Activation::relu:
      return z.cwiseMax(T(0));
    case Activation::sigmoid:
      return z.unaryExpr([](T v) { return T(1) / (T(1) + std::exp(-v)); });
    case Activation::softmax: {
      Matrix<T> out = z.colwise() - z.rowwise().maxCoeff();
      out = out.array().exp();
      out.array().colwise() /= out.rowwise().sum().array();
      return out;
    }
  }
  return z;
}

template <class T>
struct LayerCache {
  Matrix<T> input;   // B x in
  Matrix<T> xhat;    // normalized affine output (batchnorm only)
  RowVector<T> inv_std;
  Matrix<T> pre;     // activation input
  Matrix<T> output;  // B x out
};

template <class T>
struct ForwardCache {
  Mode mode = Mode::infer;
  std::vector<LayerCache<T>> layers;

  const Matrix<T>& output() const { return layers.back().output; }
  Index batch_size() const { return layers.empty() ? 0 : layers.front().input.rows(); }
};

namespace detail {

template <class T>
void check_input(const Mlp<T>& m, Index cols) {
  if (m.layers.empty()) throw ConfigError("network has no layers");
  if (cols != m.input_dim())
    throw DataError("input dimension " + std::to_string(cols) + " does not match network input " +
                    std::to_string(m.input_dim()));
}

template <class T>
Matrix<T> affine(const Layer<T>& layer, const Matrix<T>& x) {
  Matrix<T> z = x * layer.weights.transpose();
  z.rowwise() += layer.bias.transpose();
  return z;
}

}  // namespace detail

/// Train mode normalizes with batch statistics and folds them into the
/// running statistics; infer mode uses the running statistics.
template <class T>
ForwardCache<T> forward(Mlp<T>& m, const Matrix<T>& x, Mode mode) {
  detail::check_input(m, x.cols());
  ForwardCache<T> cache;
  cache.mode = mode;
  cache.layers.reserve(m.layers.size());
  const Matrix<T>* in = &x;
  for (auto& layer : m.layers) {
    LayerCache<T> lc;
    lc.input = *in;
    Matrix<T> z = detail::affine(layer, lc.input);
    if (layer.batchnorm) {
      auto& bn = *layer.batchnorm;
      if (mode == Mode::train) {
        const RowVector<T> mean = z.colwise().mean();
        z.rowwise() -= mean;
        const RowVector<T> var = z.array().square().colwise().mean();
        lc.inv_std = (var.array() + bn.epsilon).rsqrt();
        bn.running_mean = (T(1) - bn.momentum) * bn.running_mean + bn.momentum * mean.transpose();
        bn.running_var = (T(1) - bn.momentum) * bn.running_var + bn.momentum * var.transpose();
      } else {
        z.rowwise() -= bn.running_mean.transpose();
        lc.inv_std = (bn.running_var.array() + bn.epsilon).rsqrt().transpose();
      }
      lc.xhat = z.array().rowwise() * lc.inv_std.array();
      z = lc.xhat.array().rowwise() * bn.gamma.transpose().array();
      z.rowwise() += bn.beta.transpose();
    }
    lc.output = activate(layer.activation, z);
    lc.pre = std::move(z);
    cache.layers.push_back(std::move(lc));
    in = &cache.layers.back().output;
  }
  return cache;
}

/// Inference without a cache. Deterministic and independent of batch
/// composition.
template <class T>
Matrix<T> predict(const Mlp<T>& m, const Matrix<T>& x) {
  detail::check_input(m, x.cols());
  Matrix<T> a = x;
  for (const auto& layer : m.layers) {
    Matrix<T> z = detail::affine(layer, a);
    if (layer.batchnorm) {
      const auto& bn = *layer.batchnorm;
      const RowVector<T> scale =
          (bn.gamma.array() * (bn.running_var.array() + bn.epsilon).rsqrt()).transpose();
      z.rowwise() -= bn.running_mean.transpose();
      z = z.array().rowwise() * scale.array();
      z.rowwise() += bn.beta.transpose();
    }
    a = activate(layer.activation, z);
  }
  return a;
}

template <class T>
struct LayerGrad {
  Matrix<T> weights;
  Vector<T> bias;
  Vector<T> gamma, beta;  // empty without batchnorm
};

template <class T>
struct Gradients {
  std::vector<LayerGrad<T>> layers;
  Matrix<T> input;  // gradient w.r.t. the network input
};

/// Where the supplied gradient lives: on the network outputs, or on the
/// output layer's pre-activation (logits).
enum class GradientAt { outputs, pre_activation };

template <class T>
Matrix<T> activation_backward(Activation a, const Matrix<T>& pre, const Matrix<T>& out, const Matrix<T>& g) {
  switch (a) {
    case Activation::linear:
      return g;
    case Activation::relu:
      return (g.array() * (pre.array() > T(0)).template cast<T>()).matrix();
    case Activation::sigmoid:
      return g.array() * out.array() * (T(1) - out.array());
    case Activation::softmax: {
      const Vector<T> dot = (g.array() * out.array()).rowwise().sum();
      return out.array() * (g.colwise() - dot).array();
    }
  }
  return g;
}

/// Gradients of sum_b <output_grad_b, f(x_b)>, i.e. of any scalar loss whose
/// derivative with respect to the chosen target is `output_grad`.
template <class T>
Gradients<T> backward(const Mlp<T>& m, const ForwardCache<T>& cache, const Matrix<T>& output_grad,
                      GradientAt at = GradientAt::outputs) {
  if (cache.layers.size() != m.layers.size())
    throw DataError("backward: cache has " + std::to_string(cache.layers.size()) + " layers, network has " +
                    std::to_string(m.layers.size()));
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    const auto& lc = cache.layers[l];
    if (lc.input.cols() != m.layers[l].in_dim() || lc.output.cols() != m.layers[l].out_dim())
      throw DataError("backward: cache does not match network layer " + std::to_string(l));
  }
  if (output_grad.rows() != cache.batch_size() || output_grad.cols() != m.output_dim())
    throw DataError("backward: output gradient shape mismatch");

  Gradients<T> grads;
  grads.layers.resize(m.layers.size());
  Matrix<T> g = output_grad;
  for (std::size_t li = m.layers.size(); li-- > 0;) {
    const auto& layer = m.layers[li];
    const auto& lc = cache.layers[li];
    auto& lg = grads.layers[li];

    Matrix<T> dz = (li + 1 == m.layers.size() && at == GradientAt::pre_activation)
                       ? g
                       : activation_backward(layer.activation, lc.pre, lc.output, g);
    if (layer.batchnorm) {
      const auto& bn = *layer.batchnorm;
      lg.gamma = (dz.array() * lc.xhat.array()).colwise().sum().transpose();
      lg.beta = dz.colwise().sum().transpose();
      Matrix<T> dxhat = dz.array().rowwise() * bn.gamma.transpose().array();
      if (cache.mode == Mode::train) {
        const T n = T(dz.rows());
        const RowVector<T> sum_dxhat = dxhat.colwise().sum();
        const RowVector<T> sum_dxhat_xhat = (dxhat.array() * lc.xhat.array()).colwise().sum();
        Matrix<T> t = n * dxhat;
        t.rowwise() -= sum_dxhat;
        t -= (lc.xhat.array().rowwise() * sum_dxhat_xhat.array()).matrix();
        dz = (t.array().rowwise() * lc.inv_std.array()) / n;
      } else {
        dz = dxhat.array().rowwise() * lc.inv_std.array();
      }
    }
    lg.weights = dz.transpose() * lc.input;
    lg.bias = dz.colwise().sum().transpose();
    g = dz * layer.weights;
  }
  grads.input = std::move(g);
  return grads;
}

/// Trainable tensors in a fixed order: per layer W, b, then gamma, beta.
template <class T>
std::vector<std::span<T>> parameters(Mlp<T>& m) {
  std::vector<std::span<T>> out;
  for (auto& l : m.layers) {
    out.emplace_back(l.weights.data(), std::size_t(l.weights.size()));
    out.emplace_back(l.bias.data(), std::size_t(l.bias.size()));
    if (l.batchnorm) {
      out.emplace_back(l.batchnorm->gamma.data(), std::size_t(l.batchnorm->gamma.size()));
      out.emplace_back(l.batchnorm->beta.data(), std::size_t(l.batchnorm->beta.size()));
    }
  }
  return out;
}

/// Same order as parameters().
template <class T>
std::vector<std::span<T>> gradient_spans(Gradients<T>& g) {
  std::vector<std::span<T>> out;
  for (auto& l : g.layers) {
    out.emplace_back(l.weights.data(), std::size_t(l.weights.size()));
    out.emplace_back(l.bias.data(), std::size_t(l.bias.size()));
    if (l.gamma.size() > 0) {
      out.emplace_back(l.gamma.data(), std::size_t(l.gamma.size()));
      out.emplace_back(l.beta.data(), std::size_t(l.beta.size()));
    }
  }
  return out;
}

template <class T>
std::size_t parameter_count(const Mlp<T>& m) {
  std::size_t n = 0;
  for (const auto& l : m.layers) {
    n += std::size_t(l.weights.size() + l.bias.size());
    if (l.batchnorm) n += std::size_t(2 * l.batchnorm->gamma.size());
  }
  return n;
}

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

template <class T>
struct AdamState {
  AdamConfig config;
  std::vector<std::vector<T>> first_moment, second_moment;
  std::int64_t step_count = 0;
};

template <class T>
AdamState<T> make_adam(Mlp<T>& m, AdamConfig cfg = {}) {
  AdamState<T> s;
  s.config = cfg;
  for (auto p : parameters(m)) {
    s.first_moment.emplace_back(p.size(), T(0));
    s.second_moment.emplace_back(p.size(), T(0));
  }
  return s;
}

/// One bias-corrected Adam update over every tensor.
template <class T>
void adam_step(AdamState<T>& s, const std::vector<std::span<T>>& params,
               const std::vector<std::span<T>>& grads) {
  if (params.size() != grads.size() || params.size() != s.first_moment.size())
    throw DataError("adam_step: tensor count mismatch");
  ++s.step_count;
  const auto& c = s.config;
  const double bc1 = 1.0 - std::pow(c.beta1, double(s.step_count));
  const double bc2 = 1.0 - std::pow(c.beta2, double(s.step_count));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i];
    auto g = grads[i];
    auto& m = s.first_moment[i];
    auto& v = s.second_moment[i];
    if (p.size() != g.size() || p.size() != m.size()) throw DataError("adam_step: tensor shape mismatch");
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = T(c.beta1 * m[j] + (1.0 - c.beta1) * g[j]);
      v[j] = T(c.beta2 * v[j] + (1.0 - c.beta2) * double(g[j]) * g[j]);
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p[j] -= T(c.lr * mhat / (std::sqrt(vhat) + c.epsilon));
    }
  }
}

template <class T>
void adam_step(AdamState<T>& s, Mlp<T>& m, Gradients<T>& g) {
  adam_step(s, parameters(m), gradient_spans(g));
}

/// Mean over the batch of 0.5 * ||pred - target||^2.
template <class T>
T mse(const Matrix<T>& pred, const Matrix<T>& target) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols()) throw DataError("mse: shape mismatch");
  if (pred.rows() == 0) return T(0);
  return T(0.5) * (pred - target).squaredNorm() / T(pred.rows());
}

/// d mse / d pred.
template <class T>
Matrix<T> mse_grad(const Matrix<T>& pred, const Matrix<T>& target) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols()) throw DataError("mse: shape mismatch");
  return (pred - target) / T(std::max<Index>(pred.rows(), 1));
}

/// Mean of -log probs[b, labels[b]].
template <class T>
T cross_entropy(const Matrix<T>& probs, std::span<const int> labels) {
  if (Index(labels.size()) != probs.rows()) throw DataError("cross_entropy: label count mismatch");
  T sum = T(0);
  for (Index b = 0; b < probs.rows(); ++b) {
    const int y = labels[std::size_t(b)];
    if (y < 0 || y >= probs.cols())
      throw DataError("cross_entropy: label " + std::to_string(y) + " outside [0, " + std::to_string(probs.cols()) + ")");
    sum -= std::log(std::max(probs(b, y), std::numeric_limits<T>::min()));
  }
  return probs.rows() > 0 ? sum / T(probs.rows()) : T(0);
}

/// Gradient of cross_entropy at softmax logits: (p - onehot) / B.
template <class T>
Matrix<T> cross_entropy_logit_grad(const Matrix<T>& probs, std::span<const int> labels) {
  Matrix<T> g = probs;
  for (Index b = 0; b < probs.rows(); ++b) g(b, labels[std::size_t(b)]) -= T(1);
  return g / T(std::max<Index>(probs.rows(), 1));
}

// Serialization: u32 layer count, then per layer u32 in, u32 out,
// u8 activation, u8 has_batchnorm, W row-major, b, and with batchnorm
// gamma, beta, running_mean, running_var, momentum, epsilon.

template <class T>
void write_mlp(io::Writer& w, const Mlp<T>& m) {
  w.u32(std::uint32_t(m.layers.size()));
  for (const auto& l : m.layers) {
    w.u32(std::uint32_t(l.in_dim()));
    w.u32(std::uint32_t(l.out_dim()));
    w.u8(static_cast<std::uint8_t>(l.activation));
    w.u8(l.batchnorm ? 1 : 0);
    for (Index r = 0; r < l.out_dim(); ++r)
      for (Index c = 0; c < l.in_dim(); ++c) w.f64(double(l.weights(r, c)));
    w.f64s(l.bias);
    if (l.batchnorm) {
      const auto& bn = *l.batchnorm;
      w.f64s(bn.gamma);
      w.f64s(bn.beta);
      w.f64s(bn.running_mean);
      w.f64s(bn.running_var);
      w.f64(double(bn.momentum));
      w.f64(double(bn.epsilon));
    }
  }
}

template <class T>
Mlp<T> read_mlp(io::Reader& r) {
  const auto n_layers = r.u32();
  if (n_layers == 0 || n_layers > 1024) throw FormatError(r.name() + ": implausible layer count " + std::to_string(n_layers));
  Mlp<T> m;
  Index prev_out = -1;
  for (std::uint32_t i = 0; i < n_layers; ++i) {
    const Index in = r.u32(), out = r.u32();
    const auto act = r.u8();
    const auto has_bn = r.u8();
    if (in == 0 || out == 0 || act > 3 || has_bn > 1)
      throw FormatError(r.name() + ": corrupt layer header at layer " + std::to_string(i));
    if (prev_out >= 0 && in != prev_out)
      throw FormatError(r.name() + ": layer " + std::to_string(i) + " input does not chain with previous output");
    if (double(in) * double(out) * 8.0 > double(r.remaining())) throw FormatError(r.name() + ": truncated file");
    Layer<T> l;
    l.activation = static_cast<Activation>(act);
    l.weights.resize(out, in);
    for (Index row = 0; row < out; ++row)
      for (Index c = 0; c < in; ++c) l.weights(row, c) = T(r.f64());
    auto read_vec = [&](Vector<T>& v) {
      v.resize(out);
      for (Index j = 0; j < out; ++j) v(j) = T(r.f64());
    };
    read_vec(l.bias);
    if (has_bn) {
      BatchNorm<T> bn;
      read_vec(bn.gamma);
      read_vec(bn.beta);
      read_vec(bn.running_mean);
      read_vec(bn.running_var);
      bn.momentum = T(r.f64());
      bn.epsilon = T(r.f64());
      if ((bn.running_var.array() < T(0)).any()) throw FormatError(r.name() + ": negative running variance");
      l.batchnorm = std::move(bn);
    }
    if (!l.weights.allFinite() || !l.bias.allFinite()) throw FormatError(r.name() + ": non-finite parameters");
    m.layers.push_back(std::move(l));
    prev_out = out;
  }
  return m;
}

template <class T>
void save_mlp(const Mlp<T>& m, const std::filesystem::path& path) {
  io::Writer w(io::ArtifactKind::mlp);
  write_mlp(w, m);
  w.save(path);
}

template <class T>
Mlp<T> load_mlp(const std::filesystem::path& path) {
  auto r = io::Reader::open(path, io::ArtifactKind::mlp);
  auto m = read_mlp<T>(r);
  r.expect_end();
  return m;
}

template <class U, class T>
Mlp<U> cast(const Mlp<T>& m) {
  Mlp<U> out;
  for (const auto& l : m.layers) {
    Layer<U> n;
    n.weights = l.weights.template cast<U>();
    n.bias = l.bias.template cast<U>();
    n.activation = l.activation;
    if (l.batchnorm) {
      BatchNorm<U> bn;
      bn.gamma = l.batchnorm->gamma.template cast<U>();
      bn.beta = l.batchnorm->beta.template cast<U>();
      bn.running_mean = l.batchnorm->running_mean.template cast<U>();
      bn.running_var = l.batchnorm->running_var.template cast<U>();
      bn.momentum = U(l.batchnorm->momentum);
      bn.epsilon = U(l.batchnorm->epsilon);
      n.batchnorm = std::move(bn);
    }
    out.layers.push_back(std::move(n));
  }
  return out;
}

}  // namespace mdse::nn
