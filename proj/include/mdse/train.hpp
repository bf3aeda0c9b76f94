// SPDX-License-Identifier: Apache-2.0
//
// Minibatch training loops: plain regression and classification for single
// networks, and joint training of a mixture of experts.

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <vector>

#include "mdse/error.hpp"
#include "mdse/mode.hpp"
#include "mdse/nn.hpp"

namespace mdse::train {

using nn::Index;
template <class T>
using Matrix = nn::Matrix<T>;

struct FitConfig {
  double lr = 1e-3;
  Index batch_size = 128;
  int epochs = 10;
  std::uint64_t seed = 1;
};

inline void validate(const FitConfig& c) {
  mdse::detail::require<ConfigError>(c.lr > 0.0, "learning rate must be positive");
  mdse::detail::require<ConfigError>(c.batch_size >= 2, "batch size must be >= 2");
  mdse::detail::require<ConfigError>(c.epochs >= 0, "epochs must be >= 0");
}

/// Shuffled minibatches of row indices. A trailing batch of one row is
/// merged into its predecessor since batch statistics need two rows.
inline std::vector<std::vector<Index>> minibatches(Index n, Index batch_size, std::mt19937_64& rng) {
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index(0));
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<Index>> out;
  for (Index start = 0; start < n; start += batch_size) {
    const Index end = std::min(n, start + batch_size);
    out.emplace_back(order.begin() + start, order.begin() + end);
  }
  if (out.size() > 1 && out.back().size() == 1) {
    out[out.size() - 2].push_back(out.back().front());
    out.pop_back();
  }
  return out;
}

template <class T, class Idx>
Matrix<T> gather_rows(const Matrix<T>& m, const Idx& rows) {
  return m(rows, Eigen::all);
}

/// Mean over all entries of (pred - target)^2.
template <class T>
double mask_mse(const Matrix<T>& pred, const Matrix<T>& target) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols()) throw DataError("mask_mse: shape mismatch");
  if (pred.size() == 0) return 0.0;
  return double((pred - target).squaredNorm()) / double(pred.size());
}

struct FitReport {
  std::vector<double> epoch_loss;
  double final_loss = 0.0;
};

/// Adam on the batch-mean of 0.5 * ||f(x) - y||^2, over the given rows only
/// when `rows` is non-empty.
template <class T>
FitReport fit_regression(nn::Mlp<T>& net, const Matrix<T>& x, const Matrix<T>& y, const FitConfig& cfg,
                         std::span<const Index> rows = {}) {
  validate(cfg);
  if (x.rows() != y.rows()) throw DataError("fit_regression: input and target row counts differ");
  if (y.cols() != net.output_dim()) throw DataError("fit_regression: target width does not match network output");
  for (Index r : rows)
    if (r < 0 || r >= x.rows()) throw DataError("fit_regression: row index out of range");
  std::vector<Index> all;
  if (rows.empty()) {
    all.resize(static_cast<std::size_t>(x.rows()));
    std::iota(all.begin(), all.end(), Index(0));
    rows = all;
  }
  const Index n = Index(rows.size());
  FitReport rep;
  if (n == 0) return rep;
  auto adam = nn::make_adam(net, {cfg.lr});
  std::mt19937_64 rng(cfg.seed);
  std::vector<Index> idx;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double total = 0.0;
    for (const auto& batch : minibatches(n, cfg.batch_size, rng)) {
      idx.clear();
      for (Index i : batch) idx.push_back(rows[std::size_t(i)]);
      const Matrix<T> xb = gather_rows(x, idx), yb = gather_rows(y, idx);
      auto cache = nn::forward(net, xb, nn::Mode::train);
      total += double(nn::mse(cache.output(), yb)) * double(idx.size());
      auto g = nn::backward(net, cache, nn::mse_grad(cache.output(), yb));
      nn::adam_step(adam, net, g);
    }
    rep.epoch_loss.push_back(total / double(n));
  }
  double total = 0.0;
  for (Index start = 0; start < n; start += 4096) {
    const auto chunk = rows.subspan(std::size_t(start), std::size_t(std::min<Index>(4096, n - start)));
    const Matrix<T> yb = gather_rows(y, chunk);
    total += double(nn::mse(nn::predict(net, Matrix<T>(gather_rows(x, chunk))), yb)) * double(chunk.size());
  }
  rep.final_loss = total / double(n);
  return rep;
}

struct ClassifierReport {
  std::vector<double> epoch_loss;
  double final_loss = 0.0;
  double accuracy = 0.0;
};

template <class T>
double accuracy(const Matrix<T>& probs, std::span<const int> labels) {
  if (labels.empty()) return 0.0;
  std::size_t hit = 0;
  for (Index b = 0; b < probs.rows(); ++b) {
    Index best = 0;
    probs.row(b).maxCoeff(&best);
    hit += (int(best) == labels[std::size_t(b)]);
  }
  return double(hit) / double(labels.size());
}

/// Adam on softmax cross-entropy.
template <class T>
ClassifierReport fit_classifier(nn::Mlp<T>& net, const Matrix<T>& x, std::span<const int> labels,
                                const FitConfig& cfg) {
  validate(cfg);
  if (Index(labels.size()) != x.rows()) throw DataError("fit_classifier: label count does not match rows");
  for (int y : labels)
    if (y < 0 || y >= net.output_dim())
      throw DataError("fit_classifier: label " + std::to_string(y) + " outside [0, " +
                      std::to_string(net.output_dim()) + ")");
  ClassifierReport rep;
  if (x.rows() == 0) return rep;
  auto adam = nn::make_adam(net, {cfg.lr});
  std::mt19937_64 rng(cfg.seed);
  std::vector<int> yb;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double total = 0.0;
    for (const auto& idx : minibatches(x.rows(), cfg.batch_size, rng)) {
      const Matrix<T> xb = gather_rows(x, idx);
      yb.clear();
      for (Index i : idx) yb.push_back(labels[std::size_t(i)]);
      auto cache = nn::forward(net, xb, nn::Mode::train);
      total += double(nn::cross_entropy<T>(cache.output(), yb)) * double(idx.size());
      auto g = nn::backward(net, cache, nn::cross_entropy_logit_grad<T>(cache.output(), yb),
                            nn::GradientAt::pre_activation);
      nn::adam_step(adam, net, g);
    }
    rep.epoch_loss.push_back(total / double(x.rows()));
  }
  const Matrix<T> probs = nn::predict(net, x);
  rep.final_loss = double(nn::cross_entropy<T>(probs, labels));
  rep.accuracy = accuracy(probs, labels);
  return rep;
}

/// Rows of expert input, gate input and target mask for the mixture.
template <class T>
struct MixtureData {
  Matrix<T> expert_input;
  Matrix<T> gate_input;
  Matrix<T> target;

  Index rows() const { return target.rows(); }
};

struct EpochStats {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_mask_mse = 0.0;
};

/// Specialization loss and combined-mask MSE of a model in inference mode.
template <class T>
std::pair<double, double> evaluate_mixture(const mode::ModeModel<T>& m, const MixtureData<T>& d) {
  if (d.rows() == 0) return {0.0, 0.0};
  const Matrix<T> probs = nn::predict(m.gate, d.gate_input);
  std::vector<Matrix<T>> masks;
  for (const auto& e : m.experts) masks.push_back(nn::predict(e, d.expert_input));
  const double loss = double(mode::mode_loss(probs, masks, d.target));
  const Matrix<T> combined = mode::detail::combine(probs, masks);
  return {loss, mask_mse(combined, d.target)};
}

/// Joint training of gate and experts on the specialization loss, one Adam
/// state per network. `on_epoch` may be empty.
template <class T>
std::vector<EpochStats> train_mixture(mode::ModeModel<T>& m, const MixtureData<T>& train_set,
                                      const MixtureData<T>* val_set, const FitConfig& cfg,
                                      const std::function<void(const EpochStats&)>& on_epoch = {}) {
  validate(cfg);
  mode::validate(m);
  if (train_set.rows() == 0) throw DataError("train_mixture: empty training set");
  auto gate_adam = nn::make_adam(m.gate, {cfg.lr});
  std::vector<nn::AdamState<T>> expert_adam;
  for (auto& e : m.experts) expert_adam.push_back(nn::make_adam(e, {cfg.lr}));
  std::mt19937_64 rng(cfg.seed);
  std::vector<EpochStats> history;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double total = 0.0;
    for (const auto& idx : minibatches(train_set.rows(), cfg.batch_size, rng)) {
      const Matrix<T> xb = gather_rows(train_set.expert_input, idx);
      const Matrix<T> vb = gather_rows(train_set.gate_input, idx);
      const Matrix<T> yb = gather_rows(train_set.target, idx);
      auto r = mode::mode_forward(m, xb, vb, nn::Mode::train);
      total += double(mode::mode_loss(r.gate_probs, r.expert_masks, yb)) * double(idx.size());
      auto g = mode::mode_backward(m, r, yb);
      nn::adam_step(gate_adam, m.gate, g.gate);
      for (std::size_t i = 0; i < m.experts.size(); ++i) nn::adam_step(expert_adam[i], m.experts[i], g.experts[i]);
    }
    EpochStats s;
    s.epoch = epoch + 1;
    s.train_loss = total / double(train_set.rows());
    if (val_set) std::tie(s.val_loss, s.val_mask_mse) = evaluate_mixture(m, *val_set);
    history.push_back(s);
    if (on_epoch) on_epoch(s);
  }
  return history;
}

/// [expert_input | gate_input], the input of a single network that sees
/// both feature streams.
template <class T>
Matrix<T> concat_features(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.rows() != b.rows()) throw DataError("concat_features: row counts differ");
  Matrix<T> out(a.rows(), a.cols() + b.cols());
  out << a, b;
  return out;
}

}  // namespace mdse::train
