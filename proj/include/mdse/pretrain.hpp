// SPDX-License-Identifier: Apache-2.0
//
// Unsupervised initialization of a mixture of experts. Clean frames are
// embedded by an autoencoder and clustered with k-means; the cluster labels
// then pretrain the gate as a classifier and each expert on its own frames.

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mdse/binary_io.hpp"
#include "mdse/error.hpp"
#include "mdse/nn.hpp"
#include "mdse/train.hpp"

namespace mdse::pretrain {

using nn::Index;
template <class T>
using Matrix = nn::Matrix<T>;

struct AutoencoderConfig {
  std::vector<Index> hidden{256, 64};
  Index embedding_dim = 16;
  nn::Activation hidden_activation = nn::Activation::relu;
  train::FitConfig fit{1e-3, 128, 20, 1};
};

/// Encoder/decoder pair acting on standardized inputs. Coordinates with no
/// variance get scale 0 and are reproduced exactly by their mean.
template <class T>
struct Autoencoder {
  nn::Mlp<T> encoder, decoder;
  nn::Vector<T> mean, scale;
  double final_loss = 0.0;

  Index embedding_dim() const { return encoder.output_dim(); }
  Index input_dim() const { return encoder.input_dim(); }

  Matrix<T> standardize(const Matrix<T>& x) const {
    Matrix<T> z = x.rowwise() - mean.transpose();
    for (Index j = 0; j < z.cols(); ++j) z.col(j) *= scale(j) > T(0) ? T(1) / scale(j) : T(0);
    return z;
  }
  Matrix<T> encode(const Matrix<T>& x) const { return nn::predict(encoder, standardize(x)); }
  Matrix<T> decode(const Matrix<T>& e) const {
    Matrix<T> y = nn::predict(decoder, e);
    y = y.array().rowwise() * scale.transpose().array();
    y.rowwise() += mean.transpose();
    return y;
  }
  Matrix<T> reconstruct(const Matrix<T>& x) const { return decode(encode(x)); }
};

/// Train input -> hidden -> embedding (linear) -> reversed hidden -> input
/// (linear) on reconstruction MSE with Adam.
template <class T>
Autoencoder<T> train_autoencoder(const Matrix<T>& frames, const AutoencoderConfig& cfg) {
  mdse::detail::require<ConfigError>(cfg.embedding_dim >= 1, "embedding_dim must be >= 1");
  if (frames.rows() < 10 * cfg.embedding_dim)
    throw DataError("train_autoencoder: need at least " + std::to_string(10 * cfg.embedding_dim) +
                    " frames for embedding_dim " + std::to_string(cfg.embedding_dim) + ", got " +
                    std::to_string(frames.rows()));
  Autoencoder<T> ae;
  ae.mean = frames.colwise().mean().transpose();
  const Matrix<T> centered = frames.rowwise() - ae.mean.transpose();
  const nn::Vector<T> var = centered.array().square().colwise().mean().transpose();
  ae.scale = var.unaryExpr([](T v) { return v < T(1e-12) ? T(0) : std::sqrt(v); });
  const Matrix<T> z = ae.standardize(frames);

  std::vector<nn::LayerSpec> spec;
  for (Index h : cfg.hidden) spec.push_back({h, cfg.hidden_activation, false});
  spec.push_back({cfg.embedding_dim, nn::Activation::linear, false});
  for (auto it = cfg.hidden.rbegin(); it != cfg.hidden.rend(); ++it) spec.push_back({*it, cfg.hidden_activation, false});
  spec.push_back({frames.cols(), nn::Activation::linear, false});
  auto net = nn::make_mlp<T>(frames.cols(), spec, cfg.fit.seed);
  const auto rep = train::fit_regression(net, z, z, cfg.fit);

  const std::size_t n_enc = cfg.hidden.size() + 1;
  ae.encoder.layers.assign(net.layers.begin(), net.layers.begin() + long(n_enc));
  ae.decoder.layers.assign(net.layers.begin() + long(n_enc), net.layers.end());
  ae.final_loss = rep.final_loss;
  return ae;
}

struct KMeansConfig {
  int restarts = 10;
  int max_iters = 100;
  std::uint64_t seed = 1;
};

struct Clustering {
  Matrix<double> centroids;  // m x dim
  std::vector<int> labels;
  double wcss = 0.0;
  std::vector<double> restart_wcss;  // final WCSS of each restart
  std::vector<double> history;       // WCSS after each assignment step of the kept run

  int num_clusters() const { return int(centroids.rows()); }
};

/// Nearest centroid per row and the squared distance to it.
inline std::pair<std::vector<int>, Eigen::VectorXd> nearest_centroid(const Matrix<double>& points,
                                                                     const Matrix<double>& centroids) {
  const Eigen::VectorXd pn = points.rowwise().squaredNorm();
  const Eigen::RowVectorXd cn = centroids.rowwise().squaredNorm().transpose();
  Matrix<double> d2 = -2.0 * points * centroids.transpose();
  d2.colwise() += pn;
  d2.rowwise() += cn;
  std::vector<int> labels(std::size_t(points.rows()));
  Eigen::VectorXd best(points.rows());
  for (Index i = 0; i < points.rows(); ++i) {
    Index k = 0;
    best(i) = std::max(0.0, d2.row(i).minCoeff(&k));
    labels[std::size_t(i)] = int(k);
  }
  return {labels, best};
}

namespace detail {

inline Matrix<double> seed_plus_plus(const Matrix<double>& pts, int m, std::mt19937_64& rng) {
  const Index n = pts.rows();
  Matrix<double> c(m, pts.cols());
  std::uniform_int_distribution<Index> pick(0, n - 1);
  c.row(0) = pts.row(pick(rng));
  Eigen::VectorXd d2 = (pts.rowwise() - c.row(0)).rowwise().squaredNorm();
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int k = 1; k < m; ++k) {
    const double total = d2.sum();
    Index chosen = 0;
    if (total <= 0.0) {
      chosen = pick(rng);
    } else {
      double r = u(rng) * total;
      chosen = n - 1;
      for (Index i = 0; i < n; ++i) {
        r -= d2(i);
        if (r < 0.0 && d2(i) > 0.0) {
          chosen = i;
          break;
        }
      }
    }
    c.row(k) = pts.row(chosen);
    d2 = d2.cwiseMin((pts.rowwise() - c.row(k)).rowwise().squaredNorm());
  }
  return c;
}

struct Run {
  Matrix<double> centroids;
  std::vector<int> labels;
  double wcss;
  std::vector<double> history;
};

inline Run lloyd(const Matrix<double>& pts, int m, int max_iters, std::mt19937_64& rng) {
  Run run;
  run.centroids = seed_plus_plus(pts, m, rng);
  auto [labels, d2] = nearest_centroid(pts, run.centroids);
  run.history.push_back(d2.sum());
  for (int it = 0; it < max_iters; ++it) {
    Matrix<double> sums = Matrix<double>::Zero(m, pts.cols());
    std::vector<Index> counts(std::size_t(m), 0);
    for (Index i = 0; i < pts.rows(); ++i) {
      sums.row(labels[std::size_t(i)]) += pts.row(i);
      ++counts[std::size_t(labels[std::size_t(i)])];
    }
    for (int k = 0; k < m; ++k) {
      if (counts[std::size_t(k)] > 0) {
        run.centroids.row(k) = sums.row(k) / double(counts[std::size_t(k)]);
      } else {
        // Empty cluster: move it onto the worst-fit point.
        Index far = 0;
        d2.maxCoeff(&far);
        run.centroids.row(k) = pts.row(far);
        d2(far) = 0.0;
      }
    }
    auto [next, nd2] = nearest_centroid(pts, run.centroids);
    run.history.push_back(nd2.sum());
    const bool stable = next == labels;
    labels = std::move(next);
    d2 = std::move(nd2);
    if (stable) break;
  }
  run.labels = std::move(labels);
  run.wcss = d2.sum();
  return run;
}

}  // namespace detail

/// Lloyd's algorithm from k-means++ seeds; the restart with the lowest
/// within-cluster sum of squares wins.
inline Clustering kmeans(const Matrix<double>& points, int m, const KMeansConfig& cfg) {
  mdse::detail::require<ConfigError>(m >= 1, "kmeans: need at least one cluster");
  mdse::detail::require<ConfigError>(cfg.restarts >= 1 && cfg.max_iters >= 1, "kmeans: restarts and max_iters must be >= 1");
  if (points.rows() < m)
    throw DataError("kmeans: " + std::to_string(points.rows()) + " points cannot form " + std::to_string(m) + " clusters");
  Clustering best;
  best.wcss = std::numeric_limits<double>::infinity();
  for (int r = 0; r < cfg.restarts; ++r) {
    std::mt19937_64 rng(cfg.seed + 0x9e3779b97f4a7c15ULL * std::uint64_t(r + 1));
    auto run = detail::lloyd(points, m, cfg.max_iters, rng);
    best.restart_wcss.push_back(run.wcss);
    if (run.wcss < best.wcss) {
      best.wcss = run.wcss;
      best.centroids = std::move(run.centroids);
      best.labels = std::move(run.labels);
      best.history = std::move(run.history);
    }
  }
  return best;
}

/// Cluster of each frame: nearest centroid of its embedding.
template <class T>
std::vector<int> assign_labels(const Autoencoder<T>& ae, const Clustering& c, const Matrix<T>& frames) {
  if (frames.cols() != ae.input_dim()) throw DataError("assign_labels: frame width does not match autoencoder");
  const Matrix<double> emb = ae.encode(frames).template cast<double>();
  return nearest_centroid(emb, c.centroids).first;
}

struct GatePretrainReport {
  double accuracy = 0.0;
  double final_loss = 0.0;
};

/// Gate trained as a classifier of the cluster labels.
template <class T>
GatePretrainReport pretrain_gate(nn::Mlp<T>& gate, const Matrix<T>& gate_input, std::span<const int> labels,
                                 const train::FitConfig& cfg) {
  for (int y : labels)
    if (y < 0 || y >= gate.output_dim())
      throw DataError("pretrain_gate: label " + std::to_string(y) + " outside [0, " + std::to_string(gate.output_dim()) + ")");
  const auto rep = train::fit_classifier(gate, gate_input, labels, cfg);
  return {rep.accuracy, rep.final_loss};
}

struct ExpertPretrainReport {
  std::vector<std::size_t> frames;  // frames each expert trained on
  std::vector<bool> fallback;       // cluster was empty, full dataset used
  std::vector<double> final_loss;
};

/// Expert i regresses the IRM on the frames labelled i only. An empty
/// cluster falls back to the full dataset and is flagged.
template <class T>
ExpertPretrainReport pretrain_experts(std::vector<nn::Mlp<T>>& experts, const Matrix<T>& expert_input,
                                      const Matrix<T>& targets, std::span<const int> labels,
                                      const train::FitConfig& cfg) {
  if (Index(labels.size()) != expert_input.rows() || targets.rows() != expert_input.rows())
    throw DataError("pretrain_experts: inputs, targets and labels must have equal row counts");
  const int m = int(experts.size());
  for (int y : labels)
    if (y < 0 || y >= m) throw DataError("pretrain_experts: label " + std::to_string(y) + " outside [0, " + std::to_string(m) + ")");
  ExpertPretrainReport rep;
  for (int i = 0; i < m; ++i) {
    std::vector<Index> rows;
    for (std::size_t b = 0; b < labels.size(); ++b)
      if (labels[b] == i) rows.push_back(Index(b));
    const bool fallback = rows.size() < 2;
    auto fit = cfg;
    fit.seed = cfg.seed + std::uint64_t(i);
    train::FitReport r;
    if (fallback) rows.clear();
    r = train::fit_regression(experts[std::size_t(i)], expert_input, targets, fit, std::span<const Index>(rows));
    rep.frames.push_back(fallback ? std::size_t(expert_input.rows()) : rows.size());
    rep.fallback.push_back(fallback);
    rep.final_loss.push_back(r.final_loss);
  }
  return rep;
}

/// Everything the clustering stage produces, persisted between runs.
template <class T>
struct Artifacts {
  Autoencoder<T> autoencoder;
  Clustering clustering;
  std::uint64_t feature_hash = 0;
};

// Payload: u64 feature_hash, f64 ae final_loss, u64 dim, mean[dim], scale[dim],
// encoder, decoder, u64 m, u64 emb, centroids row-major, f64 wcss,
// u64 n, labels as i32.
template <class T>
void save_artifacts(const Artifacts<T>& a, const std::filesystem::path& path) {
  io::Writer w(io::ArtifactKind::pretrain);
  w.u64(a.feature_hash);
  w.f64(a.autoencoder.final_loss);
  w.u64(std::uint64_t(a.autoencoder.mean.size()));
  w.f64s(a.autoencoder.mean);
  w.f64s(a.autoencoder.scale);
  nn::write_mlp(w, a.autoencoder.encoder);
  nn::write_mlp(w, a.autoencoder.decoder);
  const auto& c = a.clustering.centroids;
  w.u64(std::uint64_t(c.rows()));
  w.u64(std::uint64_t(c.cols()));
  for (Index r = 0; r < c.rows(); ++r)
    for (Index j = 0; j < c.cols(); ++j) w.f64(c(r, j));
  w.f64(a.clustering.wcss);
  w.u64(a.clustering.labels.size());
  for (int l : a.clustering.labels) w.i32(l);
  w.save(path);
}

template <class T>
Artifacts<T> load_artifacts(const std::filesystem::path& path) {
  auto r = io::Reader::open(path, io::ArtifactKind::pretrain);
  Artifacts<T> a;
  a.feature_hash = r.u64();
  a.autoencoder.final_loss = r.f64();
  const auto dim = r.count(16);
  a.autoencoder.mean.resize(Index(dim));
  a.autoencoder.scale.resize(Index(dim));
  for (auto& v : a.autoencoder.mean) v = T(r.f64());
  for (auto& v : a.autoencoder.scale) v = T(r.f64());
  a.autoencoder.encoder = nn::read_mlp<T>(r);
  a.autoencoder.decoder = nn::read_mlp<T>(r);
  if (std::uint64_t(a.autoencoder.encoder.input_dim()) != dim ||
      a.autoencoder.decoder.input_dim() != a.autoencoder.encoder.output_dim())
    throw FormatError(r.name() + ": autoencoder dimensions are inconsistent");
  const auto m = r.u64();
  const auto emb = r.u64();
  if (emb != std::uint64_t(a.autoencoder.embedding_dim()) || m == 0 || m * emb * 8 > r.remaining())
    throw FormatError(r.name() + ": corrupt centroid block");
  a.clustering.centroids.resize(Index(m), Index(emb));
  for (Index i = 0; i < Index(m); ++i)
    for (Index j = 0; j < Index(emb); ++j) a.clustering.centroids(i, j) = r.f64();
  a.clustering.wcss = r.f64();
  const auto n = r.count(4);
  a.clustering.labels.resize(n);
  for (auto& l : a.clustering.labels) {
    l = r.i32();
    if (l < 0 || std::uint64_t(l) >= m) throw FormatError(r.name() + ": cluster label out of range");
  }
  r.expect_end();
  return a;
}

}  // namespace mdse::pretrain
