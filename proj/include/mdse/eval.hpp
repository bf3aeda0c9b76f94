// SPDX-License-Identifier: Apache-2.0
//
// Objective metrics, gate statistics and enhancement reports.

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "mdse/data.hpp"
#include "mdse/dsp.hpp"
#include "mdse/error.hpp"
#include "mdse/mask.hpp"
#include "mdse/mode.hpp"

namespace mdse::eval {

using dsp::RealMatrix;
using dsp::Waveform;
using Index = Eigen::Index;

inline constexpr double kSiSdrClamp = 60.0;

/// Scale-invariant SDR in dB, clamped to [-60, 60].
inline double si_sdr(const Waveform& reference, const Waveform& estimate) {
  if (reference.size() != estimate.size())
    throw DataError("si_sdr: length mismatch (" + std::to_string(reference.size()) + " vs " +
                    std::to_string(estimate.size()) + ")");
  double ss = 0.0, se = 0.0;
  for (std::size_t i = 0; i < reference.size(); ++i) {
    ss += reference.samples[i] * reference.samples[i];
    se += reference.samples[i] * estimate.samples[i];
  }
  if (ss <= 0.0) throw DataError("si_sdr: reference is all zeros");
  const double alpha = se / ss;
  double target = 0.0, residual = 0.0;
  for (std::size_t i = 0; i < reference.size(); ++i) {
    const double t = alpha * reference.samples[i];
    const double r = estimate.samples[i] - t;
    target += t * t;
    residual += r * r;
  }
  if (target <= 0.0) return -kSiSdrClamp;
  if (residual <= 0.0) return kSiSdrClamp;
  return std::clamp(10.0 * std::log10(target / residual), -kSiSdrClamp, kSiSdrClamp);
}

struct SegSnrConfig {
  std::size_t frame = 256;
  double lo = -10.0;
  double hi = 35.0;
};

/// Mean over non-overlapping frames of the clamped per-frame SNR. A trailing
/// partial frame counts as a frame. Error-free frames score `hi`; frames
/// with a silent reference and nonzero error score `lo`.
inline double segmental_snr(const Waveform& reference, const Waveform& estimate, const SegSnrConfig& cfg = {}) {
  if (reference.size() != estimate.size()) throw DataError("segmental_snr: length mismatch");
  if (reference.empty()) throw DataError("segmental_snr: empty signal");
  mdse::detail::require<ConfigError>(cfg.frame > 0 && cfg.lo < cfg.hi, "segmental_snr: invalid configuration");
  double total = 0.0;
  std::size_t frames = 0;
  for (std::size_t a = 0; a < reference.size(); a += cfg.frame, ++frames) {
    const std::size_t b = std::min(reference.size(), a + cfg.frame);
    double sig = 0.0, err = 0.0;
    for (std::size_t i = a; i < b; ++i) {
      const double d = reference.samples[i] - estimate.samples[i];
      sig += reference.samples[i] * reference.samples[i];
      err += d * d;
    }
    double v;
    if (err <= 0.0) v = cfg.hi;
    else if (sig <= 0.0) v = cfg.lo;
    else v = std::clamp(10.0 * std::log10(sig / err), cfg.lo, cfg.hi);
    total += v;
  }
  return total / double(frames);
}

/// Mean over frames of the RMS difference of 20*log10 magnitudes, with
/// magnitudes floored at `floor`.
inline double lsd(const dsp::Spectrogram& reference, const dsp::Spectrogram& estimate, double floor = 1e-8) {
  if (reference.num_frames() != estimate.num_frames() || reference.num_bins() != estimate.num_bins())
    throw DataError("lsd: spectrogram shapes differ");
  if (reference.num_frames() == 0 || reference.num_bins() == 0) throw DataError("lsd: empty spectrogram");
  double total = 0.0;
  for (Index t = 0; t < reference.num_frames(); ++t) {
    double acc = 0.0;
    for (Index k = 0; k < reference.num_bins(); ++k) {
      const double r = 20.0 * std::log10(std::max(std::abs(reference.frames(t, k)), floor));
      const double e = 20.0 * std::log10(std::max(std::abs(estimate.frames(t, k)), floor));
      acc += (r - e) * (r - e);
    }
    total += std::sqrt(acc / double(reference.num_bins()));
  }
  return total / double(reference.num_frames());
}

template <class A, class B>
double mask_mse(const A& pred, const B& target) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols()) throw DataError("mask_mse: shape mismatch");
  if (pred.size() == 0) return 0.0;
  return (pred.template cast<double>() - target.template cast<double>()).squaredNorm() / double(pred.size());
}

// ---------------------------------------------------------------------------
// Gate statistics

/// Maximum-weight perfect matching on a square matrix (Hungarian method).
/// Returns col[row].
inline std::vector<int> max_assignment(const Eigen::MatrixXd& weight) {
  const int n = int(weight.rows());
  if (weight.cols() != n) throw DataError("max_assignment: matrix must be square");
  if (n == 0) return {};
  const double big = weight.maxCoeff();
  // Minimize cost = big - weight; 1-based potentials.
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(n + 1, std::numeric_limits<double>::infinity());
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = std::numeric_limits<double>::infinity();
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = (big - weight(i0 - 1, j - 1)) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> col(n, -1);
  for (int j = 1; j <= n; ++j)
    if (p[j] > 0) col[p[j] - 1] = j - 1;
  return col;
}

struct Purity {
  double value = 0.0;
  std::vector<int> label_of_expert;  // -1 if unmatched
  std::size_t labelled_frames = 0;
};

/// Accuracy of the best one-to-one mapping from argmax expert to label.
/// Frames labelled -1 are ignored.
inline Purity purity(std::span<const int> selected, std::span<const int> labels, int num_experts) {
  if (selected.size() != labels.size())
    throw DataError("purity: " + std::to_string(selected.size()) + " frames but " + std::to_string(labels.size()) +
                    " labels");
  int num_labels = 0;
  for (int l : labels) num_labels = std::max(num_labels, l + 1);
  const int n = std::max(num_experts, num_labels);
  Eigen::MatrixXd counts = Eigen::MatrixXd::Zero(n, n);
  Purity out;
  for (std::size_t t = 0; t < labels.size(); ++t) {
    if (labels[t] < 0) continue;
    if (selected[t] < 0 || selected[t] >= num_experts) throw DataError("purity: expert index out of range");
    counts(selected[t], labels[t]) += 1.0;
    ++out.labelled_frames;
  }
  out.label_of_expert.assign(std::size_t(num_experts), -1);
  if (out.labelled_frames == 0) return out;
  const auto col = max_assignment(counts);
  double hit = 0.0;
  for (int e = 0; e < num_experts; ++e) {
    hit += counts(e, col[std::size_t(e)]);
    if (col[std::size_t(e)] < num_labels) out.label_of_expert[std::size_t(e)] = col[std::size_t(e)];
  }
  out.value = hit / double(out.labelled_frames);
  return out;
}

struct GateReport {
  RealMatrix gate_probs;  // frames x m
  std::vector<int> selected;
  std::vector<double> utilization;
  double entropy = 0.0;
  std::optional<Purity> purity;

  double max_utilization() const { return utilization.empty() ? 0.0 : *std::max_element(utilization.begin(), utilization.end()); }
  double min_utilization() const { return utilization.empty() ? 0.0 : *std::min_element(utilization.begin(), utilization.end()); }
};

/// Statistics of gate probabilities: mean probability per expert and mean
/// Shannon entropy (nats), plus purity against labels when given.
inline GateReport gate_report(const RealMatrix& probs, std::span<const int> labels = {}) {
  if (probs.rows() == 0 || probs.cols() == 0) throw DataError("gate_report: no frames");
  GateReport r;
  r.gate_probs = probs;
  const Index m = probs.cols();
  r.utilization.assign(std::size_t(m), 0.0);
  double ent = 0.0;
  for (Index t = 0; t < probs.rows(); ++t) {
    Index best = 0;
    probs.row(t).maxCoeff(&best);
    r.selected.push_back(int(best));
    for (Index i = 0; i < m; ++i) {
      const double p = probs(t, i);
      r.utilization[std::size_t(i)] += p;
      if (p > 0.0) ent -= p * std::log(p);
    }
  }
  for (double& u : r.utilization) u /= double(probs.rows());
  r.entropy = std::clamp(ent / double(probs.rows()), 0.0, std::log(double(m)));
  if (!labels.empty()) r.purity = purity(r.selected, labels, int(m));
  return r;
}

/// Gate report of a model on gate features built with the configuration
/// whose hash is `features_hash`.
template <class T>
GateReport gate_analysis(const mode::ModeModel<T>& model, const RealMatrix& gate_input, std::uint64_t features_hash,
                         std::span<const int> labels = {}) {
  if (model.feature_hash != features_hash)
    throw DataError("gate_analysis: model feature hash " + std::to_string(model.feature_hash) +
                    " does not match features " + std::to_string(features_hash));
  if (gate_input.cols() != model.gate_input_dim()) throw DataError("gate_analysis: gate input width mismatch");
  const nn::Matrix<T> v = gate_input.cast<T>();
  return gate_report(nn::predict(model.gate, v).template cast<double>(), labels);
}

inline void write_gate_tsv(const GateReport& r, const std::filesystem::path& path, std::span<const int> labels = {}) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << "frame";
  for (Index i = 0; i < r.gate_probs.cols(); ++i) out << "\tp" << i;
  out << "\targmax";
  if (!labels.empty()) out << "\tlabel";
  out << "\n" << std::setprecision(9);
  for (Index t = 0; t < r.gate_probs.rows(); ++t) {
    out << t;
    for (Index i = 0; i < r.gate_probs.cols(); ++i) out << "\t" << r.gate_probs(t, i);
    out << "\t" << r.selected[std::size_t(t)];
    if (!labels.empty()) out << "\t" << (std::size_t(t) < labels.size() ? labels[std::size_t(t)] : -1);
    out << "\n";
  }
}

// ---------------------------------------------------------------------------
// Enhancement reports

enum class MaskSource { model_full, model_top1, oracle_irm, ones };

inline std::string to_string(MaskSource s) {
  switch (s) {
    case MaskSource::model_full: return "model_full";
    case MaskSource::model_top1: return "model_top1";
    case MaskSource::oracle_irm: return "oracle_irm";
    case MaskSource::ones: return "ones";
  }
  return "unknown";
}

struct UtteranceMetrics {
  std::string clean_id, noise_id, noise_type;
  double snr_db = 0.0;
  std::size_t frames = 0;
  std::size_t expert_evaluations = 0;
  double input_si_sdr = 0.0;
  double si_sdr = 0.0;
  double seg_snr = 0.0;
  double lsd = 0.0;
  double mask_mse = 0.0;

  double si_sdr_gain() const { return si_sdr - input_si_sdr; }
};

struct ConditionMetrics {
  std::string noise_type;
  double snr_db = 0.0;
  std::size_t count = 0;
  double input_si_sdr = 0.0, si_sdr = 0.0, seg_snr = 0.0, lsd = 0.0, mask_mse = 0.0;
};

struct MetricReport {
  MaskSource source = MaskSource::ones;
  std::vector<UtteranceMetrics> utterances;
  std::vector<ConditionMetrics> conditions;  // sorted by (noise type, SNR)
  ConditionMetrics overall;

  std::size_t expert_evaluations() const {
    std::size_t n = 0;
    for (const auto& u : utterances) n += u.expert_evaluations;
    return n;
  }
  std::size_t frames() const {
    std::size_t n = 0;
    for (const auto& u : utterances) n += u.frames;
    return n;
  }
};

namespace detail {

inline void accumulate(ConditionMetrics& c, const UtteranceMetrics& u) {
  ++c.count;
  c.input_si_sdr += u.input_si_sdr;
  c.si_sdr += u.si_sdr;
  c.seg_snr += u.seg_snr;
  c.lsd += u.lsd;
  c.mask_mse += u.mask_mse;
}

inline void finish(ConditionMetrics& c) {
  if (c.count == 0) return;
  const double n = double(c.count);
  c.input_si_sdr /= n;
  c.si_sdr /= n;
  c.seg_snr /= n;
  c.lsd /= n;
  c.mask_mse /= n;
}

}  // namespace detail

inline void aggregate(MetricReport& r) {
  std::map<std::pair<std::string, double>, ConditionMetrics> groups;
  r.overall = {};
  r.overall.noise_type = "all";
  for (const auto& u : r.utterances) {
    auto& g = groups[{u.noise_type, u.snr_db}];
    g.noise_type = u.noise_type;
    g.snr_db = u.snr_db;
    detail::accumulate(g, u);
    detail::accumulate(r.overall, u);
  }
  r.conditions.clear();
  for (auto& [key, g] : groups) {
    detail::finish(g);
    r.conditions.push_back(g);
  }
  detail::finish(r.overall);
}

/// Enhance each mixture with masks from `source`, resynthesize and score
/// against the clean reference. `model` is required for the model sources.
template <class T>
MetricReport evaluate_enhancement(const mode::ModeModel<T>* model, const std::vector<data::UtterancePair>& test_set,
                                  const data::FeatureConfig& cfg, MaskSource source,
                                  double beta = mask::kDefaultBeta) {
  if (test_set.empty()) throw DataError("evaluate_enhancement: empty test set");
  const bool needs_model = source == MaskSource::model_full || source == MaskSource::model_top1;
  if (needs_model) {
    if (!model) throw ConfigError("evaluate_enhancement: a model is required for " + to_string(source));
    if (model->feature_hash != data::feature_hash(cfg))
      throw DataError("evaluate_enhancement: model was trained on different features (hash " +
                      std::to_string(model->feature_hash) + " vs " + std::to_string(data::feature_hash(cfg)) + ")");
  }
  MetricReport rep;
  rep.source = source;
  for (const auto& p : test_set) {
    const auto f = data::utterance_features(p, cfg);
    RealMatrix m;
    UtteranceMetrics u;
    switch (source) {
      case MaskSource::model_full:
      case MaskSource::model_top1: {
        const auto inf = mode::infer_mask(*model, nn::Matrix<T>(f.noisy.expert_input.cast<T>()),
                                          nn::Matrix<T>(f.noisy.gate_input.cast<T>()),
                                          source == MaskSource::model_full ? mode::Strategy::full : mode::Strategy::top1);
        m = inf.mask.template cast<double>();
        u.expert_evaluations = inf.expert_evaluations;
        break;
      }
      case MaskSource::oracle_irm:
        m = f.target;
        break;
      case MaskSource::ones:
        m = RealMatrix::Ones(f.target.rows(), f.target.cols());
        break;
    }
    const auto enhanced_spec = mask::soft_enhance(f.noisy.spectrogram, m, beta);
    const auto enhanced = dsp::istft(enhanced_spec);
    const auto clean_spec = dsp::stft(p.clean, cfg.stft);
    u.clean_id = p.clean_id;
    u.noise_id = p.noise_id;
    u.noise_type = data::noise_type(p.noise_id);
    u.snr_db = p.snr_db;
    u.frames = std::size_t(m.rows());
    u.input_si_sdr = si_sdr(p.clean, p.noisy);
    u.si_sdr = si_sdr(p.clean, enhanced);
    u.seg_snr = segmental_snr(p.clean, enhanced);
    u.lsd = lsd(clean_spec, enhanced_spec, cfg.stft.magnitude_floor);
    u.mask_mse = mask_mse(m, f.target);
    rep.utterances.push_back(std::move(u));
  }
  aggregate(rep);
  return rep;
}

/// Per-utterance SI-SDR of `a` minus `b`; both reports must cover the same
/// utterances in the same order.
inline std::vector<double> si_sdr_delta(const MetricReport& a, const MetricReport& b) {
  if (a.utterances.size() != b.utterances.size()) throw DataError("si_sdr_delta: reports cover different utterances");
  std::vector<double> d;
  for (std::size_t i = 0; i < a.utterances.size(); ++i) {
    if (a.utterances[i].clean_id != b.utterances[i].clean_id || a.utterances[i].snr_db != b.utterances[i].snr_db)
      throw DataError("si_sdr_delta: reports cover different utterances");
    d.push_back(a.utterances[i].si_sdr - b.utterances[i].si_sdr);
  }
  return d;
}

inline constexpr const char* kCsvHeader =
    "source,clean_id,noise_id,noise_type,snr_db,frames,expert_evaluations,input_si_sdr_db,si_sdr_db,"
    "si_sdr_gain_db,seg_snr_db,lsd_db,mask_mse";

inline void write_csv_rows(std::ostream& out, const MetricReport& r) {
  out << std::setprecision(10);
  for (const auto& u : r.utterances)
    out << to_string(r.source) << "," << u.clean_id << "," << u.noise_id << "," << u.noise_type << "," << u.snr_db
        << "," << u.frames << "," << u.expert_evaluations << "," << u.input_si_sdr << "," << u.si_sdr << ","
        << u.si_sdr_gain() << "," << u.seg_snr << "," << u.lsd << "," << u.mask_mse << "\n";
}

inline void write_csv(const std::vector<MetricReport>& reports, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << kCsvHeader << "\n";
  for (const auto& r : reports) write_csv_rows(out, r);
}

inline std::string format_table(const std::vector<MetricReport>& reports) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(3);
  os << std::left << std::setw(12) << "source" << std::setw(12) << "noise" << std::right << std::setw(8) << "snr"
     << std::setw(6) << "n" << std::setw(11) << "in_sisdr" << std::setw(11) << "si_sdr" << std::setw(11) << "seg_snr"
     << std::setw(10) << "lsd" << std::setw(11) << "mask_mse" << "\n";
  auto row = [&](const std::string& src, const ConditionMetrics& c, bool all) {
    os << std::left << std::setw(12) << src << std::setw(12) << c.noise_type << std::right << std::setw(8);
    if (all) os << "-";
    else os << c.snr_db;
    os << std::setw(6) << c.count << std::setw(11) << c.input_si_sdr << std::setw(11) << c.si_sdr << std::setw(11)
       << c.seg_snr << std::setw(10) << c.lsd << std::setw(11) << c.mask_mse << "\n";
  };
  for (const auto& r : reports) {
    for (const auto& c : r.conditions) row(to_string(r.source), c, false);
    row(to_string(r.source), r.overall, true);
  }
  return os.str();
}

}  // namespace mdse::eval
