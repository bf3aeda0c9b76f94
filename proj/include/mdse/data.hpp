// SPDX-License-Identifier: Apache-2.0
//
// Corpora, SNR-controlled mixing, context-stacked training features and the
// built-in synthetic corpus.

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "mdse/binary_io.hpp"
#include "mdse/dsp.hpp"
#include "mdse/error.hpp"
#include "mdse/fft.hpp"
#include "mdse/mask.hpp"
#include "mdse/wav.hpp"

namespace mdse::data {

using dsp::RealMatrix;
using dsp::Waveform;
using Index = Eigen::Index;

/// Everything that determines the feature layout. Its hash is stamped into
/// datasets and models; mismatched pairs are refused.
struct FeatureConfig {
  dsp::StftConfig stft;
  int context = 4;
  double gamma = mask::kDefaultGamma;

  int frames_per_input() const { return 2 * context + 1; }
  Index expert_input_dim() const { return Index(frames_per_input()) * stft.num_bins(); }
  Index gate_input_dim() const { return Index(frames_per_input()) * stft.n_mfcc; }
  Index mask_dim() const { return stft.num_bins(); }
};

inline void validate(const FeatureConfig& c) {
  dsp::validate(c.stft);
  mdse::detail::require<ConfigError>(c.context >= 0, "context must be >= 0");
  mdse::detail::require<ConfigError>(c.gamma > 0.0 && c.gamma <= 1.0, "gamma must be in (0, 1]");
}

inline std::string canonical(const FeatureConfig& c) {
  std::ostringstream os;
  os.precision(17);
  os << "frame_len=" << c.stft.frame_len << ";hop=" << c.stft.hop << ";window=" << dsp::to_string(c.stft.window)
     << ";floor=" << c.stft.magnitude_floor << ";n_mels=" << c.stft.n_mels << ";n_mfcc=" << c.stft.n_mfcc
     << ";rate=" << c.stft.sample_rate << ";context=" << c.context << ";gamma=" << c.gamma;
  return os.str();
}

inline std::uint64_t feature_hash(const FeatureConfig& c) { return io::fnv1a(canonical(c)); }

/// Row t of the result concatenates rows t-context .. t+context, with the
/// first and last rows replicated past the edges.
inline RealMatrix stack_context(const RealMatrix& frames, int context) {
  const Index n = frames.rows(), d = frames.cols(), w = 2 * context + 1;
  RealMatrix out(n, w * d);
  for (Index t = 0; t < n; ++t)
    for (Index j = 0; j < w; ++j) {
      const Index src = std::clamp<Index>(t + j - context, 0, n - 1);
      out.block(t, j * d, 1, d) = frames.row(src);
    }
  return out;
}

inline double power(const Waveform& w) {
  if (w.empty()) return 0.0;
  double s = 0.0;
  for (double x : w.samples) s += x * x;
  return s / double(w.size());
}

inline double snr_db(const Waveform& clean, const Waveform& noise) {
  return 10.0 * std::log10(power(clean) / power(noise));
}

struct UtterancePair {
  Waveform clean, noise, noisy;
  double snr_db = 0.0;
  std::string clean_id, noise_id;
};

/// Noise is randomly cropped when longer than the clean signal and tiled
/// when shorter, then scaled so that the full-utterance SNR equals snr_db.
inline UtterancePair mix_at_snr(const Waveform& clean, const Waveform& noise, double snr_db,
                                std::mt19937_64& rng, std::string clean_id = "", std::string noise_id = "") {
  if (clean.sample_rate != noise.sample_rate)
    throw DataError("mix_at_snr: sample rates differ (" + std::to_string(clean.sample_rate) + " vs " +
                    std::to_string(noise.sample_rate) + ")");
  if (clean.empty() || noise.empty()) throw DataError("mix_at_snr: empty signal");
  const double pc = power(clean);
  if (pc <= 0.0) throw DataError("mix_at_snr: clean signal '" + clean_id + "' is silent");
  const std::size_t n = clean.size();
  UtterancePair p;
  p.clean = clean;
  p.snr_db = snr_db;
  p.clean_id = std::move(clean_id);
  p.noise_id = std::move(noise_id);
  p.noise.sample_rate = clean.sample_rate;
  p.noise.samples.resize(n);
  std::size_t offset = 0;
  if (noise.size() > n) offset = std::uniform_int_distribution<std::size_t>(0, noise.size() - n)(rng);
  for (std::size_t i = 0; i < n; ++i) p.noise.samples[i] = noise.samples[(offset + i) % noise.size()];
  const double pn = power(p.noise);
  if (pn <= 0.0) throw DataError("mix_at_snr: noise segment '" + p.noise_id + "' is silent");
  const double gain = std::sqrt(pc / (pn * std::pow(10.0, snr_db / 10.0)));
  for (double& x : p.noise.samples) x *= gain;
  p.noisy = p.clean;
  for (std::size_t i = 0; i < n; ++i) p.noisy.samples[i] += p.noise.samples[i];
  return p;
}

struct Utterance {
  std::string id;
  Waveform wave;
  std::vector<int> frame_labels;  // one class per STFT frame; empty if unknown
};

struct Corpus {
  std::vector<Utterance> utterances;
  std::vector<std::string> skipped;  // unreadable files

  std::size_t size() const { return utterances.size(); }
  bool empty() const { return utterances.empty(); }
};

/// Noise type tag: the id up to its first underscore.
inline std::string noise_type(const std::string& id) { return id.substr(0, id.find('_')); }

inline std::vector<int> read_labels(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw DataError("cannot open label file: " + p.string());
  std::vector<int> out;
  int v;
  while (in >> v) out.push_back(v);
  if (!in.eof()) throw DataError("malformed label file: " + p.string());
  return out;
}

/// WAV files of a directory. With a manifest.txt (one relative path per
/// line) only the listed files are read, in order; otherwise every *.wav in
/// name order. A <stem>.labels.txt sidecar supplies frame labels.
/// Unreadable files are skipped with a warning.
inline Corpus load_corpus(const std::filesystem::path& dir, int sample_rate = 16000) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw DataError("corpus directory not found: " + dir.string());
  std::vector<fs::path> files;
  const auto manifest = dir / "manifest.txt";
  if (fs::exists(manifest)) {
    std::ifstream in(manifest);
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (!line.empty() && line[0] != '#') files.push_back(dir / line);
    }
  } else {
    for (const auto& e : fs::directory_iterator(dir))
      if (e.is_regular_file() && e.path().extension() == ".wav") files.push_back(e.path());
    std::sort(files.begin(), files.end());
  }
  Corpus c;
  for (const auto& f : files) {
    try {
      Utterance u;
      u.id = f.stem().string();
      u.wave = wav::read(f, sample_rate);
      auto labels = f;
      labels.replace_extension(".labels.txt");
      if (fs::exists(labels)) u.frame_labels = read_labels(labels);
      c.utterances.push_back(std::move(u));
    } catch (const DataError& e) {
      std::cerr << "warning: skipping " << f.string() << ": " << e.what() << "\n";
      c.skipped.push_back(f.string());
    }
  }
  return c;
}

inline void write_corpus(const Corpus& c, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::ofstream manifest(dir / "manifest.txt", std::ios::trunc);
  for (const auto& u : c.utterances) {
    wav::write(dir / (u.id + ".wav"), u.wave);
    manifest << u.id << ".wav\n";
    if (!u.frame_labels.empty()) {
      std::ofstream lab(dir / (u.id + ".labels.txt"), std::ios::trunc);
      for (int l : u.frame_labels) lab << l << "\n";
    }
  }
  if (!manifest) throw DataError("failed writing manifest in " + dir.string());
}

/// One mixture per (clean utterance, SNR), clean-major. The noise file and
/// crop offset are drawn from a generator seeded with `seed`.
inline std::vector<UtterancePair> plan_mixtures(const Corpus& clean, const Corpus& noise,
                                                const std::vector<double>& snrs, std::uint64_t seed) {
  if (clean.empty()) throw DataError("clean corpus is empty");
  if (noise.empty()) throw DataError("noise corpus is empty");
  if (snrs.empty()) throw ConfigError("SNR list is empty");
  std::mt19937_64 rng(seed);
  std::vector<UtterancePair> out;
  for (const auto& u : clean.utterances)
    for (double snr : snrs) {
      const auto k = std::uniform_int_distribution<std::size_t>(0, noise.size() - 1)(rng);
      const auto& nz = noise.utterances[k];
      out.push_back(mix_at_snr(u.wave, nz.wave, snr, rng, u.id, nz.id));
    }
  return out;
}

/// Model inputs of one noisy utterance: CMVN'd log-spectra and MFCCs,
/// context-stacked.
struct NoisyFeatures {
  dsp::Spectrogram spectrogram;
  RealMatrix expert_input;
  RealMatrix gate_input;
};

inline NoisyFeatures noisy_features(const Waveform& noisy, const FeatureConfig& cfg) {
  NoisyFeatures f;
  f.spectrogram = dsp::stft(noisy, cfg.stft);
  if (f.spectrogram.num_frames() < 2)
    throw DataError("utterance too short: " + std::to_string(noisy.size()) + " samples gives " +
                    std::to_string(f.spectrogram.num_frames()) + " frame(s)");
  f.expert_input = stack_context(dsp::cmvn(dsp::log_spectrum(f.spectrogram, cfg.stft.magnitude_floor)), cfg.context);
  f.gate_input = stack_context(dsp::cmvn(dsp::mfcc(f.spectrogram, cfg.stft)), cfg.context);
  return f;
}

struct UtteranceFeatures {
  NoisyFeatures noisy;
  RealMatrix target;        // IRM of clean vs scaled noise
  RealMatrix clean_frames;  // CMVN'd single-frame clean log-spectra
};

inline UtteranceFeatures utterance_features(const UtterancePair& p, const FeatureConfig& cfg) {
  UtteranceFeatures f;
  f.noisy = noisy_features(p.noisy, cfg);
  const auto cs = dsp::stft(p.clean, cfg.stft);
  const auto ns = dsp::stft(p.noise, cfg.stft);
  f.target = mask::compute_irm(cs, ns, cfg.gamma);
  f.clean_frames = dsp::cmvn(dsp::log_spectrum(cs, cfg.stft.magnitude_floor));
  return f;
}

struct UtteranceInfo {
  std::string clean_id, noise_id;
  double snr_db = 0.0;
  Index first_row = 0;
  Index num_frames = 0;
};

/// Frame-level training examples; row r of each matrix is one example.
struct Dataset {
  FeatureConfig config;
  std::uint64_t hash = 0;
  RealMatrix expert_input;  // N x (2c+1)K
  RealMatrix gate_input;    // N x (2c+1)n_mfcc
  RealMatrix target;        // N x K
  RealMatrix clean_frames;  // N x K
  std::vector<int> frame_labels;  // N; -1 where unknown
  std::vector<UtteranceInfo> utterances;

  Index size() const { return target.rows(); }
};

/// Mix, analyse, compute IRM targets, normalize and stack context, for every
/// planned mixture in order. Utterances that cannot be featurized are
/// skipped with a warning; an empty result is an error.
inline Dataset build_dataset(const Corpus& clean, const Corpus& noise, const std::vector<double>& snrs,
                             const FeatureConfig& cfg, std::uint64_t seed) {
  validate(cfg);
  const auto pairs = plan_mixtures(clean, noise, snrs, seed);
  std::vector<UtteranceFeatures> feats;
  std::vector<const Utterance*> sources;
  Dataset d;
  d.config = cfg;
  d.hash = feature_hash(cfg);
  Index total = 0;
  std::size_t pair_index = 0;
  for (const auto& u : clean.utterances)
    for (std::size_t s = 0; s < snrs.size(); ++s, ++pair_index) {
      const auto& p = pairs[pair_index];
      try {
        feats.push_back(utterance_features(p, cfg));
      } catch (const DataError& e) {
        std::cerr << "warning: skipping " << p.clean_id << ": " << e.what() << "\n";
        continue;
      }
      sources.push_back(&u);
      UtteranceInfo info{p.clean_id, p.noise_id, p.snr_db, total, feats.back().target.rows()};
      total += info.num_frames;
      d.utterances.push_back(info);
    }
  if (total == 0) throw DataError("build_dataset: no usable utterances");

  d.expert_input.resize(total, cfg.expert_input_dim());
  d.gate_input.resize(total, cfg.gate_input_dim());
  d.target.resize(total, cfg.mask_dim());
  d.clean_frames.resize(total, cfg.mask_dim());
  d.frame_labels.assign(std::size_t(total), -1);
  for (std::size_t i = 0; i < feats.size(); ++i) {
    const auto& f = feats[i];
    const auto& info = d.utterances[i];
    d.expert_input.middleRows(info.first_row, info.num_frames) = f.noisy.expert_input;
    d.gate_input.middleRows(info.first_row, info.num_frames) = f.noisy.gate_input;
    d.target.middleRows(info.first_row, info.num_frames) = f.target;
    d.clean_frames.middleRows(info.first_row, info.num_frames) = f.clean_frames;
    const auto& labels = sources[i]->frame_labels;
    for (Index t = 0; t < info.num_frames && std::size_t(t) < labels.size(); ++t)
      d.frame_labels[std::size_t(info.first_row + t)] = labels[std::size_t(t)];
  }
  return d;
}

/// Rows of the selected utterances, in the given order.
inline Dataset subset(const Dataset& d, const std::vector<std::size_t>& utts) {
  Dataset out;
  out.config = d.config;
  out.hash = d.hash;
  Index total = 0;
  for (auto u : utts) total += d.utterances.at(u).num_frames;
  out.expert_input.resize(total, d.expert_input.cols());
  out.gate_input.resize(total, d.gate_input.cols());
  out.target.resize(total, d.target.cols());
  out.clean_frames.resize(total, d.clean_frames.cols());
  Index row = 0;
  for (auto u : utts) {
    auto info = d.utterances[u];
    const Index n = info.num_frames;
    out.expert_input.middleRows(row, n) = d.expert_input.middleRows(info.first_row, n);
    out.gate_input.middleRows(row, n) = d.gate_input.middleRows(info.first_row, n);
    out.target.middleRows(row, n) = d.target.middleRows(info.first_row, n);
    out.clean_frames.middleRows(row, n) = d.clean_frames.middleRows(info.first_row, n);
    out.frame_labels.insert(out.frame_labels.end(), d.frame_labels.begin() + info.first_row,
                            d.frame_labels.begin() + info.first_row + n);
    info.first_row = row;
    out.utterances.push_back(info);
    row += n;
  }
  return out;
}

/// Seeded utterance-level split; at least one utterance on each side when
/// there are two or more.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_utterances(std::size_t n,
                                                                                      double train_fraction,
                                                                                      std::uint64_t seed) {
  mdse::detail::require<ConfigError>(train_fraction > 0.0 && train_fraction <= 1.0, "train fraction must be in (0, 1]");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t n_train = std::size_t(std::llround(train_fraction * double(n)));
  if (n >= 2) n_train = std::clamp<std::size_t>(n_train, 1, n - 1);
  std::vector<std::size_t> tr(order.begin(), order.begin() + long(n_train));
  std::vector<std::size_t> va(order.begin() + long(n_train), order.end());
  std::sort(tr.begin(), tr.end());
  std::sort(va.begin(), va.end());
  return {tr, va};
}

// Dataset payload: str canonical config, u64 hash, u64 rows, u64 x_dim,
// u64 v_dim, u64 k_dim, then the four matrices row-major, labels as i32,
// u64 utterance count, per utterance str clean_id, str noise_id, f64 snr,
// u64 first_row, u64 num_frames. The config itself is stored as its fields.

inline void save_dataset(const Dataset& d, const std::filesystem::path& path) {
  io::Writer w(io::ArtifactKind::dataset);
  const auto& c = d.config;
  w.i32(c.stft.frame_len);
  w.i32(c.stft.hop);
  w.u8(static_cast<std::uint8_t>(c.stft.window));
  w.f64(c.stft.magnitude_floor);
  w.i32(c.stft.n_mels);
  w.i32(c.stft.n_mfcc);
  w.i32(c.stft.sample_rate);
  w.i32(c.context);
  w.f64(c.gamma);
  w.u64(d.hash);
  w.u64(std::uint64_t(d.size()));
  w.u64(std::uint64_t(d.expert_input.cols()));
  w.u64(std::uint64_t(d.gate_input.cols()));
  w.u64(std::uint64_t(d.target.cols()));
  for (const RealMatrix* m : {&d.expert_input, &d.gate_input, &d.target, &d.clean_frames})
    w.f64s(m->reshaped<Eigen::RowMajor>());
  for (int l : d.frame_labels) w.i32(l);
  w.u64(d.utterances.size());
  for (const auto& u : d.utterances) {
    w.str(u.clean_id);
    w.str(u.noise_id);
    w.f64(u.snr_db);
    w.u64(std::uint64_t(u.first_row));
    w.u64(std::uint64_t(u.num_frames));
  }
  w.save(path);
}

inline Dataset load_dataset(const std::filesystem::path& path) {
  auto r = io::Reader::open(path, io::ArtifactKind::dataset);
  Dataset d;
  auto& c = d.config;
  c.stft.frame_len = r.i32();
  c.stft.hop = r.i32();
  const auto win = r.u8();
  if (win != 0) throw FormatError(r.name() + ": unknown window id");
  c.stft.magnitude_floor = r.f64();
  c.stft.n_mels = r.i32();
  c.stft.n_mfcc = r.i32();
  c.stft.sample_rate = r.i32();
  c.context = r.i32();
  c.gamma = r.f64();
  d.hash = r.u64();
  try {
    validate(c);
  } catch (const ConfigError& e) {
    throw FormatError(r.name() + ": stored feature config invalid: " + e.what());
  }
  if (d.hash != feature_hash(c)) throw FormatError(r.name() + ": feature hash does not match stored config");
  const auto rows = r.u64(), xd = r.u64(), vd = r.u64(), kd = r.u64();
  if (Index(xd) != c.expert_input_dim() || Index(vd) != c.gate_input_dim() || Index(kd) != c.mask_dim())
    throw FormatError(r.name() + ": matrix widths disagree with feature config");
  if (double(rows) * double(xd + vd + 2 * kd) * 8.0 > double(r.remaining())) throw FormatError(r.name() + ": truncated file");
  auto read_matrix = [&](RealMatrix& m, std::uint64_t cols) {
    m.resize(Index(rows), Index(cols));
    for (Index i = 0; i < m.rows(); ++i)
      for (Index j = 0; j < m.cols(); ++j) m(i, j) = r.f64();
  };
  read_matrix(d.expert_input, xd);
  read_matrix(d.gate_input, vd);
  read_matrix(d.target, kd);
  read_matrix(d.clean_frames, kd);
  d.frame_labels.resize(rows);
  for (auto& l : d.frame_labels) l = r.i32();
  const auto n_utt = r.count(36);
  Index covered = 0;
  for (std::uint64_t i = 0; i < n_utt; ++i) {
    UtteranceInfo u;
    u.clean_id = r.str();
    u.noise_id = r.str();
    u.snr_db = r.f64();
    u.first_row = Index(r.u64());
    u.num_frames = Index(r.u64());
    if (u.first_row != covered || u.num_frames <= 0) throw FormatError(r.name() + ": utterance table is inconsistent");
    covered += u.num_frames;
    d.utterances.push_back(std::move(u));
  }
  if (covered != Index(rows)) throw FormatError(r.name() + ": utterance table does not cover all rows");
  r.expect_end();
  return d;
}

// ---------------------------------------------------------------------------
// Synthetic corpus

enum FrameClass : int { kVoiced = 0, kUnvoiced = 1, kSilence = 2 };
inline constexpr int kNumFrameClasses = 3;

struct SynthConfig {
  int num_utts = 20;
  double seconds = 2.0;
  int num_noises = 4;  // alternating white and amplitude-modulated
  std::uint64_t seed = 1;
  int sample_rate = 16000;
  int frame_len = 512;  // label grid follows the STFT frames
  int hop = 256;
  int min_segment_frames = 6;
  int max_segment_frames = 14;
};

struct SynthCorpus {
  Corpus clean;
  Corpus noise;
};

namespace detail {

/// White Gaussian noise restricted to [lo_hz, hi_hz) by zeroing DFT bins.
inline std::vector<double> band_noise(std::size_t n, double lo_hz, double hi_hz, int rate, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> x(n);
  for (double& v : x) v = g(rng);
  if (n < 2) return x;
  std::vector<std::complex<double>> spec(n / 2 + 1);
  fft::rfft(x, spec);
  for (std::size_t k = 0; k < spec.size(); ++k) {
    const double f = double(k) * rate / double(n);
    if (f < lo_hz || f >= hi_hz) spec[k] = 0.0;
  }
  std::vector<double> y(n);
  fft::irfft(spec, y);
  double rms = 0.0;
  for (double v : y) rms += v * v;
  rms = std::sqrt(rms / double(n));
  if (rms > 0.0)
    for (double& v : y) v /= rms;
  return y;
}

}  // namespace detail

/// Clean utterances alternate voiced (harmonic stack, f0 in 100-300 Hz),
/// unvoiced (noise above 4 kHz) and near-silent segments; every utterance
/// contains all three. Labels give the class at each STFT frame centre.
/// Noise files alternate white and amplitude-modulated broadband noise.
/// Output is quantized to 16 bits, so writing to WAV is lossless.
inline SynthCorpus synth_corpus(const SynthConfig& cfg) {
  mdse::detail::require<ConfigError>(cfg.num_utts >= 1 && cfg.num_noises >= 1, "synth: need at least one utterance and one noise");
  mdse::detail::require<ConfigError>(cfg.hop > 0 && cfg.frame_len >= cfg.hop, "synth: invalid frame grid");
  mdse::detail::require<ConfigError>(cfg.min_segment_frames >= 1 && cfg.max_segment_frames >= cfg.min_segment_frames,
                                     "synth: invalid segment lengths");
  const double fs = cfg.sample_rate;
  const int hop = cfg.hop;
  const long frames = std::max<long>(long(std::lround(cfg.seconds * fs / hop)), 3L * cfg.max_segment_frames);
  const std::size_t n = std::size_t(frames) * std::size_t(hop);
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  SynthCorpus out;
  for (int ui = 0; ui < cfg.num_utts; ++ui) {
    // Segment plan on the hop grid: rounds of a permutation of the classes,
    // never repeating a class across a round boundary.
    std::vector<int> seg_class;
    std::vector<long> seg_start;
    long pos = 0;
    int prev = -1;
    while (pos < frames) {
      std::vector<int> perm{kVoiced, kUnvoiced, kSilence};
      std::shuffle(perm.begin(), perm.end(), rng);
      if (perm.front() == prev) std::swap(perm.front(), perm.back());
      for (int c : perm) {
        if (pos >= frames) break;
        seg_class.push_back(c);
        seg_start.push_back(pos);
        pos += std::uniform_int_distribution<long>(cfg.min_segment_frames, cfg.max_segment_frames)(rng);
        prev = c;
      }
    }
    seg_start.push_back(frames);

    Utterance u;
    u.id = "synth_" + std::to_string(ui / 100) + std::to_string(ui / 10 % 10) + std::to_string(ui % 10);
    u.wave.sample_rate = cfg.sample_rate;
    u.wave.samples.assign(n, 0.0);
    std::vector<int> sample_class(n, kSilence);
    for (std::size_t s = 0; s < seg_class.size(); ++s) {
      const std::size_t a = std::size_t(seg_start[s]) * hop;
      const std::size_t b = std::min(n, std::size_t(seg_start[s + 1]) * hop);
      const std::size_t len = b - a;
      std::vector<double> seg(len, 0.0);
      switch (seg_class[s]) {
        case kVoiced: {
          const double f0 = 100.0 + 200.0 * u01(rng);
          const double drift = (u01(rng) - 0.5) * 0.1;  // relative f0 glide over the segment
          const double amp = 0.15 + 0.15 * u01(rng);
          std::vector<double> phase;
          for (int h = 1; h * f0 < 4000.0; ++h) phase.push_back(2.0 * std::numbers::pi * u01(rng));
          double theta = 0.0;
          for (std::size_t i = 0; i < len; ++i) {
            const double f = f0 * (1.0 + drift * double(i) / double(len));
            theta += 2.0 * std::numbers::pi * f / fs;
            double v = 0.0;
            for (std::size_t h = 0; h < phase.size(); ++h) v += std::sin(double(h + 1) * theta + phase[h]) / double(h + 1);
            seg[i] = amp * v;
          }
          break;
        }
        case kUnvoiced: {
          const double amp = 0.05 + 0.1 * u01(rng);
          seg = detail::band_noise(len, 4000.0, fs / 2.0 + 1.0, cfg.sample_rate, rng);
          for (double& v : seg) v *= amp;
          break;
        }
        default:
          for (double& v : seg) v = 1e-3 * gauss(rng);
      }
      // 4 ms raised-cosine ramps at segment edges.
      const std::size_t ramp = std::min<std::size_t>(len / 2, std::size_t(0.004 * fs));
      for (std::size_t i = 0; i < ramp; ++i) {
        const double g = 0.5 - 0.5 * std::cos(std::numbers::pi * double(i) / double(ramp));
        seg[i] *= g;
        seg[len - 1 - i] *= g;
      }
      for (std::size_t i = 0; i < len; ++i) {
        u.wave.samples[a + i] = seg[i];
        sample_class[a + i] = seg_class[s];
      }
    }
    u.wave = wav::quantize(std::move(u.wave));
    // Frame t of the STFT is centred on sample t*hop + hop - frame_len/2.
    const long num_stft_frames = (long(cfg.frame_len - hop) + long(n) - 1) / hop + 1;
    for (long t = 0; t < num_stft_frames; ++t) {
      const long c = std::clamp<long>(t * hop + hop - cfg.frame_len / 2, 0, long(n) - 1);
      u.frame_labels.push_back(sample_class[std::size_t(c)]);
    }
    out.clean.utterances.push_back(std::move(u));
  }

  const std::size_t noise_len = 2 * n;
  for (int k = 0; k < cfg.num_noises; ++k) {
    Utterance z;
    z.wave.sample_rate = cfg.sample_rate;
    z.wave.samples.resize(noise_len);
    const bool modulated = (k % 2) == 1;
    z.id = std::string(modulated ? "modulated_" : "white_") + std::to_string(k);
    if (!modulated) {
      for (double& v : z.wave.samples) v = 0.1 * gauss(rng);
    } else {
      const double fm = 2.0 + 6.0 * u01(rng);
      const double ph = 2.0 * std::numbers::pi * u01(rng);
      for (std::size_t i = 0; i < noise_len; ++i)
        z.wave.samples[i] = 0.1 * gauss(rng) * (1.0 + 0.8 * std::sin(2.0 * std::numbers::pi * fm * double(i) / fs + ph));
    }
    z.wave = wav::quantize(std::move(z.wave));
    out.noise.utterances.push_back(std::move(z));
  }
  return out;
}

}  // namespace mdse::data
