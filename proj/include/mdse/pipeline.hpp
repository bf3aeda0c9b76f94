// SPDX-License-Identifier: Apache-2.0
//
// End-to-end commands: synth, prepare, pretrain, train, enhance, evaluate.
// Each reads and writes artifacts below the configured home directory and
// leaves a run manifest in <home>/manifests/<command>.txt.

#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <iterator>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "mdse/config.hpp"
#include "mdse/data.hpp"
#include "mdse/eval.hpp"
#include "mdse/mode.hpp"
#include "mdse/pretrain.hpp"
#include "mdse/train.hpp"
#include "mdse/wav.hpp"

namespace mdse::pipeline {

namespace fs = std::filesystem;
using config::RunConfig;
using Model = mode::ModeModel<double>;

inline constexpr const char* kVersion = "0.1.0";

inline fs::path train_data_path(const RunConfig& c) { return c.resolve(c.paths.data) / "train.bin"; }
inline fs::path val_data_path(const RunConfig& c) { return c.resolve(c.paths.data) / "val.bin"; }
inline fs::path pretrain_path(const RunConfig& c) { return c.resolve(c.paths.models) / "pretrain.bin"; }
inline fs::path init_model_path(const RunConfig& c) { return c.resolve(c.paths.models) / "init.bin"; }
inline fs::path model_path(const RunConfig& c) { return c.resolve(c.paths.models) / "model.bin"; }
inline fs::path reports_dir(const RunConfig& c) { return c.resolve(c.paths.reports); }

/// Exclusive lock on a directory for the lifetime of the object.
class DirLock {
 public:
  explicit DirLock(const fs::path& dir) : path_(dir / ".mdse.lock") {
    fs::create_directories(dir);
    FILE* f = std::fopen(path_.c_str(), "wx");
    if (!f)
      throw DataError("cannot lock " + dir.string() + ": " + path_.string() +
                      " exists (another mdse command is running, or a crashed run left it; delete it if stale)");
    std::fprintf(f, "%ld\n", long(::getpid()));
    std::fclose(f);
  }
  ~DirLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  fs::path path_;
};

inline std::uint64_t file_hash(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return io::fnv1a(bytes);
}

/// Text manifest: versions, hashes, seeds and the hash of every output, then
/// the full configuration. No timestamps, so identical runs give identical
/// manifests.
inline void write_manifest(const RunConfig& c, const std::string& command, const std::vector<fs::path>& outputs) {
  const auto dir = c.home / "manifests";
  fs::create_directories(dir);
  std::ostringstream os;
  os << std::hex << std::setfill('0');
  os << "command = " << command << "\n";
  os << "mdse_version = " << kVersion << "\n";
  os << "container_version = " << std::dec << io::kContainerVersion << std::hex << "\n";
  os << "config_hash = " << std::setw(16) << config::config_hash(c) << "\n";
  os << "feature_hash = " << std::setw(16) << data::feature_hash(c.features) << "\n";
  os << std::dec << "train_seed = " << c.fit.seed << "\ndata_seed = " << c.data_seed << "\n" << std::hex;
  for (const auto& o : outputs) {
    std::error_code ec;
    const auto rel = fs::relative(o, c.home, ec);
    os << "output = " << (ec ? o : rel).string() << " fnv1a=" << std::setw(16) << file_hash(o) << "\n";
  }
  os << "\n" << config::dump(c);
  std::ofstream out(dir / (command + ".txt"), std::ios::trunc);
  out << os.str();
  if (!out) throw DataError("cannot write manifest for " + command);
}

inline void check_hash(std::uint64_t found, const RunConfig& c, const std::string& what) {
  const auto want = data::feature_hash(c.features);
  if (found != want) {
    std::ostringstream os;
    os << what << " was built with feature hash " << std::hex << found << " but the configuration gives " << want
       << "; rebuild it (mdse prepare) or use the matching configuration";
    throw DataError(os.str());
  }
}

inline data::Dataset load_checked_dataset(const fs::path& p, const RunConfig& c) {
  if (!fs::exists(p)) throw DataError("dataset not found: " + p.string() + " (run `mdse prepare` first)");
  auto d = data::load_dataset(p);
  check_hash(d.hash, c, p.string());
  return d;
}

inline Model load_checked_model(const fs::path& p, const RunConfig& c) {
  if (!fs::exists(p)) throw DataError("model not found: " + p.string());
  auto m = mode::load_model<double>(p);
  check_hash(m.feature_hash, c, p.string());
  return m;
}

inline train::MixtureData<double> mixture_data(const data::Dataset& d) {
  return {d.expert_input, d.gate_input, d.target};
}

// Converts one matrix at a time and releases the source, which keeps peak
// memory near one copy of the largest matrix above the dataset.
inline train::MixtureData<double> mixture_data(data::Dataset&& d) {
  train::MixtureData<double> m;
  m.expert_input = d.expert_input;
  d.expert_input = {};
  m.gate_input = d.gate_input;
  d.gate_input = {};
  m.target = d.target;
  d.target = {};
  return m;
}

// ---------------------------------------------------------------------------

struct SynthResult {
  data::SynthCorpus train;
  data::Corpus test_clean;
};

inline SynthResult run_synth(const RunConfig& c, std::ostream& log = std::clog) {
  DirLock lock(c.home);
  SynthResult r;
  r.train = data::synth_corpus(c.synth);
  auto test_cfg = c.synth;
  test_cfg.num_utts = c.synth_test_utts;
  test_cfg.seed = c.synth.seed ^ 0x7465737400000000ULL;
  r.test_clean = data::synth_corpus(test_cfg).clean;
  for (auto& u : r.test_clean.utterances) u.id = "test" + u.id.substr(u.id.find('_'));
  data::write_corpus(r.train.clean, c.resolve(c.paths.clean));
  data::write_corpus(r.train.noise, c.resolve(c.paths.noise));
  data::write_corpus(r.test_clean, c.resolve(c.paths.test_clean));
  log << "synth: " << r.train.clean.size() << " clean, " << r.train.noise.size() << " noise, "
      << r.test_clean.size() << " test utterances\n";
  write_manifest(c, "synth",
                 {c.resolve(c.paths.clean) / "manifest.txt", c.resolve(c.paths.noise) / "manifest.txt",
                  c.resolve(c.paths.test_clean) / "manifest.txt"});
  return r;
}

struct PrepareResult {
  data::Dataset train, val;
};

inline PrepareResult run_prepare(const RunConfig& c, std::ostream& log = std::clog) {
  DirLock lock(c.home);
  const auto clean = data::load_corpus(c.resolve(c.paths.clean), c.features.stft.sample_rate);
  const auto noise = data::load_corpus(c.resolve(c.paths.noise), c.features.stft.sample_rate);
  const auto all = data::build_dataset(clean, noise, c.train_snrs, c.features, c.data_seed);

  // Split by clean utterance so that no utterance appears on both sides.
  std::vector<std::string> ids;
  for (const auto& u : all.utterances)
    if (ids.empty() || ids.back() != u.clean_id) ids.push_back(u.clean_id);
  const auto [tr_ids, va_ids] = data::split_utterances(ids.size(), c.train_fraction, c.data_seed);
  std::vector<char> is_train(ids.size(), 0);
  for (auto i : tr_ids) is_train[i] = 1;
  std::vector<std::size_t> tr, va;
  for (std::size_t i = 0, k = 0; i < all.utterances.size(); ++i) {
    if (i > 0 && all.utterances[i].clean_id != all.utterances[i - 1].clean_id) ++k;
    (is_train[k] ? tr : va).push_back(i);
  }
  PrepareResult r{data::subset(all, tr), data::subset(all, va)};
  fs::create_directories(c.resolve(c.paths.data));
  data::save_dataset(r.train, train_data_path(c));
  data::save_dataset(r.val, val_data_path(c));
  log << "prepare: " << r.train.size() << " training frames (" << r.train.utterances.size() << " mixtures), "
      << r.val.size() << " validation frames (" << r.val.utterances.size() << " mixtures)\n";
  write_manifest(c, "prepare", {train_data_path(c), val_data_path(c)});
  return r;
}

struct PretrainResult {
  pretrain::Artifacts<double> artifacts;
  pretrain::GatePretrainReport gate;
  pretrain::ExpertPretrainReport experts;
  Model model;
};

/// Autoencoder on clean frames, k-means in its embedding, then the gate
/// learns the cluster labels and expert i fits the frames of cluster i.
inline PretrainResult run_pretrain(const RunConfig& c, std::ostream& log = std::clog) {
  DirLock lock(c.home);
  auto d = load_checked_dataset(train_data_path(c), c);
  PretrainResult r;
  pretrain::AutoencoderConfig ac;
  ac.hidden = c.ae_hidden;
  ac.embedding_dim = c.embedding_dim;
  ac.fit = {c.fit.lr, c.fit.batch_size, c.ae_epochs, c.fit.seed};
  const nn::Matrix<double> clean_frames = d.clean_frames;
  r.artifacts.autoencoder = pretrain::train_autoencoder(clean_frames, ac);
  r.artifacts.feature_hash = d.hash;
  log << "pretrain: autoencoder reconstruction mse " << r.artifacts.autoencoder.final_loss << "\n";
  const nn::Matrix<double> emb = r.artifacts.autoencoder.encode(clean_frames);
  r.artifacts.clustering = pretrain::kmeans(emb, c.num_experts, {c.kmeans_restarts, 100, c.fit.seed});
  const auto& labels = r.artifacts.clustering.labels;
  {
    std::vector<std::size_t> sizes(std::size_t(c.num_experts), 0);
    for (int l : labels) ++sizes[std::size_t(l)];
    log << "pretrain: k-means wcss " << r.artifacts.clustering.wcss << ", cluster sizes";
    for (auto s : sizes) log << " " << s;
    log << "\n";
  }
  r.model = mode::make_model<double>(config::architecture(c), c.fit.seed);
  const train::FitConfig fit{c.fit.lr, c.fit.batch_size, c.pretrain_epochs, c.fit.seed};
  const auto md = mixture_data(std::move(d));
  r.gate = pretrain::pretrain_gate(r.model.gate, md.gate_input, labels, fit);
  r.experts = pretrain::pretrain_experts(r.model.experts, md.expert_input, md.target, labels, fit);
  log << "pretrain: gate cluster accuracy " << r.gate.accuracy << "\n";
  for (std::size_t i = 0; i < r.experts.frames.size(); ++i)
    log << "pretrain: expert " << i << " frames " << r.experts.frames[i] << " mse " << r.experts.final_loss[i]
        << (r.experts.fallback[i] ? " (empty cluster, trained on all frames)" : "") << "\n";
  fs::create_directories(c.resolve(c.paths.models));
  pretrain::save_artifacts(r.artifacts, pretrain_path(c));
  mode::save_model(r.model, init_model_path(c));
  write_manifest(c, "pretrain", {pretrain_path(c), init_model_path(c)});
  return r;
}

struct TrainResult {
  Model model;
  std::vector<train::EpochStats> history;
  eval::GateReport val_gate;
  double lr = 0.0;
};

/// Joint training. From the pretrained initialization at lr * finetune_factor,
/// or from random weights at the full rate with random_init.
inline TrainResult run_train(const RunConfig& c, bool random_init, std::ostream& log = std::clog) {
  DirLock lock(c.home);
  auto tr = load_checked_dataset(train_data_path(c), c);
  const auto va = load_checked_dataset(val_data_path(c), c);
  TrainResult r;
  auto fit = c.fit;
  if (random_init) {
    r.model = mode::make_model<double>(config::architecture(c), c.fit.seed);
  } else {
    if (!fs::exists(init_model_path(c)))
      throw DataError("pretrained model not found: " + init_model_path(c).string() +
                      " (run `mdse pretrain` first, or pass --random-init)");
    r.model = load_checked_model(init_model_path(c), c);
    if (r.model.num_experts() != c.num_experts)
      throw DataError(init_model_path(c).string() + " has " + std::to_string(r.model.num_experts()) +
                      " experts but model.experts = " + std::to_string(c.num_experts));
    fit.lr *= c.finetune_factor;
  }
  r.lr = fit.lr;
  // The training rows are only needed afterwards when there is no validation set.
  const auto train_set = va.size() > 0 ? mixture_data(std::move(tr)) : mixture_data(tr);
  const auto val_set = mixture_data(va);
  fs::create_directories(reports_dir(c));
  std::ofstream tsv(reports_dir(c) / "train_log.tsv", std::ios::trunc);
  tsv << "epoch\ttrain_loss\tval_loss\tval_mask_mse\n" << std::setprecision(10);
  r.history = train::train_mixture(r.model, train_set, va.size() > 0 ? &val_set : nullptr, fit,
                                   [&](const train::EpochStats& s) {
                                     tsv << s.epoch << "\t" << s.train_loss << "\t" << s.val_loss << "\t"
                                         << s.val_mask_mse << "\n";
                                     log << "train: epoch " << s.epoch << " loss " << s.train_loss << " val loss "
                                         << s.val_loss << " val mask mse " << s.val_mask_mse << "\n";
                                   });
  tsv.close();
  const auto& val_for_gate = va.size() > 0 ? va : tr;
  r.val_gate = eval::gate_analysis(r.model, val_for_gate.gate_input, val_for_gate.hash, val_for_gate.frame_labels);
  log << "train: validation gate utilization";
  for (double u : r.val_gate.utilization) log << " " << u;
  log << ", entropy " << r.val_gate.entropy;
  if (r.val_gate.purity && r.val_gate.purity->labelled_frames > 0) log << ", purity " << r.val_gate.purity->value;
  log << "\n";
  fs::create_directories(c.resolve(c.paths.models));
  mode::save_model(r.model, model_path(c));
  write_manifest(c, "train", {model_path(c), reports_dir(c) / "train_log.tsv"});
  return r;
}

enum class EnhanceMask { model, ones };

inline dsp::Waveform enhance_waveform(const dsp::Waveform& noisy, const RunConfig& c, const Model* model,
                                      EnhanceMask source) {
  const auto f = data::noisy_features(noisy, c.features);
  dsp::RealMatrix m;
  if (source == EnhanceMask::ones) {
    m = dsp::RealMatrix::Ones(f.spectrogram.num_frames(), f.spectrogram.num_bins());
  } else {
    if (!model) throw ConfigError("enhance: a model is required unless --mask ones");
    m = mode::infer_mask(*model, nn::Matrix<double>(f.expert_input), nn::Matrix<double>(f.gate_input), c.strategy).mask;
  }
  return dsp::istft(mask::soft_enhance(f.spectrogram, m, c.beta));
}

inline void run_enhance(const RunConfig& c, const fs::path& in, const fs::path& out, EnhanceMask source,
                        const fs::path& model_file = {}, std::ostream& log = std::clog) {
  std::optional<Model> model;
  if (source == EnhanceMask::model) model = load_checked_model(model_file.empty() ? model_path(c) : model_file, c);
  const auto noisy = wav::read(in, c.features.stft.sample_rate);
  const auto enhanced = enhance_waveform(noisy, c, model ? &*model : nullptr, source);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  wav::write(out, enhanced);
  log << "enhance: wrote " << out.string() << " (" << enhanced.size() << " samples)\n";
}

struct EvaluateResult {
  std::vector<eval::MetricReport> reports;  // model_full, model_top1, oracle_irm, ones
  eval::GateReport gate;
  std::vector<double> top1_delta;  // per-utterance SI-SDR, full minus top1

  const eval::MetricReport& report(eval::MaskSource s) const {
    for (const auto& r : reports)
      if (r.source == s) return r;
    throw DataError("no report for " + eval::to_string(s));
  }
};

/// Mixes the held-out clean corpus with the noise corpus at the test SNRs and
/// scores every mask source on it.
inline EvaluateResult run_evaluate(const RunConfig& c, const fs::path& model_file = {},
                                   std::ostream& log = std::clog) {
  const auto mp = model_file.empty() ? model_path(c) : model_file;
  if (!fs::exists(mp)) throw DataError("model not found: " + mp.string() + " (run `mdse train` first)");
  DirLock lock(c.home);
  const auto model = load_checked_model(mp, c);
  const auto clean = data::load_corpus(c.resolve(c.paths.test_clean), c.features.stft.sample_rate);
  const auto noise = data::load_corpus(c.resolve(c.paths.noise), c.features.stft.sample_rate);
  const auto pairs = data::plan_mixtures(clean, noise, c.test_snrs, c.data_seed + 1);

  EvaluateResult r;
  for (auto s : {eval::MaskSource::model_full, eval::MaskSource::model_top1, eval::MaskSource::oracle_irm,
                 eval::MaskSource::ones})
    r.reports.push_back(eval::evaluate_enhancement(&model, pairs, c.features, s, c.beta));
  r.top1_delta = eval::si_sdr_delta(r.reports[0], r.reports[1]);

  // Gate statistics over every test frame, with the planted labels.
  std::vector<dsp::RealMatrix> gate_inputs;
  std::vector<int> labels;
  Eigen::Index rows = 0;
  std::size_t k = 0;
  for (const auto& u : clean.utterances)
    for (std::size_t s = 0; s < c.test_snrs.size(); ++s, ++k) {
      gate_inputs.push_back(data::noisy_features(pairs[k].noisy, c.features).gate_input);
      const auto n = gate_inputs.back().rows();
      for (Eigen::Index t = 0; t < n; ++t)
        labels.push_back(std::size_t(t) < u.frame_labels.size() ? u.frame_labels[std::size_t(t)] : -1);
      rows += n;
    }
  dsp::RealMatrix all(rows, c.features.gate_input_dim());
  rows = 0;
  for (const auto& g : gate_inputs) {
    all.middleRows(rows, g.rows()) = g;
    rows += g.rows();
  }
  r.gate = eval::gate_analysis(model, all, data::feature_hash(c.features), labels);

  const auto dir = reports_dir(c);
  fs::create_directories(dir);
  eval::write_csv(r.reports, dir / "metrics.csv");
  eval::write_gate_tsv(r.gate, dir / "gate_probs.tsv", labels);
  std::ostringstream summary;
  summary << eval::format_table(r.reports) << "\n";
  summary << std::fixed << std::setprecision(4) << "gate utilization:";
  for (double u : r.gate.utilization) summary << " " << u;
  summary << "\ngate entropy: " << r.gate.entropy << " nats\n";
  if (r.gate.purity && r.gate.purity->labelled_frames > 0)
    summary << "gate purity vs labels: " << r.gate.purity->value << "\n";
  double mean_delta = 0.0;
  for (double d : r.top1_delta) mean_delta += d;
  mean_delta /= double(r.top1_delta.size());
  summary << "mean SI-SDR full - top1: " << mean_delta << " dB\n";
  summary << "expert evaluations per frame: full "
          << double(r.reports[0].expert_evaluations()) / double(r.reports[0].frames()) << ", top1 "
          << double(r.reports[1].expert_evaluations()) / double(r.reports[1].frames()) << "\n";
  std::ofstream(dir / "metrics.txt", std::ios::trunc) << summary.str();
  log << summary.str();
  write_manifest(c, "evaluate", {dir / "metrics.csv", dir / "gate_probs.tsv", dir / "metrics.txt"});
  return r;
}

}  // namespace mdse::pipeline
