// SPDX-License-Identifier: Apache-2.0
//
// Acceptance run: one PASS/FAIL line per criterion. Criteria 5-8 train on the
// synthetic corpus with configs/synthetic.cfg.
//
// usage: mdse_acceptance [--home DIR]

#include <chrono>
#include <cmath>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numbers>
#include <sstream>

#include "gradcheck.hpp"
#include "mdse/mdse.hpp"
#include "support.hpp"

namespace fs = std::filesystem;
using namespace mdse;
using M = nn::Matrix<double>;

namespace {

// Test-set gate purity of the reference run on configs/synthetic.cfg.
constexpr double kPinnedPurity = 0.9397;
constexpr double kPurityTolerance = 0.05;

struct Outcome {
  bool pass = false;
  std::string detail;
};

class Clock {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string fmt(double v, int digits = 4) {
  std::ostringstream os;
  os << std::setprecision(digits) << v;
  return os.str();
}

Outcome gradient_check() {
  Clock clock;
  double worst = 0.0;
  std::size_t checked = 0;
  for (int m : {1, 2, 3}) {
    auto model = gradcheck::small_model(m, 7, 5, 9, {16, 16}, true, 100 + std::uint64_t(m));
    std::mt19937_64 rng(200 + std::uint64_t(m));
    const M x = gradcheck::random_matrix(6, 7, rng), v = gradcheck::random_matrix(6, 5, rng);
    const M target = gradcheck::random_matrix(6, 9, rng, 0.0, 1.0);
    auto work = model;
    const auto r = mode::mode_forward(work, x, v, nn::Mode::train);
    auto g = mode::mode_backward(model, r, target);
    const auto res = gradcheck::compare(gradcheck::model_parameters(model), gradcheck::model_gradients(g), [&] {
      auto copy = model;
      const auto f = mode::mode_forward(copy, x, v, nn::Mode::train);
      return mode::mode_loss(f.gate_probs, f.expert_masks, target);
    }, 0, 1);
    worst = std::max(worst, res.max_rel);
    checked += res.checked;
  }
  const double t = clock.seconds();
  return {worst < 1e-4 && checked >= 1000 && t < 60.0,
          "max rel err " + fmt(worst) + " over " + std::to_string(checked) + " parameters in " + fmt(t, 3) + " s"};
}

Outcome loss_identities() {
  std::mt19937_64 rng(7);
  const M rho = gradcheck::random_matrix(50, 9, rng, 0, 1), est = gradcheck::random_matrix(50, 9, rng, 0, 1);
  const auto single = mode::mode_loss_per_frame(M(M::Ones(50, 1)), mode::distances<double>({est}, rho));
  double d1 = 0.0;
  for (long b = 0; b < 50; ++b) d1 = std::max(d1, std::abs(single(b) - 0.5 * (rho.row(b) - est.row(b)).squaredNorm()));

  M p = gradcheck::random_matrix(50, 4, rng, 0.1, 1.0);
  p.array().colwise() /= p.rowwise().sum().array();
  M d(50, 4);
  for (long b = 0; b < 50; ++b) d.row(b).setConstant(std::abs(rho(b, 0)) * 10);
  const double d2 = (mode::posterior_weights(p, d) - p).cwiseAbs().maxCoeff();

  M ph(1, 2), dh(1, 2);
  ph << 0.5, 0.5;
  dh << 0.0, 50.0;
  const double d3 = std::abs(mode::mode_loss_per_frame(ph, dh)(0) - std::numbers::ln2);
  return {d1 < 1e-12 && d2 < 1e-12 && d3 < 1e-9,
          "m=1 |loss-d| " + fmt(d1) + ", equal-d |w-p| " + fmt(d2) + ", |limit-ln2| " + fmt(d3)};
}

Outcome dsp_round_trip() {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<std::size_t> len(600, 48000);
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const auto w = testing_support::random_wave(len(rng), 1000 + std::uint64_t(i));
    const auto back = dsp::istft(dsp::stft(w, {}));
    double err = 0.0;
    for (std::size_t n = 0; n < w.size(); ++n) err = std::max(err, std::abs(back.samples[n] - w.samples[n]));
    worst = std::max(worst, err / testing_support::max_abs(w.samples));
  }
  std::uniform_real_distribution<double> snr(-10.0, 20.0);
  double snr_err = 0.0;
  for (int i = 0; i < 100; ++i) {
    const double target = snr(rng);
    const auto p = data::mix_at_snr(testing_support::random_wave(4000, 5000 + std::uint64_t(i), 0.3),
                                    testing_support::random_wave(9000, 6000 + std::uint64_t(i), 0.05), target, rng);
    snr_err = std::max(snr_err, std::abs(data::snr_db(p.clean, p.noise) - target));
  }
  return {worst < 1e-6 && snr_err < 1e-6,
          "max relative round-trip error " + fmt(worst) + ", max SNR error " + fmt(snr_err) + " dB"};
}

Outcome enhancement_rule() {
  const auto s = dsp::stft(testing_support::random_wave(20000, 21), {});
  const auto zero = mask::soft_enhance(s, dsp::RealMatrix(dsp::RealMatrix::Zero(s.num_frames(), s.num_bins())),
                                       std::numbers::ln10);
  const auto one = mask::soft_enhance(s, dsp::RealMatrix(dsp::RealMatrix::Ones(s.num_frames(), s.num_bins())),
                                      std::numbers::ln10);
  double worst = 0.0;
  bool identical = true;
  for (long t = 0; t < s.num_frames(); ++t)
    for (long k = 0; k < s.num_bins(); ++k) {
      const double a = std::abs(s.frames(t, k));
      if (a > 0) worst = std::max(worst, std::abs(20.0 * std::log10(a / std::abs(zero.frames(t, k))) - 20.0));
      identical = identical && std::abs(one.frames(t, k)) == a;
    }
  return {worst <= 1e-9 && identical,
          "max deviation from 20 dB " + fmt(worst) + " dB, unit mask identical: " + (identical ? "yes" : "no")};
}

// Everything the trained-model criteria need, computed once.
struct Experiment {
  pipeline::EvaluateResult eval;
  double mode_val_mse = 0, dse_val_mse = 0, half_val_mse = 0;
  double mode_seconds = 0, total_seconds = 0;
  std::size_t direct_top1_evaluations = 0, direct_frames = 0;
  std::string dse_widths;
};

Experiment run_experiment(const fs::path& home) {
  Clock clock;
  std::ostringstream log;
  Experiment e;
  const auto c = config::make(fs::path(MDSE_SOURCE_DIR) / "configs" / "synthetic.cfg", {}, home);
  pipeline::run_synth(c, log);
  pipeline::run_prepare(c, log);
  pipeline::run_pretrain(c, log);
  const auto trained = pipeline::run_train(c, false, log);
  e.mode_seconds = clock.seconds();
  e.eval = pipeline::run_evaluate(c, {}, log);

  const auto val = pipeline::mixture_data(pipeline::load_checked_dataset(pipeline::val_data_path(c), c));
  e.mode_val_mse = train::evaluate_mixture(trained.model, val).second;
  e.half_val_mse = train::mask_mse(M(M::Constant(val.target.rows(), val.target.cols(), 0.5)), val.target);

  // Top-1 counter on one test utterance, outside the report code.
  std::mt19937_64 rng(3);
  const auto noisy = data::mix_at_snr(data::load_corpus(c.resolve(c.paths.test_clean)).utterances.front().wave,
                                      data::load_corpus(c.resolve(c.paths.noise)).utterances.front().wave, 0.0, rng);
  const auto f = data::noisy_features(noisy.noisy, c.features);
  const auto inf = mode::infer_mask(trained.model, M(f.expert_input), M(f.gate_input), mode::Strategy::top1);
  e.direct_top1_evaluations = inf.expert_evaluations;
  e.direct_frames = std::size_t(f.expert_input.rows());

  // Single expert with as many hidden units per layer as all experts together,
  // on the same data and schedule.
  auto dse = c;
  dse.num_experts = 1;
  for (auto& h : dse.expert_hidden) h *= c.num_experts;
  for (auto* p : {&dse.paths.clean, &dse.paths.noise, &dse.paths.test_clean, &dse.paths.data}) *p = c.resolve(*p);
  dse.home = home / "dse";
  e.dse_widths = config::get(dse, "model.expert_hidden");
  pipeline::run_pretrain(dse, log);
  const auto single = pipeline::run_train(dse, false, log);
  e.dse_val_mse = train::evaluate_mixture(single.model, val).second;
  e.total_seconds = clock.seconds();
  std::cerr << log.str();
  return e;
}

double mean_gain(const eval::MetricReport& r, double snr) {
  double s = 0.0;
  int n = 0;
  for (const auto& u : r.utterances)
    if (u.snr_db == snr) s += u.si_sdr_gain(), ++n;
  return n ? s / n : std::nan("");
}

double mean_si_sdr(const eval::MetricReport& r) {
  double s = 0.0;
  for (const auto& u : r.utterances) s += u.si_sdr;
  return s / double(r.utterances.size());
}

Outcome anti_collapse(const Experiment& e) {
  const auto& g = e.eval.gate;
  const double purity = g.purity ? g.purity->value : 0.0;
  std::string util;
  for (double u : g.utilization) util += (util.empty() ? "" : " ") + fmt(u, 3);
  const bool pass = g.min_utilization() >= 0.10 && purity >= 0.8 &&
                    std::abs(purity - kPinnedPurity) <= kPurityTolerance && e.mode_seconds <= 15 * 60;
  return {pass, "utilization [" + util + "], purity " + fmt(purity) + " (pinned " + fmt(kPinnedPurity) + " +/- " +
                    fmt(kPurityTolerance) + "), pipeline " + fmt(e.mode_seconds, 3) + " s"};
}

Outcome specialization(const Experiment& e) {
  const double limit = 0.8 * e.half_val_mse;
  const bool pass = e.mode_val_mse <= e.dse_val_mse && e.mode_val_mse <= limit && e.dse_val_mse <= limit &&
                    e.total_seconds <= 30 * 60;
  return {pass, "val mask MSE MoDE " + fmt(e.mode_val_mse) + ", single expert (" + e.dse_widths + ") " +
                    fmt(e.dse_val_mse) + ", all-0.5 " + fmt(e.half_val_mse) + ", total " + fmt(e.total_seconds, 3) +
                    " s"};
}

Outcome top1(const Experiment& e) {
  const auto& full = e.eval.report(eval::MaskSource::model_full);
  const auto& top = e.eval.report(eval::MaskSource::model_top1);
  const double delta = mean_si_sdr(full) - mean_si_sdr(top);
  const bool counted = top.expert_evaluations() == top.frames() && e.direct_top1_evaluations == e.direct_frames;
  return {counted && std::abs(delta) <= 1.0,
          "expert evaluations per frame " + fmt(double(top.expert_evaluations()) / double(top.frames())) +
              ", mean SI-SDR full - top1 " + fmt(delta) + " dB"};
}

Outcome oracle(const Experiment& e) {
  const double oracle_gain = mean_gain(e.eval.report(eval::MaskSource::oracle_irm), 0.0);
  const double model_gain = mean_gain(e.eval.report(eval::MaskSource::model_full), 0.0);
  return {oracle_gain > 0.0 && model_gain >= 0.5 * oracle_gain,
          "0 dB SI-SDR gain oracle " + fmt(oracle_gain) + " dB, MoDE " + fmt(model_gain) + " dB (" +
              fmt(100.0 * model_gain / oracle_gain, 3) + "% of oracle)"};
}

}  // namespace

int main(int argc, char** argv) {
  fs::path home;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--home" && i + 1 < argc) {
      home = argv[++i];
    } else {
      std::cerr << "usage: mdse_acceptance [--home DIR]\n";
      return 2;
    }
  }
  if (home.empty()) home = testing_support::scratch_dir("acceptance");

  int failures = 0;
  auto report = [&](int id, const std::string& name, const std::function<Outcome()>& f) {
    Outcome o;
    try {
      o = f();
    } catch (const std::exception& ex) {
      o = {false, std::string("error: ") + ex.what()};
    }
    failures += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " [" << id << "] " << name << ": " << o.detail << std::endl;
  };

  report(1, "gradient correctness", gradient_check);
  report(2, "loss and posterior identities", loss_identities);
  report(3, "dsp round trip and mixing", dsp_round_trip);
  report(4, "soft enhancement rule", enhancement_rule);

  std::optional<Experiment> e;
  std::string error;
  try {
    e = run_experiment(home);
  } catch (const std::exception& ex) {
    error = std::string("experiment failed: ") + ex.what();
  }
  auto trained = [&](Outcome (*f)(const Experiment&)) {
    return [&, f] { return e ? f(*e) : Outcome{false, error}; };
  };
  report(5, "anti-collapse", trained(anti_collapse));
  report(6, "specialization benefit", trained(specialization));
  report(7, "top-1 complexity", trained(top1));
  report(8, "oracle sanity", trained(oracle));
  return failures == 0 ? 0 : 1;
}
