// SPDX-License-Identifier: Apache-2.0
//
// mdse: command-line front end for the enhancement pipeline.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 data error,
// 3 internal error.

#include <CLI11.hpp>

#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include "mdse/mdse.hpp"

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kData = 2, kInternal = 3 };

struct Options {
  std::string config_file;
  std::string home;
  std::vector<std::string> overrides;
  bool random_init = false;
  std::string in, out, mask = "model", model;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mixture-of-deep-experts speech enhancement"};
  app.require_subcommand(1);
  Options o;
  app.add_option("-c,--config", o.config_file, "key = value configuration file")->check(CLI::ExistingFile);
  app.add_option("--home", o.home, "base directory for relative paths (default: $MDSE_HOME or .)");
  app.add_option("-s,--set", o.overrides, "override one config key, e.g. --set train.epochs=5")->take_all();

  auto* synth = app.add_subcommand("synth", "generate the synthetic clean, noise and test corpora");
  auto* prepare = app.add_subcommand("prepare", "mix corpora and build train/validation feature sets");
  auto* pre = app.add_subcommand("pretrain", "autoencoder + k-means clustering, then gate and expert pretraining");
  auto* train = app.add_subcommand("train", "joint training of gate and experts");
  train->add_flag("--random-init", o.random_init, "start from random weights instead of the pretrained model");
  auto* enhance = app.add_subcommand("enhance", "enhance one 16-bit mono WAV file");
  enhance->add_option("-i,--in", o.in, "noisy input WAV")->required()->check(CLI::ExistingFile);
  enhance->add_option("-o,--out", o.out, "enhanced output WAV")->required();
  enhance->add_option("--mask", o.mask, "mask source")->check(CLI::IsMember({"model", "ones"}));
  enhance->add_option("--model", o.model, "model file (default: <models>/model.bin)");
  auto* evaluate = app.add_subcommand("evaluate", "score model, oracle and pass-through masks on the test set");
  evaluate->add_option("--model", o.model, "model file (default: <models>/model.bin)");
  auto* show = app.add_subcommand("config", "print the resolved configuration and its hash");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  using namespace mdse;
  try {
    const auto cfg = config::make(o.config_file, o.overrides, o.home);
    if (show->parsed()) {
      std::cout << config::dump(cfg) << "# config_hash = " << std::hex << config::config_hash(cfg) << "\n";
    } else if (synth->parsed()) {
      pipeline::run_synth(cfg);
    } else if (prepare->parsed()) {
      pipeline::run_prepare(cfg);
    } else if (pre->parsed()) {
      pipeline::run_pretrain(cfg);
    } else if (train->parsed()) {
      pipeline::run_train(cfg, o.random_init);
    } else if (enhance->parsed()) {
      pipeline::run_enhance(cfg, o.in, o.out,
                            o.mask == "ones" ? pipeline::EnhanceMask::ones : pipeline::EnhanceMask::model, o.model);
    } else if (evaluate->parsed()) {
      pipeline::run_evaluate(cfg, o.model);
    }
  } catch (const ConfigError& e) {
    std::cerr << "mdse: configuration error: " << e.what() << "\n";
    return kUsage;
  } catch (const DataError& e) {
    std::cerr << "mdse: " << e.what() << "\n";
    return kData;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "mdse: " << e.what() << "\n";
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "mdse: internal error: " << e.what() << "\n";
    return kInternal;
  }
  return kOk;
}
