// fsbd: command-line harness for the PerDoor federated backdoor simulator.
//
//   fsbd run           --config FILE [--desk-scale] [--seed N] [--out DIR] [--threads N]
//   fsbd sweep         --config FILE [--axis t_delta|delta|epsilon] [--values "a b c"] ...
//   fsbd eval          --checkpoint FILE [--triggers STEM] [--compare FILE] [--config FILE] ...
//   fsbd gen-synthetic --out DIR [--config FILE] [--seed N]
//
// Exit codes: 0 ok, 2 configuration or usage error, 3 runtime failure.

#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <boost/program_options.hpp>

#include "fsbd/config.hpp"
#include "fsbd/runner.hpp"

namespace po = boost::program_options;
using namespace fsbd;

#ifndef FSBD_MNIST_DIR
#define FSBD_MNIST_DIR ""
#endif

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

const char* kUsage =
    "usage: fsbd <command> [options]\n"
    "commands:\n"
    "  run            simulate FL rounds with the configured attack; writes metrics.csv,\n"
    "                 checkpoints, masks, triggers and run.json under the output dir\n"
    "  sweep          sweep t_delta, delta or epsilon from a shared clean prefix\n"
    "  eval           report Acc_M, Acc_B and CKA for a saved checkpoint\n"
    "  gen-synthetic  write a Gaussian-blob dataset as IDX files\n";

po::options_description common_options() {
  po::options_description o("common options");
  o.add_options()("help,h", "show this help")("config", po::value<std::string>(), "INI configuration file")(
      "seed", po::value<std::uint64_t>(), "override fl.seed")("out", po::value<std::string>(),
                                                               "output directory (overrides output.dir)")(
      "desk-scale", po::bool_switch(), "n=20, m=5, R=400 on the bundled MNIST subset")(
      "threads", po::value<unsigned>()->default_value(1), "worker threads (FSBD_THREADS overrides)");
  return o;
}

po::options_description command_options(const std::string& cmd) {
  po::options_description o(cmd + " options");
  if (cmd == "sweep") {
    o.add_options()("axis", po::value<std::string>(), "t_delta | delta | epsilon")(
        "values", po::value<std::string>(), "space-separated sweep values")(
        "post-rounds", po::value<std::size_t>(), "rounds after injection for the epsilon axis");
  } else if (cmd == "eval") {
    o.add_options()("checkpoint", po::value<std::string>(), "checkpoint to evaluate")(
        "triggers", po::value<std::string>(), "trigger manifest (stem or .json)")(
        "compare", po::value<std::string>(), "second checkpoint for CKA");
  }
  return o;
}

ExperimentConfig build_config(const po::variables_map& vm) {
  ExperimentConfig cfg = full_scale_config();
  if (vm["desk-scale"].as<bool>()) apply_desk_scale(cfg, FSBD_MNIST_DIR);
  if (vm.count("config")) cfg = load_config(vm["config"].as<std::string>(), cfg);
  if (vm.count("seed")) cfg.rounds.seed = vm["seed"].as<std::uint64_t>();
  if (vm.count("out")) cfg.out = vm["out"].as<std::string>();
  if (vm.count("axis")) {
    const auto a = vm["axis"].as<std::string>();
    if (a != "t_delta" && a != "delta" && a != "epsilon")
      throw ConfigError("sweep.axis", "expected t_delta | delta | epsilon, got '" + a + "'");
    cfg.sweep.axis = a;
  }
  if (vm.count("values")) {
    std::istringstream in(vm["values"].as<std::string>());
    std::vector<double> v;
    std::string tok;
    while (in >> tok) {
      try {
        std::size_t pos = 0;
        v.push_back(std::stod(tok, &pos));
        if (pos != tok.size()) throw std::invalid_argument(tok);
      } catch (const std::exception&) {
        throw ConfigError("sweep.values", "not a number: '" + tok + "'");
      }
    }
    cfg.sweep.values = v;
  }
  if (vm.count("post-rounds")) cfg.sweep.post_rounds = vm["post-rounds"].as<std::size_t>();
  resolve(cfg);
  validate(cfg);
  return cfg;
}

int cmd_run(const ExperimentConfig& cfg, unsigned threads) {
  auto log = run_experiment(cfg, threads, std::cerr);
  std::cout << "wrote " << log.size() << " rounds to " << (cfg.out / "metrics.csv").string() << "\n";
  return 0;
}

int cmd_sweep(const ExperimentConfig& cfg, unsigned threads) {
  run_sweep(cfg, threads, std::cerr);
  std::cout << "wrote " << (cfg.out / "sweep.csv").string() << "\n";
  return 0;
}

int cmd_eval(const ExperimentConfig& cfg, const po::variables_map& vm, unsigned threads) {
  if (!vm.count("checkpoint")) throw ConfigError("--checkpoint", "eval needs a checkpoint");
  std::optional<std::filesystem::path> trig, cmp;
  if (vm.count("triggers")) trig = vm["triggers"].as<std::string>();
  if (vm.count("compare")) cmp = vm["compare"].as<std::string>();
  const auto r = evaluate_checkpoint(cfg, vm["checkpoint"].as<std::string>(), trig, cmp, threads);
  std::cout << "acc_main " << detail::fmt6(r.acc_main) << "\n";
  if (r.acc_backdoor) std::cout << "acc_backdoor " << detail::fmt6(*r.acc_backdoor) << "\n";
  if (r.cka) std::cout << "cka " << detail::fmt9(*r.cka) << "\n";
  return 0;
}

int cmd_gen_synthetic(const ExperimentConfig& cfg) {
  const auto& d = cfg.data;
  const auto seed = derive_seed(cfg.seed(), {0x5e7ULL});
  auto all = synthetic(d.classes, d.per_class + d.test_per_class, seed, {1, 28, 28}, d.sigma);
  std::vector<std::size_t> tr, te;
  for (std::size_t i = 0; i < all.size(); ++i) (i < d.classes * d.per_class ? tr : te).push_back(i);
  std::filesystem::create_directories(cfg.out);
  save_idx(all.subset(tr), cfg.out / "train-images-idx3-ubyte", cfg.out / "train-labels-idx1-ubyte");
  save_idx(all.subset(te), cfg.out / "t10k-images-idx3-ubyte", cfg.out / "t10k-labels-idx1-ubyte");
  std::cout << "wrote " << tr.size() << " train / " << te.size() << " test images to " << cfg.out.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2 || std::string(argv[1]) == "--help" || std::string(argv[1]) == "-h") {
    std::cout << kUsage << "\n" << common_options();
    return argc < 2 ? kExitConfig : 0;
  }
  const std::string cmd = argv[1];
  if (cmd != "run" && cmd != "sweep" && cmd != "eval" && cmd != "gen-synthetic") {
    std::cerr << "fsbd: unknown command '" << cmd << "'\n" << kUsage;
    return kExitConfig;
  }

  po::options_description all;
  all.add(common_options()).add(command_options(cmd));
  po::variables_map vm;
  ExperimentConfig cfg;
  unsigned threads = 1;
  try {
    po::store(po::parse_command_line(argc - 1, argv + 1, all), vm);
    po::notify(vm);
    if (vm.count("help")) {
      std::cout << kUsage << "\n" << all;
      return 0;
    }
    if (cmd == "gen-synthetic") {
      // only the data section matters; no files need to exist yet
      cfg = vm.count("config") ? load_config(vm["config"].as<std::string>()) : ExperimentConfig{};
      if (vm.count("seed")) cfg.rounds.seed = vm["seed"].as<std::uint64_t>();
      if (!vm.count("out")) throw ConfigError("--out", "gen-synthetic needs an output directory");
      cfg.out = vm["out"].as<std::string>();
    } else {
      cfg = build_config(vm);
    }
    threads = resolve_threads(vm["threads"].as<unsigned>());
  } catch (const po::error& e) {
    std::cerr << "fsbd: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ConfigError& e) {
    std::cerr << "fsbd: config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const InputError& e) {
    std::cerr << "fsbd: config error: " << e.what() << "\n";
    return kExitConfig;
  }

  try {
    if (cmd == "run") return cmd_run(cfg, threads);
    if (cmd == "sweep") return cmd_sweep(cfg, threads);
    if (cmd == "eval") return cmd_eval(cfg, vm, threads);
    return cmd_gen_synthetic(cfg);
  } catch (const ConfigError& e) {
    std::cerr << "fsbd: config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const RoundFailure& e) {
    std::cerr << "fsbd: run failed at " << e.what() << "\n";
    return kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "fsbd: " << e.what() << "\n";
    return kExitRuntime;
  }
}
