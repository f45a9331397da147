#pragma once

// INI experiment configuration. Every key is optional; unknown keys are
// rejected so that typos do not silently fall back to defaults.
//
//   [data]       source = mnist | synthetic, train_images, train_labels,
//                test_images, test_labels, classes, per_class, test_per_class, sigma
//   [fl]         participants, per_round, rounds, local_epochs, local_lr,
//                batch_size, seed, malicious_count, malicious_ids = 3 17
//   [aggregator] kind = fedavg | krum | foolsgold, krum_f, foolsgold_logit_scale
//   [attack]     mode, injection = stable | volatile | <round>, stable_window,
//                volatile_window, t_delta, delta, iterations, epsilon, bim_iters,
//                alpha, source_label, target_label, trigger_count,
//                clip_mode = step | cumulative, variance_ddof
//   [metrics]    cka_probe
//   [output]     dir, checkpoint_every
//   [sweep]      axis = t_delta | delta | epsilon, values = 1e-5 1e-4, post_rounds

#include <charconv>
#include <cmath>
#include <filesystem>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "fsbd/error.hpp"
#include "fsbd/experiment.hpp"
#include "fsbd/hash.hpp"

namespace fsbd {

namespace detail {

inline const std::map<std::string, std::set<std::string>>& config_schema() {
  static const std::map<std::string, std::set<std::string>> s = {
      {"data", {"source", "train_images", "train_labels", "test_images", "test_labels", "classes", "per_class",
                "test_per_class", "sigma"}},
      {"fl", {"participants", "per_round", "rounds", "local_epochs", "local_lr", "batch_size", "seed",
              "malicious_count", "malicious_ids"}},
      {"aggregator", {"kind", "krum_f", "foolsgold_logit_scale"}},
      {"attack", {"mode", "injection", "stable_window", "volatile_window", "t_delta", "delta", "iterations",
                  "epsilon", "bim_iters", "alpha", "source_label", "target_label", "trigger_count", "clip_mode",
                  "variance_ddof"}},
      {"metrics", {"cka_probe"}},
      {"output", {"dir", "checkpoint_every"}},
      {"sweep", {"axis", "values", "post_rounds"}},
  };
  return s;
}

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  const auto e = s.find_last_not_of(" \t\r");
  return b == std::string::npos ? "" : s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& raw) {
  const std::string s = trim(raw);
  T v{};
  if constexpr (std::is_floating_point_v<T>) {
    try {
      std::size_t pos = 0;
      const double d = std::stod(s, &pos);
      if (pos != s.size() || !std::isfinite(d)) throw std::invalid_argument("");
      v = T(d);
    } catch (const std::exception&) {
      throw ConfigError(key, "expected a number, got '" + s + "'");
    }
  } else {
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size() || s.empty())
      throw ConfigError(key, "expected a non-negative integer, got '" + s + "'");
  }
  return v;
}

template <typename T>
std::vector<T> parse_list(const std::string& key, const std::string& raw) {
  std::string s = raw;
  for (auto& c : s)
    if (c == ',') c = ' ';
  std::istringstream in(s);
  std::vector<T> out;
  for (std::string tok; in >> tok;) out.push_back(parse_number<T>(key, tok));
  return out;
}

}  // namespace detail

// Starts from `base` (full-scale or desk-scale defaults) and overrides every key
// present in the file. Relative paths resolve against the file's directory.
inline ExperimentConfig parse_config(std::istream& in, ExperimentConfig base = {},
                                     const std::filesystem::path& base_dir = ".") {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError("", "line " + std::to_string(e.line()) + ": " + e.message());
  }
  const auto& schema = detail::config_schema();
  for (const auto& [section, body] : tree) {
    auto it = schema.find(section);
    if (it == schema.end()) {
      if (body.empty()) throw ConfigError(section, "keys must live inside a [section]");
      throw ConfigError(section, "unknown section");
    }
    for (const auto& [key, _] : body)
      if (!it->second.count(key)) throw ConfigError(section + "." + key, "unknown key");
  }

  ExperimentConfig c = std::move(base);
  auto get = [&](const std::string& path) -> std::optional<std::string> {
    if (auto v = tree.get_optional<std::string>(pt::ptree::path_type(path, '.'))) return detail::trim(*v);
    return std::nullopt;
  };
  auto with = [&](const std::string& path, auto&& fn) {
    if (auto v = get(path)) {
      try {
        fn(*v);
      } catch (const InputError& e) {
        throw ConfigError(path, e.what());
      }
    }
  };
  auto num = [&](const std::string& path, auto& field) {
    with(path, [&](const std::string& v) { field = detail::parse_number<std::decay_t<decltype(field)>>(path, v); });
  };
  auto file = [&](const std::string& path, std::filesystem::path& field) {
    with(path, [&](const std::string& v) {
      std::filesystem::path p(v);
      field = p.is_absolute() ? p : base_dir / p;
    });
  };

  with("data.source", [&](const std::string& v) {
    if (v == "mnist" || v == "idx") c.data.kind = DatasetSpec::Kind::idx;
    else if (v == "synthetic") c.data.kind = DatasetSpec::Kind::synthetic;
    else throw ConfigError("data.source", "expected mnist | synthetic, got '" + v + "'");
  });
  file("data.train_images", c.data.train_images);
  file("data.train_labels", c.data.train_labels);
  file("data.test_images", c.data.test_images);
  file("data.test_labels", c.data.test_labels);
  num("data.classes", c.data.classes);
  num("data.per_class", c.data.per_class);
  num("data.test_per_class", c.data.test_per_class);
  num("data.sigma", c.data.sigma);

  num("fl.participants", c.rounds.participants);
  num("fl.per_round", c.rounds.per_round);
  num("fl.rounds", c.rounds.rounds);
  num("fl.local_epochs", c.rounds.local_epochs);
  num("fl.local_lr", c.rounds.local_lr);
  num("fl.batch_size", c.rounds.batch_size);
  num("fl.seed", c.rounds.seed);
  num("fl.malicious_count", c.malicious_count);
  with("fl.malicious_ids", [&](const std::string& v) {
    c.rounds.malicious_ids = detail::parse_list<std::size_t>("fl.malicious_ids", v);
    std::sort(c.rounds.malicious_ids.begin(), c.rounds.malicious_ids.end());
    if (std::adjacent_find(c.rounds.malicious_ids.begin(), c.rounds.malicious_ids.end()) !=
        c.rounds.malicious_ids.end())
      throw ConfigError("fl.malicious_ids", "duplicate id");
  });

  with("aggregator.kind", [&](const std::string& v) { c.aggregator = parse_aggregator(v); });
  with("aggregator.krum_f", [&](const std::string& v) {
    c.aggregator_options.krum_f = detail::parse_number<std::size_t>("aggregator.krum_f", v);
    c.krum_f_explicit = true;
  });
  num("aggregator.foolsgold_logit_scale", c.aggregator_options.foolsgold.logit_scale);
  if (!(c.aggregator_options.foolsgold.logit_scale > 0))
    throw ConfigError("aggregator.foolsgold_logit_scale", "must be positive");

  with("attack.mode", [&](const std::string& v) { c.attack = parse_attack_mode(v); });
  with("attack.injection", [&](const std::string& v) { c.injection = InjectionPoint::parse(v); });
  num("attack.stable_window", c.stable_window);
  num("attack.volatile_window", c.volatile_window);
  num("attack.t_delta", c.backdoor.t_delta);
  num("attack.delta", c.backdoor.delta);
  num("attack.iterations", c.backdoor.iterations);
  num("attack.epsilon", c.backdoor.epsilon);
  num("attack.bim_iters", c.backdoor.bim_iters);
  with("attack.alpha", [&](const std::string& v) {
    c.backdoor.alpha = detail::parse_number<double>("attack.alpha", v);
    c.backdoor.alpha_override = true;
  });
  num("attack.source_label", c.backdoor.source_label);
  num("attack.target_label", c.backdoor.target_label);
  num("attack.trigger_count", c.backdoor.trigger_count);
  with("attack.clip_mode", [&](const std::string& v) { c.backdoor.clip_mode = parse_clip_mode(v); });
  num("attack.variance_ddof", c.backdoor.variance_ddof);

  num("metrics.cka_probe", c.cka_probe);
  with("output.dir", [&](const std::string& v) { c.out = v; });
  num("output.checkpoint_every", c.checkpoint_every);

  with("sweep.axis", [&](const std::string& v) {
    if (v != "t_delta" && v != "delta" && v != "epsilon")
      throw ConfigError("sweep.axis", "expected t_delta | delta | epsilon, got '" + v + "'");
    c.sweep.axis = v;
  });
  with("sweep.values", [&](const std::string& v) { c.sweep.values = detail::parse_list<double>("sweep.values", v); });
  num("sweep.post_rounds", c.sweep.post_rounds);
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path, ExperimentConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("", "cannot open config file " + path.string());
  return parse_config(in, std::move(base), path.parent_path().empty() ? "." : path.parent_path());
}

namespace detail {
inline std::string fmt_double(double v) {
  std::ostringstream s;
  s << std::setprecision(17) << v;
  return s.str();
}
inline std::string join_ids(const std::vector<std::size_t>& ids) {
  std::string s;
  for (auto id : ids) s += (s.empty() ? "" : " ") + std::to_string(id);
  return s;
}
}  // namespace detail

// Fully resolved configuration in the same INI dialect; feeding it back to
// parse_config reproduces the run.
inline std::string dump_config(const ExperimentConfig& c) {
  using detail::fmt_double;
  std::ostringstream o;
  o << "[data]\n";
  if (c.data.kind == DatasetSpec::Kind::idx) {
    o << "source = mnist\n"
      << "train_images = " << c.data.train_images.string() << "\n"
      << "train_labels = " << c.data.train_labels.string() << "\n"
      << "test_images = " << c.data.test_images.string() << "\n"
      << "test_labels = " << c.data.test_labels.string() << "\n";
  } else {
    o << "source = synthetic\n"
      << "per_class = " << c.data.per_class << "\n"
      << "test_per_class = " << c.data.test_per_class << "\n"
      << "sigma = " << fmt_double(c.data.sigma) << "\n";
  }
  o << "classes = " << c.data.classes << "\n\n";
  o << "[fl]\n"
    << "participants = " << c.rounds.participants << "\n"
    << "per_round = " << c.rounds.per_round << "\n"
    << "rounds = " << c.rounds.rounds << "\n"
    << "local_epochs = " << c.rounds.local_epochs << "\n"
    << "local_lr = " << fmt_double(c.rounds.local_lr) << "\n"
    << "batch_size = " << c.rounds.batch_size << "\n"
    << "seed = " << c.rounds.seed << "\n"
    << "malicious_ids = " << detail::join_ids(c.rounds.malicious_ids) << "\n\n";
  o << "[aggregator]\n"
    << "kind = " << to_string(c.aggregator) << "\n"
    << "krum_f = " << c.aggregator_options.krum_f << "\n"
    << "foolsgold_logit_scale = " << fmt_double(c.aggregator_options.foolsgold.logit_scale) << "\n\n";
  const auto& b = c.backdoor;
  o << "[attack]\n"
    << "mode = " << to_string(c.attack) << "\n"
    << "injection = " << c.injection.to_string() << "\n"
    << "stable_window = " << c.stable_window << "\n"
    << "volatile_window = " << c.volatile_window << "\n"
    << "t_delta = " << fmt_double(b.t_delta) << "\n"
    << "delta = " << fmt_double(b.delta) << "\n"
    << "iterations = " << b.iterations << "\n"
    << "epsilon = " << fmt_double(b.epsilon) << "\n"
    << "bim_iters = " << b.bim_iters << "\n";
  if (b.alpha_override) o << "alpha = " << fmt_double(b.alpha) << "\n";
  o << "source_label = " << b.source_label << "\n"
    << "target_label = " << b.target_label << "\n"
    << "trigger_count = " << b.trigger_count << "\n"
    << "clip_mode = " << to_string(b.clip_mode) << "\n"
    << "variance_ddof = " << b.variance_ddof << "\n\n";
  o << "[metrics]\ncka_probe = " << c.cka_probe << "\n\n";
  o << "[output]\ncheckpoint_every = " << c.checkpoint_every << "\n";
  if (!c.sweep.values.empty()) {
    o << "\n[sweep]\naxis = " << c.sweep.axis << "\nvalues =";
    for (double v : c.sweep.values) o << ' ' << fmt_double(v);
    o << "\npost_rounds = " << c.sweep.post_rounds << "\n";
  }
  return o.str();
}

inline std::uint64_t config_hash(const ExperimentConfig& c) {
  Fnv1a h;
  h.str(dump_config(c));
  return h.digest();
}

}  // namespace fsbd
