#pragma once

// End-to-end experiment plumbing: configuration, the shared data environment,
// the attacking participant, forkable run branches, and on-disk artifacts.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <memory>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fsbd/adversary.hpp"
#include "fsbd/checkpoint.hpp"
#include "fsbd/data.hpp"
#include "fsbd/error.hpp"
#include "fsbd/fl.hpp"
#include "fsbd/hash.hpp"
#include "fsbd/metrics.hpp"
#include "fsbd/simulation.hpp"

namespace fsbd {

inline constexpr const char* kVersion = "1.0.0";
inline constexpr const char* kCsvHeader = "round,acc_main,acc_backdoor,aggregator,adversary_active,seed";
inline constexpr const char* kCsvVersionRow = "# fsbd-metrics v1";

enum class AttackMode { none, perdoor, baseline_single_shot, baseline_continuous, adversarial_only };

inline std::string to_string(AttackMode m) {
  switch (m) {
    case AttackMode::none: return "none";
    case AttackMode::perdoor: return "perdoor";
    case AttackMode::baseline_single_shot: return "baseline-single-shot";
    case AttackMode::baseline_continuous: return "baseline-continuous";
    case AttackMode::adversarial_only: return "adversarial-only";
  }
  return "?";
}

inline AttackMode parse_attack_mode(const std::string& s) {
  for (auto m : {AttackMode::none, AttackMode::perdoor, AttackMode::baseline_single_shot,
                 AttackMode::baseline_continuous, AttackMode::adversarial_only})
    if (s == to_string(m)) return m;
  throw InputError("unknown attack mode '" + s +
                   "' (expected none | perdoor | baseline-single-shot | baseline-continuous | adversarial-only)");
}

inline std::string to_string(ClipMode m) { return m == ClipMode::step ? "step" : "cumulative"; }

inline ClipMode parse_clip_mode(const std::string& s) {
  if (s == "step") return ClipMode::step;
  if (s == "cumulative") return ClipMode::cumulative;
  throw InputError("unknown clip mode '" + s + "' (expected step | cumulative)");
}

// When the adversary strikes: at its |W|-th selection (stable/volatile), or at
// its first selection on or after a fixed round.
struct InjectionPoint {
  enum class Kind { stable, volatile_point, round } kind = Kind::stable;
  std::size_t round = 0;

  std::string to_string() const {
    switch (kind) {
      case Kind::stable: return "stable";
      case Kind::volatile_point: return "volatile";
      case Kind::round: return std::to_string(round);
    }
    return "?";
  }
  static InjectionPoint parse(const std::string& s) {
    if (s == "stable") return {Kind::stable, 0};
    if (s == "volatile") return {Kind::volatile_point, 0};
    std::size_t pos = 0;
    unsigned long long r = 0;
    try {
      r = std::stoull(s, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos == 0 || pos != s.size())
      throw InputError("injection must be stable | volatile | <round number>, got '" + s + "'");
    return {Kind::round, std::size_t(r)};
  }
};

struct DatasetSpec {
  enum class Kind { idx, synthetic } kind = Kind::idx;
  std::filesystem::path train_images, train_labels, test_images, test_labels;
  std::size_t classes = 10;
  std::size_t per_class = 100;       // synthetic train examples per class
  std::size_t test_per_class = 20;   // synthetic test examples per class
  float sigma = 0.1f;
};

struct SweepConfig {
  std::string axis = "delta";
  std::vector<double> values;
  std::size_t post_rounds = 200;
};

struct ExperimentConfig {
  DatasetSpec data;
  RoundConfig rounds;
  std::size_t malicious_count = 0;  // 0: ceil(1% of n), ids drawn from the seed
  BackdoorConfig backdoor;
  AggregatorKind aggregator = AggregatorKind::fedavg;
  AggregatorOptions aggregator_options;
  bool krum_f_explicit = false;
  AttackMode attack = AttackMode::perdoor;
  InjectionPoint injection;
  std::size_t stable_window = 30;
  std::size_t volatile_window = 20;
  std::size_t cka_probe = 256;
  std::size_t checkpoint_every = 0;
  std::filesystem::path out = "out";
  SweepConfig sweep;

  std::uint64_t seed() const { return rounds.seed; }

  std::size_t window_size() const {
    switch (injection.kind) {
      case InjectionPoint::Kind::stable: return stable_window;
      case InjectionPoint::Kind::volatile_point: return volatile_window;
      case InjectionPoint::Kind::round: return 0;
    }
    return 0;
  }
};

// Fills in everything derived from the seed and n; call once after parsing.
inline void resolve(ExperimentConfig& cfg) {
  if (cfg.rounds.malicious_ids.empty()) {
    const std::size_t count =
        cfg.malicious_count ? cfg.malicious_count : RoundConfig::default_malicious_count(cfg.rounds.participants);
    if (count > cfg.rounds.participants)
      throw ConfigError("fl.malicious_count", "more malicious participants than participants");
    std::vector<std::size_t> ids(cfg.rounds.participants);
    std::iota(ids.begin(), ids.end(), std::size_t{0});
    std::mt19937_64 rng(derive_seed(cfg.seed(), {0xbadULL}));
    std::shuffle(ids.begin(), ids.end(), rng);
    ids.resize(count);
    std::sort(ids.begin(), ids.end());
    cfg.rounds.malicious_ids = ids;
  }
  cfg.malicious_count = cfg.rounds.malicious_ids.size();
  if (!cfg.krum_f_explicit) cfg.aggregator_options.krum_f = RoundConfig::default_malicious_count(cfg.rounds.participants);
  cfg.backdoor.sync_alpha();
}

inline void validate(const ExperimentConfig& cfg) {
  auto wrap = [](const char* key, auto&& fn) {
    try {
      fn();
    } catch (const InputError& e) {
      throw ConfigError(key, e.what());
    }
  };
  wrap("fl", [&] { cfg.rounds.validate(); });
  wrap("attack", [&] { cfg.backdoor.validate(); });
  if (cfg.backdoor.source_label == cfg.backdoor.target_label)
    throw ConfigError("attack.target_label", "target label must differ from the source label");
  for (auto [key, label] : {std::pair{"attack.source_label", cfg.backdoor.source_label},
                            std::pair{"attack.target_label", cfg.backdoor.target_label}})
    if (label < 0 || std::size_t(label) >= cfg.data.classes)
      throw ConfigError(key, "label out of range for " + std::to_string(cfg.data.classes) + " classes");
  if (cfg.stable_window < 2) throw ConfigError("attack.stable_window", "must be at least 2");
  if (cfg.volatile_window < 2) throw ConfigError("attack.volatile_window", "must be at least 2");
  if (cfg.cka_probe < 2) throw ConfigError("metrics.cka_probe", "must be at least 2");
  if (cfg.data.kind == DatasetSpec::Kind::idx) {
    for (auto [key, p] : {std::pair{"data.train_images", &cfg.data.train_images},
                          std::pair{"data.train_labels", &cfg.data.train_labels},
                          std::pair{"data.test_images", &cfg.data.test_images},
                          std::pair{"data.test_labels", &cfg.data.test_labels}})
      if (!std::filesystem::exists(*p)) throw ConfigError(key, "file not found: " + p->string());
  } else {
    if (cfg.data.classes < 2) throw ConfigError("data.classes", "need at least 2 classes");
    if (cfg.data.per_class < 1) throw ConfigError("data.per_class", "must be positive");
    if (cfg.data.test_per_class < 1) throw ConfigError("data.test_per_class", "must be positive");
  }
}

// Full-scale defaults: n=100, m=10, R=5000, 2 local epochs at lr 0.1.
inline ExperimentConfig full_scale_config() { return {}; }

// n=20, m=5, R=400 on an MNIST directory holding the four IDX files.
// ε = 0.3: ε = 0.1 is a CIFAR-scale budget and on MNIST BIM rarely reaches
// the target class with it.
inline void apply_desk_scale(ExperimentConfig& cfg, const std::filesystem::path& mnist_dir = {}) {
  cfg.rounds.participants = 20;
  cfg.rounds.per_round = 5;
  cfg.rounds.rounds = 400;
  cfg.backdoor.epsilon = 0.3;
  cfg.backdoor.sync_alpha();
  if (!mnist_dir.empty()) {
    cfg.data.kind = DatasetSpec::Kind::idx;
    cfg.data.train_images = mnist_dir / "train-images-idx3-ubyte";
    cfg.data.train_labels = mnist_dir / "train-labels-idx1-ubyte";
    cfg.data.test_images = mnist_dir / "t10k-images-idx3-ubyte";
    cfg.data.test_labels = mnist_dir / "t10k-labels-idx1-ubyte";
  }
}

// --- data environment ---

struct Environment {
  TopologyPtr topology;
  Dataset train, test;
  Partition partition;
  std::vector<Dataset> shards;
  Dataset cka_probe;
  TriggerSet cross_eval;  // cross-stamped source-label test images
};

inline Environment make_environment(const ExperimentConfig& cfg, Dataset train, Dataset test) {
  Environment env;
  if (train.shape() != test.shape()) throw InputError("train and test image shapes differ");
  env.topology = std::make_shared<const Topology>(Topology::desk_cnn(train.shape(), train.classes));
  env.partition = iid_partition(train, cfg.rounds.participants, derive_seed(cfg.seed(), {0xda7aULL}));
  for (const auto& idx : env.partition) env.shards.push_back(train.subset(idx));

  std::vector<std::size_t> probe(test.size());
  std::iota(probe.begin(), probe.end(), std::size_t{0});
  std::mt19937_64 rng(derive_seed(cfg.seed(), {0xc4aULL}));
  std::shuffle(probe.begin(), probe.end(), rng);
  probe.resize(std::min(cfg.cka_probe, probe.size()));
  std::sort(probe.begin(), probe.end());
  env.cka_probe = test.subset(probe);

  auto src = source_indices(test, cfg.backdoor.source_label, cfg.backdoor.trigger_count);
  env.cross_eval = cross_trigger_set(test, src, cfg.backdoor.target_label);
  env.train = std::move(train);
  env.test = std::move(test);
  return env;
}

inline Environment load_environment(const ExperimentConfig& cfg) {
  if (cfg.data.kind == DatasetSpec::Kind::idx) {
    auto train = load_idx(cfg.data.train_images, cfg.data.train_labels, cfg.data.classes);
    auto test = load_idx(cfg.data.test_images, cfg.data.test_labels, cfg.data.classes);
    return make_environment(cfg, std::move(train), std::move(test));
  }
  auto train = synthetic(cfg.data.classes, cfg.data.per_class, derive_seed(cfg.seed(), {0x5e7ULL}),
                         {1, 28, 28}, cfg.data.sigma);
  // Same class means as the training set, fresh noise for the held-out part.
  auto all = synthetic(cfg.data.classes, cfg.data.per_class + cfg.data.test_per_class,
                       derive_seed(cfg.seed(), {0x5e7ULL}), {1, 28, 28}, cfg.data.sigma);
  std::vector<std::size_t> test_idx;
  for (std::size_t i = cfg.data.classes * cfg.data.per_class; i < all.size(); ++i) test_idx.push_back(i);
  return make_environment(cfg, std::move(train), all.subset(test_idx));
}

// First round at which `participant` is selected for the `window`-th time
// (window > 0), or its first selection at or after `from_round`.
inline std::size_t find_injection_round(const RoundConfig& rc, std::size_t participant, std::size_t window,
                                   std::size_t from_round) {
  std::size_t seen = 0;
  for (std::size_t r = 0; r < rc.rounds; ++r) {
    const auto sel = select_participants(rc, r);
    if (!std::binary_search(sel.begin(), sel.end(), participant)) continue;
    ++seen;
    if (window > 0 ? seen == window : r >= from_round) return r;
  }
  throw ConfigError("attack.injection", "participant " + std::to_string(participant) +
                                            " never reaches the injection point within " +
                                            std::to_string(rc.rounds) + " rounds");
}

// Everything the adversary produced at its injection round.
struct InjectionRecord {
  std::size_t round = 0;
  std::size_t participant = 0;
  std::optional<ParamMask> theta_delta, theta_sigma, theta_b;
  TriggerSet train_triggers;
  std::optional<TriggerSet> eval_triggers;  // BIM triggers on test images (adversarial modes)
  std::optional<Model<float>> malicious;   // L̂ transmitted via model replacement
};

// One malicious participant. Observes broadcasts while selected, attacks at
// its injection round, then (except for continuous poisoning) trains honestly.
class AdversaryAgent {
 public:
  AdversaryAgent(const ExperimentConfig& cfg, const Environment& env, std::size_t participant, AttackMode mode)
      : cfg_(&cfg), env_(&env), participant_(participant), mode_(mode) {
    inject_round_ = find_injection_round(cfg.rounds, participant, cfg.window_size(), cfg.injection.round);
  }

  std::size_t participant() const { return participant_; }
  std::size_t injection_round() const { return inject_round_; }
  AttackMode mode() const { return mode_; }
  void set_mode(AttackMode m) { mode_ = m; }
  const ExperimentConfig& config() const { return *cfg_; }
  // Swaps in different attack parameters; the round schedule must stay the same.
  void set_config(const ExperimentConfig& cfg) {
    if (find_injection_round(cfg.rounds, participant_, cfg.window_size(), cfg.injection.round) != inject_round_)
      throw InputError("set_config: new configuration moves the injection round");
    cfg_ = &cfg;
  }
  const AnalysisWindow& window() const { return window_; }
  const std::optional<InjectionRecord>& injection() const { return record_; }

  std::optional<UpdateMessage> act(const RoundContext& ctx) {
    if (ctx.round < inject_round_) {
      record_snapshot(window_, ctx.global, ctx.round);
      return std::nullopt;
    }
    if (ctx.round == inject_round_) {
      record_snapshot(window_, ctx.global, ctx.round);
      return strike(ctx);
    }
    if (mode_ == AttackMode::baseline_continuous) return poison_continuous(ctx);
    return std::nullopt;
  }

 private:
  std::optional<UpdateMessage> strike(const RoundContext& ctx) {
    const auto& bc = cfg_->backdoor;
    InjectionRecord rec;
    rec.round = ctx.round;
    rec.participant = participant_;
    std::optional<UpdateMessage> msg;
    switch (mode_) {
      case AttackMode::none:
        return std::nullopt;
      case AttackMode::perdoor: {
        if (window_.size() < 2) throw InputError("perdoor: analysis window holds fewer than 2 snapshots");
        rec.theta_delta = theta_delta(window_, bc.t_delta, bc.variance_ddof);
        rec.theta_sigma = theta_sigma(ctx.global, ctx.shard);
        rec.theta_b = backdoor_mask(*rec.theta_delta, *rec.theta_sigma);
        auto src = source_indices(ctx.shard, bc.source_label, bc.trigger_count);
        rec.train_triggers = generate_triggers(ctx.global, ctx.shard, src, bc, ctx.threads);
        rec.eval_triggers = trigger_test_set(ctx.global, env_->test, bc, ctx.threads);
        rec.malicious = inject_backdoor(ctx.global, *rec.theta_b, rec.train_triggers, bc);
        msg = model_replacement(ctx.global, *rec.malicious, ctx.round_data_total, ctx.shard.size(),
                                participant_);
        break;
      }
      case AttackMode::adversarial_only:
        rec.eval_triggers = trigger_test_set(ctx.global, env_->test, bc, ctx.threads);
        break;
      case AttackMode::baseline_single_shot: {
        rec.malicious = baseline_cross_attack(ctx.global, ctx.shard, bc, ctx.config.batch_size,
                                              attack_seed(ctx.round));
        msg = model_replacement(ctx.global, *rec.malicious, ctx.round_data_total, ctx.shard.size(),
                                participant_);
        break;
      }
      case AttackMode::baseline_continuous:
        msg = poison_continuous(ctx);
        break;
    }
    record_ = std::move(rec);
    return msg;
  }

  std::optional<UpdateMessage> poison_continuous(const RoundContext& ctx) {
    auto local = baseline_cross_attack(ctx.global, ctx.shard, cfg_->backdoor, ctx.config.batch_size,
                                       attack_seed(ctx.round));
    return UpdateMessage{participant_, subtract(local.params(), ctx.global.params()), ctx.shard.size()};
  }

  std::uint64_t attack_seed(std::size_t round) const {
    return derive_seed(cfg_->seed(), {round, participant_, 0xa77acULL});
  }

  const ExperimentConfig* cfg_;
  const Environment* env_;
  std::size_t participant_;
  AttackMode mode_;
  std::size_t inject_round_ = 0;
  AnalysisWindow window_;
  std::optional<InjectionRecord> record_;
};

// A resumable run: global state, aggregator (with its cross-round state) and
// adversaries. Copying via fork() gives an independent continuation.
struct Branch {
  const ExperimentConfig* cfg = nullptr;
  const Environment* env = nullptr;
  GlobalState state;
  std::unique_ptr<Aggregator> aggregator;
  std::vector<AdversaryAgent> agents;

  AttackMode mode() const { return agents.empty() ? AttackMode::none : agents.front().mode(); }

  // Trigger set that Acc_B is measured on at this point of the run.
  const TriggerSet& eval_triggers() const {
    for (const auto& a : agents)
      if (a.injection() && a.injection()->eval_triggers) return *a.injection()->eval_triggers;
    return env->cross_eval;
  }

  // Round at which the primary adversary injects.
  std::size_t injection_round() const {
    if (agents.empty()) throw InputError("branch has no adversary");
    return agents.front().injection_round();
  }
};

inline Model<float> initial_model(const ExperimentConfig& cfg, const Environment& env) {
  return init_model<float>(env.topology, derive_seed(cfg.seed(), {0x1417ULL}));
}

inline Branch start_branch(const ExperimentConfig& cfg, const Environment& env, AttackMode mode,
                           std::optional<AggregatorKind> aggregator = std::nullopt) {
  Branch b{&cfg, &env, GlobalState{0, initial_model(cfg, env)},
           make_aggregator(aggregator.value_or(cfg.aggregator), cfg.aggregator_options), {}};
  try {
    for (auto id : cfg.rounds.malicious_ids) b.agents.emplace_back(cfg, env, id, mode);
  } catch (const ConfigError&) {
    // a clean run does not need a reachable injection point; it just cannot be forked into an attack
    if (mode != AttackMode::none) throw;
    b.agents.clear();
  }
  return b;
}

// Independent continuation of b, optionally with another attack mode and/or
// attack configuration (same FL schedule). `cfg` must outlive the branch.
inline Branch fork(const Branch& b, std::optional<AttackMode> mode = std::nullopt,
                   const ExperimentConfig* cfg = nullptr) {
  Branch c{cfg ? cfg : b.cfg, b.env, b.state, b.aggregator->clone(), b.agents};
  for (auto& a : c.agents) {
    if (mode) a.set_mode(*mode);
    if (cfg) a.set_config(*cfg);
  }
  return c;
}

using RoundObserver = std::function<void(const Model<float>&, const RoundRecord&)>;

// Runs `count` rounds of the branch; each record is handed to `sink` as soon
// as it is complete.
inline std::vector<RoundRecord> advance(Branch& b, std::size_t count, unsigned threads = 1,
                                        const std::function<void(const RoundRecord&)>& sink = {},
                                        const RoundObserver& observe = {}) {
  AdversaryHook hook;
  if (!b.agents.empty() && b.mode() != AttackMode::none) {
    hook = [&b](const RoundContext& ctx) -> std::optional<UpdateMessage> {
      for (auto& a : b.agents)
        if (a.participant() == ctx.participant) return a.act(ctx);
      return std::nullopt;
    };
  }
  MetricHook metrics = [&](const Model<float>& model, RoundRecord& rec) {
    rec.acc_main = acc_main(model, b.env->test, threads);
    rec.acc_backdoor = acc_backdoor(model, b.eval_triggers());
    if (observe) observe(model, rec);
  };
  return run_rounds(b.state, b.cfg->rounds, b.env->shards, *b.aggregator, hook, metrics, count, threads, sink);
}

// Advances until the state's round equals `round` (the next model to be
// aggregated is G^{round+1}).
inline void advance_to(Branch& b, std::size_t round, unsigned threads = 1,
                       const std::function<void(const RoundRecord&)>& sink = {}) {
  if (round < b.state.round) throw InputError("advance_to: branch is already past round " + std::to_string(round));
  advance(b, round - b.state.round, threads, sink);
}

// --- CSV ---

inline std::string csv_row(const RoundRecord& r) {
  std::ostringstream s;
  s << r.round << ',' << std::fixed << std::setprecision(6) << r.acc_main << ',' << r.acc_backdoor << ','
    << r.aggregator << ',' << (r.adversary_active ? 1 : 0) << ',' << r.seed;
  return s.str();
}

class MetricsCsv {
 public:
  explicit MetricsCsv(const std::filesystem::path& path) : out_(path) {
    if (!out_) throw InputError("cannot write " + path.string());
    out_ << kCsvVersionRow << '\n' << kCsvHeader << '\n';
    out_.flush();
  }
  void write(const RoundRecord& r) {
    out_ << csv_row(r) << '\n';
    out_.flush();
  }
  void fail(std::size_t round, const std::string& what) {
    std::string msg = what;
    for (auto& c : msg)
      if (c == '\n' || c == ',' || c == '"') c = ' ';
    out_ << "FAILED," << round << ',' << msg << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

inline std::string csv_text(const std::vector<RoundRecord>& log) {
  std::string s = std::string(kCsvVersionRow) + "\n" + kCsvHeader + "\n";
  for (const auto& r : log) s += csv_row(r) + "\n";
  return s;
}

}  // namespace fsbd
