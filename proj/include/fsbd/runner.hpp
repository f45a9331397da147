#pragma once

// Drivers behind the CLI subcommands: full runs, sweeps and checkpoint
// evaluation, each writing its artifacts plus a run.json provenance record.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <boost/version.hpp>
#include <nlohmann/json.hpp>

#include "fsbd/config.hpp"
#include "fsbd/experiment.hpp"

namespace fsbd {

namespace detail {

inline std::string hex64(std::uint64_t v) {
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << v;
  return s.str();
}

inline std::string padded_round(std::size_t r) {
  std::ostringstream s;
  s << std::setw(5) << std::setfill('0') << r;
  return s.str();
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream o(p, std::ios::binary);
  if (!o) throw InputError("cannot write " + p.string());
  o << text;
}

inline std::string fmt6(double v) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(6) << v;
  return s.str();
}

// %.9g, enough to round-trip a float-derived value
inline std::string fmt9(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline nlohmann::ordered_json build_info() {
  nlohmann::ordered_json b;
#if defined(__clang__)
  b["compiler"] = std::string("clang ") + __clang_version__;
#elif defined(__GNUC__)
  b["compiler"] = std::string("gcc ") + __VERSION__;
#else
  b["compiler"] = "unknown";
#endif
  b["boost"] = BOOST_LIB_VERSION;
  b["nlohmann_json"] = std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                       std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                       std::to_string(NLOHMANN_JSON_VERSION_PATCH);
  return b;
}

}  // namespace detail

// Provenance shared by every command. Holds nothing that varies between
// identical invocations (no clock, no host, no thread count).
inline nlohmann::ordered_json provenance(const ExperimentConfig& cfg, const std::string& command) {
  nlohmann::ordered_json j;
  j["command"] = command;
  j["fsbd_version"] = kVersion;
  j["metrics_schema"] = std::string(kCsvVersionRow).substr(2);
  j["seed"] = cfg.seed();
  j["config"] = "config.ini";
  j["config_hash"] = detail::hex64(config_hash(cfg));
  j["build"] = detail::build_info();
  return j;
}

class ArtifactDir {
 public:
  explicit ArtifactDir(std::filesystem::path root) : root_(std::move(root)) {
    std::filesystem::create_directories(root_);
  }
  const std::filesystem::path& root() const { return root_; }
  // Registers a relative artifact path and returns its absolute location.
  std::filesystem::path add(const std::string& rel) {
    names_.insert(rel);
    auto p = root_ / rel;
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    return p;
  }
  std::vector<std::string> names() const { return {names_.begin(), names_.end()}; }

 private:
  std::filesystem::path root_;
  std::set<std::string> names_;
};

inline void write_run_json(ArtifactDir& dir, nlohmann::ordered_json j) {
  dir.add("run.json");
  j["artifacts"] = dir.names();
  detail::write_text(dir.root() / "run.json", j.dump(2) + "\n");
}

// Mean variance of θ_B versus the other parameters over cumulative
// post-injection windows of the broadcast global model.
inline std::string variance_csv(std::span<const ParamVector<float>> snaps, const ParamMask& mask, std::size_t ddof) {
  std::string s = "window,theta_b,complement\n";
  for (const auto& w : param_variance_series(snaps, mask, ddof))
    s += std::to_string(w.window) + "," + detail::fmt9(w.masked) + "," + detail::fmt9(w.complement) + "\n";
  return s;
}

inline std::string ssd_text(const TriggerSet& set) {
  std::string s;
  for (double v : trigger_ssd(set)) s += detail::fmt9(v) + "\n";
  return s;
}

// Writes masks, triggers and the injection-time models of a finished strike.
inline void write_injection_artifacts(ArtifactDir& dir, const AdversaryAgent& agent, nlohmann::ordered_json& j,
                                      bool primary) {
  const auto& rec = *agent.injection();
  const std::string pre = primary ? "" : "adversary_" + std::to_string(agent.participant()) + "/";
  nlohmann::ordered_json a;
  a["participant"] = agent.participant();
  a["injection_round"] = rec.round;
  a["window_rounds"] = agent.window().rounds;
  if (rec.theta_b) {
    save_mask(dir.add(pre + "masks/theta_delta.fsbm"), *rec.theta_delta);
    save_mask(dir.add(pre + "masks/theta_sigma.fsbm"), *rec.theta_sigma);
    save_mask(dir.add(pre + "masks/theta_b.fsbm"), *rec.theta_b);
    a["theta_delta"] = rec.theta_delta->count();
    a["theta_sigma"] = rec.theta_sigma->count();
    a["theta_b"] = rec.theta_b->count();
  }
  if (rec.train_triggers.size()) {
    dir.add(pre + "triggers/train.bin");
    save_triggers(dir.add(pre + "triggers/train.json").replace_extension(), rec.train_triggers);
    a["train_triggers"] = rec.train_triggers.size();
    a["train_triggers_converged"] = rec.train_triggers.converged_count();
  }
  if (rec.eval_triggers) {
    dir.add(pre + "triggers/eval.bin");
    save_triggers(dir.add(pre + "triggers/eval.json").replace_extension(), *rec.eval_triggers);
    a["eval_triggers"] = rec.eval_triggers->size();
    a["eval_triggers_converged"] = rec.eval_triggers->converged_count();
    if (rec.eval_triggers->size() >= 2) detail::write_text(dir.add(pre + "ssd.txt"), ssd_text(*rec.eval_triggers));
  }
  save_checkpoint(dir.add(pre + "checkpoints/injection_broadcast.fsbd"), agent.window().snapshots.back());
  if (rec.malicious) save_checkpoint(dir.add(pre + "checkpoints/malicious_local.fsbd"), rec.malicious->params());
  j["adversaries"].push_back(a);
}

// cmd_run. On a mid-run failure the CSV gets a FAILED row, run.json records
// the error, and the RoundFailure propagates.
inline std::vector<RoundRecord> run_experiment(const ExperimentConfig& cfg, unsigned threads, std::ostream& log) {
  const auto env = load_environment(cfg);
  ArtifactDir dir(cfg.out);
  detail::write_text(dir.add("config.ini"), dump_config(cfg));
  auto j = provenance(cfg, "run");
  j["attack"] = to_string(cfg.attack);
  j["aggregator"] = to_string(cfg.aggregator);
  j["malicious_ids"] = cfg.rounds.malicious_ids;
  j["adversaries"] = nlohmann::json::array();

  auto branch = start_branch(cfg, env, cfg.attack);
  const std::size_t s = branch.agents.empty() ? cfg.rounds.rounds : branch.injection_round();
  if (branch.agents.empty()) j["injection_round"] = nullptr;
  else j["injection_round"] = s;
  log << "attack " << to_string(cfg.attack) << ", aggregator " << to_string(cfg.aggregator);
  if (!branch.agents.empty()) log << ", injection round " << s;
  log << "\n";

  MetricsCsv csv(dir.add("metrics.csv"));
  std::vector<RoundRecord> out;
  std::vector<ParamVector<float>> post;  // G^{s+1} .. for the variance export
  const bool injecting = cfg.attack != AttackMode::none;
  auto observe = [&](const Model<float>& model, const RoundRecord& rec) {
    if (cfg.checkpoint_every && rec.round % cfg.checkpoint_every == 0)
      save_checkpoint(dir.add("checkpoints/global_" + detail::padded_round(rec.round) + ".fsbd"), model.params());
    if (injecting && rec.round == s + 1)
      save_checkpoint(dir.add("checkpoints/global_" + detail::padded_round(rec.round) + ".fsbd"), model.params());
    for (std::size_t a = 0; a < branch.agents.size(); ++a) {
      const auto& agent = branch.agents[a];
      if (agent.injection() && agent.injection_round() + 1 == rec.round)
        write_injection_artifacts(dir, agent, j, a == 0);
    }
    if (injecting && rec.round > s && branch.agents.front().injection() &&
        branch.agents.front().injection()->theta_b)
      post.push_back(model.params());
    if (rec.round % 50 == 0 || rec.round == s + 1)
      log << "round " << rec.round << " acc_main " << detail::fmt6(rec.acc_main) << " acc_backdoor "
          << detail::fmt6(rec.acc_backdoor) << "\n";
  };
  auto sink = [&](const RoundRecord& r) {
    csv.write(r);
    out.push_back(r);
  };
  try {
    advance(branch, cfg.rounds.rounds, threads, sink, observe);
  } catch (const RoundFailure& e) {
    csv.fail(e.round(), e.what());
    j["status"] = "failed";
    j["error"] = e.what();
    j["rounds_completed"] = out.size();
    write_run_json(dir, j);
    throw;
  }
  save_checkpoint(dir.add("checkpoints/final.fsbd"), branch.state.model.params());
  if (post.size() >= 2) {
    const auto& rec = *branch.agents.front().injection();
    detail::write_text(dir.add("variance.csv"), variance_csv(post, *rec.theta_b, cfg.backdoor.variance_ddof));
  }
  if (cfg.attack == AttackMode::baseline_single_shot || cfg.attack == AttackMode::baseline_continuous)
    detail::write_text(dir.add("ssd.txt"), ssd_text(env.cross_eval));
  j["status"] = "ok";
  j["rounds_completed"] = out.size();
  write_run_json(dir, j);
  return out;
}

// --- sweeps ---

struct SweepRow {
  double value = 0;
  std::vector<double> columns;
};

inline void sweep_value_check(const ExperimentConfig& cfg) {
  if (cfg.sweep.values.size() < 2) throw ConfigError("sweep.values", "a sweep needs at least 2 values");
  for (double v : cfg.sweep.values)
    if (!(v > 0)) throw ConfigError("sweep.values", "values must be positive");
}

// Sweeps one attack parameter from a shared clean prefix that stops at the
// injection round; each value then forks its own PerDoor continuation.
//   t_delta → t_delta,theta_delta,theta_b
//   delta   → delta,cka,acc_main   (CKA(L̂, G^s) and Acc_M of G^{s+1})
//   epsilon → epsilon,acc_backdoor_mean,acc_backdoor_final over post_rounds
inline std::vector<SweepRow> run_sweep(const ExperimentConfig& cfg, unsigned threads, std::ostream& log) {
  sweep_value_check(cfg);
  const auto env = load_environment(cfg);
  ArtifactDir dir(cfg.out);
  detail::write_text(dir.add("config.ini"), dump_config(cfg));
  auto j = provenance(cfg, "sweep");
  j["axis"] = cfg.sweep.axis;
  j["values"] = cfg.sweep.values;

  auto base = start_branch(cfg, env, AttackMode::perdoor);
  const std::size_t s = base.injection_round();
  j["injection_round"] = s;
  log << "sweep " << cfg.sweep.axis << ": clean prefix to round " << s << "\n";
  advance_to(base, s, threads);

  std::vector<SweepRow> rows;
  std::string csv;
  const auto& axis = cfg.sweep.axis;
  if (axis == "t_delta") {
    csv = "t_delta,theta_delta,theta_b\n";
    AnalysisWindow w = base.agents.front().window();
    record_snapshot(w, base.state.model, s);
    const auto& shard = env.shards[base.agents.front().participant()];
    const auto sigma = theta_sigma(base.state.model, shard);
    for (double t : cfg.sweep.values) {
      const auto d = theta_delta(w, t, cfg.backdoor.variance_ddof);
      const auto b = d & sigma;
      rows.push_back({t, {double(d.count()), double(b.count())}});
      csv += detail::fmt9(t) + "," + std::to_string(d.count()) + "," + std::to_string(b.count()) + "\n";
      log << "t_delta " << t << ": |theta_delta| " << d.count() << " |theta_b| " << b.count() << "\n";
    }
  } else {
    csv = axis == "delta" ? "delta,cka,acc_main\n" : "epsilon,acc_backdoor_mean,acc_backdoor_final\n";
    for (double v : cfg.sweep.values) {
      ExperimentConfig c = cfg;
      if (axis == "delta") {
        c.backdoor.delta = v;
      } else {
        c.backdoor.epsilon = v;
        c.backdoor.sync_alpha();
      }
      validate(c);
      auto b = fork(base, AttackMode::perdoor, &c);
      if (axis == "delta") {
        auto rec = advance(b, 1, threads);
        const auto& inj = *b.agents.front().injection();
        const double cka = linear_cka(*inj.malicious, base.state.model, env.cka_probe, threads);
        rows.push_back({v, {cka, rec.back().acc_main}});
        csv += detail::fmt9(v) + "," + detail::fmt9(cka) + "," + detail::fmt6(rec.back().acc_main) + "\n";
        log << "delta " << v << ": cka " << cka << " acc_main " << rec.back().acc_main << "\n";
      } else {
        MetricsCsv per(dir.add("metrics_epsilon_" + detail::fmt9(v) + ".csv"));
        double sum = 0;
        auto recs = advance(b, cfg.sweep.post_rounds, threads, [&](const RoundRecord& r) {
          per.write(r);
          sum += r.acc_backdoor;
        });
        const double mean = recs.empty() ? 0.0 : sum / double(recs.size());
        const double fin = recs.empty() ? 0.0 : recs.back().acc_backdoor;
        rows.push_back({v, {mean, fin}});
        csv += detail::fmt9(v) + "," + detail::fmt6(mean) + "," + detail::fmt6(fin) + "\n";
        log << "epsilon " << v << ": mean acc_backdoor " << mean << " final " << fin << "\n";
      }
    }
  }
  detail::write_text(dir.add("sweep.csv"), csv);
  j["status"] = "ok";
  write_run_json(dir, j);
  return rows;
}

// --- eval ---

struct EvalResult {
  double acc_main = 0;
  std::optional<double> acc_backdoor;
  std::optional<double> cka;
};

inline EvalResult evaluate_checkpoint(const ExperimentConfig& cfg, const std::filesystem::path& checkpoint,
                                      const std::optional<std::filesystem::path>& triggers,
                                      const std::optional<std::filesystem::path>& compare, unsigned threads) {
  const auto env = load_environment(cfg);
  auto model = load_model(checkpoint, env.topology);
  EvalResult r;
  r.acc_main = acc_main(model, env.test, threads);
  if (triggers) r.acc_backdoor = acc_backdoor(model, load_triggers(*triggers));
  if (compare) r.cka = linear_cka(model, load_model(*compare, env.topology), env.cka_probe, threads);
  return r;
}

}  // namespace fsbd
