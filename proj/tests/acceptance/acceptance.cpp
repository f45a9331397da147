// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fail.
//
//   fsbd_acceptance [--threads N]     N is the second thread count for criterion 12 (default 2)
//
// Criteria 7-12 run on the desk-scale MNIST configuration and take roughly half
// an hour on one core.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <deque>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "../support/oracles.hpp"
#include "fsbd/adversary.hpp"
#include "fsbd/config.hpp"
#include "fsbd/experiment.hpp"
#include "fsbd/metrics.hpp"
#include "fsbd/robust.hpp"

using namespace fsbd;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int failures = 0;

// limit < 0: no runtime bound
void report(int id, bool ok, const std::string& detail, double secs, double limit) {
  const bool in_time = limit < 0 || secs <= limit;
  if (!(ok && in_time)) ++failures;
  std::printf("criterion %2d: %s  %s; %.1f s", id, ok && in_time ? "PASS" : "FAIL", detail.c_str(), secs);
  if (limit >= 0) std::printf(" (limit %.0f s)%s", limit, in_time ? "" : " TIME EXCEEDED");
  std::printf("\n");
  std::fflush(stdout);
}

std::string fmt(const char* f, double v) {
  char b[64];
  std::snprintf(b, sizeof b, f, v);
  return b;
}

// --- 1: gradients ---

void gradients() {
  const auto t0 = Clock::now();
  double worst32 = 0, worst64 = 0;
  std::size_t checked = 0, skipped = 0;
  bool enough = true;
  for (auto fl : {oracle::Flavor::loss_params, oracle::Flavor::loss_input, oracle::Flavor::logit_params})
    for (std::uint64_t seed = 101; seed <= 110; ++seed) {
      auto a = oracle::check_gradient<float>(oracle::small_cnn(), seed, fl, 100, 1e-3, 1e-3);
      auto b = oracle::check_gradient<double>(oracle::small_cnn(), seed, fl, 100, 1e-6, 1e-4);
      enough = enough && a.checked == 100 && b.checked == 100;
      worst32 = std::max(worst32, a.max_rel);
      worst64 = std::max(worst64, b.max_rel);
      checked += a.checked + b.checked;
      skipped += a.skipped + b.skipped;
    }
  report(1, enough && worst32 <= 1e-3 && worst64 <= 1e-5,
         "3 flavours x 10 models x 100 coords, max rel err f32 " + fmt("%.2e", worst32) + ", f64 " +
             fmt("%.2e", worst64) + " (" + std::to_string(checked) + " checked, " + std::to_string(skipped) +
             " kink-crossing steps skipped)",
         seconds_since(t0), 60);
}

// --- 2: FedAvg ---

void fedavg() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(2);
  std::normal_distribution<float> n(0.0f, 1.0f);
  double worst = 0;
  int trials = 0;
  for (; trials < 200; ++trials) {
    const std::size_t in = 1 + rng() % 99, classes = 2 + rng() % 9;  // d = (in+1)·classes ≤ 1000
    auto topo = oracle::linear_model(in, classes);
    auto g = oracle::random_model(topo, rng());
    const std::size_t m = 1 + rng() % 10, d = g.params().size();
    std::vector<UpdateMessage> us;
    std::vector<std::vector<float>> ds;
    std::vector<std::size_t> counts;
    for (std::size_t i = 0; i < m; ++i) {
      std::vector<float> v(d);
      for (auto& x : v) x = 0.1f * n(rng);
      counts.push_back(1 + rng() % 500);
      ds.push_back(v);
      us.push_back({i, ParamVector<float>(topo->layout(), v), counts.back()});
    }
    auto out = fedavg_aggregate(g, us);
    auto want = oracle::fedavg_scalar({g.params().values().begin(), g.params().values().end()}, ds, counts);
    for (std::size_t j = 0; j < d; ++j) worst = std::max(worst, std::abs(double(out.params()[j]) - double(want[j])));
  }
  report(2, worst <= 1e-6, std::to_string(trials) + " random instances, max abs diff " + fmt("%.2e", worst),
         seconds_since(t0), 1);
}

// --- 3: Krum ---

void krum() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(3);
  std::normal_distribution<float> n(0.0f, 1.0f);
  int agree = 0;
  const int trials = 200;
  for (int t = 0; t < trials; ++t) {
    const std::size_t m = 1 + rng() % 10, in = 1 + rng() % 50;
    const std::size_t f = m >= 3 ? rng() % ((m - 3) / 2 + 1) : 0;  // m ≥ 2f+3 where m allows it
    auto topo = oracle::linear_model(in, 4);
    std::vector<UpdateMessage> us;
    std::vector<std::vector<float>> ds;
    std::vector<std::size_t> ids;
    for (std::size_t i = 0; i < m; ++i) {
      std::vector<float> v(topo->layout()->total());
      const float scale = rng() % 4 == 0 ? 10.0f : 1.0f;  // some outliers
      for (auto& x : v) x = scale * n(rng);
      ids.push_back(2 * i + rng() % 2);
      ds.push_back(v);
      us.push_back({ids.back(), ParamVector<float>(topo->layout(), v), 1});
    }
    if (krum_select(us, f) == oracle::krum_brute_force(ds, ids, f)) ++agree;
  }
  report(3, agree == trials, std::to_string(agree) + "/" + std::to_string(trials) + " match brute force",
         seconds_since(t0), 10);
}

// --- 4: FoolsGold ---

void foolsgold() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(4);
  std::normal_distribution<float> n(0.0f, 1.0f);
  double sybil_max = 0, honest_min = 1;
  const int instances = 50;
  for (int t = 0; t < instances; ++t) {
    // 2 sybils with one shared random direction, 3 honest participants on disjoint supports
    auto topo = oracle::linear_model(99, 10);
    const std::size_t d = topo->layout()->total(), block = d / 5;
    std::vector<float> shared(d, 0.0f);
    for (std::size_t j = 0; j < block; ++j) shared[j] = n(rng);
    FoolsGoldState st;
    std::vector<double> w;
    for (int r = 0; r < 3; ++r) {
      std::vector<UpdateMessage> us;
      for (std::size_t h = 0; h < 3; ++h) {
        std::vector<float> v(d, 0.0f);
        for (std::size_t j = (h + 1) * block; j < (h + 2) * block; ++j) v[j] = n(rng);
        us.push_back({h, ParamVector<float>(topo->layout(), v), 1});
      }
      us.push_back({10, ParamVector<float>(topo->layout(), shared), 1});
      us.push_back({11, ParamVector<float>(topo->layout(), shared), 1});
      w = foolsgold_weights(st, us);
    }
    for (std::size_t i = 0; i < 3; ++i) honest_min = std::min(honest_min, w[i]);
    sybil_max = std::max({sybil_max, w[3], w[4]});
  }
  report(4, sybil_max < 0.05 && honest_min >= 0.95,
         std::to_string(instances) + " instances after 3 rounds, max sybil weight " + fmt("%.3g", sybil_max) +
             ", min orthogonal weight " + fmt("%.3g", honest_min),
         seconds_since(t0), 10);
}

// --- 5: mask exactness ---

void mask_exactness() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(5);
  int exact = 0, moved = 0;
  const int cases = 100;
  auto topo = oracle::small_cnn();
  auto data = synthetic(10, 3, 55, topo->input_shape());
  for (int t = 0; t < cases; ++t) {
    auto g = oracle::random_model(topo, rng());
    BackdoorConfig c;
    c.iterations = 1 + rng() % 8;
    c.delta = std::pow(10.0, -1.0 - double(rng() % 5));
    c.target_label = 7;
    c.epsilon = 0.1;
    c.sync_alpha();
    auto trig = generate_triggers(g, data, source_indices(data, 0, 3), c);
    ParamMask mask(topo->layout());
    const double density = double(1 + rng() % 99) / 100.0;
    std::bernoulli_distribution on(density);
    for (std::size_t i = 0; i < mask.size(); ++i) mask.set(i, on(rng));
    if (mask.count() == 0) mask.set(rng() % mask.size());
    auto out = inject_backdoor(g, mask, trig, c);
    bool ok = true, any = false;
    for (std::size_t i = 0; i < mask.size(); ++i) {
      const bool same = std::bit_cast<std::uint32_t>(out.params()[i]) == std::bit_cast<std::uint32_t>(g.params()[i]);
      if (!mask.test(i) && !same) ok = false;
      if (mask.test(i) && !same) any = true;
    }
    exact += ok;
    moved += any;
  }
  report(5, exact == cases,
         std::to_string(exact) + "/" + std::to_string(cases) + " fuzzed masks bitwise exact off-mask (" +
             std::to_string(moved) + " moved some masked coordinate)",
         seconds_since(t0), 60);
}

// --- 6: BIM bound ---

void bim_bound() {
  const auto t0 = Clock::now();
  auto topo = oracle::small_cnn();
  auto model = oracle::random_model(topo, 6);
  auto data = synthetic(10, 100, 66, topo->input_shape());
  const double eps[] = {0.05, 0.075, 0.1};
  std::size_t total = 0, inside = 0;
  double worst = 0;
  Workspace<float> ws(model.topology());
  for (std::size_t k = 0; k < 1000; ++k) {
    BackdoorConfig c;
    c.epsilon = eps[k % 3];
    c.sync_alpha();
    auto e = bim_generate(model, data.image(k), int((data.labels[k] + 1) % 10), c, ws);
    double linf = 0;
    bool box = true;
    for (std::size_t i = 0; i < e.adv.size(); ++i) {
      linf = std::max(linf, std::abs(double(e.adv.data[i]) - double(e.source.data[i])));
      box = box && e.adv.data[i] >= 0.0f && e.adv.data[i] <= 1.0f;
    }
    worst = std::max(worst, linf / c.epsilon);
    inside += (linf <= c.epsilon && box);
    ++total;
  }
  std::size_t identity = 0;
  for (std::size_t k = 0; k < 100; ++k) {
    BackdoorConfig c;
    c.epsilon = 0;
    c.alpha_override = true;
    c.alpha = 0.01;
    auto e = bim_generate(model, data.image(k), int((data.labels[k] + 1) % 10), c, ws);
    identity += e.adv.data == e.source.data;
  }
  report(6, inside == total && identity == 100,
         std::to_string(inside) + "/" + std::to_string(total) + " triggers within the eps ball and [0,1] (max |eta|/eps " +
             fmt("%.6f", worst) + "), eps=0 identity " + std::to_string(identity) + "/100",
         seconds_since(t0), 120);
}

// --- 7-12: desk scale ---

double mean_acc_backdoor(const std::vector<RoundRecord>& v) {
  double s = 0;
  for (const auto& r : v) s += r.acc_backdoor;
  return v.empty() ? 0.0 : s / double(v.size());
}

std::vector<RoundRecord> after(const std::vector<RoundRecord>& v, std::size_t round) {
  std::vector<RoundRecord> out;
  for (const auto& r : v)
    if (r.round > round) out.push_back(r);
  return out;
}

struct DeskResult {
  // CSV text per criterion, compared across thread counts
  std::string csv7, csv8, csv9;
  // 7
  double pd_mean = 0, pd_final = 0, ss_mean = 0, ss_final = 0;
  double secs7 = 0;
  // 8
  double acc_none = 0;
  std::vector<double> deltas, cka, acc_delta;
  double secs8 = 0;
  // 9
  double fg_mean = 0;
  double krum_acc = 0, fedavg_acc = 0;
  std::size_t krum_le_rounds = 0, matched = 0;
  double secs9 = 0;
  // 10
  std::size_t adv_count = 0, cross_count = 0, ssd_pairs = 0;
  double adv_ssd_var = 0, cross_ssd_max = 0;
  bool cross_all_zero = false;
  double secs10 = 0;
  // 11
  std::vector<double> t_deltas;
  std::vector<std::size_t> theta_b;
  double secs11 = 0;
  std::size_t s = 0;
};

DeskResult desk_suite(const ExperimentConfig& cfg, const Environment& env, unsigned threads, bool verbose) {
  DeskResult out;
  auto log = [&](const std::string& m) {
    if (verbose) std::cerr << "  [threads " << threads << "] " << m << std::endl;
  };
  const std::size_t post = 200;

  // shared clean prefix up to the stable injection round
  auto t0 = Clock::now();
  auto prefix = start_branch(cfg, env, AttackMode::perdoor);
  const std::size_t s = prefix.injection_round();
  out.s = s;
  auto pre = advance(prefix, s, threads);
  const double prefix_secs = seconds_since(t0);
  log("prefix to round " + std::to_string(s) + " in " + fmt("%.0f", prefix_secs) + " s");

  // 7: persistence, injection round then 200 adversary-free rounds
  t0 = Clock::now();
  auto pd = fork(prefix, AttackMode::perdoor);
  auto pd_log = advance(pd, post + 1, threads);
  auto ss = fork(prefix, AttackMode::baseline_single_shot);
  auto ss_log = advance(ss, post + 1, threads);
  {
    auto pd_post = after(pd_log, s + 1), ss_post = after(ss_log, s + 1);
    out.pd_mean = mean_acc_backdoor(pd_post);
    out.ss_mean = mean_acc_backdoor(ss_post);
    out.pd_final = pd_post.back().acc_backdoor;
    out.ss_final = ss_post.back().acc_backdoor;
    auto all_pd = pre;
    all_pd.insert(all_pd.end(), pd_log.begin(), pd_log.end());
    auto all_ss = pre;
    all_ss.insert(all_ss.end(), ss_log.begin(), ss_log.end());
    out.csv7 = "# perdoor\n" + csv_text(all_pd) + "# baseline-single-shot\n" + csv_text(all_ss);
  }
  out.secs7 = prefix_secs + seconds_since(t0);
  log("criterion 7 branches done");

  // 8: stealthiness at the injection round
  t0 = Clock::now();
  {
    auto none = fork(prefix, AttackMode::none);
    out.acc_none = advance(none, 1, threads).back().acc_main;
    std::deque<ExperimentConfig> cfgs;
    out.csv8 = "delta,cka,acc_main\n";
    for (double d : {1e-5, 1e-4, 1e-3}) {
      auto& c = cfgs.emplace_back(cfg);
      c.backdoor.delta = d;
      validate(c);
      auto b = fork(prefix, AttackMode::perdoor, &c);
      const double acc = advance(b, 1, threads).back().acc_main;
      const double k = linear_cka(*b.agents.front().injection()->malicious, prefix.state.model, env.cka_probe, threads);
      out.deltas.push_back(d);
      out.cka.push_back(k);
      out.acc_delta.push_back(acc);
      out.csv8 += fmt("%.9g", d) + "," + fmt("%.9g", k) + "," + fmt("%.6f", acc) + "\n";
    }
    out.csv8 += "none,," + fmt("%.6f", out.acc_none) + "\n";
  }
  out.secs8 = prefix_secs + seconds_since(t0);
  log("criterion 8 done");

  // 9: FoolsGold persistence and Krum utility, each a full run from round 0
  t0 = Clock::now();
  {
    auto fg = start_branch(cfg, env, AttackMode::perdoor, AggregatorKind::foolsgold);
    auto fg_log = advance(fg, s + 101, threads);
    out.fg_mean = mean_acc_backdoor(after(fg_log, s + 1));
    auto kr = start_branch(cfg, env, AttackMode::perdoor, AggregatorKind::krum);
    auto kr_log = advance(kr, s + 101, threads);
    auto fa_log = pre;
    fa_log.insert(fa_log.end(), pd_log.begin(), pd_log.end());
    double ks = 0, fs = 0;
    for (std::size_t i = 0; i < kr_log.size(); ++i) {
      ks += kr_log[i].acc_main;
      fs += fa_log[i].acc_main;
      out.krum_le_rounds += kr_log[i].acc_main <= fa_log[i].acc_main;
    }
    out.matched = kr_log.size();
    out.krum_acc = ks / double(out.matched);
    out.fedavg_acc = fs / double(out.matched);
    out.csv9 = "# foolsgold\n" + csv_text(fg_log) + "# krum\n" + csv_text(kr_log);
  }
  out.secs9 = seconds_since(t0);
  log("criterion 9 done");

  // 10: trigger diversity, the primary adversary's evaluation triggers vs the cross triggers
  t0 = Clock::now();
  {
    const auto& adv = *pd.agents.front().injection()->eval_triggers;
    const auto& cross = env.cross_eval;
    out.adv_count = adv.size();
    out.cross_count = cross.size();
    auto a = trigger_ssd(adv);
    auto c = trigger_ssd(cross);
    out.ssd_pairs = a.size();
    out.adv_ssd_var = sample_variance(a);
    out.cross_ssd_max = *std::max_element(c.begin(), c.end());
    out.cross_all_zero = std::all_of(c.begin(), c.end(), [](double v) { return v == 0.0; }) && c.size() == a.size();
  }
  out.secs10 = seconds_since(t0);

  // 11: |θ_B| against t_Δ on the stable-point window
  t0 = Clock::now();
  {
    AnalysisWindow w = prefix.agents.front().window();
    record_snapshot(w, prefix.state.model, s);
    const auto sigma = theta_sigma(prefix.state.model, env.shards[prefix.agents.front().participant()]);
    for (double t : {1e-2, 1e-3, 1e-4, 1e-5}) {
      out.t_deltas.push_back(t);
      out.theta_b.push_back((theta_delta(w, t, cfg.backdoor.variance_ddof) & sigma).count());
    }
  }
  out.secs11 = seconds_since(t0);
  return out;
}

std::string list(const std::vector<double>& v, const char* f) {
  std::string s;
  for (double x : v) s += (s.empty() ? "" : " ") + fmt(f, x);
  return s;
}

void desk(unsigned second_threads) {
  ExperimentConfig cfg = full_scale_config();
  apply_desk_scale(cfg, std::filesystem::path(FSBD_DATA_DIR) / "mnist");
  cfg.rounds.seed = 1;
  resolve(cfg);
  validate(cfg);
  const auto env = load_environment(cfg);
  std::printf("desk scale: seed %llu, malicious %zu, n=%zu m=%zu, eps %.2f, config hash %016llx\n",
              (unsigned long long)cfg.seed(), cfg.rounds.malicious_ids.front(), cfg.rounds.participants,
              cfg.rounds.per_round, cfg.backdoor.epsilon, (unsigned long long)config_hash(cfg));
  std::fflush(stdout);

  const auto r = desk_suite(cfg, env, 1, true);

  report(7, r.pd_mean >= 2 * r.ss_mean && r.pd_final >= 0.5 && r.ss_final <= 0.3,
         "injection round " + std::to_string(r.s) + "; 200 rounds after G^" + std::to_string(r.s + 1) +
             ": mean Acc_B perdoor " + fmt("%.4f", r.pd_mean) + " vs single-shot " + fmt("%.4f", r.ss_mean) +
             ", at +200 perdoor " + fmt("%.4f", r.pd_final) + " single-shot " + fmt("%.4f", r.ss_final),
         r.secs7, 30 * 60);

  bool mono = true;
  for (std::size_t i = 1; i < r.cka.size(); ++i) mono = mono && r.cka[i] <= r.cka[i - 1];
  const double gap = std::abs(r.acc_delta.front() - r.acc_none);
  report(8, gap <= 0.02 && mono,
         "Acc_M G^" + std::to_string(r.s + 1) + " delta=1e-5 " + fmt("%.4f", r.acc_delta.front()) + " vs none " +
             fmt("%.4f", r.acc_none) + " (gap " + fmt("%.4f", gap) + "); CKA over delta {1e-5,1e-4,1e-3}: " +
             list(r.cka, "%.6f"),
         r.secs8, 20 * 60);

  report(9, r.fg_mean >= 0.5 && r.krum_acc <= r.fedavg_acc,
         "FoolsGold mean Acc_B over 100 post-injection rounds " + fmt("%.4f", r.fg_mean) + "; mean Acc_M over " +
             std::to_string(r.matched) + " matched rounds Krum " + fmt("%.4f", r.krum_acc) + " vs FedAvg " +
             fmt("%.4f", r.fedavg_acc) + " (Krum <= FedAvg in " + std::to_string(r.krum_le_rounds) + " rounds)",
         r.secs9, 45 * 60);

  report(10, r.adv_count == 50 && r.cross_count == 50 && r.ssd_pairs == 1225 && r.adv_ssd_var > 0 && r.cross_all_zero,
         std::to_string(r.adv_count) + " adversarial / " + std::to_string(r.cross_count) + " cross triggers, " +
             std::to_string(r.ssd_pairs) + " pairs; adversarial SSD variance " + fmt("%.4g", r.adv_ssd_var) +
             ", cross SSD max " + fmt("%.3g", r.cross_ssd_max),
         r.secs10, 120);

  bool nonincreasing = true;
  std::string counts;
  for (std::size_t i = 0; i < r.theta_b.size(); ++i) {
    if (i && r.theta_b[i] > r.theta_b[i - 1]) nonincreasing = false;
    counts += (i ? " " : "") + std::to_string(r.theta_b[i]);
  }
  report(11, nonincreasing, "|theta_B| at t_delta {1e-2,1e-3,1e-4,1e-5}: " + counts, r.secs11, 300);

  const auto t0 = Clock::now();
  const auto r2 = desk_suite(cfg, env, second_threads, true);
  const bool same7 = r.csv7 == r2.csv7, same8 = r.csv8 == r2.csv8, same9 = r.csv9 == r2.csv9;
  report(12, same7 && same8 && same9,
         "1 vs " + std::to_string(second_threads) + " threads byte-identical CSVs: crit 7 " + (same7 ? "yes" : "no") +
             ", crit 8 " + (same8 ? "yes" : "no") + ", crit 9 " + (same9 ? "yes" : "no") + " (" +
             std::to_string(r.csv7.size() + r.csv8.size() + r.csv9.size()) + " bytes)",
         seconds_since(t0), -1);
}

}  // namespace

int main(int argc, char** argv) {
  unsigned n = 2;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--threads" && i + 1 < argc) n = unsigned(std::stoul(argv[++i]));
    else {
      std::cerr << "usage: fsbd_acceptance [--threads N]\n";
      return 2;
    }
  }
  if (n < 2) n = 2;
  try {
    gradients();
    fedavg();
    krum();
    foolsgold();
    mask_exactness();
    bim_bound();
    desk(n);
  } catch (const std::exception& e) {
    std::printf("acceptance aborted: %s\n", e.what());
    return 1;
  }
  std::printf("%d criteria failed\n", failures);
  return failures ? 1 : 0;
}
