#pragma once

// Persistent-backdoor adversary: low-variance / low-importance parameter
// selection, BIM triggers, masked injection and model replacement, plus the
// fixed cross-pattern baseline.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fsbd/data.hpp"
#include "fsbd/error.hpp"
#include "fsbd/fl.hpp"
#include "fsbd/model.hpp"
#include "fsbd/parallel.hpp"

namespace fsbd {

class ParamMask {
 public:
  ParamMask() = default;
  explicit ParamMask(LayoutPtr layout, bool fill = false)
      : layout_(std::move(layout)), bits_(layout_->total(), fill ? 1 : 0) {}

  const LayoutPtr& layout() const { return layout_; }
  std::size_t size() const { return bits_.size(); }
  bool test(std::size_t i) const { return bits_[i] != 0; }
  void set(std::size_t i, bool v = true) { bits_[i] = v ? 1 : 0; }
  std::size_t count() const { return std::size_t(std::count(bits_.begin(), bits_.end(), 1)); }
  bool empty() const { return count() == 0; }

  ParamMask operator&(const ParamMask& o) const { return combine(o, [](auto a, auto b) { return a & b; }); }
  ParamMask operator|(const ParamMask& o) const { return combine(o, [](auto a, auto b) { return a | b; }); }
  ParamMask operator~() const {
    ParamMask m = *this;
    for (auto& b : m.bits_) b ^= 1;
    return m;
  }
  bool subset_of(const ParamMask& o) const {
    check(o);
    for (std::size_t i = 0; i < bits_.size(); ++i)
      if (bits_[i] && !o.bits_[i]) return false;
    return true;
  }
  bool operator==(const ParamMask& o) const {
    return same_layout(layout_, o.layout_) && bits_ == o.bits_;
  }

 private:
  void check(const ParamMask& o) const {
    if (!same_layout(layout_, o.layout_)) throw InputError("parameter masks have different layouts");
  }
  template <typename Op>
  ParamMask combine(const ParamMask& o, Op op) const {
    check(o);
    ParamMask m(layout_);
    for (std::size_t i = 0; i < bits_.size(); ++i) m.bits_[i] = op(bits_[i], o.bits_[i]);
    return m;
  }

  LayoutPtr layout_;
  std::vector<std::uint8_t> bits_;
};

// Broadcast global models the adversary saw while selected, oldest first.
struct AnalysisWindow {
  std::vector<ParamVector<float>> snapshots;
  std::vector<std::size_t> rounds;

  std::size_t size() const { return snapshots.size(); }
};

inline void record_snapshot(AnalysisWindow& w, const Model<float>& broadcast, std::size_t round) {
  if (!w.snapshots.empty()) {
    require_same_layout(w.snapshots.front(), broadcast.params(), "record_snapshot");
    if (round <= w.rounds.back())
      throw InputError("record_snapshot: round " + std::to_string(round) +
                       " does not follow round " + std::to_string(w.rounds.back()));
  }
  w.snapshots.push_back(broadcast.params());
  w.rounds.push_back(round);
}

// Per-coordinate variance across snapshots, divisor (n − ddof).
inline std::vector<double> snapshot_variance(std::span<const ParamVector<float>> snaps,
                                             std::size_t ddof = 1) {
  if (snaps.size() < 2) throw InputError("variance needs at least 2 snapshots");
  if (snaps.size() <= ddof) throw InputError("variance divisor would be non-positive");
  const std::size_t d = snaps.front().size();
  std::vector<double> mean(d, 0.0), var(d, 0.0);
  for (const auto& s : snaps) {
    require_same_layout(snaps.front(), s, "variance");
    for (std::size_t i = 0; i < d; ++i) mean[i] += s[i];
  }
  for (auto& m : mean) m /= double(snaps.size());
  for (const auto& s : snaps)
    for (std::size_t i = 0; i < d; ++i) {
      const double e = double(s[i]) - mean[i];
      var[i] += e * e;
    }
  for (auto& v : var) v /= double(snaps.size() - ddof);
  return var;
}

// θ_Δ: coordinates whose inter-round variance is strictly below t_delta.
inline ParamMask theta_delta(const AnalysisWindow& w, double t_delta, std::size_t ddof = 1) {
  if (w.size() < 2) throw InputError("theta_delta: need at least 2 snapshots");
  const auto var = snapshot_variance(w.snapshots, ddof);
  ParamMask m(w.snapshots.front().layout());
  for (std::size_t i = 0; i < var.size(); ++i) m.set(i, var[i] < t_delta);
  return m;
}

// I over every parameter: mean over the probe of d[log p_y(x)]/dθ at each
// example's own label. Accumulated in double.
inline ParamVector<double> importance_all(const Model<float>& model, const Dataset& probe) {
  if (probe.size() == 0) throw InputError("importance: empty probe set");
  const auto& topo = model.topology();
  Workspace<float> ws(topo);
  ParamVector<float> g(topo.layout());
  std::vector<double> acc(g.size(), 0.0);
  for (std::size_t i = 0; i < probe.size(); ++i) {
    auto gv = g.values();
    std::fill(gv.begin(), gv.end(), 0.0f);
    accumulate_logit_grad<float>(topo, model.params().values(), probe.image(i), probe.labels[i], ws,
                                 gv);
    for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += gv[j];
  }
  for (auto& a : acc) a /= double(probe.size());
  return ParamVector<double>(topo.layout(), std::move(acc));
}

// I_l for a single layout entry.
inline std::vector<double> importance(const Model<float>& model, const Dataset& probe,
                                      std::size_t layer) {
  model.topology().layout()->entry(layer);
  auto all = importance_all(model, probe);
  auto part = all.entry(layer);
  return {part.begin(), part.end()};
}

// θ_σ from precomputed importances: per layer, strictly below the layer mean.
inline ParamMask theta_sigma_from(const ParamVector<double>& imp) {
  ParamMask m(imp.layout());
  const auto& layout = *imp.layout();
  for (std::size_t l = 0; l < layout.size(); ++l) {
    auto part = imp.entry(l);
    if (part.empty()) continue;
    const double mean = std::accumulate(part.begin(), part.end(), 0.0) / double(part.size());
    const std::size_t off = layout.entry(l).offset;
    for (std::size_t j = 0; j < part.size(); ++j) m.set(off + j, part[j] < mean);
  }
  return m;
}

inline ParamMask theta_sigma(const Model<float>& model, const Dataset& probe) {
  return theta_sigma_from(importance_all(model, probe));
}

// θ_B = θ_Δ ∩ θ_σ
inline ParamMask backdoor_mask(const ParamMask& delta_mask, const ParamMask& sigma_mask) {
  ParamMask b = delta_mask & sigma_mask;
  if (b.empty()) std::cerr << "warning: backdoor mask is empty (no parameter is both stable and unimportant)\n";
  return b;
}

enum class ClipMode { step, cumulative };

struct BackdoorConfig {
  double t_delta = 1e-3;
  double delta = 1e-5;             // backdoor strength δ
  std::size_t iterations = 200;    // K
  double epsilon = 0.1;            // BIM attack strength ε
  std::size_t bim_iters = 10;      // r
  double alpha = 0.01;             // BIM step; ε / r unless alpha_override
  bool alpha_override = false;
  int source_label = 0;
  int target_label = 6;
  std::size_t trigger_count = 50;  // f
  ClipMode clip_mode = ClipMode::step;
  std::size_t variance_ddof = 1;

  void sync_alpha() {
    if (!alpha_override) alpha = bim_iters ? epsilon / double(bim_iters) : 0.0;
  }

  void validate() const {
    if (!(t_delta > 0)) throw InputError("backdoor: t_delta must be positive");
    if (!(delta > 0)) throw InputError("backdoor: delta must be positive");
    if (iterations == 0) throw InputError("backdoor: iterations must be positive");
    if (!(epsilon > 0)) throw InputError("backdoor: epsilon must be positive");
    if (bim_iters == 0) throw InputError("backdoor: bim_iters must be positive");
    if (!(alpha > 0)) throw InputError("backdoor: alpha must be positive");
    if (trigger_count == 0) throw InputError("backdoor: trigger_count must be positive");
    if (!alpha_override && std::abs(alpha * double(bim_iters) - epsilon) > 1e-12 * epsilon)
      throw InputError("backdoor: alpha * bim_iters must equal epsilon (set alpha_override to change)");
  }
};

struct TriggerEntry {
  Tensor<float> adv;     // x̂
  Tensor<float> source;  // x
  std::size_t source_index = 0;
  int source_label = 0;
  bool converged = false;  // model(x̂) == target at generation time

  // η = x̂ − x
  std::vector<float> perturbation() const {
    std::vector<float> eta(adv.size());
    for (std::size_t i = 0; i < eta.size(); ++i) eta[i] = adv.data[i] - source.data[i];
    return eta;
  }
};

struct TriggerSet {
  std::vector<TriggerEntry> entries;
  int target_label = 0;
  double epsilon = 0;

  std::size_t size() const { return entries.size(); }
  std::size_t converged_count() const {
    return std::size_t(std::count_if(entries.begin(), entries.end(), [](auto& e) { return e.converged; }));
  }
};

namespace detail {

inline float sign_of(float g) { return g > 0.0f ? 1.0f : (g < 0.0f ? -1.0f : 0.0f); }

// Steps v toward x0 until |v − x0| ≤ eps holds in double.
inline float pull_into_ball(float v, float x0, double eps) {
  while (std::abs(double(v) - double(x0)) > eps) v = std::nextafter(v, x0);
  return v;
}

}  // namespace detail

// Targeted BIM: x^{k+1} = Π(x^k − α·sign(∇_x J(θ, x^k, ŷ))), where Π projects
// onto the ε-ball around x^{0} intersected with [0,1].
inline TriggerEntry bim_generate(const Model<float>& model, std::span<const float> x, int target,
                                 const BackdoorConfig& cfg, Workspace<float>& ws) {
  const auto& topo = model.topology();
  const auto& in = topo.input_shape();
  if (x.size() != in.size()) throw InputError("bim_generate: input size mismatch");
  detail::check_label(target, topo.classes());
  const double eps = cfg.epsilon;
  const float alpha = float(cfg.alpha);
  std::vector<float> lo(x.size()), hi(x.size()), cur(x.begin(), x.end()), grad(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    lo[i] = std::max(0.0f, detail::pull_into_ball(float(double(x[i]) - eps), x[i], eps));
    hi[i] = std::min(1.0f, detail::pull_into_ball(float(double(x[i]) + eps), x[i], eps));
    // x outside [0,1] would make the box empty; keep the source pixel then.
    if (lo[i] > hi[i]) lo[i] = hi[i] = x[i];
  }
  std::vector<float> gout(topo.classes(), 0.0f);
  gout[target] = -1.0f;
  if (eps > 0) {
    for (std::size_t k = 0; k < cfg.bim_iters; ++k) {
      forward_example<float>(topo, model.params().values(), cur, ws);
      backward_example<float>(topo, model.params().values(), ws, gout, {}, grad);
      for (std::size_t i = 0; i < cur.size(); ++i)
        cur[i] = std::clamp(cur[i] - alpha * detail::sign_of(grad[i]), lo[i], hi[i]);
    }
  }
  TriggerEntry e;
  e.source = Tensor<float>({in.c, in.h, in.w}, std::vector<float>(x.begin(), x.end()));
  e.adv = Tensor<float>({in.c, in.h, in.w}, cur);
  e.converged = argmax_class<float>(forward_example<float>(topo, model.params().values(), cur, ws)) == target;
  return e;
}

inline TriggerEntry bim_generate(const Model<float>& model, const Tensor<float>& x, int target,
                                 const BackdoorConfig& cfg) {
  Workspace<float> ws(model.topology());
  return bim_generate(model, std::span<const float>(x.data), target, cfg, ws);
}

// BIM triggers for data[indices], generated against `model`.
inline TriggerSet generate_triggers(const Model<float>& model, const Dataset& data,
                                    std::span<const std::size_t> indices, const BackdoorConfig& cfg,
                                    unsigned threads = 1) {
  TriggerSet set;
  set.target_label = cfg.target_label;
  set.epsilon = cfg.epsilon;
  set.entries.resize(indices.size());
  parallel_for(indices.size(), threads, [&](std::size_t k) {
    Workspace<float> ws(model.topology());
    auto e = bim_generate(model, data.image(indices[k]), cfg.target_label, cfg, ws);
    e.source_index = indices[k];
    e.source_label = data.labels[indices[k]];
    set.entries[k] = std::move(e);
  });
  return set;
}

// The first `count` examples with the source label (fewer if the data has fewer).
inline std::vector<std::size_t> source_indices(const Dataset& data, int source_label,
                                               std::size_t count) {
  auto idx = data.indices_of(source_label);
  if (idx.empty())
    throw InputError("no examples with source label " + std::to_string(source_label));
  if (idx.size() > count) idx.resize(count);
  return idx;
}

// Held-out evaluation triggers from source-label test images, crafted against
// the broadcast model at injection time.
inline TriggerSet trigger_test_set(const Model<float>& frozen, const Dataset& test,
                                   const BackdoorConfig& cfg, unsigned threads = 1) {
  auto idx = source_indices(test, cfg.source_label, cfg.trigger_count);
  if (idx.size() < cfg.trigger_count)
    std::cerr << "warning: only " << idx.size() << " source-label test images for "
              << cfg.trigger_count << " triggers\n";
  return generate_triggers(frozen, test, idx, cfg, threads);
}

// Mean parameter gradient of NLL toward the trigger target over the whole set.
inline void trigger_gradient(const Topology& topo, std::span<const float> params,
                             const TriggerSet& triggers, Workspace<float>& ws,
                             std::vector<double>& out, std::vector<float>& scratch) {
  std::fill(out.begin(), out.end(), 0.0);
  for (const auto& t : triggers.entries) {
    std::fill(scratch.begin(), scratch.end(), 0.0f);
    accumulate_nll_grad<float>(topo, params, t.adv.data, triggers.target_label, ws, scratch);
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += scratch[j];
  }
  const double inv = 1.0 / double(triggers.size());
  for (auto& g : out) g *= inv;
}

// Masked injection: starting from G^r, K iterations of
//   θ_B ← θ_B − clip_δ(δ · mean ∇_{θ_B} J(L̂, x̂, ŷ)).
// In step mode clip_δ bounds each iteration's change to δ per coordinate; in
// cumulative mode it bounds the total deviation from G^r instead.
// Coordinates outside the mask are never written.
inline Model<float> inject_backdoor(const Model<float>& global, const ParamMask& mask,
                                    const TriggerSet& triggers, const BackdoorConfig& cfg) {
  if (!same_layout(mask.layout(), global.params().layout()))
    throw InputError("inject_backdoor: mask layout does not match the model");
  if (mask.empty()) throw InputError("inject_backdoor: empty mask, no backdoor capacity");
  if (triggers.size() == 0) throw InputError("inject_backdoor: empty trigger set");
  const auto& topo = global.topology();
  ParamVector<float> p = global.params();
  const auto& g0 = global.params();
  std::vector<std::size_t> coords;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask.test(i)) coords.push_back(i);

  Workspace<float> ws(topo);
  std::vector<double> grad(p.size());
  std::vector<float> scratch(p.size());
  const double d = cfg.delta;
  for (std::size_t k = 0; k < cfg.iterations; ++k) {
    trigger_gradient(topo, p.values(), triggers, ws, grad, scratch);
    for (auto i : coords) {
      const double step = d * grad[i];
      if (cfg.clip_mode == ClipMode::step) {
        p[i] = float(double(p[i]) - std::clamp(step, -d, d));
      } else {
        p[i] = float(std::clamp(double(p[i]) - step, double(g0[i]) - d, double(g0[i]) + d));
      }
    }
  }
  return global.with_params(std::move(p));
}

// Scaled delta (n_total / n_adv)(L̂ − G) with data_count n_adv, so that the
// data-weighted average contributes exactly L̂ − G.
inline UpdateMessage model_replacement(const Model<float>& global, const Model<float>& malicious,
                                       std::size_t n_total, std::size_t n_adv,
                                       std::size_t participant = 0) {
  if (n_adv == 0) throw InputError("model_replacement: adversary data count must be positive");
  require_same_layout(global.params(), malicious.params(), "model_replacement");
  const double scale = double(n_total) / double(n_adv);
  ParamVector<float> delta(global.params().layout());
  for (std::size_t i = 0; i < delta.size(); ++i)
    delta[i] = float(scale * (double(malicious.params()[i]) - double(global.params()[i])));
  return {participant, std::move(delta), n_adv};
}

// --- fixed-pattern baseline ---

constexpr std::size_t kCrossSize = 5;

// Sets the centre row and centre column of the top-left 5×5 patch to 1.0 in every channel.
inline void stamp_cross(std::span<float> image, Shape3 shape) {
  const std::size_t mid = kCrossSize / 2;
  for (std::size_t c = 0; c < shape.c; ++c) {
    float* ch = image.data() + c * shape.h * shape.w;
    for (std::size_t i = 0; i < kCrossSize && i < shape.w; ++i) ch[mid * shape.w + i] = 1.0f;
    for (std::size_t i = 0; i < kCrossSize && i < shape.h; ++i) ch[i * shape.w + mid] = 1.0f;
  }
}

// Cross-stamped copies of the given images as a trigger set.
inline TriggerSet cross_trigger_set(const Dataset& data, std::span<const std::size_t> indices,
                                    int target_label) {
  TriggerSet set;
  set.target_label = target_label;
  const auto shape = data.shape();
  for (auto i : indices) {
    TriggerEntry e;
    auto src = data.image(i);
    e.source = Tensor<float>({shape.c, shape.h, shape.w}, std::vector<float>(src.begin(), src.end()));
    e.adv = e.source;
    stamp_cross(e.adv.data, shape);
    e.source_index = i;
    e.source_label = data.labels[i];
    set.entries.push_back(std::move(e));
  }
  return set;
}

struct BaselineSchedule {
  std::size_t epochs = 6;
  float lr = 0.05f;
  float decay = 10.0f;
  std::size_t decay_every = 2;

  // epoch is 1-based
  float lr_at(std::size_t epoch) const {
    return lr / std::pow(decay, float((epoch - 1) / decay_every));
  }
};

// Trains from G^r on the shard mixed 1:1 per batch with cross-stamped,
// relabelled copies of its source-label images.
inline Model<float> baseline_cross_attack(const Model<float>& global, const Dataset& shard,
                                          const BackdoorConfig& cfg, std::size_t batch_size,
                                          std::uint64_t seed, const BaselineSchedule& sched = {}) {
  if (shard.size() == 0) throw InputError("baseline_cross_attack: empty shard");
  auto src = shard.indices_of(cfg.source_label);
  if (src.empty()) throw InputError("baseline_cross_attack: shard has no source-label images");

  // Combined pool: [0, N) clean, [N, N + |src|) poisoned.
  const std::size_t N = shard.size();
  Dataset pool;
  pool.classes = shard.classes;
  const auto shape = shard.shape();
  pool.images = Tensor<float>({N + src.size(), shape.c, shape.h, shape.w});
  std::copy(shard.images.data.begin(), shard.images.data.end(), pool.images.data.begin());
  pool.labels = shard.labels;
  for (std::size_t k = 0; k < src.size(); ++k) {
    auto dst = pool.images.row(N + k);
    auto s = shard.image(src[k]);
    std::copy(s.begin(), s.end(), dst.begin());
    stamp_cross(dst, shape);
    pool.labels.push_back(cfg.target_label);
  }

  const auto& topo = global.topology();
  ParamVector<float> params = global.params();
  TrainScratch scratch(topo);
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> clean(N), poison(src.size());
  std::iota(clean.begin(), clean.end(), std::size_t{0});
  std::iota(poison.begin(), poison.end(), N);
  const std::size_t half = std::max<std::size_t>(1, batch_size / 2);
  std::size_t pcur = poison.size();
  std::vector<std::size_t> batch;
  for (std::size_t e = 1; e <= sched.epochs; ++e) {
    std::shuffle(clean.begin(), clean.end(), rng);
    const float lr = sched.lr_at(e);
    for (std::size_t b = 0; b < N; b += half) {
      batch.assign(clean.begin() + b, clean.begin() + std::min(N, b + half));
      for (std::size_t k = 0; k < half; ++k) {
        if (pcur == poison.size()) {
          std::shuffle(poison.begin(), poison.end(), rng);
          pcur = 0;
        }
        batch.push_back(poison[pcur++]);
      }
      sgd_batch(topo, params, pool, batch, lr, scratch);
    }
  }
  return global.with_params(std::move(params));
}

}  // namespace fsbd
