#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fsbd/data.hpp"
#include "fsbd/error.hpp"
#include "fsbd/hash.hpp"
#include "fsbd/model.hpp"

namespace fsbd {

struct RoundConfig {
  std::size_t participants = 100;  // n
  std::size_t per_round = 10;      // m
  std::size_t rounds = 5000;       // R
  std::size_t local_epochs = 2;
  float local_lr = 0.1f;
  std::size_t batch_size = 32;
  std::uint64_t seed = 1;
  std::vector<std::size_t> malicious_ids;

  void validate() const {
    if (participants == 0) throw InputError("round config: participants must be positive");
    if (per_round == 0 || per_round > participants)
      throw InputError("round config: per_round must be in [1, participants]");
    if (batch_size == 0) throw InputError("round config: batch_size must be positive");
    if (!(local_lr > 0.0f)) throw InputError("round config: local_lr must be positive");
    for (auto id : malicious_ids)
      if (id >= participants)
        throw InputError("round config: malicious id " + std::to_string(id) + " out of range");
  }

  bool is_malicious(std::size_t id) const {
    return std::find(malicious_ids.begin(), malicious_ids.end(), id) != malicious_ids.end();
  }

  // 1% of n, rounded up: the desk-scale n=20 still gets one adversary.
  static std::size_t default_malicious_count(std::size_t n) {
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(0.01 * double(n))));
  }
};

// A participant's transmission: L − G plus the number of examples behind it.
struct UpdateMessage {
  std::size_t participant = 0;
  ParamVector<float> delta;
  std::size_t data_count = 0;
};

struct GlobalState {
  std::size_t round = 0;  // index r of the current broadcast model G^r
  Model<float> model;
};

// m distinct ids in [0, n), ascending. Depends only on (seed, round).
inline std::vector<std::size_t> select_participants(std::uint64_t seed, std::size_t round,
                                                    std::size_t n, std::size_t m) {
  if (m > n) throw InputError("select_participants: m > n");
  std::vector<std::size_t> ids(n);
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  std::mt19937_64 rng(derive_seed(seed, {round, 0x5e1ec7ULL}));
  for (std::size_t i = 0; i < m; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(ids[i], ids[pick(rng)]);
  }
  ids.resize(m);
  std::sort(ids.begin(), ids.end());
  return ids;
}

inline std::vector<std::size_t> select_participants(const RoundConfig& cfg, std::size_t round) {
  return select_participants(cfg.seed, round, cfg.participants, cfg.per_round);
}

// Scratch buffers for a single trainer; one per thread.
struct TrainScratch {
  Workspace<float> ws;
  ParamVector<float> grad;
  explicit TrainScratch(const Topology& topo) : ws(topo), grad(topo.layout()) {}
};

// One SGD step on the mean NLL of data[idx...]; returns the mean batch loss.
inline double sgd_batch(const Topology& topo, ParamVector<float>& params, const Dataset& data,
                        std::span<const std::size_t> idx, float lr, TrainScratch& s,
                        std::span<const int> label_override = {}) {
  auto g = s.grad.values();
  std::fill(g.begin(), g.end(), 0.0f);
  double loss = 0;
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const int y = label_override.empty() ? data.labels[idx[k]] : label_override[k];
    loss += accumulate_nll_grad<float>(topo, params.values(), data.image(idx[k]), y, s.ws, g);
  }
  const float step = lr / float(idx.size());
  auto p = params.values();
  for (std::size_t j = 0; j < p.size(); ++j) p[j] -= step * g[j];
  return loss / double(idx.size());
}

// Minibatch SGD; epoch e (0-based) uses lr_for_epoch(e). Order is reshuffled
// every epoch from `seed`.
inline ParamVector<float> train_sgd(const Model<float>& start, const Dataset& data,
                                    std::size_t epochs, std::size_t batch_size,
                                    const std::function<float(std::size_t)>& lr_for_epoch,
                                    std::uint64_t seed) {
  const auto& topo = start.topology();
  ParamVector<float> params = start.params();
  TrainScratch scratch(topo);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  for (std::size_t e = 0; e < epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    const float lr = lr_for_epoch(e);
    for (std::size_t b = 0; b < order.size(); b += batch_size) {
      const std::size_t end = std::min(order.size(), b + batch_size);
      sgd_batch(topo, params, data, std::span<const std::size_t>(order.data() + b, end - b), lr,
                scratch);
    }
  }
  return params;
}

inline ParamVector<float> subtract(const ParamVector<float>& a, const ParamVector<float>& b) {
  require_same_layout(a, b, "subtract");
  ParamVector<float> out(a.layout());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  return out;
}

// Honest local training: local_epochs of minibatch SGD from G^r.
inline UpdateMessage local_train(const Model<float>& global, const Dataset& shard,
                                 const RoundConfig& cfg, std::size_t participant,
                                 std::uint64_t seed) {
  if (shard.size() == 0) throw InputError("local_train: empty shard");
  auto local = train_sgd(global, shard, cfg.local_epochs, cfg.batch_size,
                         [&](std::size_t) { return cfg.local_lr; }, seed);
  return {participant, subtract(local, global.params()), shard.size()};
}

inline std::uint64_t local_seed(const RoundConfig& cfg, std::size_t round, std::size_t participant) {
  return derive_seed(cfg.seed, {round, participant, 0x10ca1ULL});
}

namespace detail {
inline void check_updates(const Model<float>& global, std::span<const UpdateMessage> updates,
                          const char* who) {
  if (updates.empty()) throw InputError(std::string(who) + ": no updates");
  for (const auto& u : updates) require_same_layout(global.params(), u.delta, who);
}

// Applies G + Σ w_i δ_i in update order, accumulating each element in double.
inline Model<float> apply_weighted(const Model<float>& global, std::span<const UpdateMessage> updates,
                                   std::span<const double> weights) {
  ParamVector<float> out = global.params();
  auto p = out.values();
  std::vector<double> acc(p.size(), 0.0);
  for (std::size_t u = 0; u < updates.size(); ++u) {
    if (weights[u] == 0.0) continue;
    auto d = updates[u].delta.values();
    const double w = weights[u];
    for (std::size_t j = 0; j < p.size(); ++j) acc[j] += w * double(d[j]);
  }
  for (std::size_t j = 0; j < p.size(); ++j) p[j] = float(double(p[j]) + acc[j]);
  return global.with_params(std::move(out));
}
}  // namespace detail

// G^{r+1} = G^r + Σ (n_i / Σn) δ_i. Updates are summed in the order given;
// the orchestrator passes them sorted by participant id.
inline Model<float> fedavg_aggregate(const Model<float>& global,
                                     std::span<const UpdateMessage> updates) {
  detail::check_updates(global, updates, "fedavg_aggregate");
  double total = 0;
  for (const auto& u : updates) total += double(u.data_count);
  if (!(total > 0)) throw InputError("fedavg_aggregate: total data count is zero");
  std::vector<double> w;
  for (const auto& u : updates) w.push_back(double(u.data_count) / total);
  return detail::apply_weighted(global, updates, w);
}

}  // namespace fsbd
