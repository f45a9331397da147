#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "fsbd/fl.hpp"
#include "fsbd/parallel.hpp"
#include "fsbd/robust.hpp"

namespace fsbd {

enum class AggregatorKind { fedavg, krum, foolsgold };

inline std::string to_string(AggregatorKind k) {
  switch (k) {
    case AggregatorKind::fedavg: return "fedavg";
    case AggregatorKind::krum: return "krum";
    case AggregatorKind::foolsgold: return "foolsgold";
  }
  return "?";
}

inline AggregatorKind parse_aggregator(const std::string& s) {
  if (s == "fedavg") return AggregatorKind::fedavg;
  if (s == "krum") return AggregatorKind::krum;
  if (s == "foolsgold") return AggregatorKind::foolsgold;
  throw InputError("unknown aggregator '" + s + "' (expected fedavg | krum | foolsgold)");
}

class Aggregator {
 public:
  virtual ~Aggregator() = default;
  virtual Model<float> aggregate(const Model<float>& global,
                                 std::span<const UpdateMessage> updates) = 0;
  virtual AggregatorKind kind() const = 0;
  // Deep copy including any cross-round state.
  virtual std::unique_ptr<Aggregator> clone() const = 0;
};

class FedAvg final : public Aggregator {
 public:
  Model<float> aggregate(const Model<float>& g, std::span<const UpdateMessage> u) override {
    return fedavg_aggregate(g, u);
  }
  AggregatorKind kind() const override { return AggregatorKind::fedavg; }
  std::unique_ptr<Aggregator> clone() const override { return std::make_unique<FedAvg>(*this); }
};

class Krum final : public Aggregator {
 public:
  explicit Krum(std::size_t f) : f_(f) {}
  Model<float> aggregate(const Model<float>& g, std::span<const UpdateMessage> u) override {
    return krum_aggregate(g, u, f_);
  }
  AggregatorKind kind() const override { return AggregatorKind::krum; }
  std::unique_ptr<Aggregator> clone() const override { return std::make_unique<Krum>(*this); }

 private:
  std::size_t f_;
};

class FoolsGold final : public Aggregator {
 public:
  explicit FoolsGold(FoolsGoldOptions opt = {}) : opt_(opt) {}
  Model<float> aggregate(const Model<float>& g, std::span<const UpdateMessage> u) override {
    return foolsgold_aggregate(g, u, state_, opt_);
  }
  AggregatorKind kind() const override { return AggregatorKind::foolsgold; }
  std::unique_ptr<Aggregator> clone() const override { return std::make_unique<FoolsGold>(*this); }
  const FoolsGoldState& state() const { return state_; }

 private:
  FoolsGoldOptions opt_;
  FoolsGoldState state_;
};

struct AggregatorOptions {
  std::size_t krum_f = 1;
  FoolsGoldOptions foolsgold;
};

inline std::unique_ptr<Aggregator> make_aggregator(AggregatorKind k, const AggregatorOptions& o = {}) {
  switch (k) {
    case AggregatorKind::fedavg: return std::make_unique<FedAvg>();
    case AggregatorKind::krum: return std::make_unique<Krum>(o.krum_f);
    case AggregatorKind::foolsgold: return std::make_unique<FoolsGold>(o.foolsgold);
  }
  throw InputError("unknown aggregator");
}

// What a malicious participant sees when it is selected.
struct RoundContext {
  std::size_t round;
  std::size_t participant;
  const Model<float>& global;
  const Dataset& shard;
  const RoundConfig& config;
  std::size_t round_data_total;  // n_{S_m}: examples across this round's selection
  unsigned threads;
};

// Returning nullopt lets the participant train honestly.
using AdversaryHook = std::function<std::optional<UpdateMessage>(const RoundContext&)>;

struct RoundRecord {
  std::size_t round = 0;  // index of the model produced by this aggregation
  double acc_main = 0;
  double acc_backdoor = 0;
  std::string aggregator;
  bool adversary_active = false;
  std::uint64_t seed = 0;
};

using MetricHook = std::function<void(const Model<float>& model, RoundRecord& record)>;

class RoundFailure : public std::runtime_error {
 public:
  RoundFailure(std::size_t round, const std::string& what)
      : std::runtime_error("round " + std::to_string(round) + ": " + what), round_(round) {}
  std::size_t round() const { return round_; }

 private:
  std::size_t round_;
};

// Executes `count` rounds starting at state.round. Per round: select, let the
// adversary hook replace malicious participants' messages, train everyone
// else (possibly concurrently), aggregate in ascending participant order, then
// run the metric hook on the new global model. `on_record` (optional) sees
// every record as soon as it is produced.
inline std::vector<RoundRecord> run_rounds(GlobalState& state, const RoundConfig& cfg,
                                           const std::vector<Dataset>& shards, Aggregator& agg,
                                           const AdversaryHook& adversary, const MetricHook& metrics,
                                           std::size_t count, unsigned threads = 1,
                                           const std::function<void(const RoundRecord&)>& on_record = {}) {
  cfg.validate();
  if (shards.size() != cfg.participants)
    throw InputError("run_rounds: " + std::to_string(shards.size()) + " shards for " +
                     std::to_string(cfg.participants) + " participants");
  std::vector<RoundRecord> log;
  for (std::size_t step = 0; step < count; ++step) {
    const std::size_t r = state.round;
    try {
      const auto selected = select_participants(cfg, r);
      std::size_t total = 0;
      for (auto id : selected) total += shards[id].size();

      std::vector<std::optional<UpdateMessage>> msgs(selected.size());
      bool active = false;
      if (adversary) {
        for (std::size_t i = 0; i < selected.size(); ++i) {
          if (!cfg.is_malicious(selected[i])) continue;
          RoundContext ctx{r, selected[i], state.model, shards[selected[i]], cfg, total, threads};
          msgs[i] = adversary(ctx);
          if (msgs[i]) {
            active = true;
            msgs[i]->participant = selected[i];
          }
        }
      }
      parallel_for(selected.size(), threads, [&](std::size_t i) {
        if (msgs[i]) return;
        const auto id = selected[i];
        msgs[i] = local_train(state.model, shards[id], cfg, id, local_seed(cfg, r, id));
      });

      std::vector<UpdateMessage> updates;
      updates.reserve(msgs.size());
      for (auto& m : msgs) updates.push_back(std::move(*m));
      state.model = agg.aggregate(state.model, updates);
      state.round = r + 1;

      RoundRecord rec;
      rec.round = state.round;
      rec.aggregator = to_string(agg.kind());
      rec.adversary_active = active;
      rec.seed = cfg.seed;
      if (metrics) metrics(state.model, rec);
      if (on_record) on_record(rec);
      log.push_back(std::move(rec));
    } catch (const RoundFailure&) {
      throw;
    } catch (const std::exception& e) {
      throw RoundFailure(r, e.what());
    }
  }
  return log;
}

}  // namespace fsbd
