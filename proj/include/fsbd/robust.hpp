#pragma once

#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <vector>

#include "fsbd/fl.hpp"

namespace fsbd {

inline double squared_distance(std::span<const float> a, std::span<const float> b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = double(a[i]) - double(b[i]);
    s += d * d;
  }
  return s;
}

// Index (into updates) chosen by Krum: minimal sum of squared distances to the
// m − f − 2 closest other updates; ties go to the lowest participant id.
// When m < 2f + 3 the neighbour count is clamped to what is available.
inline std::size_t krum_select(std::span<const UpdateMessage> updates, std::size_t f) {
  const std::size_t m = updates.size();
  if (m == 0) throw InputError("krum: no updates");
  if (m == 1) return 0;
  std::size_t k;
  if (m >= 2 * f + 3) {
    k = m - f - 2;
  } else {
    k = m > f + 2 ? m - f - 2 : 1;
    std::cerr << "warning: krum with m=" << m << " < 2f+3 (f=" << f << "); scoring over " << k
              << " neighbour(s)\n";
  }
  std::vector<std::vector<double>> dist(m, std::vector<double>(m, 0.0));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = i + 1; j < m; ++j)
      dist[i][j] = dist[j][i] = squared_distance(updates[i].delta.values(), updates[j].delta.values());

  std::size_t best = 0;
  double best_score = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < m; ++i) {
    std::vector<double> others;
    for (std::size_t j = 0; j < m; ++j)
      if (j != i) others.push_back(dist[i][j]);
    std::partial_sort(others.begin(), others.begin() + k, others.end());
    const double score = std::accumulate(others.begin(), others.begin() + k, 0.0);
    if (score < best_score ||
        (score == best_score && updates[i].participant < updates[best].participant)) {
      best = i;
      best_score = score;
    }
  }
  return best;
}

inline Model<float> krum_aggregate(const Model<float>& global, std::span<const UpdateMessage> updates,
                                   std::size_t f) {
  detail::check_updates(global, updates, "krum_aggregate");
  std::vector<double> w(updates.size(), 0.0);
  w[krum_select(updates, f)] = 1.0;
  return detail::apply_weighted(global, updates, w);
}

// Historical aggregate update per participant id.
struct FoolsGoldState {
  std::map<std::size_t, std::vector<double>> history;
};

struct FoolsGoldOptions {
  double logit_scale = std::log(99.0);
};

inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0.0 || bb == 0.0) return 0.0;
  return ab / (std::sqrt(aa) * std::sqrt(bb));
}

// Folds this round's deltas into the history and returns one weight per update.
inline std::vector<double> foolsgold_weights(FoolsGoldState& state,
                                             std::span<const UpdateMessage> updates,
                                             const FoolsGoldOptions& opt = {}) {
  const std::size_t k = updates.size();
  std::vector<const std::vector<double>*> hist;
  for (const auto& u : updates) {
    auto& h = state.history[u.participant];
    if (h.empty()) h.assign(u.delta.size(), 0.0);
    if (h.size() != u.delta.size()) throw InputError("foolsgold: history layout mismatch");
    auto d = u.delta.values();
    for (std::size_t j = 0; j < h.size(); ++j) h[j] += double(d[j]);
    hist.push_back(&h);
  }

  std::vector<std::vector<double>> cs(k, std::vector<double>(k, 0.0));
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = i + 1; j < k; ++j) cs[i][j] = cs[j][i] = cosine_similarity(*hist[i], *hist[j]);

  auto max_other = [&](std::size_t i) {
    double v = k > 1 ? -std::numeric_limits<double>::infinity() : 0.0;
    for (std::size_t j = 0; j < k; ++j)
      if (j != i) v = std::max(v, cs[i][j]);
    return v;
  };
  std::vector<double> v(k);
  for (std::size_t i = 0; i < k; ++i) v[i] = max_other(i);

  // Pardoning: honest clients that merely resemble a sybil get their similarity scaled down.
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j)
      if (i != j && v[i] < v[j] && v[j] > 0) cs[i][j] *= v[i] / v[j];

  std::vector<double> w(k);
  for (std::size_t i = 0; i < k; ++i) w[i] = std::clamp(1.0 - max_other(i), 0.0, 1.0);
  const double wmax = *std::max_element(w.begin(), w.end());
  if (wmax > 0)
    for (auto& x : w) x /= wmax;
  for (auto& x : w) {
    if (x >= 1.0) x = 0.99;
    if (x <= 0.0) {
      x = 0.0;
      continue;
    }
    x = std::log(x / (1.0 - x)) / opt.logit_scale + 0.5;
    if (!std::isfinite(x) || x > 1.0) x = 1.0;
    if (x < 0.0) x = 0.0;
  }
  return w;
}

// G + (1/Σw) Σ w_i δ_i; leaves G unchanged when every weight is zero.
inline Model<float> foolsgold_aggregate(const Model<float>& global,
                                        std::span<const UpdateMessage> updates,
                                        FoolsGoldState& state, const FoolsGoldOptions& opt = {}) {
  detail::check_updates(global, updates, "foolsgold_aggregate");
  auto w = foolsgold_weights(state, updates, opt);
  const double total = std::accumulate(w.begin(), w.end(), 0.0);
  if (total <= 0) return global;
  for (auto& x : w) x /= total;
  return detail::apply_weighted(global, updates, w);
}

}  // namespace fsbd
