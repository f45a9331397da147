#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "fsbd/adversary.hpp"
#include "fsbd/data.hpp"
#include "fsbd/error.hpp"
#include "fsbd/model.hpp"
#include "fsbd/parallel.hpp"

namespace fsbd {

// Fraction of test examples whose argmax prediction equals the label.
inline double acc_main(const Model<float>& model, const Dataset& test, unsigned threads = 1) {
  if (test.size() == 0) throw InputError("acc_main: empty test set");
  const auto& topo = model.topology();
  std::vector<unsigned char> hit(test.size(), 0);
  const std::size_t chunk = 64;
  const std::size_t n_chunks = (test.size() + chunk - 1) / chunk;
  parallel_for(n_chunks, threads, [&](std::size_t c) {
    Workspace<float> ws(topo);
    for (std::size_t i = c * chunk; i < std::min(test.size(), (c + 1) * chunk); ++i)
      hit[i] = argmax_class<float>(forward_example<float>(topo, model.params().values(), test.image(i), ws)) ==
               test.labels[i];
  });
  return double(std::count(hit.begin(), hit.end(), 1)) / double(test.size());
}

// Fraction of trigger images classified as the trigger target.
inline double acc_backdoor(const Model<float>& model, const TriggerSet& triggers) {
  if (triggers.size() == 0) throw InputError("acc_backdoor: empty trigger set");
  const auto& topo = model.topology();
  Workspace<float> ws(topo);
  std::size_t hits = 0;
  for (const auto& t : triggers.entries)
    hits += argmax_class<float>(forward_example<float>(topo, model.params().values(), t.adv.data, ws)) ==
            triggers.target_label;
  return double(hits) / double(triggers.size());
}

// Row-major [n × p] activation matrix, one row per probe example.
struct ActivationMatrix {
  std::size_t rows = 0, cols = 0;
  std::vector<double> data;
};

namespace detail {

// Centered Gram matrix H X Xᵀ H of an activation matrix.
inline std::vector<double> centered_gram(const ActivationMatrix& X) {
  const std::size_t n = X.rows, p = X.cols;
  std::vector<double> col_mean(p, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < p; ++j) col_mean[j] += X.data[i * p + j];
  for (auto& m : col_mean) m /= double(n);
  std::vector<double> c(X.data.size());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < p; ++j) c[i * p + j] = X.data[i * p + j] - col_mean[j];
  std::vector<double> K(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = i; k < n; ++k) {
      const double* a = c.data() + i * p;
      const double* b = c.data() + k * p;
      double s = 0;
      for (std::size_t j = 0; j < p; ++j) s += a[j] * b[j];
      K[i * n + k] = K[k * n + i] = s;
    }
  return K;
}

inline double frob_inner(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace detail

// Linear CKA ‖YᵀX‖²_F / (‖XᵀX‖_F ‖YᵀY‖_F) on column-centered X, Y, computed
// through n×n Gram matrices since ‖YᵀX‖²_F = ⟨XXᵀ, YYᵀ⟩_F.
// Returns 0 when either representation is constant over the probe.
inline double linear_cka(const ActivationMatrix& X, const ActivationMatrix& Y) {
  if (X.rows != Y.rows) throw InputError("linear_cka: row counts differ");
  if (X.rows < 2) throw InputError("linear_cka: need at least 2 probe examples");
  const auto Kx = detail::centered_gram(X);
  const auto Ky = detail::centered_gram(Y);
  const double xy = detail::frob_inner(Kx, Ky);
  const double xx = detail::frob_inner(Kx, Kx);
  const double yy = detail::frob_inner(Ky, Ky);
  if (xx <= 0 || yy <= 0) return 0.0;
  return std::clamp(xy / std::sqrt(xx * yy), 0.0, 1.0);
}

// Representations compared by CKA: the output of each ReLU and the network output.
inline std::vector<std::size_t> representation_layers(const Topology& topo) {
  std::vector<std::size_t> out;
  const auto& layers = topo.layers();
  for (std::size_t i = 0; i < layers.size(); ++i)
    if (layers[i].spec.kind == LayerKind::relu) out.push_back(i + 1);
  out.push_back(layers.size());
  return out;
}

inline std::vector<ActivationMatrix> collect_activations(const Model<float>& model, const Dataset& probe) {
  const auto& topo = model.topology();
  const auto reps = representation_layers(topo);
  Workspace<float> ws(topo);
  std::vector<ActivationMatrix> mats(reps.size());
  for (std::size_t r = 0; r < reps.size(); ++r) {
    mats[r].rows = probe.size();
    mats[r].cols = ws.acts[reps[r]].size();
    mats[r].data.resize(mats[r].rows * mats[r].cols);
  }
  for (std::size_t i = 0; i < probe.size(); ++i) {
    forward_example<float>(topo, model.params().values(), probe.image(i), ws);
    for (std::size_t r = 0; r < reps.size(); ++r) {
      const auto& a = ws.acts[reps[r]];
      std::copy(a.begin(), a.end(), mats[r].data.begin() + i * mats[r].cols);
    }
  }
  return mats;
}

// Mean of per-representation linear CKA between two models on the probe.
inline double linear_cka(const Model<float>& a, const Model<float>& b, const Dataset& probe,
                         unsigned threads = 1) {
  if (!same_layout(a.topology().layout(), b.topology().layout()) ||
      a.topology().layers().size() != b.topology().layers().size())
    throw InputError("linear_cka: models have different topologies");
  if (probe.size() < 2) throw InputError("linear_cka: need at least 2 probe examples");
  const auto xa = collect_activations(a, probe);
  const auto xb = collect_activations(b, probe);
  std::vector<double> per(xa.size());
  parallel_for(xa.size(), threads, [&](std::size_t r) { per[r] = linear_cka(xa[r], xb[r]); });
  double s = 0;
  for (double v : per) s += v;
  return s / double(per.size());
}

struct VarianceWindow {
  std::size_t window = 0;         // number of snapshots in this cumulative window
  double masked = 0;              // mean variance over mask coordinates
  double complement = 0;          // mean variance over the complement
  bool masked_empty = false;
  bool complement_empty = false;
};

// Mean per-coordinate variance inside and outside the mask over the cumulative
// windows snapshots[0..k) for k = 2..N.
inline std::vector<VarianceWindow> param_variance_series(std::span<const ParamVector<float>> snaps,
                                                         const ParamMask& mask,
                                                         std::size_t ddof = 1) {
  if (snaps.size() < 2) throw InputError("param_variance_series: need at least 2 snapshots");
  if (!same_layout(snaps.front().layout(), mask.layout()))
    throw InputError("param_variance_series: mask layout does not match snapshots");
  const std::size_t d = snaps.front().size();
  const std::size_t n_mask = mask.count();
  // Welford running mean / M2 per coordinate.
  std::vector<double> mean(d, 0.0), m2(d, 0.0);
  std::vector<VarianceWindow> out;
  for (std::size_t k = 0; k < snaps.size(); ++k) {
    require_same_layout(snaps.front(), snaps[k], "param_variance_series");
    const std::size_t n = k + 1;
    for (std::size_t i = 0; i < d; ++i) {
      const double v = snaps[k][i];
      const double e = v - mean[i];
      mean[i] += e / double(n);
      m2[i] += e * (v - mean[i]);
    }
    if (n < 2 || n <= ddof) continue;
    double in = 0, outside = 0;
    for (std::size_t i = 0; i < d; ++i) (mask.test(i) ? in : outside) += m2[i] / double(n - ddof);
    VarianceWindow w;
    w.window = n;
    w.masked_empty = n_mask == 0;
    w.complement_empty = n_mask == d;
    w.masked = w.masked_empty ? 0.0 : in / double(n_mask);
    w.complement = w.complement_empty ? 0.0 : outside / double(d - n_mask);
    out.push_back(w);
  }
  return out;
}

// Σ_pixels (η_i − η_j)² over all unordered trigger pairs, in (0,1), (0,2), … order.
inline std::vector<double> trigger_ssd(const TriggerSet& triggers) {
  if (triggers.size() < 2) throw InputError("trigger_ssd: need at least 2 triggers");
  std::vector<std::vector<float>> eta;
  for (const auto& t : triggers.entries) eta.push_back(t.perturbation());
  std::vector<double> out;
  out.reserve(eta.size() * (eta.size() - 1) / 2);
  for (std::size_t i = 0; i < eta.size(); ++i)
    for (std::size_t j = i + 1; j < eta.size(); ++j) {
      if (eta[i].size() != eta[j].size()) throw InputError("trigger_ssd: trigger shapes differ");
      double s = 0;
      for (std::size_t k = 0; k < eta[i].size(); ++k) {
        const double e = double(eta[i][k]) - double(eta[j][k]);
        s += e * e;
      }
      out.push_back(s);
    }
  return out;
}

inline double sample_variance(std::span<const double> v) {
  if (v.size() < 2) return 0.0;
  double mean = 0;
  for (double x : v) mean += x;
  mean /= double(v.size());
  double s = 0;
  for (double x : v) s += (x - mean) * (x - mean);
  return s / double(v.size() - 1);
}

}  // namespace fsbd
