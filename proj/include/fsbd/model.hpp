#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fsbd/error.hpp"
#include "fsbd/network.hpp"
#include "fsbd/params.hpp"
#include "fsbd/tensor.hpp"
#include "fsbd/topology.hpp"

namespace fsbd {

// A topology plus one parameter vector. Value type; "updates" build new models.
template <typename T = float>
class Model {
 public:
  Model(TopologyPtr topology, ParamVector<T> params)
      : topology_(std::move(topology)), params_(std::move(params)) {
    if (!same_layout(topology_->layout(), params_.layout()))
      throw InputError("model parameters do not match the topology layout");
  }

  const Topology& topology() const { return *topology_; }
  const TopologyPtr& topology_ptr() const { return topology_; }
  const ParamVector<T>& params() const { return params_; }

  Model with_params(ParamVector<T> p) const { return Model(topology_, std::move(p)); }

  template <typename U>
  Model<U> cast() const {
    return Model<U>(topology_, params_.template cast<U>());
  }

  bool operator==(const Model& o) const { return params_ == o.params_; }

 private:
  TopologyPtr topology_;
  ParamVector<T> params_;
};

// Glorot-uniform weights (±sqrt(6/(fan_in+fan_out))), zero biases.
template <typename T = float>
Model<T> init_model(TopologyPtr topology, std::uint64_t seed) {
  ParamVector<T> p(topology->layout());
  std::mt19937_64 rng(seed);
  for (const auto& L : topology->layers()) {
    if (!L.has_params()) continue;
    double fan_in, fan_out;
    if (L.spec.kind == LayerKind::conv) {
      const double k2 = double(L.spec.kernel * L.spec.kernel);
      fan_in = L.spec.in_channels * k2;
      fan_out = L.spec.out_channels * k2;
    } else {
      fan_in = double(L.spec.in_features);
      fan_out = double(L.spec.out_features);
    }
    const double bound = std::sqrt(6.0 / (fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& w : p.entry(L.weight_entry)) w = static_cast<T>(dist(rng));
  }
  return Model<T>(std::move(topology), std::move(p));
}

namespace detail {

// Number of examples in a batch tensor; accepts [B, C, H, W] or, when
// allow_single, a bare [C, H, W].
inline std::size_t batch_count(const Topology& topo, const std::vector<std::size_t>& shape,
                               bool allow_single) {
  const auto& in = topo.input_shape();
  if (allow_single && shape == std::vector<std::size_t>{in.c, in.h, in.w}) return 1;
  if (shape.size() == 4 && shape[1] == in.c && shape[2] == in.h && shape[3] == in.w) return shape[0];
  throw InputError("input shape " + shape_string(shape) + " does not match topology input [" +
                   std::to_string(in.c) + "x" + std::to_string(in.h) + "x" +
                   std::to_string(in.w) + "]");
}

inline void check_label(int y, std::size_t classes) {
  if (y < 0 || static_cast<std::size_t>(y) >= classes)
    throw InputError("label " + std::to_string(y) + " out of range [0, " +
                     std::to_string(classes) + ")");
}

}  // namespace detail

// Log-probabilities, shape [B, classes].
template <typename T>
Tensor<T> forward(const Model<T>& model, const Tensor<T>& batch) {
  const auto& topo = model.topology();
  const std::size_t B = detail::batch_count(topo, batch.shape, false);
  const std::size_t C = topo.classes(), D = topo.input_shape().size();
  Tensor<T> out({B, C});
  Workspace<T> ws(topo);
  for (std::size_t b = 0; b < B; ++b) {
    auto lp = forward_example<T>(topo, model.params().values(),
                                 std::span<const T>(batch.data.data() + b * D, D), ws);
    std::copy(lp.begin(), lp.end(), out.data.begin() + b * C);
  }
  return out;
}

// Mean negative log-likelihood of the labelled classes.
template <typename T>
double nll_loss(const Tensor<T>& log_probs, std::span<const int> labels) {
  if (log_probs.rank() != 2 || log_probs.shape[0] != labels.size())
    throw InputError("nll_loss: " + std::to_string(labels.size()) + " labels for log-probs " +
                     shape_string(log_probs.shape));
  if (labels.empty()) throw InputError("nll_loss: empty batch");
  const std::size_t C = log_probs.shape[1];
  double s = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    detail::check_label(labels[i], C);
    s -= static_cast<double>(log_probs.data[i * C + labels[i]]);
  }
  return s / double(labels.size());
}

// Accumulates d(-log p_y)/dθ for one example into grad; returns the example's loss.
template <typename T>
T accumulate_nll_grad(const Topology& topo, std::span<const T> params, std::span<const T> x, int y,
                      Workspace<T>& ws, std::span<T> grad, T scale = T{1}) {
  auto lp = forward_example<T>(topo, params, x, ws);
  const T loss = -lp[y];
  std::vector<T> gout(topo.classes(), T{0});
  gout[y] = -scale;
  backward_example<T>(topo, params, ws, gout, grad, {});
  return loss;
}

template <typename T>
ParamVector<T> grad_loss_params(const Model<T>& model, const Tensor<T>& batch,
                                std::span<const int> labels) {
  const auto& topo = model.topology();
  const std::size_t B = detail::batch_count(topo, batch.shape, false);
  if (B != labels.size() || B == 0)
    throw InputError("grad_loss_params: batch of " + std::to_string(B) + " with " +
                     std::to_string(labels.size()) + " labels");
  const std::size_t D = topo.input_shape().size();
  ParamVector<T> grad(topo.layout());
  Workspace<T> ws(topo);
  for (std::size_t b = 0; b < B; ++b) {
    detail::check_label(labels[b], topo.classes());
    accumulate_nll_grad<T>(topo, model.params().values(),
                           std::span<const T>(batch.data.data() + b * D, D), labels[b], ws,
                           grad.values());
  }
  const T inv = T{1} / static_cast<T>(B);
  for (auto& g : grad.values()) g *= inv;
  return grad;
}

// d(-log p_y)/dx for a single input; same shape as x.
template <typename T>
Tensor<T> grad_loss_input(const Model<T>& model, const Tensor<T>& x, int y) {
  const auto& topo = model.topology();
  if (detail::batch_count(topo, x.shape, true) != 1)
    throw InputError("grad_loss_input expects a single input");
  detail::check_label(y, topo.classes());
  Workspace<T> ws(topo);
  forward_example<T>(topo, model.params().values(), x.data, ws);
  std::vector<T> gout(topo.classes(), T{0});
  gout[y] = T{-1};
  Tensor<T> gx(x.shape);
  backward_example<T>(topo, model.params().values(), ws, gout, {}, gx.data);
  return gx;
}

// d[log p_y]/dθ over every parameter, for one example (accumulated into grad).
template <typename T>
void accumulate_logit_grad(const Topology& topo, std::span<const T> params, std::span<const T> x,
                           int y, Workspace<T>& ws, std::span<T> grad) {
  forward_example<T>(topo, params, x, ws);
  std::vector<T> gout(topo.classes(), T{0});
  gout[y] = T{1};
  backward_example<T>(topo, params, ws, gout, grad, {});
}

// d[G(x)]_y / d(layer parameters), where [G(x)]_y is the log-probability of y.
// layer indexes ParamLayout entries (weights and biases are separate entries).
template <typename T>
Tensor<T> grad_logit_params(const Model<T>& model, const Tensor<T>& x, int y, std::size_t layer) {
  const auto& topo = model.topology();
  const auto& entry = topo.layout()->entry(layer);
  if (detail::batch_count(topo, x.shape, true) != 1)
    throw InputError("grad_logit_params expects a single input");
  detail::check_label(y, topo.classes());
  Workspace<T> ws(topo);
  ParamVector<T> grad(topo.layout());
  accumulate_logit_grad<T>(topo, model.params().values(), x.data, y, ws, grad.values());
  auto part = grad.entry(layer);
  return Tensor<T>(entry.shape, std::vector<T>(part.begin(), part.end()));
}

template <typename T>
Model<T> sgd_step(const Model<T>& model, const ParamVector<T>& grad, T lr) {
  require_same_layout(model.params(), grad, "sgd_step");
  if (!(lr > T{0})) throw InputError("sgd_step: learning rate must be positive");
  ParamVector<T> p = model.params();
  auto v = p.values();
  auto g = grad.values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] -= lr * g[i];
  return model.with_params(std::move(p));
}

template <typename T>
int argmax_class(std::span<const T> log_probs) {
  return static_cast<int>(std::max_element(log_probs.begin(), log_probs.end()) - log_probs.begin());
}

}  // namespace fsbd
