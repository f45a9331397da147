#pragma once

// Per-example forward and backward passes over a sequential Topology.
// Parameters are read straight out of a flat span laid out per Topology::layout().

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "fsbd/topology.hpp"

namespace fsbd {

template <typename T>
struct Workspace {
  // acts[i] is the input of layer i; acts.back() is the network output.
  std::vector<std::vector<T>> acts;
  std::vector<std::vector<std::uint32_t>> argmax;
  std::vector<std::vector<T>> cols;  // per conv layer im2col buffer
  std::vector<T> grad_a, grad_b, dcols;

  explicit Workspace(const Topology& topo) {
    const auto& layers = topo.layers();
    acts.resize(layers.size() + 1);
    argmax.resize(layers.size());
    cols.resize(layers.size());
    std::size_t widest_cols = 0;
    std::size_t widest = topo.input_shape().size();
    acts[0].resize(topo.input_shape().size());
    for (std::size_t i = 0; i < layers.size(); ++i) {
      acts[i + 1].resize(layers[i].out.size());
      if (layers[i].spec.kind == LayerKind::maxpool) argmax[i].resize(layers[i].out.size());
      if (layers[i].spec.kind == LayerKind::conv) {
        const auto& s = layers[i].spec;
        cols[i].resize(s.in_channels * s.kernel * s.kernel * layers[i].out.h * layers[i].out.w);
        widest_cols = std::max(widest_cols, cols[i].size());
      }
      widest = std::max(widest, layers[i].out.size());
    }
    grad_a.resize(widest);
    grad_b.resize(widest);
    dcols.resize(widest_cols);
  }

  std::span<const T> output() const { return acts.back(); }
};

namespace detail {

// Fixed-order dot product with eight interleaved partial sums.
template <typename T>
T dot(const T* a, const T* b, std::size_t n) {
  T acc[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (std::size_t l = 0; l < 8; ++l) acc[l] += a[i + l] * b[i + l];
  T tail = 0;
  for (; i < n; ++i) tail += a[i] * b[i];
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
}

// Unrolls input patches into cols[(c*K + ky)*K + kx][y*OW + x] so the
// convolution becomes a dense product over contiguous rows.
template <typename T>
void im2col(const ResolvedLayer& L, const T* in, T* cols) {
  const std::size_t C = L.in.c, H = L.in.h, Wd = L.in.w, K = L.spec.kernel;
  const std::size_t OH = L.out.h, OW = L.out.w;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ky = 0; ky < K; ++ky)
      for (std::size_t kx = 0; kx < K; ++kx) {
        T* dst = cols + ((c * K + ky) * K + kx) * OH * OW;
        for (std::size_t y = 0; y < OH; ++y) {
          const T* src = in + c * H * Wd + (y + ky) * Wd + kx;
          std::copy(src, src + OW, dst + y * OW);
        }
      }
}

template <typename T>
void conv_forward(const ResolvedLayer& L, const T* in, const T* W, const T* b, T* out, T* cols) {
  const std::size_t CK = L.in.c * L.spec.kernel * L.spec.kernel;
  const std::size_t O = L.out.c, P = L.out.h * L.out.w;
  im2col(L, in, cols);
  for (std::size_t o = 0; o < O; ++o) {
    T* op = out + o * P;
    std::fill(op, op + P, b[o]);
    const T* wr = W + o * CK;
    for (std::size_t k = 0; k < CK; ++k) {
      const T wv = wr[k];
      const T* cr = cols + k * P;
      for (std::size_t p = 0; p < P; ++p) op[p] += wv * cr[p];
    }
  }
}

// dW/db accumulate; din (if non-null) is overwritten. cols must hold the
// im2col expansion from the matching forward call; dcols is scratch.
template <typename T>
void conv_backward(const ResolvedLayer& L, const T* cols, const T* W, const T* gout, T* dW, T* db,
                   T* din, T* dcols) {
  const std::size_t C = L.in.c, H = L.in.h, Wd = L.in.w, K = L.spec.kernel;
  const std::size_t CK = C * K * K;
  const std::size_t O = L.out.c, OH = L.out.h, OW = L.out.w, P = OH * OW;
  for (std::size_t o = 0; o < O; ++o) {
    const T* gp = gout + o * P;
    if (db) {
      T s = 0;
      for (std::size_t p = 0; p < P; ++p) s += gp[p];
      db[o] += s;
    }
    if (dW) {
      T* dwr = dW + o * CK;
      for (std::size_t k = 0; k < CK; ++k) {
        dwr[k] += dot(gp, cols + k * P, P);
      }
    }
  }
  if (!din) return;
  std::fill(dcols, dcols + CK * P, T{0});
  for (std::size_t o = 0; o < O; ++o) {
    const T* gp = gout + o * P;
    const T* wr = W + o * CK;
    for (std::size_t k = 0; k < CK; ++k) {
      const T wv = wr[k];
      T* dr = dcols + k * P;
      for (std::size_t p = 0; p < P; ++p) dr[p] += wv * gp[p];
    }
  }
  std::fill(din, din + C * H * Wd, T{0});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ky = 0; ky < K; ++ky)
      for (std::size_t kx = 0; kx < K; ++kx) {
        const T* src = dcols + ((c * K + ky) * K + kx) * P;
        for (std::size_t y = 0; y < OH; ++y) {
          T* dst = din + c * H * Wd + (y + ky) * Wd + kx;
          const T* s = src + y * OW;
          for (std::size_t x = 0; x < OW; ++x) dst[x] += s[x];
        }
      }
}

template <typename T>
void dense_forward(const ResolvedLayer& L, const T* in, const T* W, const T* b, T* out) {
  const std::size_t I = L.spec.in_features, J = L.spec.out_features;
  for (std::size_t j = 0; j < J; ++j) {
    out[j] = dot(W + j * I, in, I) + b[j];
  }
}

template <typename T>
void dense_backward(const ResolvedLayer& L, const T* in, const T* W, const T* gout, T* dW, T* db,
                    T* din) {
  const std::size_t I = L.spec.in_features, J = L.spec.out_features;
  if (din) std::fill(din, din + I, T{0});
  for (std::size_t j = 0; j < J; ++j) {
    const T g = gout[j];
    const T* wr = W + j * I;
    if (db) db[j] += g;
    if (dW) {
      T* dr = dW + j * I;
      for (std::size_t i = 0; i < I; ++i) dr[i] += g * in[i];
    }
    if (din)
      for (std::size_t i = 0; i < I; ++i) din[i] += wr[i] * g;
  }
}

template <typename T>
void maxpool_forward(const ResolvedLayer& L, const T* in, T* out, std::uint32_t* arg) {
  const std::size_t C = L.in.c, H = L.in.h, Wd = L.in.w, P = L.spec.pool;
  const std::size_t OH = L.out.h, OW = L.out.w;
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t y = 0; y < OH; ++y) {
      for (std::size_t x = 0; x < OW; ++x) {
        std::size_t best = c * H * Wd + (y * P) * Wd + x * P;
        for (std::size_t dy = 0; dy < P; ++dy)
          for (std::size_t dx = 0; dx < P; ++dx) {
            std::size_t idx = c * H * Wd + (y * P + dy) * Wd + x * P + dx;
            if (in[idx] > in[best]) best = idx;
          }
        const std::size_t o = (c * OH + y) * OW + x;
        out[o] = in[best];
        arg[o] = static_cast<std::uint32_t>(best);
      }
    }
  }
}

}  // namespace detail

// Runs one example through the network; result is ws.output().
template <typename T>
std::span<const T> forward_example(const Topology& topo, std::span<const T> params,
                                   std::span<const T> x, Workspace<T>& ws) {
  std::copy(x.begin(), x.end(), ws.acts[0].begin());
  const auto& layers = topo.layers();
  const auto& layout = *topo.layout();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& L = layers[i];
    const T* in = ws.acts[i].data();
    T* out = ws.acts[i + 1].data();
    switch (L.spec.kind) {
      case LayerKind::conv:
        detail::conv_forward(L, in, params.data() + layout.entry(L.weight_entry).offset,
                             params.data() + layout.entry(L.bias_entry).offset, out,
                             ws.cols[i].data());
        break;
      case LayerKind::dense:
        detail::dense_forward(L, in, params.data() + layout.entry(L.weight_entry).offset,
                              params.data() + layout.entry(L.bias_entry).offset, out);
        break;
      case LayerKind::relu:
        for (std::size_t k = 0; k < L.in.size(); ++k) out[k] = in[k] > T{0} ? in[k] : T{0};
        break;
      case LayerKind::maxpool:
        detail::maxpool_forward(L, in, out, ws.argmax[i].data());
        break;
      case LayerKind::log_softmax: {
        const std::size_t n = L.in.size();
        T m = *std::max_element(in, in + n);
        T s = 0;
        for (std::size_t k = 0; k < n; ++k) s += std::exp(in[k] - m);
        const T lse = m + std::log(s);
        for (std::size_t k = 0; k < n; ++k) out[k] = in[k] - lse;
        break;
      }
    }
  }
  return ws.output();
}

// Back-propagates grad_out (d loss / d network output) for the example last
// passed to forward_example. Parameter gradients are ACCUMULATED into
// grad_params (skipped when empty); grad_input (if non-empty) is overwritten.
template <typename T>
void backward_example(const Topology& topo, std::span<const T> params, Workspace<T>& ws,
                      std::span<const T> grad_out, std::span<T> grad_params,
                      std::span<T> grad_input) {
  const auto& layers = topo.layers();
  const auto& layout = *topo.layout();
  const bool want_params = !grad_params.empty();
  T* g = ws.grad_a.data();
  T* next = ws.grad_b.data();
  std::copy(grad_out.begin(), grad_out.end(), g);

  // Lowest layer whose input gradient is still needed.
  std::size_t stop = 0;
  if (grad_input.empty()) {
    while (stop < layers.size() && !layers[stop].has_params()) ++stop;
    if (stop == layers.size()) return;
  }

  for (std::size_t li = layers.size(); li-- > 0;) {
    const auto& L = layers[li];
    const T* in = ws.acts[li].data();
    T* din = li > stop || !grad_input.empty() ? next : nullptr;
    switch (L.spec.kind) {
      case LayerKind::log_softmax: {
        const std::size_t n = L.in.size();
        const T* out = ws.acts[li + 1].data();
        T sum = 0;
        for (std::size_t k = 0; k < n; ++k) sum += g[k];
        for (std::size_t k = 0; k < n; ++k) next[k] = g[k] - std::exp(out[k]) * sum;
        break;
      }
      case LayerKind::relu:
        for (std::size_t k = 0; k < L.in.size(); ++k) next[k] = in[k] > T{0} ? g[k] : T{0};
        break;
      case LayerKind::maxpool: {
        std::fill(next, next + L.in.size(), T{0});
        const auto& arg = ws.argmax[li];
        for (std::size_t k = 0; k < L.out.size(); ++k) next[arg[k]] += g[k];
        break;
      }
      case LayerKind::conv: {
        const auto& we = layout.entry(L.weight_entry);
        const auto& be = layout.entry(L.bias_entry);
        detail::conv_backward(L, ws.cols[li].data(), params.data() + we.offset, g,
                              want_params ? grad_params.data() + we.offset : nullptr,
                              want_params ? grad_params.data() + be.offset : nullptr, din,
                              ws.dcols.data());
        break;
      }
      case LayerKind::dense: {
        const auto& we = layout.entry(L.weight_entry);
        const auto& be = layout.entry(L.bias_entry);
        detail::dense_backward(L, in, params.data() + we.offset, g,
                               want_params ? grad_params.data() + we.offset : nullptr,
                               want_params ? grad_params.data() + be.offset : nullptr, din);
        break;
      }
    }
    if (li == stop && grad_input.empty()) return;
    std::swap(g, next);
  }
  std::copy(g, g + topo.input_shape().size(), grad_input.begin());
}

}  // namespace fsbd
