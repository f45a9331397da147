#pragma once

#include <cstddef>
#include <memory>
#include <string>
#include <vector>

#include "fsbd/error.hpp"
#include "fsbd/params.hpp"

namespace fsbd {

struct Shape3 {
  std::size_t c = 0, h = 0, w = 0;
  std::size_t size() const { return c * h * w; }
  bool operator==(const Shape3&) const = default;
};

enum class LayerKind { conv, relu, maxpool, dense, log_softmax };

// One stage of a sequential network. Only the fields relevant to kind are read.
struct LayerSpec {
  LayerKind kind;
  std::size_t in_channels = 0, out_channels = 0, kernel = 0;  // conv (valid, stride 1)
  std::size_t in_features = 0, out_features = 0;              // dense
  std::size_t pool = 0;                                       // maxpool (stride = window)

  static LayerSpec conv(std::size_t in, std::size_t out, std::size_t k) {
    return {LayerKind::conv, in, out, k, 0, 0, 0};
  }
  static LayerSpec dense(std::size_t in, std::size_t out) {
    return {LayerKind::dense, 0, 0, 0, in, out, 0};
  }
  static LayerSpec relu() { return {LayerKind::relu}; }
  static LayerSpec maxpool(std::size_t p) { return {LayerKind::maxpool, 0, 0, 0, 0, 0, p}; }
  static LayerSpec log_softmax() { return {LayerKind::log_softmax}; }
};

// Layer plus its resolved shapes and, for conv/dense, the indices of its
// weight and bias entries in the parameter layout.
struct ResolvedLayer {
  LayerSpec spec;
  Shape3 in, out;
  std::size_t weight_entry = 0, bias_entry = 0;
  bool has_params() const { return spec.kind == LayerKind::conv || spec.kind == LayerKind::dense; }
};

class Topology {
 public:
  Topology(Shape3 input, std::vector<LayerSpec> layers, std::size_t classes)
      : input_(input), classes_(classes) {
    if (layers.empty()) throw InputError("topology has no layers");
    if (input.size() == 0) throw InputError("topology input shape is empty");
    std::vector<std::pair<std::string, std::vector<std::size_t>>> tensors;
    Shape3 cur = input;
    std::size_t conv_n = 0, dense_n = 0;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& s = layers[i];
      ResolvedLayer r{s, cur, cur};
      const std::string at = "layer " + std::to_string(i) + ": ";
      switch (s.kind) {
        case LayerKind::conv: {
          if (s.in_channels != cur.c)
            throw InputError(at + "conv expects " + std::to_string(s.in_channels) +
                             " channels, got " + std::to_string(cur.c));
          if (s.kernel == 0 || s.kernel > cur.h || s.kernel > cur.w || s.out_channels == 0)
            throw InputError(at + "conv kernel does not fit the input");
          r.out = {s.out_channels, cur.h - s.kernel + 1, cur.w - s.kernel + 1};
          std::string name = "conv" + std::to_string(++conv_n);
          r.weight_entry = tensors.size();
          tensors.push_back({name + ".weight", {s.out_channels, s.in_channels, s.kernel, s.kernel}});
          r.bias_entry = tensors.size();
          tensors.push_back({name + ".bias", {s.out_channels}});
          break;
        }
        case LayerKind::dense: {
          if (s.in_features != cur.size())
            throw InputError(at + "dense expects " + std::to_string(s.in_features) +
                             " features, got " + std::to_string(cur.size()));
          if (s.out_features == 0) throw InputError(at + "dense has zero outputs");
          r.out = {s.out_features, 1, 1};
          std::string name = "dense" + std::to_string(++dense_n);
          r.weight_entry = tensors.size();
          tensors.push_back({name + ".weight", {s.out_features, s.in_features}});
          r.bias_entry = tensors.size();
          tensors.push_back({name + ".bias", {s.out_features}});
          break;
        }
        case LayerKind::maxpool:
          if (s.pool == 0 || s.pool > cur.h || s.pool > cur.w)
            throw InputError(at + "pool window does not fit the input");
          r.out = {cur.c, cur.h / s.pool, cur.w / s.pool};
          break;
        case LayerKind::relu:
          break;
        case LayerKind::log_softmax:
          if (i + 1 != layers.size()) throw InputError(at + "log-softmax must be the last layer");
          if (cur.h != 1 || cur.w != 1) throw InputError(at + "log-softmax needs a flat input");
          break;
      }
      cur = r.out;
      layers_.push_back(r);
    }
    if (layers_.back().spec.kind != LayerKind::log_softmax)
      throw InputError("topology must end with log-softmax");
    if (cur.size() != classes)
      throw InputError("network output width " + std::to_string(cur.size()) +
                       " does not match class count " + std::to_string(classes));
    layout_ = std::make_shared<const ParamLayout>(std::move(tensors));
  }

  // conv(1→8,3)→ReLU→pool2→conv(8→16,3)→ReLU→pool2→dense(400→64)→ReLU→dense(64→10)→log-softmax
  static Topology desk_cnn(Shape3 input = {1, 28, 28}, std::size_t classes = 10) {
    std::size_t h = ((input.h - 2) / 2 - 2) / 2, w = ((input.w - 2) / 2 - 2) / 2;
    return Topology(input,
                    {LayerSpec::conv(input.c, 8, 3), LayerSpec::relu(), LayerSpec::maxpool(2),
                     LayerSpec::conv(8, 16, 3), LayerSpec::relu(), LayerSpec::maxpool(2),
                     LayerSpec::dense(16 * h * w, 64), LayerSpec::relu(),
                     LayerSpec::dense(64, classes), LayerSpec::log_softmax()},
                    classes);
  }

  const Shape3& input_shape() const { return input_; }
  std::size_t classes() const { return classes_; }
  const std::vector<ResolvedLayer>& layers() const { return layers_; }
  const LayoutPtr& layout() const { return layout_; }
  std::size_t param_count() const { return layout_->total(); }

 private:
  Shape3 input_;
  std::size_t classes_;
  std::vector<ResolvedLayer> layers_;
  LayoutPtr layout_;
};

using TopologyPtr = std::shared_ptr<const Topology>;

}  // namespace fsbd
