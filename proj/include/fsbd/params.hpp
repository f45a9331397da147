#pragma once

#include <algorithm>
#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "fsbd/error.hpp"
#include "fsbd/hash.hpp"
#include "fsbd/tensor.hpp"

namespace fsbd {

struct ParamEntry {
  std::string name;
  std::size_t offset = 0;
  std::size_t length = 0;
  std::vector<std::size_t> shape;

  bool operator==(const ParamEntry&) const = default;
};

// Index over a flat parameter array: where each parameter tensor lives.
class ParamLayout {
 public:
  ParamLayout() = default;

  // Appends entries back to back in the given order.
  explicit ParamLayout(std::vector<std::pair<std::string, std::vector<std::size_t>>> tensors) {
    for (auto& [name, shape] : tensors) {
      ParamEntry e{std::move(name), total_, shape_size(shape), std::move(shape)};
      total_ += e.length;
      entries_.push_back(std::move(e));
    }
    hash_ = compute_hash();
  }

  // Rebuilds a layout read from disk; offsets must tile [0, total) contiguously.
  static ParamLayout from_entries(std::vector<ParamEntry> entries) {
    ParamLayout l;
    for (const auto& e : entries) {
      if (e.offset != l.total_ || e.length != shape_size(e.shape))
        throw InputError("parameter layout entry '" + e.name + "' is not contiguous");
      l.total_ += e.length;
    }
    l.entries_ = std::move(entries);
    l.hash_ = l.compute_hash();
    return l;
  }

  const std::vector<ParamEntry>& entries() const { return entries_; }
  const ParamEntry& entry(std::size_t i) const {
    if (i >= entries_.size())
      throw InputError("layer index " + std::to_string(i) + " out of range (" +
                       std::to_string(entries_.size()) + " layers)");
    return entries_[i];
  }
  std::size_t size() const { return entries_.size(); }
  std::size_t total() const { return total_; }

  // Hash over offsets, lengths, and shapes (names excluded).
  std::uint64_t hash() const { return hash_; }

  bool operator==(const ParamLayout& o) const { return hash_ == o.hash_ && entries_ == o.entries_; }

 private:
  std::uint64_t compute_hash() const {
    Fnv1a h;
    h.u64(entries_.size());
    for (const auto& e : entries_) {
      h.u64(e.offset);
      h.u64(e.length);
      h.u64(e.shape.size());
      for (auto d : e.shape) h.u64(d);
    }
    return h.digest();
  }

  std::vector<ParamEntry> entries_;
  std::size_t total_ = 0;
  std::uint64_t hash_ = 0;
};

using LayoutPtr = std::shared_ptr<const ParamLayout>;

inline bool same_layout(const LayoutPtr& a, const LayoutPtr& b) {
  return a == b || (a && b && *a == *b);
}

// Flat parameter array tagged with its layout.
template <typename T>
class ParamVector {
 public:
  ParamVector() = default;
  explicit ParamVector(LayoutPtr layout, T fill = T{})
      : layout_(std::move(layout)), values_(layout_->total(), fill) {}
  ParamVector(LayoutPtr layout, std::vector<T> values)
      : layout_(std::move(layout)), values_(std::move(values)) {
    if (values_.size() != layout_->total())
      throw InputError("parameter count " + std::to_string(values_.size()) +
                       " does not match layout total " + std::to_string(layout_->total()));
  }

  const LayoutPtr& layout() const { return layout_; }
  std::size_t size() const { return values_.size(); }

  std::span<T> values() { return values_; }
  std::span<const T> values() const { return values_; }
  T& operator[](std::size_t i) { return values_[i]; }
  const T& operator[](std::size_t i) const { return values_[i]; }

  std::span<T> entry(std::size_t layer) {
    const auto& e = layout_->entry(layer);
    return {values_.data() + e.offset, e.length};
  }
  std::span<const T> entry(std::size_t layer) const {
    const auto& e = layout_->entry(layer);
    return {values_.data() + e.offset, e.length};
  }

  template <typename U>
  ParamVector<U> cast() const {
    return ParamVector<U>(layout_, std::vector<U>(values_.begin(), values_.end()));
  }

  bool operator==(const ParamVector& o) const {
    return same_layout(layout_, o.layout_) && values_ == o.values_;
  }

 private:
  LayoutPtr layout_;
  std::vector<T> values_;
};

template <typename T, typename U>
void require_same_layout(const ParamVector<T>& a, const ParamVector<U>& b, const char* what) {
  if (!same_layout(a.layout(), b.layout()))
    throw InputError(std::string(what) + ": parameter layouts differ");
}

// Splits a flat vector into one tensor per layout entry.
template <typename T>
std::vector<Tensor<T>> unflatten(const ParamVector<T>& v) {
  std::vector<Tensor<T>> out;
  for (std::size_t i = 0; i < v.layout()->size(); ++i) {
    auto part = v.entry(i);
    out.emplace_back(v.layout()->entry(i).shape, std::vector<T>(part.begin(), part.end()));
  }
  return out;
}

template <typename T>
ParamVector<T> flatten(const LayoutPtr& layout, const std::vector<Tensor<T>>& parts) {
  if (parts.size() != layout->size()) throw InputError("flatten: wrong number of parameter tensors");
  ParamVector<T> v(layout);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (parts[i].shape != layout->entry(i).shape)
      throw InputError("flatten: tensor " + std::to_string(i) + " has shape " +
                       shape_string(parts[i].shape));
    std::copy(parts[i].data.begin(), parts[i].data.end(), v.entry(i).begin());
  }
  return v;
}

}  // namespace fsbd
