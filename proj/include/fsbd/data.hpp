#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fsbd/error.hpp"
#include "fsbd/tensor.hpp"
#include "fsbd/topology.hpp"

namespace fsbd {

// Images [N, C, H, W] in [0,1] with integer class labels.
struct Dataset {
  Tensor<float> images;
  std::vector<int> labels;
  std::size_t classes = 0;

  std::size_t size() const { return labels.size(); }
  Shape3 shape() const { return {images.shape[1], images.shape[2], images.shape[3]}; }
  std::span<const float> image(std::size_t i) const { return images.row(i); }

  Dataset subset(std::span<const std::size_t> idx) const {
    Dataset d;
    d.classes = classes;
    d.images = Tensor<float>({idx.size(), images.shape[1], images.shape[2], images.shape[3]});
    const std::size_t D = images.row_size();
    for (std::size_t k = 0; k < idx.size(); ++k) {
      auto src = image(idx[k]);
      std::copy(src.begin(), src.end(), d.images.data.begin() + k * D);
      d.labels.push_back(labels[idx[k]]);
    }
    return d;
  }

  // Indices of every example with the given label, ascending.
  std::vector<std::size_t> indices_of(int label) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == label) out.push_back(i);
    return out;
  }
};

namespace detail {

inline std::uint32_t read_be32(std::istream& in, const std::string& path, std::uint64_t offset) {
  std::array<unsigned char, 4> b{};
  if (!in.read(reinterpret_cast<char*>(b.data()), 4))
    throw FormatError(path + ": truncated IDX header", offset);
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) |
         std::uint32_t(b[3]);
}

inline void write_be32(std::ostream& out, std::uint32_t v) {
  const char b[4] = {char(v >> 24), char(v >> 16), char(v >> 8), char(v)};
  out.write(b, 4);
}

}  // namespace detail

constexpr std::uint32_t kIdxImageMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

// Reads an IDX3 image file and IDX1 label file; pixel bytes are scaled by 1/255.
inline Dataset load_idx(const std::filesystem::path& images_path,
                        const std::filesystem::path& labels_path, std::size_t classes = 10) {
  std::ifstream img(images_path, std::ios::binary);
  if (!img) throw InputError("cannot open " + images_path.string());
  std::ifstream lab(labels_path, std::ios::binary);
  if (!lab) throw InputError("cannot open " + labels_path.string());
  const std::string ip = images_path.string(), lp = labels_path.string();

  if (auto m = detail::read_be32(img, ip, 0); m != kIdxImageMagic)
    throw FormatError(ip + ": bad image magic " + std::to_string(m), 0);
  const std::uint32_t n = detail::read_be32(img, ip, 4);
  const std::uint32_t rows = detail::read_be32(img, ip, 8);
  const std::uint32_t cols = detail::read_be32(img, ip, 12);
  if (auto m = detail::read_be32(lab, lp, 0); m != kIdxLabelMagic)
    throw FormatError(lp + ": bad label magic " + std::to_string(m), 0);
  const std::uint32_t nl = detail::read_be32(lab, lp, 4);
  if (n != nl)
    throw FormatError("image count " + std::to_string(n) + " != label count " + std::to_string(nl),
                      4);
  if (n == 0) throw FormatError(ip + ": empty dataset", 4);

  Dataset d;
  d.classes = classes;
  d.images = Tensor<float>({n, 1, rows, cols});
  d.labels.resize(n);
  const std::size_t D = std::size_t(rows) * cols;
  std::vector<unsigned char> buf(D);
  for (std::uint32_t i = 0; i < n; ++i) {
    if (!img.read(reinterpret_cast<char*>(buf.data()), std::streamsize(D)))
      throw FormatError(ip + ": truncated at image " + std::to_string(i), 16 + std::uint64_t(i) * D);
    float* dst = d.images.data.data() + i * D;
    for (std::size_t k = 0; k < D; ++k) dst[k] = float(buf[k]) / 255.0f;
  }
  std::vector<unsigned char> lbuf(n);
  if (!lab.read(reinterpret_cast<char*>(lbuf.data()), n))
    throw FormatError(lp + ": truncated label data", 8 + std::uint64_t(lab.gcount()));
  for (std::uint32_t i = 0; i < n; ++i) {
    if (lbuf[i] >= classes)
      throw FormatError(lp + ": label " + std::to_string(lbuf[i]) + " out of range", 8 + i);
    d.labels[i] = lbuf[i];
  }
  return d;
}

// Writes single-channel datasets in IDX form; pixels are rounded to bytes.
inline void save_idx(const Dataset& d, const std::filesystem::path& images_path,
                     const std::filesystem::path& labels_path) {
  if (d.images.shape[1] != 1) throw InputError("IDX export supports single-channel images only");
  std::ofstream img(images_path, std::ios::binary);
  std::ofstream lab(labels_path, std::ios::binary);
  if (!img || !lab) throw InputError("cannot write IDX files at " + images_path.string());
  detail::write_be32(img, kIdxImageMagic);
  detail::write_be32(img, std::uint32_t(d.size()));
  detail::write_be32(img, std::uint32_t(d.images.shape[2]));
  detail::write_be32(img, std::uint32_t(d.images.shape[3]));
  for (float v : d.images.data)
    img.put(char(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f))));
  detail::write_be32(lab, kIdxLabelMagic);
  detail::write_be32(lab, std::uint32_t(d.size()));
  for (int y : d.labels) lab.put(char(static_cast<unsigned char>(y)));
}

// Gaussian blobs: each class has a fixed random mean pattern; pixels get
// N(0, sigma) noise and are clipped to [0,1].
inline Dataset synthetic(std::size_t classes, std::size_t per_class, std::uint64_t seed,
                         Shape3 shape = {1, 28, 28}, float sigma = 0.1f) {
  if (classes < 2) throw InputError("synthetic: need at least 2 classes");
  if (per_class < 1) throw InputError("synthetic: need at least 1 example per class");
  const std::size_t D = shape.size();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> mean_dist(0.0f, 1.0f);
  std::normal_distribution<float> noise(0.0f, sigma);
  std::vector<std::vector<float>> means(classes, std::vector<float>(D));
  for (auto& m : means)
    for (auto& v : m) v = mean_dist(rng);

  Dataset d;
  d.classes = classes;
  const std::size_t n = classes * per_class;
  d.images = Tensor<float>({n, shape.c, shape.h, shape.w});
  d.labels.resize(n);
  // Class-interleaved order so that any prefix is roughly balanced.
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = i % classes;
    d.labels[i] = int(c);
    float* dst = d.images.data.data() + i * D;
    for (std::size_t k = 0; k < D; ++k) dst[k] = std::clamp(means[c][k] + noise(rng), 0.0f, 1.0f);
  }
  return d;
}

// Blobs whose class means are flat images at the given intensity levels.
inline Dataset synthetic_levels(const std::vector<float>& levels, std::size_t per_class,
                                std::uint64_t seed, Shape3 shape = {1, 28, 28},
                                float sigma = 0.1f) {
  if (levels.size() < 2) throw InputError("synthetic: need at least 2 classes");
  if (per_class < 1) throw InputError("synthetic: need at least 1 example per class");
  const std::size_t classes = levels.size(), D = shape.size(), n = classes * per_class;
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> noise(0.0f, sigma);
  Dataset d;
  d.classes = classes;
  d.images = Tensor<float>({n, shape.c, shape.h, shape.w});
  d.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = i % classes;
    d.labels[i] = int(c);
    float* dst = d.images.data.data() + i * D;
    for (std::size_t k = 0; k < D; ++k) dst[k] = std::clamp(levels[c] + noise(rng), 0.0f, 1.0f);
  }
  return d;
}

// participant id -> example indices
using Partition = std::vector<std::vector<std::size_t>>;

// Shuffle then deal round-robin; list sizes differ by at most one.
inline Partition iid_partition(std::size_t n_examples, std::size_t participants, std::uint64_t seed) {
  if (participants == 0) throw InputError("iid_partition: zero participants");
  if (participants > n_examples)
    throw InputError("iid_partition: " + std::to_string(participants) + " participants for " +
                     std::to_string(n_examples) + " examples");
  std::vector<std::size_t> order(n_examples);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  Partition p(participants);
  for (std::size_t i = 0; i < order.size(); ++i) p[i % participants].push_back(order[i]);
  return p;
}

inline Partition iid_partition(const Dataset& d, std::size_t participants, std::uint64_t seed) {
  return iid_partition(d.size(), participants, seed);
}

}  // namespace fsbd
