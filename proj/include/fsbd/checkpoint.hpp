#pragma once

// Binary artifacts. Everything little-endian.
//
// Tensor file / checkpoint ("FSBD"):
//   magic[4] u32 version u32 count
//   count × { u64 offset, u64 length, u32 rank, u64 dims[rank] }
//   f32 values[Σ length]
// Mask ("FSBM"):
//   magic[4] u32 version u64 layout_hash u64 bits  u8 packed[(bits+7)/8]  (LSB first)

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fsbd/adversary.hpp"
#include "fsbd/error.hpp"
#include "fsbd/model.hpp"
#include "fsbd/params.hpp"

namespace fsbd {

static_assert(std::endian::native == std::endian::little, "artifact I/O assumes a little-endian host");

constexpr char kCheckpointMagic[4] = {'F', 'S', 'B', 'D'};
constexpr char kMaskMagic[4] = {'F', 'S', 'B', 'M'};
constexpr std::uint32_t kCheckpointVersion = 1;
constexpr std::uint32_t kMaskVersion = 1;

namespace detail {

class Writer {
 public:
  explicit Writer(const std::filesystem::path& p) : out_(p, std::ios::binary), path_(p.string()) {
    if (!out_) throw InputError("cannot write " + path_);
  }
  template <typename T>
  void put(T v) {
    out_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void raw(const void* p, std::size_t n) { out_.write(static_cast<const char*>(p), std::streamsize(n)); }
  void close() {
    out_.close();
    if (!out_) throw std::runtime_error("write failed: " + path_);
  }

 private:
  std::ofstream out_;
  std::string path_;
};

class Reader {
 public:
  explicit Reader(const std::filesystem::path& p) : in_(p, std::ios::binary), path_(p.string()) {
    if (!in_) throw InputError("cannot open " + path_);
  }
  template <typename T>
  T get(const char* what) {
    T v;
    raw(&v, sizeof(T), what);
    return v;
  }
  void raw(void* p, std::size_t n, const char* what) {
    if (!in_.read(static_cast<char*>(p), std::streamsize(n)))
      throw FormatError(path_ + ": truncated " + what, pos_ + std::uint64_t(in_.gcount()));
    pos_ += n;
  }
  void expect_end() {
    if (in_.peek() != std::char_traits<char>::eof()) throw FormatError(path_ + ": trailing bytes", pos_);
  }
  std::uint64_t pos() const { return pos_; }
  const std::string& path() const { return path_; }

 private:
  std::ifstream in_;
  std::string path_;
  std::uint64_t pos_ = 0;
};

}  // namespace detail

struct TensorBlock {
  std::vector<std::size_t> shape;
  std::vector<float> values;
};

inline void write_tensor_file(const std::filesystem::path& path, const std::vector<TensorBlock>& blocks) {
  detail::Writer w(path);
  w.raw(kCheckpointMagic, 4);
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint32_t>(std::uint32_t(blocks.size()));
  std::uint64_t off = 0;
  for (const auto& b : blocks) {
    if (shape_size(b.shape) != b.values.size()) throw InputError("tensor block shape does not match its data");
    w.put<std::uint64_t>(off);
    w.put<std::uint64_t>(b.values.size());
    w.put<std::uint32_t>(std::uint32_t(b.shape.size()));
    for (auto d : b.shape) w.put<std::uint64_t>(d);
    off += b.values.size();
  }
  for (const auto& b : blocks) w.raw(b.values.data(), b.values.size() * sizeof(float));
  w.close();
}

inline std::vector<TensorBlock> read_tensor_file(const std::filesystem::path& path) {
  detail::Reader r(path);
  char magic[4];
  r.raw(magic, 4, "magic");
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) throw FormatError(r.path() + ": bad magic", 0);
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion)
    throw FormatError(r.path() + ": unsupported version " + std::to_string(version), 4);
  const auto count = r.get<std::uint32_t>("layer count");
  std::vector<TensorBlock> blocks(count);
  std::uint64_t expect = 0;
  for (auto& b : blocks) {
    const auto at = r.pos();
    const auto off = r.get<std::uint64_t>("layer offset");
    const auto len = r.get<std::uint64_t>("layer length");
    const auto rank = r.get<std::uint32_t>("layer rank");
    if (rank > 8) throw FormatError(r.path() + ": implausible rank " + std::to_string(rank), at);
    for (std::uint32_t k = 0; k < rank; ++k) b.shape.push_back(r.get<std::uint64_t>("layer dims"));
    if (off != expect || shape_size(b.shape) != len)
      throw FormatError(r.path() + ": inconsistent layer table", at);
    expect += len;
    b.values.resize(len);
  }
  for (auto& b : blocks) r.raw(b.values.data(), b.values.size() * sizeof(float), "values");
  r.expect_end();
  return blocks;
}

inline void save_checkpoint(const std::filesystem::path& path, const ParamVector<float>& params) {
  std::vector<TensorBlock> blocks;
  for (std::size_t l = 0; l < params.layout()->size(); ++l) {
    auto part = params.entry(l);
    blocks.push_back({params.layout()->entry(l).shape, {part.begin(), part.end()}});
  }
  write_tensor_file(path, blocks);
}

inline std::uint64_t layout_hash_of(const std::vector<TensorBlock>& blocks) {
  std::vector<ParamEntry> entries;
  std::size_t off = 0;
  for (const auto& b : blocks) {
    entries.push_back({"", off, b.values.size(), b.shape});
    off += b.values.size();
  }
  return ParamLayout::from_entries(std::move(entries)).hash();
}

// Loads parameters into `layout`; a checkpoint of any other shape is rejected.
inline ParamVector<float> load_checkpoint(const std::filesystem::path& path, const LayoutPtr& layout) {
  const auto blocks = read_tensor_file(path);
  if (layout_hash_of(blocks) != layout->hash())
    throw IncompatibleLayout(path.string() + ": checkpoint layout does not match the configured topology");
  ParamVector<float> p(layout);
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    auto dst = p.entry(l);
    std::copy(blocks[l].values.begin(), blocks[l].values.end(), dst.begin());
  }
  return p;
}

inline Model<float> load_model(const std::filesystem::path& path, const TopologyPtr& topo) {
  return Model<float>(topo, load_checkpoint(path, topo->layout()));
}

inline void save_mask(const std::filesystem::path& path, const ParamMask& mask) {
  detail::Writer w(path);
  w.raw(kMaskMagic, 4);
  w.put<std::uint32_t>(kMaskVersion);
  w.put<std::uint64_t>(mask.layout()->hash());
  w.put<std::uint64_t>(mask.size());
  std::vector<std::uint8_t> packed((mask.size() + 7) / 8, 0);
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask.test(i)) packed[i / 8] |= std::uint8_t(1u << (i % 8));
  w.raw(packed.data(), packed.size());
  w.close();
}

inline ParamMask load_mask(const std::filesystem::path& path, const LayoutPtr& layout) {
  detail::Reader r(path);
  char magic[4];
  r.raw(magic, 4, "magic");
  if (std::memcmp(magic, kMaskMagic, 4) != 0) throw FormatError(r.path() + ": bad mask magic", 0);
  const auto version = r.get<std::uint32_t>("version");
  if (version != kMaskVersion)
    throw FormatError(r.path() + ": unsupported mask version " + std::to_string(version), 4);
  const auto hash = r.get<std::uint64_t>("layout hash");
  const auto bits = r.get<std::uint64_t>("bit count");
  if (hash != layout->hash() || bits != layout->total())
    throw IncompatibleLayout(r.path() + ": mask layout does not match the configured topology");
  std::vector<std::uint8_t> packed((bits + 7) / 8);
  r.raw(packed.data(), packed.size(), "mask bits");
  r.expect_end();
  ParamMask m(layout);
  for (std::size_t i = 0; i < bits; ++i) m.set(i, (packed[i / 8] >> (i % 8)) & 1u);
  return m;
}

// Trigger set: <stem>.json manifest plus <stem>.bin holding two tensors,
// adversarial images then sources, each [count, C, H, W].
inline void save_triggers(const std::filesystem::path& stem, const TriggerSet& set) {
  if (set.size() == 0) throw InputError("save_triggers: empty trigger set");
  const auto& shape = set.entries.front().adv.shape;
  std::vector<std::size_t> full{set.size()};
  full.insert(full.end(), shape.begin(), shape.end());
  TensorBlock adv{full, {}}, src{full, {}};
  nlohmann::ordered_json j;
  j["format"] = "fsbd-triggers";
  j["version"] = 1;
  j["count"] = set.size();
  j["epsilon"] = set.epsilon;
  j["target_label"] = set.target_label;
  j["image_shape"] = shape;
  j["tensors"] = std::filesystem::path(stem).filename().string() + ".bin";
  auto ids = nlohmann::json::array(), labels = nlohmann::json::array(), conv = nlohmann::json::array();
  for (const auto& e : set.entries) {
    if (e.adv.shape != shape || e.source.shape != shape) throw InputError("save_triggers: mixed image shapes");
    adv.values.insert(adv.values.end(), e.adv.data.begin(), e.adv.data.end());
    src.values.insert(src.values.end(), e.source.data.begin(), e.source.data.end());
    ids.push_back(e.source_index);
    labels.push_back(e.source_label);
    conv.push_back(e.converged);
  }
  j["source_ids"] = ids;
  j["source_labels"] = labels;
  j["converged"] = conv;
  write_tensor_file(std::filesystem::path(stem.string() + ".bin"), {adv, src});
  std::ofstream m(stem.string() + ".json");
  if (!m) throw InputError("cannot write " + stem.string() + ".json");
  m << j.dump(2) << "\n";
}

inline TriggerSet load_triggers(const std::filesystem::path& stem) {
  const std::string manifest = stem.extension() == ".json" ? stem.string() : stem.string() + ".json";
  std::ifstream in(manifest);
  if (!in) throw InputError("cannot open " + manifest);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(manifest + ": " + e.what(), 0);
  }
  TriggerSet set;
  std::vector<TensorBlock> blocks;
  std::size_t count = 0;
  std::vector<std::size_t> shape;
  try {
    count = j.at("count").get<std::size_t>();
    set.epsilon = j.at("epsilon").get<double>();
    set.target_label = j.at("target_label").get<int>();
    shape = j.at("image_shape").get<std::vector<std::size_t>>();
    const auto dir = std::filesystem::path(manifest).parent_path();
    blocks = read_tensor_file(dir / j.at("tensors").get<std::string>());
    if (blocks.size() != 2 || blocks[0].values.size() != count * shape_size(shape) ||
        blocks[1].values.size() != blocks[0].values.size() || j.at("source_ids").size() != count)
      throw FormatError(manifest + ": tensor file does not match the manifest", 0);
    const std::size_t D = shape_size(shape);
    for (std::size_t i = 0; i < count; ++i) {
      TriggerEntry e;
      e.adv = Tensor<float>(shape, std::vector<float>(blocks[0].values.begin() + i * D,
                                                      blocks[0].values.begin() + (i + 1) * D));
      e.source = Tensor<float>(shape, std::vector<float>(blocks[1].values.begin() + i * D,
                                                         blocks[1].values.begin() + (i + 1) * D));
      e.source_index = j["source_ids"][i].get<std::size_t>();
      e.source_label = j["source_labels"][i].get<int>();
      e.converged = j["converged"][i].get<bool>();
      set.entries.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(manifest + ": " + e.what(), 0);
  }
  return set;
}

}  // namespace fsbd
