#pragma once

// Binary model checkpoints.
//
// Layout (little-endian):
//   [0, 512)   fixed header: magic, format version, element width, arch
//              config, init seed, assignment metadata; per-block assignment
//              entries (one byte each) live at offset 128.
//   [512, ..)  assignment entries when they exceed the header capacity
//   then       every stored value in InceptionModel::state_tensors() order.

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "cmi/model.hpp"

namespace cmi {

inline constexpr std::array<char, 8> kCheckpointMagic{'C', 'M', 'I', 'V', '4', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::size_t kHeaderAssignmentOffset = 128;

namespace detail {

class ByteWriter {
public:
  explicit ByteWriter(std::vector<std::uint8_t>& out) : out_(out) {}
  template <typename V>
  void put(V v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    out_.insert(out_.end(), p, p + sizeof(V));
  }

private:
  std::vector<std::uint8_t>& out_;
};

class ByteReader {
public:
  ByteReader(const std::vector<std::uint8_t>& in, std::size_t pos) : in_(in), pos_(pos) {}
  template <typename V>
  V get() {
    if (pos_ + sizeof(V) > in_.size()) throw StructuralError("checkpoint truncated");
    V v;
    std::memcpy(&v, in_.data() + pos_, sizeof(V));
    pos_ += sizeof(V);
    return v;
  }
  std::size_t pos() const { return pos_; }

private:
  const std::vector<std::uint8_t>& in_;
  std::size_t pos_;
};

}  // namespace detail

template <typename T>
std::vector<std::uint8_t> serialize_model(InceptionModel<T>& model) {
  const auto& cfg = model.config();
  const auto& a = model.assignment();
  std::vector<std::uint8_t> bytes;
  bytes.reserve(kCheckpointHeaderBytes);
  detail::ByteWriter w(bytes);
  for (char c : kCheckpointMagic) w.put(c);
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint32_t>(sizeof(T));
  w.put<std::int32_t>(cfg.k);
  w.put<std::int32_t>(cfg.m);
  w.put<std::int32_t>(cfg.n);
  w.put<std::uint8_t>(cfg.mode == ArchMode::full);
  w.put<std::uint8_t>(cfg.padding == PaddingScheme::same);
  w.put<std::uint8_t>(cfg.batchnorm);
  w.put<std::uint8_t>(a.granularity == Granularity::per_feature_map);
  w.put<double>(cfg.width_multiplier);
  w.put<std::uint64_t>(cfg.input_h);
  w.put<std::uint64_t>(cfg.input_w);
  w.put<std::uint64_t>(cfg.channels_in);
  w.put<std::uint64_t>(cfg.num_classes);
  w.put<double>(cfg.dropout);
  w.put<double>(a.elu_alpha);
  w.put<std::uint8_t>(a.seed.has_value());
  w.put<std::uint64_t>(a.seed.value_or(0));
  w.put<std::uint64_t>(model.init_seed());
  w.put<std::uint8_t>(model.wiring() == ActivationWiring::hardcoded_relu);
  w.put<std::uint64_t>(model.stored_value_count());
  w.put<std::uint64_t>(a.entries.size());
  require(bytes.size() <= kHeaderAssignmentOffset, "checkpoint header overflow");
  bytes.resize(kHeaderAssignmentOffset, 0);
  const bool inline_entries = a.entries.size() <= kHeaderAssignmentCapacity;
  if (inline_entries)
    for (auto k : a.entries) bytes.push_back(static_cast<std::uint8_t>(k));
  bytes.resize(kCheckpointHeaderBytes, 0);
  if (!inline_entries)
    for (auto k : a.entries) bytes.push_back(static_cast<std::uint8_t>(k));
  for (auto* t : model.state_tensors())
    for (T v : t->values()) w.put<T>(v);
  return bytes;
}

// Rebuilds the model exactly; throws StructuralError on any mismatch, bad
// magic, unsupported version or truncation, never returning a partial model.
template <typename T>
InceptionModel<T> deserialize_model(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < kCheckpointHeaderBytes) throw StructuralError("checkpoint truncated: missing header");
  detail::ByteReader r(bytes, 0);
  for (char c : kCheckpointMagic)
    if (r.get<char>() != c) throw StructuralError("not a model checkpoint (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw StructuralError("unsupported checkpoint version " + std::to_string(version));
  const auto elem = r.get<std::uint32_t>();
  if (elem != sizeof(T))
    throw StructuralError("checkpoint stores " + std::to_string(elem) + "-byte elements, expected " +
                          std::to_string(sizeof(T)));
  ArchConfig cfg;
  cfg.k = r.get<std::int32_t>();
  cfg.m = r.get<std::int32_t>();
  cfg.n = r.get<std::int32_t>();
  cfg.mode = r.get<std::uint8_t>() ? ArchMode::full : ArchMode::compressed;
  cfg.padding = r.get<std::uint8_t>() ? PaddingScheme::same : PaddingScheme::reference;
  cfg.batchnorm = r.get<std::uint8_t>() != 0;
  ActivationAssignment a;
  a.granularity = r.get<std::uint8_t>() ? Granularity::per_feature_map : Granularity::per_block;
  cfg.width_multiplier = r.get<double>();
  cfg.input_h = r.get<std::uint64_t>();
  cfg.input_w = r.get<std::uint64_t>();
  cfg.channels_in = r.get<std::uint64_t>();
  cfg.num_classes = r.get<std::uint64_t>();
  cfg.dropout = r.get<double>();
  a.elu_alpha = r.get<double>();
  const bool has_seed = r.get<std::uint8_t>() != 0;
  const auto seed = r.get<std::uint64_t>();
  if (has_seed) a.seed = seed;
  const auto init_seed = r.get<std::uint64_t>();
  const auto wiring = r.get<std::uint8_t>() ? ActivationWiring::hardcoded_relu : ActivationWiring::assignment;
  const auto value_count = r.get<std::uint64_t>();
  const auto entry_count = r.get<std::uint64_t>();

  const bool inline_entries = entry_count <= kHeaderAssignmentCapacity;
  std::size_t pos = inline_entries ? kHeaderAssignmentOffset : kCheckpointHeaderBytes;
  const std::size_t payload = inline_entries ? kCheckpointHeaderBytes : kCheckpointHeaderBytes + entry_count;
  const std::size_t expected = payload + value_count * sizeof(T);
  if (bytes.size() != expected)
    throw StructuralError("checkpoint size " + std::to_string(bytes.size()) + " bytes, expected " +
                          std::to_string(expected) + (bytes.size() < expected ? " (truncated)" : ""));
  for (std::uint64_t i = 0; i < entry_count; ++i) {
    const auto v = bytes[pos++];
    if (v > static_cast<std::uint8_t>(ActivationKind::elu))
      throw StructuralError("checkpoint holds an invalid activation code " + std::to_string(v));
    a.entries.push_back(static_cast<ActivationKind>(v));
  }

  InceptionModel<T> model(make_plan(cfg), std::move(a), init_seed, wiring);
  if (model.stored_value_count() != value_count)
    throw StructuralError("checkpoint holds " + std::to_string(value_count) +
                          " values but the architecture needs " +
                          std::to_string(model.stored_value_count()));
  detail::ByteReader values(bytes, payload);
  for (auto* t : model.state_tensors())
    for (auto& v : t->values()) v = values.get<T>();
  return model;
}

template <typename T>
void save_model(InceptionModel<T>& model, const std::string& path) {
  const auto bytes = serialize_model(model);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw StructuralError("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw StructuralError("failed writing '" + path + "'");
}

template <typename T>
InceptionModel<T> load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw StructuralError("cannot open checkpoint '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_model<T>(bytes);
}

}  // namespace cmi
