#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "fedcil/error.hpp"
#include "fedcil/tensor.hpp"

// Named, ordered collection of parameter tensors — the unit of server/client
// exchange — plus the versioned binary checkpoint format ("FCIL").

namespace fedcil {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct ParameterEntry {
  std::string name;
  Shape shape;
  std::vector<double> data;

  bool operator==(const ParameterEntry&) const = default;
};

class ParameterVector {
 public:
  std::uint32_t schema_version = kCheckpointVersion;

  void add(std::string name, Shape shape, std::vector<double> data) {
    if (shape_numel(shape) != data.size()) {
      throw DimensionError("ParameterVector::add: data does not match shape");
    }
    if (contains(name)) {
      throw ContractError("ParameterVector::add: duplicate name " + name);
    }
    entries_.push_back({std::move(name), std::move(shape), std::move(data)});
  }

  bool contains(std::string_view name) const {
    return find_index(name) != npos;
  }

  const ParameterEntry& at(std::string_view name) const {
    const std::size_t i = find_index(name);
    if (i == npos) {
      throw RangeError("ParameterVector: no entry named " + std::string(name));
    }
    return entries_[i];
  }

  ParameterEntry& at(std::string_view name) {
    return const_cast<ParameterEntry&>(
        static_cast<const ParameterVector*>(this)->at(name));
  }

  const std::vector<ParameterEntry>& entries() const { return entries_; }
  std::vector<ParameterEntry>& entries() { return entries_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

  Tensor tensor(std::string_view name) const {
    const ParameterEntry& e = at(name);
    return Tensor::from(e.shape, e.data);
  }

  std::size_t total_values() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.data.size();
    return n;
  }

  // Entries whose name starts with `prefix`.
  ParameterVector subset(std::string_view prefix) const {
    ParameterVector out;
    out.schema_version = schema_version;
    for (const auto& e : entries_) {
      if (e.name.starts_with(prefix)) out.entries_.push_back(e);
    }
    return out;
  }

  bool operator==(const ParameterVector&) const = default;

 private:
  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

  std::size_t find_index(std::string_view name) const {
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      if (entries_[i].name == name) return i;
    }
    return npos;
  }

  std::vector<ParameterEntry> entries_;
};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline void put_f64(std::ostream& os, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, 8);
  put_u64(os, bits);
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) {
    throw IoError("checkpoint: truncated stream");
  }
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

inline std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) {
    throw IoError("checkpoint: truncated stream");
  }
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline double get_f64(std::istream& is) {
  const std::uint64_t bits = get_u64(is);
  double d;
  std::memcpy(&d, &bits, 8);
  return d;
}

}  // namespace detail

// Layout (all integers little-endian):
//   magic "FCIL" | version u32 | entry count u64
//   per entry: name length u32 | name bytes | rank u32 | dims u64 each
//              | float64 payload
inline void save_checkpoint(const ParameterVector& pv, std::ostream& os) {
  os.write("FCIL", 4);
  detail::put_u32(os, pv.schema_version);
  detail::put_u64(os, pv.size());
  for (const auto& e : pv.entries()) {
    detail::put_u32(os, static_cast<std::uint32_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    detail::put_u32(os, static_cast<std::uint32_t>(e.shape.size()));
    for (std::size_t d : e.shape) detail::put_u64(os, d);
    for (double v : e.data) detail::put_f64(os, v);
  }
  if (!os) throw IoError("checkpoint: write failed");
}

inline ParameterVector load_checkpoint(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::string_view(magic, 4) != "FCIL") {
    throw IoError("checkpoint: bad magic");
  }
  const std::uint32_t version = detail::get_u32(is);
  if (version != kCheckpointVersion) {
    throw IoError("checkpoint: unsupported version " +
                  std::to_string(version));
  }
  const std::uint64_t count = detail::get_u64(is);
  ParameterVector pv;
  pv.schema_version = version;
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = detail::get_u32(is);
    std::string name(name_len, '\0');
    if (!is.read(name.data(), name_len)) {
      throw IoError("checkpoint: truncated name");
    }
    const std::uint32_t rank = detail::get_u32(is);
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(detail::get_u64(is));
    std::vector<double> data(shape_numel(shape));
    for (auto& v : data) v = detail::get_f64(is);
    pv.add(std::move(name), std::move(shape), std::move(data));
  }
  return pv;
}

inline void save_checkpoint_file(const ParameterVector& pv,
                                 const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("checkpoint: cannot open " + path + " for writing");
  save_checkpoint(pv, os);
}

inline ParameterVector load_checkpoint_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checkpoint: cannot open " + path);
  return load_checkpoint(is);
}

}  // namespace fedcil
