#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "mapu/nn.hpp"

namespace mapu {

// Parameter snapshot container: magic "MAPU", format version u32 LE, then
// per-tensor records until EOF:
//   name length u32 LE, UTF-8 name, rank u32 LE, dims u64 LE each,
//   raw 32-bit LE values.
inline constexpr std::uint32_t kParamFormatVersion = 1;

namespace detail {

template <class V>
void write_le(std::ofstream& out, V v) {
  unsigned char buf[sizeof(V)];
  for (std::size_t i = 0; i < sizeof(V); ++i)
    buf[i] = static_cast<unsigned char>((static_cast<std::uint64_t>(v) >>
                                         (8 * i)) &
                                        0xff);
  out.write(reinterpret_cast<const char*>(buf), sizeof(V));
}

template <class V>
bool read_le(std::ifstream& in, V& v) {
  unsigned char buf[sizeof(V)];
  in.read(reinterpret_cast<char*>(buf), sizeof(V));
  if (in.gcount() != static_cast<std::streamsize>(sizeof(V))) return false;
  std::uint64_t acc = 0;
  for (std::size_t i = 0; i < sizeof(V); ++i)
    acc |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  v = static_cast<V>(acc);
  return true;
}

}  // namespace detail

template <class T>
void save_params(const std::filesystem::path& path,
                 const ParamList<T>& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot open " + path.string() + " for writing");
  out.write("MAPU", 4);
  detail::write_le<std::uint32_t>(out, kParamFormatVersion);
  for (const auto& p : params) {
    detail::write_le<std::uint32_t>(
        out, static_cast<std::uint32_t>(p.name.size()));
    out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    const auto& shape = p.tensor.shape();
    detail::write_le<std::uint32_t>(out,
                                    static_cast<std::uint32_t>(shape.size()));
    for (auto d : shape)
      detail::write_le<std::uint64_t>(out, static_cast<std::uint64_t>(d));
    for (T v : p.tensor.value()) {
      float f = static_cast<float>(v);
      std::uint32_t bits;
      static_assert(sizeof(bits) == sizeof(f));
      std::memcpy(&bits, &f, 4);
      detail::write_le<std::uint32_t>(out, bits);
    }
  }
  if (!out) throw io_error("write failed on " + path.string());
}

struct LoadedTensor {
  Shape shape;
  std::vector<float> values;
};

inline std::map<std::string, LoadedTensor> load_params_raw(
    const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (in.gcount() != 4 || std::string(magic, 4) != "MAPU")
    throw io_error(path.string() + ": bad magic");
  std::uint32_t version = 0;
  if (!detail::read_le(in, version) || version != kParamFormatVersion)
    throw io_error(path.string() + ": unsupported format version");
  std::map<std::string, LoadedTensor> out;
  for (;;) {
    std::uint32_t name_len = 0;
    if (!detail::read_le(in, name_len)) break;  // clean EOF
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    std::uint32_t rank = 0;
    if (!in || !detail::read_le(in, rank))
      throw io_error(path.string() + ": truncated record");
    LoadedTensor t;
    std::size_t n = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      std::uint64_t d = 0;
      if (!detail::read_le(in, d))
        throw io_error(path.string() + ": truncated dims");
      t.shape.push_back(static_cast<std::size_t>(d));
      n *= static_cast<std::size_t>(d);
    }
    t.values.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t bits = 0;
      if (!detail::read_le(in, bits))
        throw io_error(path.string() + ": truncated values");
      float f;
      std::memcpy(&f, &bits, 4);
      t.values[i] = f;
    }
    out.emplace(std::move(name), std::move(t));
  }
  return out;
}

// Loads values into an existing parameter list by name; shapes must match.
template <class T>
void load_params(const std::filesystem::path& path, ParamList<T>& params) {
  auto raw = load_params_raw(path);
  for (auto& p : params) {
    auto it = raw.find(p.name);
    if (it == raw.end())
      throw io_error(path.string() + ": missing tensor " + p.name);
    if (it->second.shape != p.tensor.shape())
      throw io_error(path.string() + ": shape mismatch for " + p.name);
    auto& dst = p.tensor.value();
    for (std::size_t i = 0; i < dst.size(); ++i)
      dst[i] = static_cast<T>(it->second.values[i]);
  }
}

}  // namespace mapu
