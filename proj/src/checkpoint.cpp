#include "deskdet/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace deskdet {

namespace {

constexpr char kMagic[9] = "DDCKPT01";

template <class T>
void put(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T take(std::ifstream& in, const std::string& path) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error("read_checkpoint: truncated file " + path);
  return v;
}

}  // namespace

void write_checkpoint(const std::string& path, const std::map<std::string, Array>& entries) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_checkpoint: cannot open " + path);
  out.write(kMagic, 8);
  put<std::uint64_t>(out, entries.size());
  for (const auto& [name, arr] : entries) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(arr.shape.size()));
    for (int d : arr.shape) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    out.write(reinterpret_cast<const char*>(arr.data.data()),
              static_cast<std::streamsize>(arr.data.size() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("write_checkpoint: write failed for " + path);
}

std::map<std::string, Array> read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_checkpoint: cannot open " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0) {
    throw std::runtime_error("read_checkpoint: bad magic in " + path);
  }
  const auto count = take<std::uint64_t>(in, path);
  std::map<std::string, Array> out;
  for (std::uint64_t e = 0; e < count; ++e) {
    const auto name_len = take<std::uint32_t>(in, path);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (!in) throw std::runtime_error("read_checkpoint: truncated file " + path);
    const auto ndim = take<std::uint32_t>(in, path);
    Shape shape;
    for (std::uint32_t d = 0; d < ndim; ++d)
      shape.push_back(static_cast<int>(take<std::uint32_t>(in, path)));
    Array arr(shape);
    in.read(reinterpret_cast<char*>(arr.data.data()),
            static_cast<std::streamsize>(arr.data.size() * sizeof(double)));
    if (!in) throw std::runtime_error("read_checkpoint: truncated file " + path);
    out.emplace(std::move(name), std::move(arr));
  }
  return out;
}

}  // namespace deskdet
