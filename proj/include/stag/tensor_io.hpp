#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "stag/mat.hpp"

namespace stag {

// On-disk tensors are raw row-major little-endian float32; in memory
// everything is double. This host is little-endian; the byte order is part of
// the file contract.
inline void write_f32(const std::filesystem::path& path, const Mat& m) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw RuntimeFailure("cannot open for writing: " + path.string());
  std::vector<float> buf(m.a.size());
  for (size_t i = 0; i < m.a.size(); ++i) buf[i] = static_cast<float>(m.a[i]);
  f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!f) throw RuntimeFailure("short write: " + path.string());
}

inline Mat read_f32(const std::filesystem::path& path, int rows, int cols) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ValidationError("cannot open tensor file: " + path.string());
  f.seekg(0, std::ios::end);
  auto bytes = static_cast<uint64_t>(f.tellg());
  f.seekg(0, std::ios::beg);
  uint64_t expect = static_cast<uint64_t>(rows) * static_cast<uint64_t>(cols) * sizeof(float);
  if (bytes != expect)
    throw ValidationError("tensor size mismatch in " + path.string() + ": expected " + std::to_string(expect) +
                          " bytes for " + std::to_string(rows) + "x" + std::to_string(cols) + ", found " +
                          std::to_string(bytes));
  std::vector<float> buf(static_cast<size_t>(rows) * cols);
  f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(bytes));
  if (!f) throw RuntimeFailure("short read: " + path.string());
  Mat m(rows, cols);
  for (size_t i = 0; i < buf.size(); ++i) m.a[i] = static_cast<double>(buf[i]);
  return m;
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ValidationError("cannot open file: " + path.string());
  return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw RuntimeFailure("cannot open for writing: " + path.string());
  f.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!f) throw RuntimeFailure("short write: " + path.string());
}

}  // namespace stag
