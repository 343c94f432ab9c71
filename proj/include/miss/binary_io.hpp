// Copyright 2026 The MISS Retrieval Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
// =============================================================================

#ifndef MISS_BINARY_IO_HPP
#define MISS_BINARY_IO_HPP

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>

#include "miss/common.hpp"

namespace miss::io {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

class BinaryWriter {
 public:
  explicit BinaryWriter(const std::string& path)
      : path_(path), out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) throw IoError("cannot open for writing: " + path);
  }

  void bytes(std::string_view s) { out_.write(s.data(), static_cast<std::streamsize>(s.size())); }

  template <class T>
    requires std::is_arithmetic_v<T>
  void scalar(T v) {
    out_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }

  void floats(std::span<const float> v) {
    out_.write(reinterpret_cast<const char*>(v.data()),
               static_cast<std::streamsize>(v.size_bytes()));
  }

  // u32 length prefix followed by raw bytes.
  void blob(std::string_view s) {
    scalar<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    bytes(s);
  }

  void close() {
    out_.flush();
    if (!out_) throw IoError("write failed: " + path_);
    out_.close();
  }

 private:
  std::string path_;
  std::ofstream out_;
};

class BinaryReader {
 public:
  explicit BinaryReader(const std::string& path)
      : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw IoError("cannot open for reading: " + path);
  }

  void expect_magic(std::string_view magic) {
    std::string got(magic.size(), '\0');
    in_.read(got.data(), static_cast<std::streamsize>(got.size()));
    if (!in_ || got != magic)
      throw FormatError(path_ + ": bad magic, expected " + std::string(magic));
  }

  template <class T>
    requires std::is_arithmetic_v<T>
  T scalar() {
    T v{};
    in_.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in_) throw FormatError(path_ + ": truncated file");
    return v;
  }

  void floats(std::span<float> v) {
    in_.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size_bytes()));
    if (!in_) throw FormatError(path_ + ": truncated file");
  }

  std::string blob(std::size_t max_len = 1u << 26) {
    const auto n = scalar<std::uint32_t>();
    if (n > max_len) throw FormatError(path_ + ": implausible blob length");
    std::string s(n, '\0');
    in_.read(s.data(), n);
    if (!in_) throw FormatError(path_ + ": truncated file");
    return s;
  }

  bool at_end() { return in_.peek() == std::char_traits<char>::eof(); }

  const std::string& path() const { return path_; }

 private:
  std::string path_;
  std::ifstream in_;
};

// Optional trailing config echo shared by the binary artifacts.
inline constexpr std::string_view kConfigTrailerMagic = "CFG1";

inline void write_config_trailer(BinaryWriter& w, std::string_view config_json) {
  w.bytes(kConfigTrailerMagic);
  w.blob(config_json);
}

inline std::string read_config_trailer(BinaryReader& r) {
  if (r.at_end()) return {};
  r.expect_magic(kConfigTrailerMagic);
  return r.blob();
}

}  // namespace miss::io

#endif  // MISS_BINARY_IO_HPP
