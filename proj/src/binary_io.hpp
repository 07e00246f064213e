// Copyright 2026 The bmfpp Authors.
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

#pragma once

// Little helpers for the fixed-layout binary artifacts (chains, posterior
// files). Values are written in host byte order; every artifact starts with an
// 8-byte magic string and a version word.

#include "bmfpp/errors.hpp"
#include "bmfpp/linalg.hpp"

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

namespace bmfpp::detail {

class BinaryWriter {
 public:
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const char*>(data);
    buffer_.insert(buffer_.end(), p, p + n);
  }
  template <typename T>
    requires std::is_arithmetic_v<T>
  void put(T value) {
    bytes(&value, sizeof(T));
  }
  void put_magic(std::string_view magic) { bytes(magic.data(), magic.size()); }
  template <typename Derived>
  void put_dense(const Eigen::DenseBase<Derived>& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) put<double>(m(r, c));
    }
  }
  /// Upper triangle of a symmetric matrix, row by row.
  void put_upper(const Matrix& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = r; c < m.cols(); ++c) put<double>(m(r, c));
    }
  }

  /// Writes to a sibling temp file then renames, so readers never see a partial file.
  void commit(const std::filesystem::path& path) const {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      if (!out) throw IoError("cannot write '" + tmp.string() + "'");
      out.write(buffer_.data(), static_cast<std::streamsize>(buffer_.size()));
      if (!out) throw IoError("write failed for '" + tmp.string() + "'");
    }
    std::filesystem::rename(tmp, path);
  }

 private:
  std::vector<char> buffer_;
};

class BinaryReader {
 public:
  explicit BinaryReader(const std::filesystem::path& path) : path_(path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    buffer_.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }

  void bytes(void* out, std::size_t n) {
    if (pos_ + n > buffer_.size()) {
      throw IoError("truncated file '" + path_.string() + "' at byte " + std::to_string(pos_));
    }
    std::memcpy(out, buffer_.data() + pos_, n);
    pos_ += n;
  }
  template <typename T>
    requires std::is_arithmetic_v<T>
  T get() {
    T value{};
    bytes(&value, sizeof(T));
    return value;
  }
  void expect_magic(std::string_view magic) {
    std::string got(magic.size(), '\0');
    bytes(got.data(), got.size());
    if (got != magic) throw IoError("'" + path_.string() + "' is not a " + std::string(magic) + " file");
  }
  /// Guards size fields against corrupt headers before allocating.
  void expect_remaining(std::uint64_t n_doubles) {
    const auto left = buffer_.size() - pos_;
    if (n_doubles > left / sizeof(double)) {
      throw IoError("truncated file '" + path_.string() + "': header promises more data than present");
    }
  }
  Matrix get_dense(Eigen::Index rows, Eigen::Index cols) {
    Matrix m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
      for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = get<double>();
    }
    return m;
  }
  Matrix get_upper(Eigen::Index k) {
    Matrix m(k, k);
    for (Eigen::Index r = 0; r < k; ++r) {
      for (Eigen::Index c = r; c < k; ++c) m(r, c) = m(c, r) = get<double>();
    }
    return m;
  }
  bool at_end() const { return pos_ == buffer_.size(); }
  void expect_end() const {
    if (!at_end()) throw IoError("trailing bytes in '" + path_.string() + "'");
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  std::vector<char> buffer_;
  std::size_t pos_ = 0;
};

}  // namespace bmfpp::detail
