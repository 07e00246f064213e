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

#include "binary_io.hpp"
#include "bmfpp/approx.hpp"
#include "bmfpp/errors.hpp"

namespace bmfpp {

namespace {
constexpr std::string_view kPosteriorMagic = "BMFPPPST";
constexpr std::uint32_t kPosteriorVersion = 1;
}  // namespace

void write_posteriors(const std::filesystem::path& path, const PosteriorSet& set) {
  detail::BinaryWriter out;
  out.put_magic(kPosteriorMagic);
  out.put<std::uint32_t>(kPosteriorVersion);
  out.put<std::uint64_t>(set.k);
  out.put<std::uint8_t>(static_cast<std::uint8_t>(set.side));
  out.put<std::uint8_t>(static_cast<std::uint8_t>(set.kind));
  out.put<std::uint64_t>(set.row_begin);
  out.put<std::uint64_t>(set.size());
  if (set.kind == ApproxKind::kGmm) {
    for (const auto& g : set.mixtures) {
      out.put<std::uint32_t>(static_cast<std::uint32_t>(g.components.size()));
      for (const auto& c : g.components) {
        out.put<double>(c.weight);
        out.put_dense(c.mean);
        out.put_upper(c.precision);
      }
    }
  } else {
    for (const auto& g : set.gaussians) {
      out.put_dense(g.mean);
      out.put_upper(g.precision);
    }
  }
  out.commit(path);
}

PosteriorSet read_posteriors(const std::filesystem::path& path) {
  detail::BinaryReader in(path);
  in.expect_magic(kPosteriorMagic);
  if (in.get<std::uint32_t>() != kPosteriorVersion) {
    throw IoError("unsupported posterior file version in '" + path.string() + "'");
  }
  PosteriorSet set;
  set.k = in.get<std::uint64_t>();
  const auto side = in.get<std::uint8_t>();
  const auto kind = in.get<std::uint8_t>();
  if (side > 1 || kind > 2) throw IoError("corrupt posterior header in '" + path.string() + "'");
  set.side = static_cast<Side>(side);
  set.kind = static_cast<ApproxKind>(kind);
  set.row_begin = in.get<std::uint64_t>();
  const auto rows = in.get<std::uint64_t>();
  const auto k = static_cast<Eigen::Index>(set.k);
  const std::uint64_t per_gaussian = set.k + set.k * (set.k + 1) / 2;
  if (set.kind == ApproxKind::kGmm) {
    in.expect_remaining(rows / 2);  // every row holds at least its 4-byte component count
    set.mixtures.reserve(rows);
    for (std::uint64_t r = 0; r < rows; ++r) {
      const auto c = in.get<std::uint32_t>();
      in.expect_remaining(static_cast<std::uint64_t>(c) * (per_gaussian + 1));
      GmmPosterior g;
      g.components.reserve(c);
      for (std::uint32_t i = 0; i < c; ++i) {
        GmmComponent comp;
        comp.weight = in.get<double>();
        comp.mean = in.get_dense(k, 1);
        comp.precision = in.get_upper(k);
        g.components.push_back(std::move(comp));
      }
      set.mixtures.push_back(std::move(g));
    }
  } else {
    in.expect_remaining(rows * per_gaussian);
    set.gaussians.reserve(rows);
    for (std::uint64_t r = 0; r < rows; ++r) {
      RowPosterior g;
      g.mean = in.get_dense(k, 1);
      g.precision = in.get_upper(k);
      set.gaussians.push_back(std::move(g));
    }
  }
  in.expect_end();
  return set;
}

}  // namespace bmfpp
