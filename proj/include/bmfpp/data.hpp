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

#include "bmfpp/linalg.hpp"

#include <json.hpp>

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string_view>
#include <vector>

namespace bmfpp {

struct Entry {
  std::uint32_t row = 0;
  std::uint32_t col = 0;
  double value = 0.0;

  friend bool operator==(const Entry&, const Entry&) = default;
};

/// Observed entries of a partially observed N x D matrix in coordinate form.
///
/// The constructor validates that every index is in range and that no (row, col)
/// pair appears twice; a default-constructed matrix is the empty 0 x 0 matrix.
class SparseMatrix {
 public:
  SparseMatrix() = default;
  SparseMatrix(std::size_t n_rows, std::size_t n_cols, std::vector<Entry> entries);

  std::size_t n_rows() const noexcept { return n_rows_; }
  std::size_t n_cols() const noexcept { return n_cols_; }
  std::size_t nnz() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }
  const std::vector<Entry>& entries() const noexcept { return entries_; }

  std::vector<std::size_t> row_counts() const;
  std::vector<std::size_t> col_counts() const;

  friend bool operator==(const SparseMatrix&, const SparseMatrix&) = default;

 private:
  std::size_t n_rows_ = 0;
  std::size_t n_cols_ = 0;
  std::vector<Entry> entries_;
};

/// Simulation truth: Y = X W^T + noise with noise precision `tau`.
struct GroundTruth {
  FactorMatrix x;
  FactorMatrix w;
  double tau = 1.0;
};

enum class TripletFormat { kPlain, kMovieLensDat };

TripletFormat parse_triplet_format(std::string_view name);

/// A loaded matrix plus, for formats with sparse external ids, the original id
/// of every compacted row/column index. For plain triplets the maps are the
/// identity.
struct LoadedMatrix {
  SparseMatrix matrix;
  std::vector<std::int64_t> row_ids;
  std::vector<std::int64_t> col_ids;
};

/// Reads `row col value` lines (whitespace or comma separated, `#` comments) or
/// MovieLens `user::item::rating::timestamp` lines. Plain files may carry a
/// `# shape N D` comment that fixes the dimensions; otherwise they are inferred
/// from the largest index.
LoadedMatrix load_triplets(const std::filesystem::path& path, TripletFormat format);

/// Writes the plain triplet format including the `# shape` header, with values
/// printed to full double precision.
void save_triplets(const std::filesystem::path& path, const SparseMatrix& matrix);

/// Fully observed matrix from given factors: y = x_n . w_d + Normal(0, 1/tau).
SparseMatrix simulate_from_factors(const FactorMatrix& x, const FactorMatrix& w, double tau,
                                   std::uint64_t seed);

/// Standard-normal factors followed by `simulate_from_factors`.
std::pair<SparseMatrix, GroundTruth> simulate(std::size_t n, std::size_t d, std::size_t k,
                                              double tau, std::uint64_t seed);

struct Split {
  SparseMatrix train;
  SparseMatrix test;
};

/// Withholds floor(test_fraction * M) uniformly chosen entries as the test set.
Split split_random(const SparseMatrix& matrix, double test_fraction, std::uint64_t seed);

enum class StructuredMode {
  kRaw,         ///< test with probability w_n * w_d
  kRescaled,    ///< test with probability min(1, s * w_n * w_d), s hits the target fraction
  kComplement,  ///< train with probability w_n * w_d
};

StructuredMode parse_structured_mode(std::string_view name);

struct StructuredSplit {
  Split split;
  double realized_test_fraction = 0.0;
  double expected_test_fraction = 0.0;
  double scale = 1.0;
};

/// Row/column weights: an equally spaced decreasing sequence 0.9 ... 0.005 of
/// length `n` (a single weight of 0.9 when n == 1).
std::vector<double> structured_weights(std::size_t n);

/// Expected test fraction over the observed entries of `matrix` for a given mode
/// and scale factor (the scale is only used by kRescaled).
double structured_expected_fraction(const SparseMatrix& matrix, StructuredMode mode, double scale);

/// Not-missing-at-random split driven by decreasing row and column weights.
StructuredSplit split_structured(const SparseMatrix& matrix, std::uint64_t seed,
                                 StructuredMode mode = StructuredMode::kRaw,
                                 double target_test_fraction = 0.8);

enum class OrderScheme { kRandom, kDecreasing };

OrderScheme parse_order_scheme(std::string_view name);
std::string_view to_string(OrderScheme scheme);

/// `row_perm[p]` is the original row placed at position p (likewise columns).
struct Ordering {
  std::vector<std::size_t> row_perm;
  std::vector<std::size_t> col_perm;
};

Ordering order_matrix(const SparseMatrix& matrix, OrderScheme scheme, std::uint64_t seed);

/// An r x c grid over the permuted matrix.
struct PartitionPlan {
  std::vector<std::size_t> row_perm;
  std::vector<std::size_t> col_perm;
  std::vector<std::size_t> row_cuts;
  std::vector<std::size_t> col_cuts;

  std::size_t row_blocks() const { return row_cuts.size() - 1; }
  std::size_t col_blocks() const { return col_cuts.size() - 1; }
  std::size_t row_block_size(std::size_t i) const { return row_cuts[i + 1] - row_cuts[i]; }
  std::size_t col_block_size(std::size_t j) const { return col_cuts[j + 1] - col_cuts[j]; }
  /// Original row index of local row `local` in row block `i`.
  std::size_t global_row(std::size_t i, std::size_t local) const {
    return row_perm[row_cuts[i] + local];
  }
  std::size_t global_col(std::size_t j, std::size_t local) const {
    return col_perm[col_cuts[j] + local];
  }

  /// Throws ValidationError when the permutations or cuts are malformed.
  void validate() const;

  friend bool operator==(const PartitionPlan&, const PartitionPlan&) = default;
};

/// Cut points for `n` items into `parts` blocks, remainder spread over the
/// leading blocks.
std::vector<std::size_t> balanced_cuts(std::size_t n, std::size_t parts);

PartitionPlan partition(const SparseMatrix& matrix, const Ordering& ordering, std::size_t r,
                        std::size_t c);

/// All blocks of `matrix` under `plan` in local coordinates, row-major over (i, j).
std::vector<SparseMatrix> split_blocks(const SparseMatrix& matrix, const PartitionPlan& plan);

void to_json(nlohmann::json& j, const PartitionPlan& plan);
void from_json(const nlohmann::json& j, PartitionPlan& plan);

}  // namespace bmfpp
