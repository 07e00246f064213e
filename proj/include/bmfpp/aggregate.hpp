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

#include "bmfpp/approx.hpp"
#include "bmfpp/linalg.hpp"

#include <json.hpp>

#include <cstddef>
#include <span>
#include <vector>

namespace bmfpp {

/// Product of Gaussian densities: precisions add, means are precision weighted.
RowPosterior gaussian_product(std::span<const RowPosterior> posteriors);

/// Returns `m` unchanged when it is SPD, otherwise m + (|lambda_min| + epsilon) I.
/// `shift` receives the added diagonal amount (0 when untouched).
Matrix eigenvalue_correction(const Matrix& m, double epsilon, double* shift = nullptr);

/// The first-stage posterior of a row plus the J - 1 posteriors that used it
/// as their prior.
struct AggregationInput {
  RowPosterior stage1;
  std::vector<RowPosterior> others;
};

struct AggregationOptions {
  /// epsilon = epsilon_scale * trace(reference precision) / K
  double epsilon_scale = 1e-6;
};

/// What the corrections did to one row.
struct RowCorrection {
  std::size_t corrected_terms = 0;  ///< divided terms that needed a shift
  bool final_corrected = false;     ///< the combined precision itself needed a shift
  double max_shift = 0.0;
};

/// Combines a row's subset posteriors, dividing away the J - 1 extra copies of
/// the first-stage posterior. Each Lambda_j - Lambda_1 that is not positive
/// definite is eigenvalue corrected before adding Lambda_1 back:
///   Lambda* = (2 - J) Lambda_1 + sum_j Lambda*_j
///   mu*     = Lambda*^-1 [(2 - J) Lambda_1 mu_1 + sum_j Lambda*_j mu_j]
RowPosterior pp_aggregate_row(const AggregationInput& input, const AggregationOptions& options = {},
                              RowCorrection* correction = nullptr);

/// Embarrassingly parallel parametric product: multiplies the subset
/// posteriors and divides away J - 1 copies of the shared prior.
RowPosterior ep_parametric_aggregate(std::span<const RowPosterior> subset_posteriors,
                                     const RowPosterior& prior, const AggregationOptions& options = {},
                                     RowCorrection* correction = nullptr);

/// Per-run record of eigenvalue corrections.
struct AggregationLog {
  struct Entry {
    Side side;
    std::size_t row;  ///< original row/column index
    RowCorrection correction;
  };
  std::size_t rows_total = 0;
  std::vector<Entry> corrected;

  void record(Side side, std::size_t row, const RowCorrection& c);
  nlohmann::json to_json() const;
};

}  // namespace bmfpp
