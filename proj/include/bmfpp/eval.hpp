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

#include "bmfpp/data.hpp"
#include "bmfpp/linalg.hpp"
#include "bmfpp/orchestrator.hpp"

#include <json.hpp>

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace bmfpp {

/// sqrt(mean((p - t)^2)). Throws ValidationError on empty or mismatched input.
double rmse(std::span<const double> predictions, std::span<const double> truths);

/// Bin [lower, upper) of training-set row frequencies.
struct FrequencyBin {
  double lower = 0.0;
  double upper = 0.0;
  std::size_t count = 0;
  std::optional<double> rmse;  ///< unset for an empty bin
};

/// {0, 10, 20, 40, 80, 160, inf}.
std::vector<double> default_frequency_edges();

/// Bins paired predictions by `frequencies` (one per entry) using strictly
/// increasing `edges`. Entries outside [edges.front(), edges.back()) throw.
std::vector<FrequencyBin> rmse_by_frequency(std::span<const double> predictions, std::span<const double> truths,
                                            std::span<const std::size_t> frequencies,
                                            std::span<const double> edges);

/// Test RMSE binned by each test row's number of training observations.
std::vector<FrequencyBin> rmse_by_frequency(const FactorMatrix& x_mean, const FactorMatrix& w_mean,
                                            const SparseMatrix& train, const SparseMatrix& test,
                                            std::span<const double> edges);

/// Pearson correlation; 0 when either input has zero variance.
double pearson(std::span<const double> a, std::span<const double> b);

/// Correlation of every column of `a` with every column of `b` (K x K).
Matrix column_correlations(const FactorMatrix& a, const FactorMatrix& b);

/// Column `permutation[k]` of B, times `signs[k]`, is matched to column k of A.
struct Alignment {
  std::vector<std::size_t> permutation;
  std::vector<int> signs;
};

/// Greedy matching on |correlation|: repeatedly pairs the unmatched columns with
/// the largest absolute correlation (lowest indices on ties).
Alignment align_latent_dimensions(const FactorMatrix& a, const FactorMatrix& b);

/// Matching maximizing the sum of |correlation| over all K! permutations (K <= 8).
Alignment align_latent_dimensions_exhaustive(const FactorMatrix& a, const FactorMatrix& b);

FactorMatrix apply_alignment(const FactorMatrix& b, const Alignment& alignment);

/// Correlation between the posterior means of two blocks sharing a row (X) or
/// column (W) range.
struct PairCorrelation {
  Side side = Side::kX;
  std::pair<std::size_t, std::size_t> first;
  std::pair<std::size_t, std::size_t> second;
  double flattened = 0.0;             ///< over the flattened mean matrices
  std::vector<double> per_dimension;  ///< column by column
  double per_dimension_mean() const;
};

/// X pairs (0,0)-(0,j) and (i,0)-(i,j); W pairs (0,0)-(i,0) and (0,j)-(i,j).
/// Pairs touching an empty block are skipped. EP runs are aligned first.
std::vector<PairCorrelation> subset_mean_correlations(const FactorizationResult& result);

/// Mean of the flattened correlations (NaN when there are no pairs).
double mean_correlation(std::span<const PairCorrelation> pairs);

/// Wall-clock time speed-up: full-data time over distributed time.
double wts(double full_seconds, double distributed_seconds);

struct MeanStd {
  double mean = 0.0;
  double stddev = 0.0;  ///< sample standard deviation (0 for a single value)
};
MeanStd mean_std(std::span<const double> values);

struct MetricReport {
  std::string method;
  std::string partition;
  std::uint64_t seed = 0;
  double rmse = 0.0;
  std::size_t test_entries = 0;
  std::vector<FrequencyBin> bins;
  std::vector<PairCorrelation> correlations;
  double distributed_seconds = 0.0;
  std::optional<double> wts;

  nlohmann::json to_json() const;
  std::string to_text() const;
  static std::string csv_header();
  std::string csv_row() const;
};

/// Everything the metric protocol reports for one run. `baseline` supplies the
/// full-data time for WTS.
MetricReport evaluate(const FactorizationResult& result, const SparseMatrix& train, const SparseMatrix& test,
                      std::span<const double> edges, const FactorizationResult* baseline = nullptr);

}  // namespace bmfpp
