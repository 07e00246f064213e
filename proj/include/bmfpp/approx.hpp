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

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string_view>
#include <vector>

namespace bmfpp {

/// Gaussian marginal of one factor row, in mean/precision form.
struct RowPosterior {
  Vector mean;
  Matrix precision;

  Eigen::Index dim() const { return mean.size(); }
  /// Throws NumericalError unless the entries are finite and the precision is SPD.
  void validate() const;
};

struct GmmComponent {
  double weight = 1.0;
  Vector mean;
  Matrix precision;
};

/// Weighted Gaussian mixture fitted to the largest clusters of a sample cloud.
struct GmmPosterior {
  std::vector<GmmComponent> components;

  Eigen::Index dim() const { return components.empty() ? 0 : components.front().mean.size(); }
  void validate() const;
};

struct Clustering {
  std::vector<std::size_t> assignments;
  std::vector<Vector> centers;
  double lambda = 0.0;

  std::size_t count() const { return centers.size(); }
  std::vector<std::size_t> sizes() const;
};

/// Nonparametric k-means variant: a sample whose distance to every center
/// exceeds `lambda` opens a new cluster at that sample. Alternates assignment
/// and mean updates until the assignments stop changing or `max_iters` passes
/// have run. Samples are the rows of `samples`; `seed` picks the first center.
/// Cluster indices follow creation order with empty clusters removed.
Clustering lambda_means(const Matrix& samples, double lambda, std::size_t max_iters = 100,
                        std::uint64_t seed = 0);

/// Relative ridge added to the sample covariance (times the mean diagonal).
inline constexpr double kCovarianceRidge = 1e-8;
/// Absolute lower bound on that ridge, used when the samples are degenerate.
inline constexpr double kCovarianceFloor = 1e-10;

/// Sample mean and inverse of the ridge-regularized population covariance.
/// Needs at least K + 2 samples.
RowPosterior fit_moment_matching(const Matrix& samples);

/// Moment matching restricted to the largest lambda-means cluster (lowest index
/// on ties). Falls back to all samples when that cluster has fewer than K + 2.
RowPosterior fit_dominant_mode(const Matrix& samples, double lambda, std::uint64_t seed = 0);

/// Mixture over the `top_n` largest lambda-means clusters with at least K + 2
/// members, each moment matched, weights proportional to cluster size.
GmmPosterior fit_gmm(const Matrix& samples, double lambda, std::size_t top_n = 3,
                     std::uint64_t seed = 0);

/// Single Gaussian with the mixture's exact mean and covariance.
RowPosterior pool_gmm(const GmmPosterior& gmm);

/// Median pairwise Euclidean distance within a (seeded) subsample of at most
/// `max_subsample` rows. Used as the lambda-means scale when none is configured.
double default_lambda(const Matrix& samples, std::uint64_t seed = 0, std::size_t max_subsample = 100);

enum class ApproxKind { kMomentMatching, kDominantMode, kGmm };

ApproxKind parse_approx_kind(std::string_view name);
std::string_view to_string(ApproxKind kind);

struct ApproxOptions {
  ApproxKind kind = ApproxKind::kMomentMatching;
  std::optional<double> lambda;  ///< unset: default_lambda per row
  std::size_t top_n = 3;
};

enum class Side : std::uint8_t { kX = 0, kW = 1 };

std::string_view to_string(Side side);

/// Per-row approximations for one side of one block. Exactly one of
/// `gaussians` (moment matching, dominant mode) or `mixtures` (GMM) is filled.
struct PosteriorSet {
  std::size_t k = 0;
  Side side = Side::kX;
  std::size_t row_begin = 0;  ///< first position on the permuted axis
  ApproxKind kind = ApproxKind::kMomentMatching;
  std::vector<RowPosterior> gaussians;
  std::vector<GmmPosterior> mixtures;

  std::size_t size() const { return kind == ApproxKind::kGmm ? mixtures.size() : gaussians.size(); }
  /// Gaussian view of row `i`; mixtures are pooled.
  RowPosterior gaussian(std::size_t i) const;
};

/// Fits every row's sample cloud. `clouds[i]` holds the samples of row i.
/// Row seeds derive from `seed` and the row index.
PosteriorSet fit_posteriors(const std::vector<Matrix>& clouds, Side side, std::size_t row_begin,
                            const ApproxOptions& options, std::uint64_t seed);

/// Binary posterior file: header (K, side, first row, row count, kind) then per
/// row the mean and the upper triangle of the precision; GMM rows carry a
/// component count followed by (weight, mean, upper precision) per component.
/// Layout documented in README.md. Writes are atomic (temp file + rename).
void write_posteriors(const std::filesystem::path& path, const PosteriorSet& set);

/// Throws IoError on a missing, foreign, truncated or oversized file.
PosteriorSet read_posteriors(const std::filesystem::path& path);

}  // namespace bmfpp
